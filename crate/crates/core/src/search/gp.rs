// SPDX-License-Identifier: Apache-2.0

//! Gaussian process regression with a squared-exponential kernel on a
//! max-min subset of the data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CktError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    /// Points retained for prediction.
    pub max_points: usize,
    /// Points used when fitting hyperparameters (first of the max-min order).
    pub fit_points: usize,
    pub fit_steps: usize,
    pub fit_step_size: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            max_points: 500,
            fit_points: 128,
            fit_steps: 200,
            fit_step_size: 0.05,
        }
    }
}

/// Kernel hyperparameters in standardized target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl GpHyper {
    fn to_log(self) -> [f64; 3] {
        [
            self.length_scale.ln(),
            self.signal_var.ln(),
            self.noise_var.ln(),
        ]
    }

    fn from_log(t: [f64; 3]) -> Self {
        GpHyper {
            length_scale: t[0].exp(),
            signal_var: t[1].exp(),
            noise_var: t[2].exp().max(1e-8),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: GpHyper,
    /// Indices of retained training points.
    pub subset: Vec<usize>,
    pub x: Vec<Vec<f64>>,
    pub y_mean: f64,
    pub y_std: f64,
    /// Set when targets had no spread: predictions are the constant mean.
    pub constant: bool,
    /// Log marginal likelihood after each accepted fit step.
    pub lml_trace: Vec<f64>,
    chol: Option<DMatrix<f64>>,
    alpha: DVector<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point order starting from the first point; returns at
/// most `k` indices.
pub fn max_min_subset(x: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = x.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mut chosen = vec![0];
    let mut dmin: Vec<f64> = x.iter().map(|p| sq_dist(p, &x[0])).collect();
    while chosen.len() < k.min(n) {
        let mut best = None;
        for (i, &d) in dmin.iter().enumerate() {
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, d) = best.expect("nonempty");
        if d <= 0.0 {
            break;
        }
        chosen.push(i);
        for (j, p) in x.iter().enumerate() {
            dmin[j] = dmin[j].min(sq_dist(p, &x[i]));
        }
    }
    chosen
}

fn signal_kernel(x: &[Vec<f64>], h: &GpHyper) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    let mut d2 = DMatrix::zeros(n, n);
    let inv = 1.0 / (2.0 * h.length_scale * h.length_scale);
    for i in 0..n {
        for j in i..n {
            let d = sq_dist(&x[i], &x[j]);
            let v = h.signal_var * (-d * inv).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
            d2[(i, j)] = d;
            d2[(j, i)] = d;
        }
    }
    (k, d2)
}

/// Cholesky factor of `K + noise I`, adding jitter up to 1e-6 if needed.
fn factor(kf: &DMatrix<f64>, noise: f64) -> Result<DMatrix<f64>> {
    let n = kf.nrows();
    let mut jitter = 0.0;
    loop {
        let mut m = kf.clone();
        for i in 0..n {
            m[(i, i)] += noise + jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok(c.l());
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > 1e-6 {
            return Err(CktError::Numerical(
                "kernel matrix is not positive definite".into(),
            ));
        }
    }
}

fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("nonsingular factor")
}

fn solve_chol(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = solve_lower(l, b);
    l.transpose()
        .solve_upper_triangular(&y)
        .expect("nonsingular factor")
}

/// Log marginal likelihood and its gradient in log-hyperparameters.
fn lml_and_grad(x: &[Vec<f64>], y: &DVector<f64>, h: &GpHyper) -> Result<(f64, [f64; 3])> {
    let n = x.len();
    let (kf, d2) = signal_kernel(x, h);
    let l = factor(&kf, h.noise_var)?;
    let alpha = solve_chol(&l, y);
    let logdet: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let lml =
        -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let eye = DMatrix::<f64>::identity(n, n);
    let linv = l.solve_lower_triangular(&eye).expect("nonsingular factor");
    let kinv = linv.transpose() * &linv;
    // dL/dt = tr((alpha alpha^T - K^-1) dK/dt) / 2
    let mut g = [0.0; 3];
    let inv_l2 = 1.0 / (h.length_scale * h.length_scale);
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            g[0] += w * kf[(i, j)] * d2[(i, j)] * inv_l2;
            g[1] += w * kf[(i, j)];
        }
        g[2] += (alpha[i] * alpha[i] - kinv[(i, i)]) * h.noise_var;
    }
    for v in &mut g {
        *v *= 0.5;
    }
    Ok((lml, g))
}

fn median_distance(x: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            d.push(sq_dist(&x[i], &x[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn standardize(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl GpModel {
    /// Fits hyperparameters by log-marginal-likelihood ascent, then
    /// conditions on the retained subset.
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &GpConfig) -> Result<GpModel> {
        Self::check_inputs(x, y)?;
        let order = max_min_subset(x, cfg.max_points.max(cfg.fit_points));
        let (mean, std) = standardize(y);
        if !(std > 1e-12) {
            return Ok(GpModel::constant_model(x, &order, mean, cfg.max_points));
        }
        let ys: Vec<f64> = y.iter().map(|v| (v - mean) / std).collect();
        let fit_idx: Vec<usize> = order.iter().copied().take(cfg.fit_points).collect();
        let fx: Vec<Vec<f64>> = fit_idx.iter().map(|&i| x[i].clone()).collect();
        let fy = DVector::from_iterator(fit_idx.len(), fit_idx.iter().map(|&i| ys[i]));
        let mut theta = GpHyper {
            length_scale: median_distance(&fx),
            signal_var: 1.0,
            noise_var: 0.1,
        }
        .to_log();
        let (mut lml, mut grad) = lml_and_grad(&fx, &fy, &GpHyper::from_log(theta))?;
        let mut trace = vec![lml];
        let mut step = cfg.fit_step_size;
        for _ in 0..cfg.fit_steps {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm < 1e-9 {
                break;
            }
            let mut accepted = false;
            for _ in 0..20 {
                let cand = [
                    theta[0] + step * grad[0] / norm,
                    (theta[1] + step * grad[1] / norm).clamp(-10.0, 10.0),
                    (theta[2] + step * grad[2] / norm).clamp(-18.0, 5.0),
                ];
                match lml_and_grad(&fx, &fy, &GpHyper::from_log(cand)) {
                    Ok((l, g)) if l >= lml => {
                        theta = cand;
                        lml = l;
                        grad = g;
                        accepted = true;
                        step *= 1.2;
                        break;
                    }
                    _ => step *= 0.5,
                }
            }
            if !accepted {
                break;
            }
            trace.push(lml);
        }
        let mut m = GpModel::condition(x, y, GpHyper::from_log(theta), &order, cfg.max_points)?;
        m.lml_trace = trace;
        Ok(m)
    }

    /// Conditions on the data with fixed hyperparameters (no fitting).
    pub fn with_hyper(
        x: &[Vec<f64>],
        y: &[f64],
        hyper: GpHyper,
        max_points: usize,
    ) -> Result<GpModel> {
        Self::check_inputs(x, y)?;
        let order = max_min_subset(x, max_points);
        GpModel::condition(x, y, hyper, &order, max_points)
    }

    fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<()> {
        if x.len() != y.len() {
            return Err(CktError::Shape {
                op: "gp_fit",
                lhs: vec![x.len()],
                rhs: vec![y.len()],
            });
        }
        if x.len() < 2 {
            return Err(CktError::Config(
                "gaussian process needs at least two points".into(),
            ));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CktError::Numerical("non-finite regression target".into()));
        }
        let d = x[0].len();
        if x.iter().any(|p| p.len() != d) {
            return Err(CktError::Config("inputs have mixed dimensions".into()));
        }
        Ok(())
    }

    fn constant_model(x: &[Vec<f64>], order: &[usize], mean: f64, max_points: usize) -> GpModel {
        let subset: Vec<usize> = order.iter().copied().take(max_points).collect();
        GpModel {
            hyper: GpHyper {
                length_scale: 1.0,
                signal_var: 0.0,
                noise_var: 1.0,
            },
            x: subset.iter().map(|&i| x[i].clone()).collect(),
            subset,
            y_mean: mean,
            y_std: 0.0,
            constant: true,
            lml_trace: Vec::new(),
            chol: None,
            alpha: DVector::zeros(0),
        }
    }

    fn condition(
        x: &[Vec<f64>],
        y: &[f64],
        hyper: GpHyper,
        order: &[usize],
        max_points: usize,
    ) -> Result<GpModel> {
        let (mean, std) = standardize(y);
        if !(std > 1e-12) {
            return Ok(GpModel::constant_model(x, order, mean, max_points));
        }
        let subset: Vec<usize> = order.iter().copied().take(max_points).collect();
        let sx: Vec<Vec<f64>> = subset.iter().map(|&i| x[i].clone()).collect();
        let sy = DVector::from_iterator(subset.len(), subset.iter().map(|&i| (y[i] - mean) / std));
        let (kf, _) = signal_kernel(&sx, &hyper);
        let l = factor(&kf, hyper.noise_var)?;
        let alpha = solve_chol(&l, &sy);
        Ok(GpModel {
            hyper,
            subset,
            x: sx,
            y_mean: mean,
            y_std: std,
            constant: false,
            lml_trace: Vec::new(),
            chol: Some(l),
            alpha,
        })
    }

    /// Latent mean and variance in standardized units.
    pub fn predict_standardized(&self, q: &[f64]) -> (f64, f64) {
        let Some(l) = &self.chol else {
            return (0.0, 0.0);
        };
        let h = &self.hyper;
        let inv = 1.0 / (2.0 * h.length_scale * h.length_scale);
        let k = DVector::from_iterator(
            self.x.len(),
            self.x
                .iter()
                .map(|p| h.signal_var * (-sq_dist(p, q) * inv).exp()),
        );
        let mean = k.dot(&self.alpha);
        let v = solve_lower(l, &k);
        let var = (h.signal_var - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Predictive mean and variance in target units.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        if self.constant {
            return (self.y_mean, 0.0);
        }
        let (m, v) = self.predict_standardized(q);
        (m * self.y_std + self.y_mean, v * self.y_std * self.y_std)
    }
}

/// Root-mean-square error and Pearson correlation of predictions.
pub fn rmse_pearson(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    let n = pred.len().min(truth.len());
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let rmse = (pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    let (mp, mt) = (
        pred.iter().sum::<f64>() / n as f64,
        truth.iter().sum::<f64>() / n as f64,
    );
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        sxy += (p - mp) * (t - mt);
        sxx += (p - mp) * (p - mp);
        syy += (t - mt) * (t - mt);
    }
    let r = if sxx > 0.0 && syy > 0.0 {
        sxy / (sxx * syy).sqrt()
    } else {
        0.0
    };
    (rmse, r)
}
