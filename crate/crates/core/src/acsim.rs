// SPDX-License-Identifier: Apache-2.0

//! Small-signal AC analysis of behavioral op-amp stage graphs.
//!
//! Nodal equations `Y(s) V = I` with `Y(s) = G + s Cm + T`. The input node
//! is held at 1 V by an ideal source, so its row is dropped and its column
//! moves to the right-hand side.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::circuit::{DeviceDag, DeviceKind, Polarity};
use crate::error::{CktError, Result};
use crate::stage::{to_stage_graph, StageGraph, StageNode};

#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceSystem {
    pub dim: usize,
    pub g: DMatrix<f64>,
    pub cm: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub input: usize,
    pub output: usize,
}

fn stamp_pair(m: &mut DMatrix<f64>, a: Option<usize>, b: Option<usize>, y: f64) {
    if let Some(a) = a {
        m[(a, a)] += y;
    }
    if let Some(b) = b {
        m[(b, b)] += y;
    }
    if let (Some(a), Some(b)) = (a, b) {
        m[(a, b)] -= y;
        m[(b, a)] -= y;
    }
}

/// Stamps every element of a stage graph. Each Gm also stamps its
/// parasitic load from its driven node to ground.
pub fn build_mna(s: &StageGraph) -> Result<AdmittanceSystem> {
    s.check()?;
    let n = s.dim();
    let mut g = DMatrix::zeros(n, n);
    let mut cm = DMatrix::zeros(n, n);
    let mut t = DMatrix::zeros(n, n);
    for e in &s.elements {
        let a = s.node_index(e.from);
        let b = s.node_index(e.to);
        match e.device.kind {
            DeviceKind::R => stamp_pair(&mut g, a, b, 1.0 / e.device.value),
            DeviceKind::C => stamp_pair(&mut cm, a, b, e.device.value),
            DeviceKind::Gm { polarity, .. } => {
                let (sense, drive) = e.gm_terminals().expect("gm element");
                let (sense, drive) = (s.node_index(sense), s.node_index(drive));
                if let (Some(a), Some(b)) = (sense, drive) {
                    t[(b, a)] += match polarity {
                        Polarity::Positive => -e.device.value,
                        Polarity::Negative => e.device.value,
                    };
                }
                let load = e.device.load.expect("checked gm load");
                stamp_pair(&mut g, drive, None, 1.0 / load.r);
                stamp_pair(&mut cm, drive, None, load.c);
            }
        }
    }
    Ok(AdmittanceSystem {
        dim: n,
        g,
        cm,
        t,
        input: s.node_index(StageNode::In).expect("in is not ground"),
        output: s.node_index(StageNode::Out).expect("out is not ground"),
    })
}

impl AdmittanceSystem {
    /// `Y(s)` as a dense complex matrix.
    pub fn y(&self, s: Complex64) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            Complex64::new(self.g[(i, j)] + self.t[(i, j)], 0.0) + s * self.cm[(i, j)]
        })
    }

    /// `V(output) / V(input)` at complex frequency `s`, with `gmin` added to
    /// every free node's diagonal.
    pub fn transfer_s(&self, s: Complex64, gmin: f64) -> Result<Complex64> {
        let y = self.y(s);
        let free: Vec<usize> = (0..self.dim).filter(|&i| i != self.input).collect();
        let m = free.len();
        let a: DMatrix<Complex64> = DMatrix::from_fn(m, m, |i, j| {
            let v = y[(free[i], free[j])];
            if i == j {
                v + gmin
            } else {
                v
            }
        });
        let mut rhs = DVector::from_fn(m, |i, _| -y[(free[i], self.input)]);
        // row equilibration so badly scaled but regular rows pass the pivot test
        let mut a = a;
        for i in 0..m {
            let scale = a.row(i).iter().map(|z| z.norm()).fold(0.0, f64::max);
            if scale == 0.0 {
                return Err(CktError::Simulation(format!(
                    "singular nodal matrix at s = {s}"
                )));
            }
            a.row_mut(i).scale_mut(1.0 / scale);
            rhs[i] /= scale;
        }
        let lu = a.lu();
        let diag = lu.u().diagonal();
        let max = diag.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let min = diag.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
        if m > 0 && (max == 0.0 || min <= max * 1e-15) {
            return Err(CktError::Simulation(format!(
                "singular nodal matrix at s = {s}"
            )));
        }
        let v = lu
            .solve(&rhs)
            .ok_or_else(|| CktError::Simulation(format!("singular nodal matrix at s = {s}")))?;
        let pos = free
            .iter()
            .position(|&i| i == self.output)
            .ok_or_else(|| CktError::Simulation("output node is the input node".into()))?;
        let h = v[pos];
        if !(h.re.is_finite() && h.im.is_finite()) {
            return Err(CktError::Simulation(format!(
                "non-finite response at s = {s}"
            )));
        }
        Ok(h)
    }
}

/// Transfer function at `f_hz` with no shunt regularization.
pub fn transfer_at(sys: &AdmittanceSystem, f_hz: f64) -> Result<Complex64> {
    transfer_with(sys, f_hz, 0.0)
}

pub fn transfer_with(sys: &AdmittanceSystem, f_hz: f64, gmin: f64) -> Result<Complex64> {
    if !(f_hz >= 0.0) {
        return Err(CktError::Simulation(format!(
            "frequency {f_hz} must be nonnegative"
        )));
    }
    sys.transfer_s(Complex64::new(0.0, 2.0 * PI * f_hz), gmin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub f_start_hz: f64,
    pub f_stop_hz: f64,
    pub points_per_decade: usize,
    /// Relative bracket width at which crossing bisection stops.
    pub rel_tol: f64,
    /// Shunt conductance added to every free node.
    pub gmin: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            f_start_hz: 1.0,
            f_stop_hz: 1e12,
            points_per_decade: 60,
            rel_tol: 1e-4,
            gmin: 0.0,
        }
    }
}

impl SweepConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.f_start_hz > 0.0 && self.f_stop_hz > self.f_start_hz) {
            return Err(CktError::Config("sweep needs 0 < f_start < f_stop".into()));
        }
        if self.points_per_decade == 0 || !(self.rel_tol > 0.0) || !(self.gmin >= 0.0) {
            return Err(CktError::Config(
                "points_per_decade, rel_tol must be positive and gmin nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let decades = (self.f_stop_hz / self.f_start_hz).log10();
        let steps = (decades * self.points_per_decade as f64).round() as usize;
        (0..=steps)
            .map(|k| self.f_start_hz * 10f64.powf(k as f64 / self.points_per_decade as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub gain_db: Option<f64>,
    pub bw_hz: Option<f64>,
    pub ugf_hz: Option<f64>,
    pub pm_deg: Option<f64>,
    pub fom: Option<f64>,
    pub converged: bool,
}

impl SimResult {
    fn failed() -> Self {
        SimResult {
            gain_db: None,
            bw_hz: None,
            ugf_hz: None,
            pm_deg: None,
            fom: None,
            converged: false,
        }
    }

    /// (gain_db, bw_hz, pm_deg) for a converged result.
    pub fn specs(&self) -> Option<(f64, f64, f64)> {
        match (self.converged, self.gain_db, self.bw_hz, self.pm_deg) {
            (true, Some(g), Some(b), Some(p)) => Some((g, b, p)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FomWeights {
    pub w_gain: f64,
    pub w_bw: f64,
    pub w_pm: f64,
    pub pm_target_deg: f64,
}

impl Default for FomWeights {
    fn default() -> Self {
        FomWeights {
            w_gain: 1.0,
            w_bw: 1.0,
            w_pm: 1.0,
            pm_target_deg: 60.0,
        }
    }
}

impl FomWeights {
    pub fn check(&self) -> Result<()> {
        let w = [self.w_gain, self.w_bw, self.w_pm];
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || w.iter().all(|x| *x == 0.0) {
            return Err(CktError::Config(
                "FoM weights must be nonnegative, not all zero".into(),
            ));
        }
        if !(self.pm_target_deg > 0.0) {
            return Err(CktError::Config("pm target must be positive".into()));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "{}*gain_db/20 + {}*log10(bw_hz) + {}*max(0, 1 - |pm_deg - {}|/{})",
            self.w_gain, self.w_bw, self.w_pm, self.pm_target_deg, self.pm_target_deg
        )
    }
}

/// Weighted FoM; `None` for non-converged results.
pub fn compute_fom(r: &SimResult, w: &FomWeights) -> Option<f64> {
    let (gain_db, bw, pm) = r.specs()?;
    let pm_term = (1.0 - (pm - w.pm_target_deg).abs() / w.pm_target_deg).max(0.0);
    Some(w.w_gain * gain_db / 20.0 + w.w_bw * bw.log10() + w.w_pm * pm_term)
}

fn wrap_deg(mut d: f64) -> f64 {
    while d > 180.0 {
        d -= 360.0;
    }
    while d <= -180.0 {
        d += 360.0;
    }
    d
}

/// Phase `p` (radians) shifted by whole turns to lie nearest `prev`.
fn unwrap_near(p: f64, prev: f64) -> f64 {
    p + 2.0 * PI * ((prev - p) / (2.0 * PI)).round()
}

/// Sign of the low-frequency limit, as a phase (0 or pi).
fn dc_phase(sys: &AdmittanceSystem, gmin: f64) -> Result<f64> {
    let h = sys.transfer_s(Complex64::new(2.0 * PI * 1e-6, 0.0), gmin)?;
    Ok(if h.re < 0.0 { PI } else { 0.0 })
}

/// Bisection in log frequency for the first point where `|H|` drops below
/// `level`, bracketed by `lo` (above) and `hi` (below).
fn refine(
    sys: &AdmittanceSystem,
    cfg: &SweepConfig,
    mut lo: f64,
    mut hi: f64,
    level: f64,
) -> Result<f64> {
    while hi / lo - 1.0 > cfg.rel_tol {
        let mid = (lo * hi).sqrt();
        if transfer_with(sys, mid, cfg.gmin)?.norm() >= level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo * hi).sqrt())
}

/// Sweeps the response and extracts gain, -3 dB bandwidth, unity-gain
/// frequency and phase margin. Failed solves give `converged = false`.
pub fn extract_specs(sys: &AdmittanceSystem, cfg: &SweepConfig) -> SimResult {
    extract_inner(sys, cfg).unwrap_or_else(|partial| partial)
}

fn extract_inner(
    sys: &AdmittanceSystem,
    cfg: &SweepConfig,
) -> std::result::Result<SimResult, SimResult> {
    let mut res = SimResult::failed();
    cfg.check().map_err(|_| res)?;
    let freqs = cfg.frequencies();
    let h0 = transfer_with(sys, freqs[0], cfg.gmin).map_err(|_| res)?;
    let g0 = h0.norm();
    res.gain_db = Some(20.0 * g0.log10());
    let reference = dc_phase(sys, cfg.gmin).map_err(|_| res)?;
    let mut phase = unwrap_near(h0.arg(), reference);

    let bw_level = g0 / 2f64.sqrt();
    let mut prev = (freqs[0], h0);
    for &f in &freqs[1..] {
        let h = transfer_with(sys, f, cfg.gmin).map_err(|_| res)?;
        let m = h.norm();
        if res.bw_hz.is_none() && m < bw_level {
            res.bw_hz = Some(refine(sys, cfg, prev.0, f, bw_level).map_err(|_| res)?);
        }
        if res.ugf_hz.is_none() && m < 1.0 && prev.1.norm() >= 1.0 {
            let ugf = refine(sys, cfg, prev.0, f, 1.0).map_err(|_| res)?;
            let hu = transfer_with(sys, ugf, cfg.gmin).map_err(|_| res)?;
            let pu = unwrap_near(hu.arg(), phase);
            res.ugf_hz = Some(ugf);
            res.pm_deg = Some(wrap_deg(180.0 + (pu - reference).to_degrees()));
        }
        phase = unwrap_near(h.arg(), phase);
        prev = (f, h);
        if res.bw_hz.is_some() && res.ugf_hz.is_some() {
            break;
        }
    }
    res.converged = match (res.bw_hz, res.ugf_hz) {
        (Some(bw), Some(ugf)) => bw <= ugf,
        _ => false,
    };
    Ok(res)
}

/// (f_hz, mag_db, unwrapped phase_deg) over the sweep grid.
pub fn bode(sys: &AdmittanceSystem, cfg: &SweepConfig) -> Result<Vec<(f64, f64, f64)>> {
    cfg.check()?;
    let mut out = Vec::new();
    let mut phase = dc_phase(sys, cfg.gmin)?;
    for f in cfg.frequencies() {
        let h = transfer_with(sys, f, cfg.gmin)?;
        phase = unwrap_near(h.arg(), phase);
        out.push((f, 20.0 * h.norm().log10(), phase.to_degrees()));
    }
    Ok(out)
}

pub fn bode_csv(points: &[(f64, f64, f64)]) -> String {
    let mut s = String::from("f_hz,mag_db,phase_deg\n");
    for (f, m, p) in points {
        let _ = writeln!(s, "{f:e},{m:.9},{p:.9}");
    }
    s
}

/// Full pipeline for one circuit: stage graph, nodal system, specs, FoM.
pub fn simulate(g: &DeviceDag, cfg: &SweepConfig, w: &FomWeights) -> Result<SimResult> {
    let sys = build_mna(&to_stage_graph(g)?)?;
    let mut r = extract_specs(&sys, cfg);
    r.fom = compute_fom(&r, w);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{DeviceInstance, Direction};
    use crate::stage::StageElement;

    fn one_stage(gm: f64, r: f64, c: f64) -> StageGraph {
        StageGraph {
            id: 0,
            stage_count: 1,
            junction_count: 0,
            elements: vec![StageElement {
                device: DeviceInstance::gm(Polarity::Positive, Direction::Feedforward, gm, r, c),
                from: StageNode::In,
                to: StageNode::Out,
            }],
        }
    }

    #[test]
    fn resistor_to_ground_stamp() {
        let s = StageGraph {
            id: 0,
            stage_count: 2,
            junction_count: 0,
            elements: vec![
                StageElement {
                    device: DeviceInstance::gm(
                        Polarity::Positive,
                        Direction::Feedforward,
                        1e-3,
                        1e9,
                        1e-15,
                    ),
                    from: StageNode::In,
                    to: StageNode::Stage(1),
                },
                StageElement {
                    device: DeviceInstance::resistor(1e6),
                    from: StageNode::Stage(1),
                    to: StageNode::Gnd,
                },
                StageElement {
                    device: DeviceInstance::resistor(1e6),
                    from: StageNode::Stage(1),
                    to: StageNode::Out,
                },
            ],
        };
        let sys = build_mna(&s).unwrap();
        // S1 sees the 1e6 to ground, the 1e6 to Out and the 1e9 load
        assert!((sys.g[(1, 1)] - (2e-6 + 1e-9)).abs() < 1e-18);
        assert_eq!(sys.t[(1, 0)], -1e-3);
    }

    #[test]
    fn parallel_stamps_add() {
        let mut s = one_stage(1e-3, 1e6, 1e-12);
        for _ in 0..2 {
            s.elements.push(StageElement {
                device: DeviceInstance::resistor(1e6),
                from: StageNode::In,
                to: StageNode::Out,
            });
        }
        let sys = build_mna(&s).unwrap();
        assert!((sys.g[(0, 1)] + 2e-6).abs() < 1e-18);
        assert!((sys.g[(1, 1)] - 3e-6).abs() < 1e-18);
    }

    #[test]
    fn single_pole_dc_and_corner() {
        let sys = build_mna(&one_stage(1e-3, 1e6, 1e-12)).unwrap();
        assert!((transfer_at(&sys, 0.0).unwrap().norm() - 1000.0).abs() < 1e-9);
        let fc = 1.0 / (2.0 * PI * 1e6 * 1e-12);
        let m = transfer_at(&sys, fc).unwrap().norm();
        assert!((m / (1000.0 / 2f64.sqrt()) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn passive_divider_never_gains() {
        let s = StageGraph {
            id: 0,
            stage_count: 1,
            junction_count: 0,
            elements: vec![
                StageElement {
                    device: DeviceInstance::resistor(1e6),
                    from: StageNode::In,
                    to: StageNode::Out,
                },
                StageElement {
                    device: DeviceInstance::resistor(1e6),
                    from: StageNode::Out,
                    to: StageNode::Gnd,
                },
                StageElement {
                    device: DeviceInstance::capacitor(1e-12),
                    from: StageNode::Out,
                    to: StageNode::Gnd,
                },
            ],
        };
        let sys = build_mna(&s).unwrap();
        for f in SweepConfig::default().frequencies().iter().step_by(37) {
            assert!(transfer_at(&sys, *f).unwrap().norm() <= 1.0 + 1e-12);
        }
        let r = extract_specs(&sys, &SweepConfig::default());
        assert!(!r.converged);
        assert!(r.ugf_hz.is_none());
        assert_eq!(compute_fom(&r, &FomWeights::default()), None);
    }

    #[test]
    fn fom_examples() {
        let r = SimResult {
            gain_db: Some(60.0),
            bw_hz: Some(1e5),
            ugf_hz: Some(1e8),
            pm_deg: Some(60.0),
            fom: None,
            converged: true,
        };
        assert!((compute_fom(&r, &FomWeights::default()).unwrap() - 9.0).abs() < 1e-12);
        let only_pm = FomWeights {
            w_gain: 0.0,
            w_bw: 0.0,
            ..FomWeights::default()
        };
        assert!((compute_fom(&r, &only_pm).unwrap() - 1.0).abs() < 1e-12);
        let far = SimResult {
            pm_deg: Some(-5.0),
            ..r
        };
        assert_eq!(compute_fom(&far, &only_pm).unwrap(), 0.0);
        assert!(FomWeights {
            w_gain: 0.0,
            w_bw: 0.0,
            w_pm: 0.0,
            pm_target_deg: 60.0
        }
        .check()
        .is_err());
    }

    #[test]
    fn pm_wraps_into_half_open_interval() {
        assert_eq!(wrap_deg(180.0), 180.0);
        assert_eq!(wrap_deg(-180.0), 180.0);
        assert!((wrap_deg(540.5) - 180.5 + 360.0).abs() < 1e-12);
    }

    #[test]
    fn bode_csv_has_header_and_rows() {
        let sys = build_mna(&one_stage(1e-3, 1e6, 1e-12)).unwrap();
        let cfg = SweepConfig {
            f_stop_hz: 100.0,
            ..SweepConfig::default()
        };
        let csv = bode_csv(&bode(&sys, &cfg).unwrap());
        assert!(csv.starts_with("f_hz,mag_db,phase_deg\n"));
        assert_eq!(csv.lines().count(), 1 + 121);
    }
}
