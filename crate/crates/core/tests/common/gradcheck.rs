// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference oracles for tape gradients.

#![allow(dead_code)]

use cktgnn::nn::{Grads, ParamStore, Tape, Tensor, Var};
use cktgnn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with a small absolute floor on the denominator.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Max relative error between tape gradients and central differences for
/// every entry of every input. `build` must return a scalar.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out);
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or(vec![0.0; t.len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut xs = inputs.to_vec();
            xs[k].data[j] += h;
            let up = eval(&xs)?;
            xs[k].data[j] -= 2.0 * h;
            let down = eval(&xs)?;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

/// Reduces any value to a scalar through fixed random weights so that
/// every output entry contributes to the checked gradient.
pub fn project(tape: &mut Tape, v: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// Outcome of a parameter gradient check.
#[derive(Debug, Clone, Copy)]
pub struct ParamCheck {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates redrawn because a ReLU kink lies inside the stencil.
    pub skipped: usize,
}

/// Max relative error over `samples` random parameter coordinates, with
/// `floor` as the smallest denominator. Each coordinate is also estimated
/// with step `h / 10`; when the two estimates disagree by more than 1e-3
/// the stencil straddles a kink and the coordinate is redrawn. `loss`
/// returns the scalar value and its parameter gradients.
pub fn check_params<F, R>(
    store: &ParamStore,
    samples: usize,
    h: f64,
    floor: f64,
    rng: &mut R,
    loss: F,
) -> Result<ParamCheck>
where
    F: Fn(&ParamStore) -> Result<(f64, Grads)>,
    R: Rng,
{
    let (_, grads) = loss(store)?;
    let ids: Vec<_> = store.ids().collect();
    let mut probe = store.clone();
    let mut out = ParamCheck {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    while out.checked < samples {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..store.value(id).len());
        let x0 = store.value(id).data[j];
        let mut central = |step: f64| -> Result<f64> {
            probe.value_mut(id).data[j] = x0 + step;
            let (up, _) = loss(&probe)?;
            probe.value_mut(id).data[j] = x0 - step;
            let (down, _) = loss(&probe)?;
            probe.value_mut(id).data[j] = x0;
            Ok((up - down) / (2.0 * step))
        };
        let coarse = central(h)?;
        let fine = central(h / 10.0)?;
        if rel(coarse, fine) > 1e-3 {
            out.skipped += 1;
            if out.skipped > samples {
                return Err(cktgnn::CktError::Numerical(
                    "too many kinks near the sampled point".into(),
                ));
            }
            continue;
        }
        out.worst = out.worst.max(rel(grads.0[id.0].data[j], coarse));
        out.checked += 1;
    }
    Ok(out)
}

/// Applies one primitive to random inputs of the given dims.
fn primitive(
    name: &str,
    t: &mut Tape,
    v: &[Var],
    rows: usize,
    cols: usize,
    labels: &[usize],
) -> Result<Var> {
    Ok(match name {
        "matmul" => t.matmul(v[0], v[1])?,
        "add" => t.add(v[0], v[2])?,
        "add_row" => t.add(v[0], v[3])?,
        "sub" => t.sub(v[0], v[2])?,
        "mul" => t.mul(v[0], v[2])?,
        "add_n" => t.add_n(&[v[0], v[2], v[0]])?,
        "concat" => t.concat(&[v[0], v[2]])?,
        "stack_rows" => t.stack_rows(&[v[0], v[2]])?,
        "slice_cols" => t.slice_cols(v[0], cols / 2, cols - cols / 2)?,
        "sum" => t.sum(v[0]),
        "sum_rows" => t.sum_rows(v[0]),
        "sigmoid" => t.sigmoid(v[0]),
        "tanh" => t.tanh(v[0]),
        "relu" => t.relu(v[0]),
        "exp" => t.exp(v[0]),
        "scale" => t.scale(v[0], -1.7),
        "one_minus" => t.one_minus(v[0]),
        "softmax_cross_entropy" => t.softmax_cross_entropy(v[0], labels)?,
        "bce_with_logits" => {
            let y: Vec<f64> = (0..rows * cols).map(|i| (i % 2) as f64).collect();
            t.bce_with_logits(v[0], &y)?
        }
        "squared_error" => {
            let y: Vec<f64> = (0..rows * cols).map(|i| i as f64 * 0.1).collect();
            t.squared_error(v[0], &y)?
        }
        "gaussian_kl" => t.gaussian_kl(v[0], v[2])?,
        _ => unreachable!(),
    })
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "add_row",
    "sub",
    "mul",
    "add_n",
    "concat",
    "stack_rows",
    "slice_cols",
    "sum",
    "sum_rows",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "scale",
    "one_minus",
    "softmax_cross_entropy",
    "bce_with_logits",
    "squared_error",
    "gaussian_kl",
];

/// Max relative error of every primitive on one random draw of inputs.
pub fn primitive_errors(
    seed: u64,
    rows: usize,
    cols: usize,
    inner: usize,
) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep relu inputs away from the kink by more than the step.
    let mut a = Tensor::uniform(&[rows, cols], 1.0, &mut rng);
    for x in &mut a.data {
        if x.abs() < 1e-3 {
            *x += 2e-3;
        }
    }
    let b = Tensor::uniform(&[cols, inner], 1.0, &mut rng);
    let c = Tensor::uniform(&[rows, cols], 1.0, &mut rng);
    let d = Tensor::uniform(&[1, cols], 1.0, &mut rng);
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
    let mut out = Vec::new();
    for name in PRIMITIVES {
        let probe = {
            let mut t = Tape::new();
            let vars: Vec<Var> = [&a, &b, &c, &d]
                .iter()
                .map(|x| t.leaf((*x).clone(), true))
                .collect();
            let y = primitive(name, &mut t, &vars, rows, cols, &labels)?;
            t.value(y).shape.clone()
        };
        let w = Tensor::uniform(&probe, 1.0, &mut rng);
        let err = check_inputs(
            &[a.clone(), b.clone(), c.clone(), d.clone()],
            1e-5,
            |t, v| {
                let y = primitive(name, t, v, rows, cols, &labels)?;
                project(t, y, &w)
            },
        )?;
        out.push((*name, err));
    }
    Ok(out)
}
