// SPDX-License-Identifier: Apache-2.0

use rand::Rng;

use crate::error::Result;
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(&format!("{name}.w"), &[input, output], input, rng)?;
        let b = store.add_uniform(&format!("{name}.b"), &[1, output], input, rng)?;
        Ok(Linear {
            w,
            b,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims` lists input, hidden and output widths.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, activation })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit with gate order (reset, update, candidate):
///
/// ```text
/// r  = sigmoid(x Wxr + bxr + h Whr + bhr)
/// z  = sigmoid(x Wxz + bxz + h Whz + bhz)
/// n  = tanh(x Wxn + bxn + r * (h Whn + bhn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let wx = store.add_uniform(&format!("{name}.wx"), &[input, 3 * hidden], hidden, rng)?;
        let wh = store.add_uniform(&format!("{name}.wh"), &[hidden, 3 * hidden], hidden, rng)?;
        let bx = store.add_uniform(&format!("{name}.bx"), &[1, 3 * hidden], hidden, rng)?;
        let bh = store.add_uniform(&format!("{name}.bh"), &[1, 3 * hidden], hidden, rng)?;
        Ok(GruCell {
            wx,
            wh,
            bx,
            bh,
            input,
            hidden,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let (wx, wh) = (tape.param(store, self.wx), tape.param(store, self.wh));
        let (bx, bh) = (tape.param(store, self.bx), tape.param(store, self.bh));
        let gx = tape.matmul(x, wx)?;
        let gx = tape.add(gx, bx)?;
        let gh = tape.matmul(h, wh)?;
        let gh = tape.add(gh, bh)?;
        let (xr, hr) = (tape.slice_cols(gx, 0, n)?, tape.slice_cols(gh, 0, n)?);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let (xz, hz) = (tape.slice_cols(gx, n, n)?, tape.slice_cols(gh, n, n)?);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let (xn, hn) = (
            tape.slice_cols(gx, 2 * n, n)?,
            tape.slice_cols(gh, 2 * n, n)?,
        );
        let rh = tape.mul(r, hn)?;
        let cand = tape.add(xn, rh)?;
        let cand = tape.tanh(cand);
        let keep = tape.one_minus(z);
        let a = tape.mul(keep, cand)?;
        let b = tape.mul(z, h)?;
        tape.add(a, b)
    }
}
