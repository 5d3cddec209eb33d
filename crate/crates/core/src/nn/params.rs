// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{CktError, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameters plus their momentum buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    momentum: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads(
            store
                .values
                .iter()
                .map(|t| Tensor::zeros(&t.shape))
                .collect(),
        )
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.0 {
            for x in &mut t.data {
                *x *= k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(CktError::Config(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.momentum.push(Tensor::zeros(&value.shape));
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Adds a parameter drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn momentum(&self, id: ParamId) -> &Tensor {
        &self.momentum[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Tensor], &mut [Tensor]) {
        (&mut self.values, &mut self.momentum)
    }

    pub fn reset_momentum(&mut self) {
        for m in &mut self.momentum {
            m.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Copies values (and momentum) from `other` for every shared name with
    /// matching shape. Returns the number of tensors copied.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            let Some(&j) = other.index.get(name) else {
                return Err(CktError::Format(format!(
                    "checkpoint lacks parameter `{name}`"
                )));
            };
            if other.values[j].shape != self.values[i].shape {
                return Err(CktError::Shape {
                    op: "load_from",
                    lhs: self.values[i].shape.clone(),
                    rhs: other.values[j].shape.clone(),
                });
            }
            self.values[i] = other.values[j].clone();
            self.momentum[i] = other.momentum[j].clone();
            n += 1;
        }
        Ok(n)
    }
}

const MAGIC: &[u8; 8] = b"CKTGNNCK";
const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for x in &t.data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, limit: usize) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > limit {
        return Err(CktError::Format(format!(
            "string of {n} bytes exceeds {limit}"
        )));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| CktError::Format("non-utf8 string".into()))
}

/// Writes a checkpoint: magic, version, JSON metadata, then a table of
/// named tensors (values followed by momentum buffers) as little-endian
/// f64 payloads.
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    meta: &serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_string(meta)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&((2 * store.len()) as u32).to_le_bytes())?;
    for (i, name) in store.names.iter().enumerate() {
        write_tensor(w, name, &store.values[i])?;
    }
    for (i, name) in store.names.iter().enumerate() {
        write_tensor(w, &format!("{MOMENTUM_PREFIX}{name}"), &store.momentum[i])?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(serde_json::Value, ParamStore)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CktError::Format("not a checkpoint file".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CktError::Format(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let meta_text = read_string(r, 1 << 24)?;
    let meta: serde_json::Value = serde_json::from_str(&meta_text)?;
    let count = read_u32(r)? as usize;
    let mut store = ParamStore::new();
    let mut momentum: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let name = read_string(r, 4096)?;
        let ndim = read_u32(r)? as usize;
        if ndim > 8 {
            return Err(CktError::Format(format!("tensor `{name}` has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(CktError::Format(format!("tensor `{name}` is too large")));
        }
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data)?;
        match name.strip_prefix(MOMENTUM_PREFIX) {
            Some(base) => momentum.push((base.to_string(), t)),
            None => {
                store.add(&name, t)?;
            }
        }
    }
    for (name, t) in momentum {
        let id = store
            .id(&name)
            .ok_or_else(|| CktError::Format(format!("momentum for unknown parameter `{name}`")))?;
        if t.shape != store.values[id.0].shape {
            return Err(CktError::Shape {
                op: "read_checkpoint",
                lhs: store.values[id.0].shape.clone(),
                rhs: t.shape,
            });
        }
        store.momentum[id.0] = t;
    }
    Ok((meta, store))
}
