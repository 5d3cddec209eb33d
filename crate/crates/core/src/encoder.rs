// SPDX-License-Identifier: Apache-2.0

//! Graph encoders: the nested subgraph encoder and a device-level
//! GRU-only baseline. Both end in the same gated directed pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisEntry, SubgraphBasis};
use crate::circuit::{topo_order, DeviceDag, DeviceKind, NodeRole};
use crate::error::{CktError, Result};
use crate::graphlize::{graphlize, TNodeRole, TransformedDag};
use crate::nn::{GruCell, Linear, ParamStore, Tape, Tensor, Var};

/// Device feature width: kind one-hot plus up to three slots.
pub const DEVICE_FEATURES: usize = 6 + 3;
/// Subgraph type one-hot width: basis entries plus Input and Output.
pub const SUBGRAPH_TYPES: usize = 24 + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub inner_layers: usize,
    pub inner_hidden: usize,
    pub outer_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            inner_layers: 3,
            inner_hidden: 16,
            outer_hidden: 32,
        }
    }
}

impl EncoderConfig {
    pub fn check(&self) -> Result<()> {
        if self.inner_layers == 0 || self.inner_hidden == 0 || self.outer_hidden == 0 {
            return Err(CktError::Config(
                "encoder dims and layer count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Normalized slot values of one device, zero padded to three.
pub fn device_slots(kind: DeviceKind, raw: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (k, (s, v)) in kind.slots().iter().zip(raw).enumerate() {
        out[k] = s.normalize(*v);
    }
    out
}

/// Kind one-hot and normalized slots for each device of an entry, from the
/// entry's raw parameter vector.
pub fn entry_device_features(entry: &BasisEntry, params: &[f64]) -> Result<Tensor> {
    if params.len() != entry.slot_count() {
        return Err(CktError::Shape {
            op: "entry_device_features",
            lhs: vec![entry.slot_count()],
            rhs: vec![params.len()],
        });
    }
    let mut data = Vec::with_capacity(entry.devices.len() * DEVICE_FEATURES);
    let mut off = 0;
    for d in &entry.devices {
        let n = d.kind.slots().len();
        let mut row = [0.0; DEVICE_FEATURES];
        row[d.kind.index()] = 1.0;
        row[6..9].copy_from_slice(&device_slots(d.kind, &params[off..off + n]));
        data.extend_from_slice(&row);
        off += n;
    }
    Tensor::matrix(entry.devices.len(), DEVICE_FEATURES, data)
}

/// One-hot of a transformed-graph node: entry id, then Input, then Output.
pub fn subgraph_type_index(role: &TNodeRole) -> usize {
    match role {
        TNodeRole::Sub { entry, .. } => *entry,
        TNodeRole::Input => 24,
        TNodeRole::Output => 25,
    }
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Undirected message passing inside one basis entry, mean pooled.
#[derive(Debug, Clone)]
pub struct InnerGnn {
    /// (message, update) per layer.
    pub layers: Vec<(Linear, Linear)>,
    pub hidden: usize,
}

impl InnerGnn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.inner_layers);
        let mut width = DEVICE_FEATURES;
        for l in 0..cfg.inner_layers {
            let msg = Linear::new(
                store,
                &format!("{name}.msg{l}"),
                width,
                cfg.inner_hidden,
                rng,
            )?;
            let upd = Linear::new(
                store,
                &format!("{name}.upd{l}"),
                width + cfg.inner_hidden,
                cfg.inner_hidden,
                rng,
            )?;
            layers.push((msg, upd));
            width = cfg.inner_hidden;
        }
        Ok(InnerGnn {
            layers,
            hidden: cfg.inner_hidden,
        })
    }

    /// Embedding of one entry instance with raw parameters `params`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        entry: &BasisEntry,
        params: &[f64],
    ) -> Result<Var> {
        let x = entry_device_features(entry, params)?;
        let n = entry.devices.len();
        let adj = entry.undirected_adjacency();
        let has_edges = adj.iter().any(|a| !a.is_empty());
        let a = if has_edges {
            let mut m = vec![0.0; n * n];
            for (i, nb) in adj.iter().enumerate() {
                for &j in nb {
                    m[i * n + j] += 1.0;
                }
            }
            Some(tape.constant(Tensor::matrix(n, n, m)?))
        } else {
            None
        };
        let mut h = tape.constant(x);
        for (msg, upd) in &self.layers {
            let agg = match a {
                Some(a) => {
                    let m = msg.forward(tape, store, h)?;
                    let m = tape.relu(m);
                    tape.matmul(a, m)?
                }
                None => tape.constant(Tensor::zeros(&[n, self.hidden])),
            };
            let cat = tape.concat(&[h, agg])?;
            let u = upd.forward(tape, store, cat)?;
            h = tape.relu(u);
        }
        let s = tape.sum_rows(h);
        Ok(tape.scale(s, 1.0 / n as f64))
    }
}

/// Gated directed pass: a node's aggregate is the sum over predecessors of
/// `sigmoid(gate(z_u)) * map(z_u)`; its state is a GRU step from that
/// aggregate with the node features as input.
#[derive(Debug, Clone)]
pub struct OuterCell {
    pub gru: GruCell,
    pub gate: Linear,
    pub map: Linear,
    pub hidden: usize,
}

impl OuterCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(OuterCell {
            gru: GruCell::new(store, &format!("{name}.gru"), input, hidden, rng)?,
            gate: Linear::new(store, &format!("{name}.gate"), hidden, hidden, rng)?,
            map: Linear::new(store, &format!("{name}.map"), hidden, hidden, rng)?,
            hidden,
        })
    }

    /// The message a finished node sends to each successor.
    pub fn message(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let g = self.gate.forward(tape, store, z)?;
        let g = tape.sigmoid(g);
        let m = self.map.forward(tape, store, z)?;
        tape.mul(g, m)
    }

    /// Sum of messages, or zeros when there are none.
    pub fn aggregate(&self, tape: &mut Tape, msgs: &[Var]) -> Result<Var> {
        if msgs.is_empty() {
            Ok(tape.constant(Tensor::zeros(&[1, self.hidden])))
        } else if msgs.len() == 1 {
            Ok(msgs[0])
        } else {
            tape.add_n(msgs)
        }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, agg: Var) -> Result<Var> {
        self.gru.forward(tape, store, x, agg)
    }

    /// Runs the pass over a DAG given per-node inputs and adjacency;
    /// returns every node state by position.
    pub fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
        preds: &[Vec<usize>],
        succs: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        let order = topo_order(succs, preds)?;
        let mut state: Vec<Option<Var>> = vec![None; inputs.len()];
        let mut msg: Vec<Option<Var>> = vec![None; inputs.len()];
        for &v in &order {
            let ms: Vec<Var> = preds[v]
                .iter()
                .map(|&u| msg[u].expect("predecessor done"))
                .collect();
            let agg = self.aggregate(tape, &ms)?;
            let z = self.step(tape, store, inputs[v], agg)?;
            state[v] = Some(z);
            if !succs[v].is_empty() {
                msg[v] = Some(self.message(tape, store, z)?);
            }
        }
        Ok(state
            .into_iter()
            .map(|s| s.expect("all nodes visited"))
            .collect())
    }
}

/// Inner GNN per subgraph followed by the outer pass over the
/// transformed DAG; the Output node state is the graph embedding.
#[derive(Debug, Clone)]
pub struct CktGnnEncoder {
    pub cfg: EncoderConfig,
    pub inner: InnerGnn,
    pub outer: OuterCell,
}

impl CktGnnEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.check()?;
        let inner = InnerGnn::new(store, &format!("{name}.inner"), &cfg, rng)?;
        let outer = OuterCell::new(
            store,
            &format!("{name}.outer"),
            SUBGRAPH_TYPES + cfg.inner_hidden,
            cfg.outer_hidden,
            rng,
        )?;
        Ok(CktGnnEncoder { cfg, inner, outer })
    }

    /// Node input `x' ++ h`: type one-hot and the inner embedding (zero for
    /// Input and Output).
    pub fn node_inputs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: &TransformedDag,
        basis: &SubgraphBasis,
    ) -> Result<Vec<Var>> {
        let mut xs = Vec::with_capacity(t.nodes.len());
        for n in &t.nodes {
            let onehot = tape.constant(Tensor::row(one_hot(
                SUBGRAPH_TYPES,
                subgraph_type_index(&n.role),
            )));
            let h = match &n.role {
                TNodeRole::Sub { entry, params } => {
                    self.inner
                        .embed(tape, store, basis.entry(*entry)?, params)?
                }
                _ => tape.constant(Tensor::zeros(&[1, self.cfg.inner_hidden])),
            };
            xs.push(tape.concat(&[onehot, h])?);
        }
        Ok(xs)
    }

    pub fn encode_transformed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: &TransformedDag,
        basis: &SubgraphBasis,
    ) -> Result<Var> {
        let (preds, succs) = t.adjacency()?;
        let out = output_position(t.nodes.iter().map(|n| matches!(n.role, TNodeRole::Output)))?;
        let xs = self.node_inputs(tape, store, t, basis)?;
        let z = self.outer.run(tape, store, &xs, &preds, &succs)?;
        Ok(z[out])
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &DeviceDag,
        basis: &SubgraphBasis,
    ) -> Result<Var> {
        let t = graphlize(g, basis)?;
        self.encode_transformed(tape, store, &t, basis)
    }
}

fn output_position(is_output: impl Iterator<Item = bool>) -> Result<usize> {
    let outs: Vec<usize> = is_output
        .enumerate()
        .filter(|(_, o)| *o)
        .map(|(i, _)| i)
        .collect();
    match outs.as_slice() {
        [o] => Ok(*o),
        _ => Err(CktError::Structural(format!(
            "expected one Output node, found {}",
            outs.len()
        ))),
    }
}

/// Device-level node type: kind index, then Input (6), then Output (7).
pub const DEVICE_TYPES: usize = 6 + 2;

/// The outer pass alone over device-level nodes.
#[derive(Debug, Clone)]
pub struct BaselineEncoder {
    pub outer: OuterCell,
    pub hidden: usize,
}

impl BaselineEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.check()?;
        let outer = OuterCell::new(
            store,
            &format!("{name}.outer"),
            DEVICE_TYPES + 3,
            cfg.outer_hidden,
            rng,
        )?;
        Ok(BaselineEncoder {
            outer,
            hidden: cfg.outer_hidden,
        })
    }

    pub fn node_features(role: &NodeRole) -> Vec<f64> {
        let mut v = vec![0.0; DEVICE_TYPES + 3];
        match role {
            NodeRole::Input => v[6] = 1.0,
            NodeRole::Output => v[7] = 1.0,
            NodeRole::Device(d) => {
                v[d.kind.index()] = 1.0;
                v[DEVICE_TYPES..].copy_from_slice(&device_slots(d.kind, &d.slots()));
            }
        }
        v
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, g: &DeviceDag) -> Result<Var> {
        let idx = g.index()?;
        let out = output_position(g.nodes.iter().map(|n| matches!(n.role, NodeRole::Output)))?;
        let xs: Vec<Var> = g
            .nodes
            .iter()
            .map(|n| tape.constant(Tensor::row(Self::node_features(&n.role))))
            .collect();
        let z = self.outer.run(tape, store, &xs, &idx.preds, &idx.succs)?;
        Ok(z[out])
    }
}
