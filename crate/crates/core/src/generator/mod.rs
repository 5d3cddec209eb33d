// SPDX-License-Identifier: Apache-2.0

//! Variational autoencoder over circuit graphs: posterior heads on an
//! encoder, and a decoder that grows the graph one node at a time.

mod train;

pub use train::{
    reconstruction_accuracy, smoothed, train, EpochStats, TrainConfig, TrainState, CURVE_HEADER,
};

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{build_default_basis, SubgraphBasis};
use crate::circuit::{
    canonicalize, dag_from_parts, topo_order, validate_circuit, DeviceDag, DeviceInstance,
    DeviceKind, NodeRole, SlotKind, ValidityReport,
};
use crate::encoder::{BaselineEncoder, CktGnnEncoder, EncoderConfig};
use crate::error::{CktError, Result};
use crate::graphlize::{
    degraphlize, graphlize, main_path_stages, TNode, TNodeRole, TransformedDag,
};
use crate::nn::{
    read_checkpoint, write_checkpoint, Activation, Linear, Mlp, ParamStore, Tape, Tensor, Var,
};

/// Which graph view the model encodes and generates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Subgraph-level nodes over the basis, nested encoder.
    Cktgnn,
    /// Device-level nodes, outer pass only.
    Baseline,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cktgnn" => Ok(ModelKind::Cktgnn),
            "baseline" => Ok(ModelKind::Baseline),
            _ => Err(CktError::Config(format!(
                "unknown model kind `{s}` (cktgnn|baseline)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cktgnn => "cktgnn",
            ModelKind::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub latent: usize,
    pub kl_weight: f64,
    /// Cap on generated nodes after Input, the Output node included.
    pub max_nodes: usize,
    pub edge_threshold: f64,
    /// Initial bias of the log-variance head.
    pub logvar_init: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            kind: ModelKind::Cktgnn,
            encoder: EncoderConfig::default(),
            latent: 56,
            kl_weight: 0.005,
            max_nodes: 12,
            edge_threshold: 0.5,
            logvar_init: -6.0,
        }
    }
}

impl VaeConfig {
    pub fn check(&self) -> Result<()> {
        self.encoder.check()?;
        if self.latent == 0 || self.max_nodes == 0 {
            return Err(CktError::Config(
                "latent size and max_nodes must be positive".into(),
            ));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(CktError::Config(
                "kl_weight must be finite and nonnegative".into(),
            ));
        }
        if !self.logvar_init.is_finite() {
            return Err(CktError::Config("logvar_init must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_threshold) {
            return Err(CktError::Config("edge_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Node types a decoder can emit, with their feature slots.
#[derive(Debug, Clone)]
pub struct Vocab {
    pub slots: Vec<Vec<SlotKind>>,
}

impl Vocab {
    pub fn for_kind(kind: ModelKind, basis: &SubgraphBasis) -> Self {
        let slots = match kind {
            ModelKind::Cktgnn => basis
                .entries
                .iter()
                .map(|e| {
                    e.devices
                        .iter()
                        .flat_map(|d| d.kind.slots().iter().copied())
                        .collect()
                })
                .collect(),
            ModelKind::Baseline => DeviceKind::ALL.iter().map(|k| k.slots().to_vec()).collect(),
        };
        Vocab { slots }
    }

    pub fn types(&self) -> usize {
        self.slots.len()
    }

    pub fn max_slots(&self) -> usize {
        self.slots.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Input width of a decoder node: type one-hot (types, Input, Output)
    /// plus padded normalized slots.
    pub fn node_width(&self) -> usize {
        self.types() + 2 + self.max_slots()
    }
}

/// A graph as the decoder sees it. Position 0 is Input, the last position
/// is Output, and every edge points from a lower to a higher position.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSeq {
    /// Types of positions `1..len-1`.
    pub types: Vec<usize>,
    /// Normalized slot values, aligned with `types`.
    pub params: Vec<Vec<f64>>,
    /// Predecessor positions for every position (empty for Input).
    pub preds: Vec<Vec<usize>>,
}

impl NodeSeq {
    pub fn len(&self) -> usize {
        self.types.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Same types and edges; parameters ignored.
    pub fn same_topology(&self, other: &NodeSeq) -> bool {
        self.types == other.types && self.preds == other.preds
    }

    fn from_ordered(
        n: usize,
        edges: impl Iterator<Item = (usize, usize)>,
        order: &[usize],
        types: Vec<usize>,
        params: Vec<Vec<f64>>,
    ) -> Result<NodeSeq> {
        let mut rank = vec![0; n];
        for (k, &v) in order.iter().enumerate() {
            rank[v] = k;
        }
        let mut preds = vec![Vec::new(); n];
        for (a, b) in edges {
            preds[rank[b]].push(rank[a]);
        }
        for p in &mut preds {
            p.sort_unstable();
        }
        Ok(NodeSeq {
            types,
            params,
            preds,
        })
    }

    pub fn from_transformed(t: &TransformedDag) -> Result<NodeSeq> {
        let (preds, succs) = t.adjacency()?;
        let order = topo_order(&succs, &preds)?;
        let n = t.nodes.len();
        if n < 2
            || !matches!(t.nodes[order[0]].role, TNodeRole::Input)
            || !matches!(t.nodes[order[n - 1]].role, TNodeRole::Output)
        {
            return Err(CktError::Structural(
                "transformed graph must run from Input to Output".into(),
            ));
        }
        let basis = build_default_basis();
        let vocab = Vocab::for_kind(ModelKind::Cktgnn, &basis);
        let mut types = Vec::new();
        let mut params = Vec::new();
        for &v in &order[1..n - 1] {
            let TNodeRole::Sub { entry, params: p } = &t.nodes[v].role else {
                return Err(CktError::Structural(
                    "Input or Output inside the graph".into(),
                ));
            };
            let kinds = vocab
                .slots
                .get(*entry)
                .ok_or(CktError::UnknownEntry(*entry))?;
            if kinds.len() != p.len() {
                return Err(CktError::Shape {
                    op: "from_transformed",
                    lhs: vec![kinds.len()],
                    rhs: vec![p.len()],
                });
            }
            types.push(*entry);
            params.push(kinds.iter().zip(p).map(|(k, v)| k.normalize(*v)).collect());
        }
        let pos: std::collections::HashMap<u32, usize> =
            t.nodes.iter().enumerate().map(|(i, x)| (x.id, i)).collect();
        let edges = t.edges.iter().map(|(a, b)| (pos[a], pos[b]));
        NodeSeq::from_ordered(n, edges, &order, types, params)
    }

    pub fn from_device_dag(g: &DeviceDag) -> Result<NodeSeq> {
        let idx = g.index()?;
        let order = topo_order(&idx.succs, &idx.preds)?;
        let n = idx.len();
        if n < 2
            || !matches!(g.nodes[order[0]].role, NodeRole::Input)
            || !matches!(g.nodes[order[n - 1]].role, NodeRole::Output)
        {
            return Err(CktError::Structural(
                "device graph must run from Input to Output".into(),
            ));
        }
        let mut types = Vec::new();
        let mut params = Vec::new();
        for &v in &order[1..n - 1] {
            let NodeRole::Device(d) = &g.nodes[v].role else {
                return Err(CktError::Structural(
                    "Input or Output inside the graph".into(),
                ));
            };
            types.push(d.kind.index());
            params.push(
                d.kind
                    .slots()
                    .iter()
                    .zip(d.slots())
                    .map(|(k, v)| k.normalize(v))
                    .collect(),
            );
        }
        let edges = idx
            .succs
            .iter()
            .enumerate()
            .flat_map(|(a, s)| s.iter().map(move |&b| (a, b)));
        NodeSeq::from_ordered(n, edges, &order, types, params)
    }

    fn edge_list(&self) -> Vec<(u32, u32)> {
        let mut e = Vec::new();
        for (b, ps) in self.preds.iter().enumerate() {
            for &a in ps {
                e.push((a as u32, b as u32));
            }
        }
        e.sort_unstable();
        e
    }

    pub fn to_transformed(&self, vocab: &Vocab) -> Result<TransformedDag> {
        let last = self.len() - 1;
        let mut nodes = vec![TNode {
            id: 0,
            role: TNodeRole::Input,
        }];
        for (i, (&t, p)) in self.types.iter().zip(&self.params).enumerate() {
            let kinds = vocab.slots.get(t).ok_or(CktError::UnknownEntry(t))?;
            nodes.push(TNode {
                id: i as u32 + 1,
                role: TNodeRole::Sub {
                    entry: t,
                    params: kinds
                        .iter()
                        .zip(p)
                        .map(|(k, u)| k.denormalize(*u))
                        .collect(),
                },
            });
        }
        nodes.push(TNode {
            id: last as u32,
            role: TNodeRole::Output,
        });
        Ok(TransformedDag {
            id: 0,
            nodes,
            edges: self.edge_list(),
        })
    }

    pub fn to_device_dag(&self) -> Result<DeviceDag> {
        let mut roles = vec![NodeRole::Input];
        for (&t, p) in self.types.iter().zip(&self.params) {
            let kind = DeviceKind::from_index(t).ok_or(CktError::UnknownEntry(t))?;
            let raw: Vec<f64> = kind
                .slots()
                .iter()
                .zip(p)
                .map(|(k, u)| k.denormalize(*u))
                .collect();
            roles.push(NodeRole::Device(DeviceInstance::from_slots(kind, &raw)?));
        }
        roles.push(NodeRole::Output);
        let edges: Vec<(usize, usize)> = self
            .edge_list()
            .iter()
            .map(|&(a, b)| (a as usize, b as usize))
            .collect();
        let mut g = dag_from_parts(0, 0, &roles, &edges);
        g.stage_count = main_path_stages(&g).unwrap_or(0);
        Ok(g)
    }
}

/// A training or evaluation circuit in every view the models need.
#[derive(Debug, Clone)]
pub struct Example {
    pub dag: DeviceDag,
    pub transformed: TransformedDag,
    pub cktgnn_seq: NodeSeq,
    pub device_seq: NodeSeq,
}

impl Example {
    pub fn new(g: &DeviceDag, basis: &SubgraphBasis) -> Result<Example> {
        let (dag, _) = canonicalize(g)?;
        let transformed = graphlize(&dag, basis)?;
        Ok(Example {
            cktgnn_seq: NodeSeq::from_transformed(&transformed)?,
            device_seq: NodeSeq::from_device_dag(&dag)?,
            dag,
            transformed,
        })
    }

    pub fn seq(&self, kind: ModelKind) -> &NodeSeq {
        match kind {
            ModelKind::Cktgnn => &self.cktgnn_seq,
            ModelKind::Baseline => &self.device_seq,
        }
    }
}

#[derive(Debug, Clone)]
enum EncoderNet {
    Cktgnn(CktGnnEncoder),
    Baseline(BaselineEncoder),
}

/// Decoder networks: the node recurrence mirrors the encoder's outer pass.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub init: Linear,
    pub cell: crate::encoder::OuterCell,
    pub f_type: Mlp,
    /// One parameter head per node type.
    pub f_feat: Vec<Mlp>,
    pub edge_src: Linear,
    pub edge_dst: Linear,
    pub edge_out: Linear,
}

/// Per-component loss values of one teacher-forced pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon_type: f64,
    pub recon_edge: f64,
    pub recon_param: f64,
    pub kl: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.recon_type += o.recon_type;
        self.recon_edge += o.recon_edge;
        self.recon_param += o.recon_param;
        self.kl += o.kl;
    }

    pub fn scaled(&self, k: f64) -> LossParts {
        LossParts {
            total: self.total * k,
            recon_type: self.recon_type * k,
            recon_edge: self.recon_edge * k,
            recon_param: self.recon_param * k,
            kl: self.kl * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Result of one decode: the node sequence and whether the cap forced the
/// Output node.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub seq: NodeSeq,
    pub truncated: bool,
}

/// Device graph and validity of a decoded sequence. `dag` is `None` when
/// the sequence has no device-level expansion at all.
#[derive(Debug, Clone)]
pub struct DecodedCircuit {
    pub dag: Option<DeviceDag>,
    pub report: Option<ValidityReport>,
}

impl DecodedCircuit {
    pub fn is_valid_dag(&self) -> bool {
        self.report.as_ref().is_some_and(|r| r.is_valid_dag)
    }

    pub fn is_valid_circuit(&self) -> bool {
        self.report.as_ref().is_some_and(|r| r.is_valid_circuit)
    }
}

const FORMAT: &str = "cktgnn-model";
const FORMAT_VERSION: u32 = 1;

/// Encoder, posterior heads, decoder and their parameters.
#[derive(Debug, Clone)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub basis: SubgraphBasis,
    encoder: EncoderNet,
    mu_head: Linear,
    logvar_head: Linear,
    pub decoder: Decoder,
}

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let basis = build_default_basis();
        let vocab = Vocab::for_kind(cfg.kind, &basis);
        let h = cfg.encoder.outer_hidden;
        let encoder = match cfg.kind {
            ModelKind::Cktgnn => EncoderNet::Cktgnn(CktGnnEncoder::new(
                &mut store,
                "enc",
                cfg.encoder,
                &mut rng,
            )?),
            ModelKind::Baseline => EncoderNet::Baseline(BaselineEncoder::new(
                &mut store,
                "enc",
                cfg.encoder,
                &mut rng,
            )?),
        };
        let mu_head = Linear::new(&mut store, "vae.mu", h, cfg.latent, &mut rng)?;
        let logvar_head = Linear::new(&mut store, "vae.logvar", h, cfg.latent, &mut rng)?;
        store.value_mut(logvar_head.b).data.fill(cfg.logvar_init);
        let t = vocab.types();
        let decoder = Decoder {
            init: Linear::new(&mut store, "dec.init", cfg.latent, h, &mut rng)?,
            cell: crate::encoder::OuterCell::new(
                &mut store,
                "dec.cell",
                vocab.node_width(),
                h,
                &mut rng,
            )?,
            f_type: Mlp::new(
                &mut store,
                "dec.type",
                &[h, h, t + 1],
                Activation::Relu,
                &mut rng,
            )?,
            f_feat: (0..t)
                .map(|k| {
                    let name = format!("dec.feat{k}");
                    Mlp::new(
                        &mut store,
                        &name,
                        &[h, h, vocab.slots[k].len()],
                        Activation::Relu,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?,
            edge_src: Linear::new(&mut store, "dec.edge_src", h, h, &mut rng)?,
            edge_dst: Linear::new(&mut store, "dec.edge_dst", h, h, &mut rng)?,
            edge_out: Linear::new(&mut store, "dec.edge_out", h, 1, &mut rng)?,
        };
        Ok(Vae {
            cfg,
            store,
            vocab,
            basis,
            encoder,
            mu_head,
            logvar_head,
            decoder,
        })
    }

    /// Graph embedding `z_G` of an example.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, ex: &Example) -> Result<Var> {
        match &self.encoder {
            EncoderNet::Cktgnn(e) => {
                e.encode_transformed(tape, store, &ex.transformed, &self.basis)
            }
            EncoderNet::Baseline(e) => e.encode(tape, store, &ex.dag),
        }
    }

    /// Posterior mean and log-variance.
    pub fn posterior(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ex: &Example,
    ) -> Result<(Var, Var)> {
        let z = self.embed(tape, store, ex)?;
        let mu = self.mu_head.forward(tape, store, z)?;
        let lv = self.logvar_head.forward(tape, store, z)?;
        Ok((mu, lv))
    }

    /// `z = mu + exp(logvar / 2) * eps`.
    pub fn reparameterize(
        &self,
        tape: &mut Tape,
        mu: Var,
        logvar: Var,
        eps: &[f64],
    ) -> Result<Var> {
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let e = tape.constant(Tensor::row(eps.to_vec()));
        let noise = tape.mul(std, e)?;
        tape.add(mu, noise)
    }

    /// Posterior mean as a plain vector.
    pub fn latent_mean(&self, ex: &Example) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (mu, _) = self.posterior(&mut tape, &self.store, ex)?;
        Ok(tape.value(mu).data.clone())
    }

    fn node_input(&self, tape: &mut Tape, ty: usize, params: &[f64]) -> Var {
        let mut v = vec![0.0; self.vocab.node_width()];
        v[ty] = 1.0;
        let off = self.vocab.types() + 2;
        v[off..off + params.len()].copy_from_slice(params);
        tape.constant(Tensor::row(v))
    }

    fn predicted_params(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: Var,
        ty: usize,
    ) -> Result<Var> {
        let raw = self.decoder.f_feat[ty].forward(tape, store, state)?;
        Ok(tape.sigmoid(raw))
    }

    /// Edge logits from every earlier node (rows, by position) to a new
    /// node with provisional state `t`.
    fn edge_logits(&self, tape: &mut Tape, store: &ParamStore, src: &[Var], t: Var) -> Result<Var> {
        let s = tape.stack_rows(src)?;
        let d = self.decoder.edge_dst.forward(tape, store, t)?;
        let h = tape.add(s, d)?;
        let h = tape.relu(h);
        self.decoder.edge_out.forward(tape, store, h)
    }

    /// Teacher-forced decoder loss for latent `z` against `seq`.
    fn decoder_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        seq: &NodeSeq,
    ) -> Result<(Var, Var, Var)> {
        let dec = &self.decoder;
        let n = seq.len();
        let h0 = dec.init.forward(tape, store, z)?;
        let h0 = tape.tanh(h0);
        let x_in = self.node_input(tape, self.vocab.types(), &[]);
        let s0 = dec.cell.step(tape, store, x_in, h0)?;
        let mut states = vec![s0];
        let mut msgs = vec![dec.cell.message(tape, store, s0)?];
        let mut srcs = vec![dec.edge_src.forward(tape, store, s0)?];
        let (mut ce, mut bce, mut se) = (Vec::new(), Vec::new(), Vec::new());
        for i in 1..n {
            let prev = states[i - 1];
            let is_out = i == n - 1;
            let (class, node_ty, params): (usize, usize, &[f64]) = if is_out {
                (self.vocab.types(), self.vocab.types() + 1, &[])
            } else {
                (seq.types[i - 1], seq.types[i - 1], &seq.params[i - 1])
            };
            let logits = dec.f_type.forward(tape, store, prev)?;
            ce.push(tape.softmax_cross_entropy(logits, &[class])?);
            if !is_out {
                let p = self.predicted_params(tape, store, prev, node_ty)?;
                se.push(tape.squared_error(p, params)?);
            }
            let x = self.node_input(tape, node_ty, params);
            let provisional = dec.cell.step(tape, store, x, prev)?;
            let el = self.edge_logits(tape, store, &srcs, provisional)?;
            let mut target = vec![0.0; i];
            for &j in &seq.preds[i] {
                target[j] = 1.0;
            }
            bce.push(tape.bce_with_logits(el, &target)?);
            let ms: Vec<Var> = seq.preds[i].iter().map(|&j| msgs[j]).collect();
            let agg = dec.cell.aggregate(tape, &ms)?;
            let s = dec.cell.step(tape, store, x, agg)?;
            states.push(s);
            if !is_out {
                msgs.push(dec.cell.message(tape, store, s)?);
                srcs.push(dec.edge_src.forward(tape, store, s)?);
            }
        }
        let ce = tape.add_n(&ce)?;
        let bce = tape.add_n(&bce)?;
        let se = if se.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            tape.add_n(&se)?
        };
        Ok((ce, bce, se))
    }

    /// Full objective for one example: type cross-entropy + edge BCE +
    /// parameter squared error + `kl_weight * KL`. Returns the total and
    /// its component values.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ex: &Example,
        eps: &[f64],
    ) -> Result<(Var, LossParts)> {
        let (mu, lv) = self.posterior(tape, store, ex)?;
        let z = self.reparameterize(tape, mu, lv, eps)?;
        let (ce, bce, se) = self.decoder_loss(tape, store, z, ex.seq(self.cfg.kind))?;
        let kl = tape.gaussian_kl(mu, lv)?;
        let wkl = tape.scale(kl, self.cfg.kl_weight);
        let total = tape.add_n(&[ce, bce, se, wkl])?;
        let parts = LossParts {
            total: tape.scalar(total),
            recon_type: tape.scalar(ce),
            recon_edge: tape.scalar(bce),
            recon_param: tape.scalar(se),
            kl: tape.scalar(kl),
        };
        Ok((total, parts))
    }

    /// Draws the standard-normal noise for one example.
    pub fn draw_eps<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.cfg.latent)
            .map(|_| StandardNormal.sample(rng))
            .collect()
    }

    /// Generates a node sequence from latent `z`.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        z: &[f64],
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<Decoded> {
        if z.len() != self.cfg.latent {
            return Err(CktError::Shape {
                op: "decode",
                lhs: vec![self.cfg.latent],
                rhs: vec![z.len()],
            });
        }
        let store = &self.store;
        let dec = &self.decoder;
        let mut tape = Tape::new();
        let tape = &mut tape;
        let zv = tape.constant(Tensor::row(z.to_vec()));
        let h0 = dec.init.forward(tape, store, zv)?;
        let h0 = tape.tanh(h0);
        let x_in = self.node_input(tape, self.vocab.types(), &[]);
        let s0 = dec.cell.step(tape, store, x_in, h0)?;
        let mut states = vec![s0];
        let mut msgs = vec![dec.cell.message(tape, store, s0)?];
        let mut srcs = vec![dec.edge_src.forward(tape, store, s0)?];
        let mut seq = NodeSeq {
            types: Vec::new(),
            params: Vec::new(),
            preds: vec![Vec::new()],
        };
        let stop = self.vocab.types();
        let mut truncated = false;
        for i in 1..=self.cfg.max_nodes {
            let prev = states[i - 1];
            let logits = dec.f_type.forward(tape, store, prev)?;
            let mut class = pick_class(&tape.value(logits).data, mode, rng);
            if i == self.cfg.max_nodes && class != stop {
                class = stop;
                truncated = true;
            }
            let is_out = class == stop;
            let (node_ty, params) = if is_out {
                (stop + 1, Vec::new())
            } else {
                let p = self.predicted_params(tape, store, prev, class)?;
                (class, tape.value(p).data.clone())
            };
            let x = self.node_input(tape, node_ty, &params);
            let provisional = dec.cell.step(tape, store, x, prev)?;
            let el = self.edge_logits(tape, store, &srcs, provisional)?;
            let mut preds = Vec::new();
            for (j, &l) in tape.value(el).data.iter().enumerate() {
                let p = sigmoid(l);
                let keep = match mode {
                    DecodeMode::Greedy => p >= self.cfg.edge_threshold,
                    DecodeMode::Sample => rng.random::<f64>() < p,
                };
                if keep {
                    preds.push(j);
                }
            }
            let ms: Vec<Var> = preds.iter().map(|&j| msgs[j]).collect();
            let agg = dec.cell.aggregate(tape, &ms)?;
            let s = dec.cell.step(tape, store, x, agg)?;
            seq.preds.push(preds);
            if is_out {
                break;
            }
            seq.types.push(class);
            seq.params.push(params);
            states.push(s);
            msgs.push(dec.cell.message(tape, store, s)?);
            srcs.push(dec.edge_src.forward(tape, store, s)?);
        }
        Ok(Decoded { seq, truncated })
    }

    /// Expands a decoded sequence to a device graph and checks it.
    pub fn realize(&self, seq: &NodeSeq) -> DecodedCircuit {
        let dag = match self.cfg.kind {
            ModelKind::Cktgnn => seq
                .to_transformed(&self.vocab)
                .and_then(|t| degraphlize(&t, &self.basis)),
            ModelKind::Baseline => seq.to_device_dag(),
        };
        match dag {
            Ok(g) => {
                let report = validate_circuit(&g).ok();
                DecodedCircuit {
                    dag: Some(g),
                    report,
                }
            }
            Err(_) => DecodedCircuit {
                dag: None,
                report: None,
            },
        }
    }

    pub fn save<W: Write>(&self, w: &mut W, state: Option<&TrainState>) -> Result<()> {
        let meta = serde_json::json!({
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "tool_version": crate::TOOL_VERSION,
            "config": self.cfg,
            "train_state": state,
        });
        write_checkpoint(w, &meta, &self.store)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<(Vae, Option<TrainState>)> {
        let (meta, store) = read_checkpoint(r)?;
        if meta.get("format").and_then(|v| v.as_str()) != Some(FORMAT)
            || meta.get("version").and_then(|v| v.as_u64()) != Some(FORMAT_VERSION as u64)
        {
            return Err(CktError::Format(
                "checkpoint is not a supported model file".into(),
            ));
        }
        let cfg: VaeConfig = serde_json::from_value(meta["config"].clone())?;
        let state: Option<TrainState> = serde_json::from_value(meta["train_state"].clone())?;
        let mut vae = Vae::new(cfg, 0)?;
        vae.store.load_from(&store)?;
        if vae.store.len() != store.len() {
            return Err(CktError::Format(
                "checkpoint has unexpected parameters".into(),
            ));
        }
        Ok((vae, state))
    }

    pub fn save_path(&self, path: &Path, state: Option<&TrainState>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f, state)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_path(path: &Path) -> Result<(Vae, Option<TrainState>)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Vae::load(&mut f)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn pick_class<R: Rng + ?Sized>(logits: &[f64], mode: DecodeMode, rng: &mut R) -> usize {
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0;
            for (k, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = k;
                }
            }
            best
        }
        DecodeMode::Sample => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (k, x) in w.iter().enumerate() {
                if u < *x {
                    return k;
                }
                u -= x;
            }
            w.len() - 1
        }
    }
}
