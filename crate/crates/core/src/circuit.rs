// SPDX-License-Identifier: Apache-2.0

//! Device-level circuit graphs.
//!
//! A [`DeviceDag`] is the encoder-facing view of an op-amp: every device
//! (transconductance stage, resistor, capacitor) is a node, and an edge
//! `u -> v` means the output terminal of `u` and the input terminal of `v`
//! meet at the same electrical junction. One `Input` node feeds the input
//! junction and one `Output` node drains the output junction.
//!
//! Feedback devices are stored in the unified feed-forward direction and
//! carry a [`Direction::Feedback`] flag instead.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CktError, Result};

/// Sampling ranges used by the dataset engine, in SI units.
pub const R_RANGE: (f64, f64) = (1e5, 1e7);
pub const C_RANGE: (f64, f64) = (1e-14, 1e-12);
pub const GM_RANGE: (f64, f64) = (1e-4, 1e-2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Feedforward,
    Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceKind {
    Gm {
        polarity: Polarity,
        direction: Direction,
    },
    R,
    C,
}

impl DeviceKind {
    pub const GM_POS_FWD: DeviceKind = DeviceKind::Gm {
        polarity: Polarity::Positive,
        direction: Direction::Feedforward,
    };
    pub const GM_NEG_FWD: DeviceKind = DeviceKind::Gm {
        polarity: Polarity::Negative,
        direction: Direction::Feedforward,
    };
    pub const GM_POS_FBK: DeviceKind = DeviceKind::Gm {
        polarity: Polarity::Positive,
        direction: Direction::Feedback,
    };
    pub const GM_NEG_FBK: DeviceKind = DeviceKind::Gm {
        polarity: Polarity::Negative,
        direction: Direction::Feedback,
    };

    /// All six device kinds, indexed by [`DeviceKind::index`].
    pub const ALL: [DeviceKind; 6] = [
        DeviceKind::C,
        DeviceKind::R,
        DeviceKind::GM_NEG_FBK,
        DeviceKind::GM_POS_FBK,
        DeviceKind::GM_NEG_FWD,
        DeviceKind::GM_POS_FWD,
    ];

    /// Stable kind index: C=0, R=1, Gm-fbk=2, Gm+fbk=3, Gm-fwd=4, Gm+fwd=5.
    pub fn index(self) -> usize {
        match self {
            DeviceKind::C => 0,
            DeviceKind::R => 1,
            DeviceKind::Gm {
                polarity,
                direction,
            } => {
                let base = match direction {
                    Direction::Feedback => 2,
                    Direction::Feedforward => 4,
                };
                base + usize::from(polarity == Polarity::Positive)
            }
        }
    }

    pub fn from_index(i: usize) -> Option<DeviceKind> {
        DeviceKind::ALL.get(i).copied()
    }

    pub fn is_gm(self) -> bool {
        matches!(self, DeviceKind::Gm { .. })
    }

    pub fn is_forward_gm(self) -> bool {
        matches!(
            self,
            DeviceKind::Gm {
                direction: Direction::Feedforward,
                ..
            }
        )
    }

    pub fn short_name(self) -> &'static str {
        match self {
            DeviceKind::C => "C",
            DeviceKind::R => "R",
            DeviceKind::GM_POS_FWD => "Gm+fwd",
            DeviceKind::GM_NEG_FWD => "Gm-fwd",
            DeviceKind::GM_POS_FBK => "Gm+fbk",
            DeviceKind::GM_NEG_FBK => "Gm-fbk",
        }
    }

    /// Feature slots carried by a device of this kind.
    pub fn slots(self) -> &'static [SlotKind] {
        match self {
            DeviceKind::Gm { .. } => &[SlotKind::Gm, SlotKind::R, SlotKind::C],
            DeviceKind::R => &[SlotKind::R],
            DeviceKind::C => &[SlotKind::C],
        }
    }
}

/// The physical quantity stored in one continuous feature slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Gm,
    R,
    C,
}

impl SlotKind {
    pub fn range(self) -> (f64, f64) {
        match self {
            SlotKind::Gm => GM_RANGE,
            SlotKind::R => R_RANGE,
            SlotKind::C => C_RANGE,
        }
    }

    /// Log-range normalization into [0, 1] (clamped).
    pub fn normalize(self, v: f64) -> f64 {
        let (lo, hi) = self.range();
        ((v.log10() - lo.log10()) / (hi.log10() - lo.log10())).clamp(0.0, 1.0)
    }

    pub fn denormalize(self, u: f64) -> f64 {
        let (lo, hi) = self.range();
        let u = u.clamp(0.0, 1.0);
        10f64.powf(lo.log10() + u * (hi.log10() - lo.log10()))
    }
}

/// Parasitic output load of a transconductance stage, attached from the
/// stage's driven node to ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParasiticLoad {
    pub r: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceInstance {
    pub kind: DeviceKind,
    pub value: f64,
    /// Present exactly when `kind` is a Gm.
    pub load: Option<ParasiticLoad>,
}

impl DeviceInstance {
    pub fn gm(polarity: Polarity, direction: Direction, gm: f64, r: f64, c: f64) -> Self {
        DeviceInstance {
            kind: DeviceKind::Gm {
                polarity,
                direction,
            },
            value: gm,
            load: Some(ParasiticLoad { r, c }),
        }
    }

    pub fn resistor(r: f64) -> Self {
        DeviceInstance {
            kind: DeviceKind::R,
            value: r,
            load: None,
        }
    }

    pub fn capacitor(c: f64) -> Self {
        DeviceInstance {
            kind: DeviceKind::C,
            value: c,
            load: None,
        }
    }

    /// Build a device from its kind and raw feature slots (see [`DeviceKind::slots`]).
    pub fn from_slots(kind: DeviceKind, slots: &[f64]) -> Result<Self> {
        if slots.len() != kind.slots().len() {
            return Err(CktError::Format(format!(
                "{} expects {} feature slots, got {}",
                kind.short_name(),
                kind.slots().len(),
                slots.len()
            )));
        }
        let d = match kind {
            DeviceKind::Gm { .. } => DeviceInstance {
                kind,
                value: slots[0],
                load: Some(ParasiticLoad {
                    r: slots[1],
                    c: slots[2],
                }),
            },
            _ => DeviceInstance {
                kind,
                value: slots[0],
                load: None,
            },
        };
        d.check()?;
        Ok(d)
    }

    pub fn slots(&self) -> Vec<f64> {
        match self.load {
            Some(l) => vec![self.value, l.r, l.c],
            None => vec![self.value],
        }
    }

    pub fn check(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.value) {
            return Err(CktError::Format(format!(
                "device value {} must be positive",
                self.value
            )));
        }
        match (self.kind.is_gm(), self.load) {
            (true, Some(l)) if ok(l.r) && ok(l.c) => Ok(()),
            (true, _) => Err(CktError::Format(
                "Gm device needs a positive parasitic load".into(),
            )),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(CktError::Format(
                "only Gm devices carry a parasitic load".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeRole {
    Input,
    Output,
    Device(DeviceInstance),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NodeRecord", into = "NodeRecord")]
pub struct DagNode {
    pub id: u32,
    pub role: NodeRole,
}

impl DagNode {
    pub fn device(&self) -> Option<&DeviceInstance> {
        match &self.role {
            NodeRole::Device(d) => Some(d),
            _ => None,
        }
    }
}

/// Flat JSON form of a node.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeRecord {
    id: u32,
    role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    polarity: Option<Polarity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    direction: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_load: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c_load: Option<f64>,
}

impl From<DagNode> for NodeRecord {
    fn from(n: DagNode) -> Self {
        let mut rec = NodeRecord {
            id: n.id,
            role: String::new(),
            kind: None,
            polarity: None,
            direction: None,
            value: None,
            r_load: None,
            c_load: None,
        };
        match n.role {
            NodeRole::Input => rec.role = "input".into(),
            NodeRole::Output => rec.role = "output".into(),
            NodeRole::Device(d) => {
                rec.role = "device".into();
                rec.value = Some(d.value);
                match d.kind {
                    DeviceKind::Gm {
                        polarity,
                        direction,
                    } => {
                        rec.kind = Some("gm".into());
                        rec.polarity = Some(polarity);
                        rec.direction = Some(direction);
                    }
                    DeviceKind::R => rec.kind = Some("r".into()),
                    DeviceKind::C => rec.kind = Some("c".into()),
                }
                if let Some(l) = d.load {
                    rec.r_load = Some(l.r);
                    rec.c_load = Some(l.c);
                }
            }
        }
        rec
    }
}

impl TryFrom<NodeRecord> for DagNode {
    type Error = String;

    fn try_from(rec: NodeRecord) -> std::result::Result<Self, String> {
        let role = match rec.role.as_str() {
            "input" => NodeRole::Input,
            "output" => NodeRole::Output,
            "device" => {
                let value = rec.value.ok_or("device node without value")?;
                let kind = match rec.kind.as_deref() {
                    Some("gm") => DeviceKind::Gm {
                        polarity: rec.polarity.ok_or("gm node without polarity")?,
                        direction: rec.direction.ok_or("gm node without direction")?,
                    },
                    Some("r") => DeviceKind::R,
                    Some("c") => DeviceKind::C,
                    other => return Err(format!("unknown device kind {other:?}")),
                };
                let load = match (rec.r_load, rec.c_load) {
                    (Some(r), Some(c)) => Some(ParasiticLoad { r, c }),
                    (None, None) => None,
                    _ => return Err("r_load and c_load must appear together".into()),
                };
                let dev = DeviceInstance { kind, value, load };
                dev.check().map_err(|e| e.to_string())?;
                NodeRole::Device(dev)
            }
            other => return Err(format!("unknown node role {other:?}")),
        };
        Ok(DagNode { id: rec.id, role })
    }
}

/// Device-as-node directed acyclic circuit graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDag {
    pub id: u64,
    pub stage_count: usize,
    pub nodes: Vec<DagNode>,
    pub edges: Vec<(u32, u32)>,
}

/// Adjacency view over a structurally well-formed [`DeviceDag`].
#[derive(Debug, Clone)]
pub struct DagIndex {
    pub preds: Vec<Vec<usize>>,
    pub succs: Vec<Vec<usize>>,
    pub pos: HashMap<u32, usize>,
}

impl DagIndex {
    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }
}

impl DeviceDag {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn device_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.device().is_some()).count()
    }

    /// Checks id uniqueness and edge endpoints; builds adjacency lists.
    /// Neighbor lists are sorted by node position.
    pub fn index(&self) -> Result<DagIndex> {
        let mut pos = HashMap::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if pos.insert(n.id, i).is_some() {
                return Err(CktError::Structural(format!("duplicate node id {}", n.id)));
            }
        }
        let mut preds = vec![Vec::new(); self.nodes.len()];
        let mut succs = vec![Vec::new(); self.nodes.len()];
        for &(s, d) in &self.edges {
            let (Some(&a), Some(&b)) = (pos.get(&s), pos.get(&d)) else {
                return Err(CktError::Structural(format!(
                    "edge ({s}, {d}) references a missing node"
                )));
            };
            if succs[a].contains(&b) {
                return Err(CktError::Structural(format!("duplicate edge ({s}, {d})")));
            }
            succs[a].push(b);
            preds[b].push(a);
        }
        for l in preds.iter_mut().chain(succs.iter_mut()) {
            l.sort_unstable();
        }
        Ok(DagIndex { preds, succs, pos })
    }
}

/// Deterministic topological order (Kahn, smallest position first).
pub fn topo_order(succs: &[Vec<usize>], preds: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = succs.len();
    let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
        .filter(|&v| indeg[v] == 0)
        .map(std::cmp::Reverse)
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(std::cmp::Reverse(v)) = ready.pop() {
        order.push(v);
        for &w in &succs[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(std::cmp::Reverse(w));
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err(CktError::Cycle)
    }
}

/// Validity rules, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// Exactly one Input and one Output, and they are the only source and sink.
    SingleInputOutput,
    Acyclic,
    /// A main path of feed-forward Gm devices exists (no R or C on it).
    MainPath,
    /// The device adjacency corresponds to some junction assignment.
    StageAssignment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub is_valid_dag: bool,
    pub is_valid_circuit: bool,
    pub violations: Vec<Rule>,
}

/// Checks the circuit validity rules in order. Structural problems (bad ids)
/// are reported as errors, not as violations.
pub fn validate_circuit(g: &DeviceDag) -> Result<ValidityReport> {
    let idx = g.index()?;
    let mut violations = Vec::new();

    let inputs: Vec<usize> = role_positions(g, |r| matches!(r, NodeRole::Input));
    let outputs: Vec<usize> = role_positions(g, |r| matches!(r, NodeRole::Output));
    let roles_ok = inputs.len() == 1 && outputs.len() == 1;
    let mut rule1 = roles_ok;
    if roles_ok {
        let (i, o) = (inputs[0], outputs[0]);
        for v in 0..idx.len() {
            let src = idx.preds[v].is_empty();
            let sink = idx.succs[v].is_empty();
            if (src != (v == i)) || (sink != (v == o)) {
                rule1 = false;
            }
        }
    }
    if !rule1 {
        violations.push(Rule::SingleInputOutput);
    }

    let topo = topo_order(&idx.succs, &idx.preds);
    if topo.is_err() {
        violations.push(Rule::Acyclic);
    }

    if let (true, Ok(order)) = (roles_ok, &topo) {
        if find_main_path(g, &idx, order).is_none() {
            violations.push(Rule::MainPath);
        }
    }

    if violations.is_empty() && crate::stage::Junctions::reconstruct(g, &idx).is_err() {
        violations.push(Rule::StageAssignment);
    }

    let is_valid_dag = !violations
        .iter()
        .any(|r| matches!(r, Rule::SingleInputOutput | Rule::Acyclic));
    Ok(ValidityReport {
        is_valid_dag,
        is_valid_circuit: violations.is_empty(),
        violations,
    })
}

fn role_positions(g: &DeviceDag, f: impl Fn(&NodeRole) -> bool) -> Vec<usize> {
    g.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| f(&n.role))
        .map(|(i, _)| i)
        .collect()
}

/// Longest Input->Output path whose interior nodes are all feed-forward Gm
/// devices. Returns node positions (Input and Output included). Ties go to
/// the predecessor earliest in `order`.
pub fn find_main_path(g: &DeviceDag, idx: &DagIndex, order: &[usize]) -> Option<Vec<usize>> {
    let n = idx.len();
    let mut rank = vec![0usize; n];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }
    let allowed = |v: usize| match g.nodes[v].role {
        NodeRole::Input | NodeRole::Output => true,
        NodeRole::Device(d) => d.kind.is_forward_gm(),
    };
    // (length, predecessor) for nodes reachable from Input through allowed nodes
    let mut best: Vec<Option<(usize, Option<usize>)>> = vec![None; n];
    let mut output = None;
    for &v in order {
        if !allowed(v) {
            continue;
        }
        match g.nodes[v].role {
            NodeRole::Input => best[v] = Some((0, None)),
            role => {
                let mut cand: Option<(usize, usize)> = None;
                for &u in &idx.preds[v] {
                    if let Some((len, _)) = best[u] {
                        // Output must be reached through at least one stage.
                        if matches!(role, NodeRole::Output) && len == 0 {
                            continue;
                        }
                        let better = match cand {
                            None => true,
                            Some((cl, cu)) => len > cl || (len == cl && rank[u] < rank[cu]),
                        };
                        if better {
                            cand = Some((len, u));
                        }
                    }
                }
                if let Some((len, u)) = cand {
                    let step = usize::from(!matches!(role, NodeRole::Output));
                    best[v] = Some((len + step, Some(u)));
                }
                if matches!(role, NodeRole::Output) {
                    output = Some(v);
                }
            }
        }
    }
    let out = output?;
    best[out]?;
    let mut path = vec![out];
    let mut cur = out;
    while let Some((_, Some(p))) = best[cur] {
        path.push(p);
        cur = p;
    }
    path.reverse();
    Some(path)
}

/// Width of a canonicalization bucket in log10 space.
pub const BUCKET_WIDTH_LOG10: f64 = 0.01;

pub fn value_bucket(v: f64) -> i64 {
    (v.log10() / BUCKET_WIDTH_LOG10).floor() as i64
}

fn role_rank(role: &NodeRole) -> (u8, usize) {
    match role {
        NodeRole::Input => (0, 0),
        NodeRole::Device(d) => (1, d.kind.index()),
        NodeRole::Output => (2, 0),
    }
}

fn coarse_label(role: &NodeRole, buf: &mut Vec<u8>) {
    let (r, k) = role_rank(role);
    buf.push(r);
    buf.push(k as u8);
    if let NodeRole::Device(d) = role {
        for s in d.slots() {
            buf.extend_from_slice(&value_bucket(s).to_le_bytes());
        }
    }
}

fn fine_label(role: &NodeRole, buf: &mut Vec<u8>) {
    coarse_label(role, buf);
    if let NodeRole::Device(d) = role {
        for s in d.slots() {
            buf.extend_from_slice(&s.to_bits().to_le_bytes());
        }
    }
}

pub(crate) fn digest64(bytes: &[u8]) -> u64 {
    let h = Sha256::digest(bytes);
    u64::from_le_bytes(h[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// Forward (ancestor) and backward (descendant) signatures for every node.
fn signatures(
    g: &DeviceDag,
    idx: &DagIndex,
    order: &[usize],
    label: fn(&NodeRole, &mut Vec<u8>),
) -> (Vec<u64>, Vec<u64>) {
    let n = idx.len();
    let mut fwd = vec![0u64; n];
    let mut bwd = vec![0u64; n];
    let mut buf = Vec::new();
    for (dir, sig) in [(0, &mut fwd), (1, &mut bwd)] {
        let iter: Box<dyn Iterator<Item = &usize>> = if dir == 0 {
            Box::new(order.iter())
        } else {
            Box::new(order.iter().rev())
        };
        for &v in iter {
            buf.clear();
            buf.push(dir as u8);
            label(&g.nodes[v].role, &mut buf);
            let nbrs = if dir == 0 {
                &idx.preds[v]
            } else {
                &idx.succs[v]
            };
            let mut ns: Vec<u64> = nbrs.iter().map(|&u| sig[u]).collect();
            ns.sort_unstable();
            for s in ns {
                buf.extend_from_slice(&s.to_le_bytes());
            }
            sig[v] = digest64(&buf);
        }
    }
    (fwd, bwd)
}

/// Relabels node ids 0..n in a canonical topological order and returns a
/// 64-bit hash that depends only on topology, device kinds and parameter
/// buckets (log10 width [`BUCKET_WIDTH_LOG10`]).
pub fn canonicalize(g: &DeviceDag) -> Result<(DeviceDag, u64)> {
    let idx = g.index()?;
    let order = topo_order(&idx.succs, &idx.preds)?;
    let n = idx.len();

    let mut depth = vec![0usize; n];
    for &v in &order {
        for &u in &idx.preds[v] {
            depth[v] = depth[v].max(depth[u] + 1);
        }
    }
    let (cf, cb) = signatures(g, &idx, &order, coarse_label);
    let (ff, fb) = signatures(g, &idx, &order, fine_label);

    let bucket0 = |v: usize| {
        g.nodes[v]
            .device()
            .map(|d| value_bucket(d.value))
            .unwrap_or(0)
    };
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by_key(|&v| {
        (
            depth[v],
            role_rank(&g.nodes[v].role),
            bucket0(v),
            ff[v],
            fb[v],
            v,
        )
    });
    let mut new_id = vec![0u32; n];
    for (k, &v) in perm.iter().enumerate() {
        new_id[v] = k as u32;
    }
    let nodes = perm
        .iter()
        .map(|&v| DagNode {
            id: new_id[v],
            role: g.nodes[v].role,
        })
        .collect();
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(g.edges.len());
    for (u, s) in idx.succs.iter().enumerate() {
        for &v in s {
            edges.push((new_id[u], new_id[v]));
        }
    }
    edges.sort_unstable();

    let node_sig: Vec<u64> = (0..n)
        .map(|v| {
            let mut b = cf[v].to_le_bytes().to_vec();
            b.extend_from_slice(&cb[v].to_le_bytes());
            digest64(&b)
        })
        .collect();
    let mut sigs = node_sig.clone();
    sigs.sort_unstable();
    let mut edge_sigs: Vec<(u64, u64)> = Vec::with_capacity(g.edges.len());
    for (u, s) in idx.succs.iter().enumerate() {
        for &v in s {
            edge_sigs.push((node_sig[u], node_sig[v]));
        }
    }
    edge_sigs.sort_unstable();
    let mut buf = b"cktgnn-canon-v1".to_vec();
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for s in sigs {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for (a, b) in edge_sigs {
        buf.extend_from_slice(&a.to_le_bytes());
        buf.extend_from_slice(&b.to_le_bytes());
    }
    let hash = digest64(&buf);

    Ok((
        DeviceDag {
            id: g.id,
            stage_count: g.stage_count,
            nodes,
            edges,
        },
        hash,
    ))
}

/// Topology-only hash: like [`canonicalize`] but ignores device values.
pub fn topology_hash(g: &DeviceDag) -> Result<u64> {
    let mut stripped = g.clone();
    for n in &mut stripped.nodes {
        if let NodeRole::Device(d) = &mut n.role {
            d.value = 1.0;
            if let Some(l) = &mut d.load {
                l.r = 1.0;
                l.c = 1.0;
            }
        }
    }
    Ok(canonicalize(&stripped)?.1)
}

/// Convenience: build a DeviceDag from a list of roles and edges given by
/// list position. Node ids equal positions.
pub fn dag_from_parts(
    id: u64,
    stage_count: usize,
    roles: &[NodeRole],
    edges: &[(usize, usize)],
) -> DeviceDag {
    DeviceDag {
        id,
        stage_count,
        nodes: roles
            .iter()
            .enumerate()
            .map(|(i, r)| DagNode {
                id: i as u32,
                role: *r,
            })
            .collect(),
        edges: edges.iter().map(|&(a, b)| (a as u32, b as u32)).collect(),
    }
}

/// Counts of devices by kind index; handy for multiset comparisons.
pub fn kind_histogram(g: &DeviceDag) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for n in &g.nodes {
        if let Some(d) = n.device() {
            *h.entry(d.kind.index()).or_insert(0) += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gm() -> NodeRole {
        NodeRole::Device(DeviceInstance::gm(
            Polarity::Positive,
            Direction::Feedforward,
            1e-3,
            1e6,
            1e-13,
        ))
    }

    fn chain2() -> DeviceDag {
        dag_from_parts(
            0,
            2,
            &[NodeRole::Input, gm(), gm(), NodeRole::Output],
            &[(0, 1), (1, 2), (2, 3)],
        )
    }

    #[test]
    fn minimal_two_stage_chain_is_valid() {
        let r = validate_circuit(&chain2()).unwrap();
        assert!(r.is_valid_dag && r.is_valid_circuit, "{r:?}");
        assert!(r.violations.is_empty());
    }

    #[test]
    fn two_outputs_break_rule_one() {
        let g = dag_from_parts(
            0,
            1,
            &[NodeRole::Input, gm(), NodeRole::Output, NodeRole::Output],
            &[(0, 1), (1, 2), (1, 3)],
        );
        let r = validate_circuit(&g).unwrap();
        assert_eq!(r.violations, vec![Rule::SingleInputOutput]);
        assert!(!r.is_valid_dag && !r.is_valid_circuit);
    }

    #[test]
    fn resistor_on_main_path_breaks_rule_three() {
        let g = dag_from_parts(
            0,
            1,
            &[
                NodeRole::Input,
                NodeRole::Device(DeviceInstance::resistor(1e6)),
                gm(),
                NodeRole::Output,
            ],
            &[(0, 1), (1, 2), (2, 3)],
        );
        let r = validate_circuit(&g).unwrap();
        assert_eq!(r.violations, vec![Rule::MainPath]);
        assert!(r.is_valid_dag);
        assert!(!r.is_valid_circuit);
    }

    #[test]
    fn cycle_is_a_violation_not_an_error() {
        let g = dag_from_parts(
            0,
            2,
            &[NodeRole::Input, gm(), gm(), NodeRole::Output],
            &[(0, 1), (1, 2), (2, 1), (2, 3)],
        );
        let r = validate_circuit(&g).unwrap();
        assert!(r.violations.contains(&Rule::Acyclic));
        assert!(!r.is_valid_dag);
    }

    #[test]
    fn dangling_edge_is_structural_error() {
        let mut g = chain2();
        g.edges.push((2, 42));
        assert!(matches!(validate_circuit(&g), Err(CktError::Structural(_))));
        let mut g = chain2();
        g.nodes[1].id = 0;
        assert!(matches!(validate_circuit(&g), Err(CktError::Structural(_))));
    }

    #[test]
    fn canonicalize_rejects_cycles() {
        let g = dag_from_parts(
            0,
            2,
            &[NodeRole::Input, gm(), gm(), NodeRole::Output],
            &[(0, 1), (1, 2), (2, 1), (2, 3)],
        );
        assert!(matches!(canonicalize(&g), Err(CktError::Cycle)));
    }

    #[test]
    fn bucket_width_merges_tiny_perturbations() {
        let mk = |r: f64| {
            dag_from_parts(
                0,
                1,
                &[
                    NodeRole::Input,
                    gm(),
                    NodeRole::Device(DeviceInstance::resistor(r)),
                    NodeRole::Output,
                ],
                &[(0, 1), (0, 2), (1, 3), (2, 3)],
            )
        };
        let a = canonicalize(&mk(1e6)).unwrap().1;
        let b = canonicalize(&mk(1.0000001e6)).unwrap().1;
        let c = canonicalize(&mk(1.03e6)).unwrap().1;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn json_field_names_are_fixed() {
        let text = chain2().to_json().unwrap();
        for key in [
            "\"id\"",
            "\"stage_count\"",
            "\"nodes\"",
            "\"edges\"",
            "\"role\"",
            "\"kind\"",
            "\"polarity\"",
            "\"direction\"",
            "\"value\"",
        ] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
        let back = DeviceDag::from_json(&text).unwrap();
        assert_eq!(back, chain2());
    }

    #[test]
    fn json_rejects_bad_devices() {
        let bad = r#"{"id":0,"stage_count":1,"nodes":[{"id":0,"role":"device","kind":"r","value":-1.0}],"edges":[]}"#;
        assert!(DeviceDag::from_json(bad).is_err());
        let bad = r#"{"id":0,"stage_count":1,"nodes":[{"id":0,"role":"device","kind":"gm","polarity":"positive","direction":"feedforward","value":1e-3}],"edges":[]}"#;
        assert!(DeviceDag::from_json(bad).is_err());
    }

    #[test]
    fn slot_normalization_round_trips() {
        for s in [SlotKind::Gm, SlotKind::R, SlotKind::C] {
            let (lo, hi) = s.range();
            assert!((s.normalize(lo)).abs() < 1e-12);
            assert!((s.normalize(hi) - 1.0).abs() < 1e-12);
            let mid = (lo * hi).sqrt();
            assert!((s.denormalize(s.normalize(mid)) / mid - 1.0).abs() < 1e-12);
        }
    }
}
