// SPDX-License-Identifier: Apache-2.0

//! Rewriting device graphs over the subgraph basis and back.

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::basis::{SubgraphBasis, Terminal};
use crate::circuit::{
    canonicalize, find_main_path, topo_order, validate_circuit, DagIndex, DagNode, DeviceDag,
    DeviceInstance, NodeRole,
};
use crate::error::{CktError, Result};
use crate::stage::Junctions;

/// Largest device count accepted by [`enumerate_decompositions`].
pub const ENUMERATION_LIMIT: usize = 20;
/// Largest connected block of pairable devices [`graphlize`] will search.
pub const COMPONENT_LIMIT: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub enum TNodeRole {
    Input,
    Output,
    Sub { entry: usize, params: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TNodeRecord", into = "TNodeRecord")]
pub struct TNode {
    pub id: u32,
    pub role: TNodeRole,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TNodeRecord {
    id: u32,
    role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entry_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<Vec<f64>>,
}

impl From<TNode> for TNodeRecord {
    fn from(n: TNode) -> Self {
        let (role, entry_id, params) = match n.role {
            TNodeRole::Input => ("input", None, None),
            TNodeRole::Output => ("output", None, None),
            TNodeRole::Sub { entry, params } => ("sub", Some(entry), Some(params)),
        };
        TNodeRecord {
            id: n.id,
            role: role.into(),
            entry_id,
            params,
        }
    }
}

impl TryFrom<TNodeRecord> for TNode {
    type Error = String;

    fn try_from(r: TNodeRecord) -> std::result::Result<Self, String> {
        let role = match r.role.as_str() {
            "input" => TNodeRole::Input,
            "output" => TNodeRole::Output,
            "sub" => TNodeRole::Sub {
                entry: r.entry_id.ok_or("sub node without entry_id")?,
                params: r.params.ok_or("sub node without params")?,
            },
            other => return Err(format!("unknown node role {other:?}")),
        };
        Ok(TNode { id: r.id, role })
    }
}

/// Predecessor and successor lists by node position.
pub type Adjacency = (Vec<Vec<usize>>, Vec<Vec<usize>>);

/// A circuit re-expressed with one node per basis subgraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedDag {
    pub id: u64,
    pub nodes: Vec<TNode>,
    pub edges: Vec<(u32, u32)>,
}

impl TransformedDag {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Entry ids of the Sub nodes, in node order.
    pub fn entry_sequence(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n.role {
                TNodeRole::Sub { entry, .. } => Some(entry),
                _ => None,
            })
            .collect()
    }

    /// Same node roles, entries and edges; parameters ignored.
    pub fn same_topology(&self, other: &TransformedDag) -> bool {
        let role_key = |n: &TNode| match n.role {
            TNodeRole::Input => (0, 0),
            TNodeRole::Output => (1, 0),
            TNodeRole::Sub { entry, .. } => (2, entry),
        };
        self.nodes.len() == other.nodes.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|(a, b)| a.id == b.id && role_key(a) == role_key(b))
            && {
                let mut a = self.edges.clone();
                let mut b = other.edges.clone();
                a.sort_unstable();
                b.sort_unstable();
                a == b
            }
    }

    /// Position index plus adjacency; rejects duplicate ids and bad edges.
    pub fn adjacency(&self) -> Result<Adjacency> {
        let mut pos = HashMap::new();
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
        Ok((preds, succs))
    }
}

/// One subgraph of a cover: entry id and the canonical device positions
/// bound to the entry's devices, in entry order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Part {
    pub entry: usize,
    pub devices: Vec<usize>,
}

/// A cover of a canonical device graph together with its transformed DAG.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub parts: Vec<Part>,
    pub dag: TransformedDag,
}

/// Turns a cover into a transformed DAG. Sub nodes follow the smallest
/// device position of each part, which is a topological order.
fn assemble(c: &DeviceDag, idx: &DagIndex, mut parts: Vec<Part>) -> (Vec<Part>, TransformedDag) {
    parts.sort_by_key(|p| *p.devices.iter().min().expect("parts are nonempty"));
    let n = idx.len();
    let out_node = parts.len() as u32 + 1;
    let mut owner = vec![0u32; n];
    for (v, node) in c.nodes.iter().enumerate() {
        if matches!(node.role, NodeRole::Output) {
            owner[v] = out_node;
        }
    }
    let mut nodes = vec![TNode {
        id: 0,
        role: TNodeRole::Input,
    }];
    for (k, p) in parts.iter().enumerate() {
        let mut params = Vec::new();
        for &v in &p.devices {
            owner[v] = k as u32 + 1;
            params.extend(c.nodes[v].device().expect("parts hold devices").slots());
        }
        nodes.push(TNode {
            id: k as u32 + 1,
            role: TNodeRole::Sub {
                entry: p.entry,
                params,
            },
        });
    }
    nodes.push(TNode {
        id: out_node,
        role: TNodeRole::Output,
    });
    let mut edges = BTreeSet::new();
    for (u, s) in idx.succs.iter().enumerate() {
        for &v in s {
            if owner[u] != owner[v] {
                edges.insert((owner[u], owner[v]));
            }
        }
    }
    (
        parts,
        TransformedDag {
            id: c.id,
            nodes,
            edges: edges.into_iter().collect(),
        },
    )
}

fn prepare(g: &DeviceDag) -> Result<(DeviceDag, DagIndex)> {
    let report = validate_circuit(g)?;
    if !report.is_valid_circuit {
        return Err(CktError::InvalidCircuit(report.violations));
    }
    let (c, _) = canonicalize(g)?;
    let idx = c.index()?;
    Ok((c, idx))
}

#[derive(Debug, Clone)]
struct Pair {
    a: usize,
    b: usize,
    entry: usize,
}

/// Best cover of one block: fewest parts, then the largest descending
/// order tuple, then the smallest partner vector.
#[derive(Debug, Clone)]
struct Cover {
    count: usize,
    orders: Vec<usize>,
    partner: Vec<usize>,
    parts: Vec<Part>,
}

impl Cover {
    fn better_than(&self, other: &Cover) -> bool {
        use std::cmp::Ordering::*;
        match self.count.cmp(&other.count) {
            Less => return true,
            Greater => return false,
            Equal => {}
        }
        match self.orders.cmp(&other.orders) {
            Greater => return true,
            Less => return false,
            Equal => {}
        }
        self.partner < other.partner
    }
}

struct BlockSearch<'a> {
    b: &'a SubgraphBasis,
    c: &'a DeviceDag,
    block: &'a [usize],
    pairs_of: Vec<Vec<(usize, usize, bool)>>,
    memo: HashMap<u64, Rc<Cover>>,
}

impl BlockSearch<'_> {
    fn solve(&mut self, mask: u64) -> Result<Rc<Cover>> {
        if mask == 0 {
            return Ok(Rc::new(Cover {
                count: 0,
                orders: Vec::new(),
                partner: vec![usize::MAX; self.block.len()],
                parts: Vec::new(),
            }));
        }
        if let Some(c) = self.memo.get(&mask) {
            return Ok(c.clone());
        }
        let i = mask.trailing_zeros() as usize;
        let v = self.block[i];
        let kind = self.c.nodes[v].device().expect("block holds devices").kind;
        let mut options: Vec<(u64, Part)> = Vec::new();
        if let Some(e) = self.b.single_entry(kind) {
            options.push((
                1 << i,
                Part {
                    entry: e,
                    devices: vec![v],
                },
            ));
        }
        for &(j, entry, i_first) in &self.pairs_of[i] {
            if mask & (1 << j) != 0 {
                let w = self.block[j];
                let devices = if i_first { vec![v, w] } else { vec![w, v] };
                options.push(((1 << i) | (1 << j), Part { entry, devices }));
            }
        }
        let mut best: Option<Cover> = None;
        for (used, part) in options {
            let rest = self.solve(mask & !used)?;
            let mut cand = (*rest).clone();
            cand.count += 1;
            let o = self.b.order(part.entry);
            let at = cand.orders.partition_point(|&x| x > o);
            cand.orders.insert(at, o);
            for &d in &part.devices {
                let li = self
                    .block
                    .iter()
                    .position(|&x| x == d)
                    .expect("device in block");
                let other = part.devices.iter().copied().find(|&x| x != d).unwrap_or(d);
                cand.partner[li] = other;
            }
            cand.parts.push(part);
            if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                best = Some(cand);
            }
        }
        let best = Rc::new(best.ok_or_else(|| {
            CktError::Decomposition(format!("device {} is not covered by any entry", v))
        })?);
        self.memo.insert(mask, best.clone());
        Ok(best)
    }
}

/// Pairs of devices that together form a two-device basis entry.
fn pair_candidates(
    c: &DeviceDag,
    idx: &DagIndex,
    junctions: &Junctions,
    b: &SubgraphBasis,
) -> Vec<Pair> {
    let devices: Vec<usize> = (0..idx.len())
        .filter(|&v| c.nodes[v].device().is_some())
        .collect();
    let kind = |v: usize| c.nodes[v].device().expect("device").kind;
    let mut pairs = Vec::new();
    for (x, &u) in devices.iter().enumerate() {
        for &v in &devices[x + 1..] {
            if junctions.reads[u] == junctions.reads[v]
                && junctions.drives[u] == junctions.drives[v]
            {
                if let Some((entry, u_first)) = b.parallel_entry(kind(u), kind(v)) {
                    let (a, b2) = if u_first { (u, v) } else { (v, u) };
                    pairs.push(Pair { a, b: b2, entry });
                }
            }
        }
        if let [v] = idx.succs[u][..] {
            if c.nodes[v].device().is_some() && idx.preds[v] == [u] {
                if let Some(entry) = b.series_entry(kind(u), kind(v)) {
                    pairs.push(Pair { a: u, b: v, entry });
                }
            }
        }
    }
    pairs
}

/// Rewrites a valid circuit over the basis: fewest subgraphs, ties broken
/// by the lexicographically largest descending order tuple.
pub fn graphlize(g: &DeviceDag, b: &SubgraphBasis) -> Result<TransformedDag> {
    Ok(graphlize_parts(g, b)?.dag)
}

/// [`graphlize`] plus the chosen cover.
pub fn graphlize_parts(g: &DeviceDag, b: &SubgraphBasis) -> Result<Decomposition> {
    let (c, idx) = prepare(g)?;
    let junctions = Junctions::reconstruct(&c, &idx)?;
    let pairs = pair_candidates(&c, &idx, &junctions, b);

    // union-find over devices joined by candidate pairs
    let n = idx.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let next = p[y];
            p[y] = r;
            y = next;
        }
        r
    }
    for p in &pairs {
        let (ra, rb) = (find(&mut parent, p.a), find(&mut parent, p.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut blocks: HashMap<usize, Vec<usize>> = HashMap::new();
    for v in 0..n {
        if c.nodes[v].device().is_some() {
            let r = find(&mut parent, v);
            blocks.entry(r).or_default().push(v);
        }
    }
    let mut roots: Vec<usize> = blocks.keys().copied().collect();
    roots.sort_unstable();

    let mut parts = Vec::new();
    for r in roots {
        let block = &blocks[&r];
        if block.len() > COMPONENT_LIMIT {
            return Err(CktError::SizeGuard {
                actual: block.len(),
                limit: COMPONENT_LIMIT,
            });
        }
        let local = |v: usize| block.iter().position(|&x| x == v);
        let mut pairs_of = vec![Vec::new(); block.len()];
        for p in &pairs {
            if let (Some(i), Some(j)) = (local(p.a), local(p.b)) {
                pairs_of[i].push((j, p.entry, true));
                pairs_of[j].push((i, p.entry, false));
            }
        }
        let mut search = BlockSearch {
            b,
            c: &c,
            block,
            pairs_of,
            memo: HashMap::new(),
        };
        let full = if block.len() == 64 {
            u64::MAX
        } else {
            (1u64 << block.len()) - 1
        };
        let cover = search.solve(full)?;
        parts.extend(cover.parts.iter().cloned());
    }
    let (parts, dag) = assemble(&c, &idx, parts);
    Ok(Decomposition { parts, dag })
}

/// Expands every Sub node into its entry's devices. External edges join
/// every tail device of the source to every head device of the target.
pub fn degraphlize(t: &TransformedDag, b: &SubgraphBasis) -> Result<DeviceDag> {
    t.adjacency()?;
    let mut nodes: Vec<DagNode> = Vec::new();
    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut heads: HashMap<u32, Vec<u32>> = HashMap::new();
    let mut tails: HashMap<u32, Vec<u32>> = HashMap::new();
    for tn in &t.nodes {
        let base = nodes.len() as u32;
        match &tn.role {
            TNodeRole::Input | TNodeRole::Output => {
                let role = if matches!(tn.role, TNodeRole::Input) {
                    NodeRole::Input
                } else {
                    NodeRole::Output
                };
                nodes.push(DagNode { id: base, role });
                heads.insert(tn.id, vec![base]);
                tails.insert(tn.id, vec![base]);
            }
            TNodeRole::Sub { entry, params } => {
                let e = b.entry(*entry)?;
                if params.len() != e.slot_count() {
                    return Err(CktError::Format(format!(
                        "entry {} expects {} params, node {} has {}",
                        e.id,
                        e.slot_count(),
                        tn.id,
                        params.len()
                    )));
                }
                let mut off = 0;
                for d in &e.devices {
                    let k = d.kind.slots().len();
                    let dev = DeviceInstance::from_slots(d.kind, &params[off..off + k])?;
                    off += k;
                    nodes.push(DagNode {
                        id: nodes.len() as u32,
                        role: NodeRole::Device(dev),
                    });
                }
                for (x, y) in e.internal_edges() {
                    edges.push((base + x as u32, base + y as u32));
                }
                let pick = |f: fn(&crate::basis::EntryDevice) -> bool| -> Vec<u32> {
                    (0..e.devices.len())
                        .filter(|&i| f(&e.devices[i]))
                        .map(|i| base + i as u32)
                        .collect()
                };
                heads.insert(tn.id, pick(|d| d.reads == Terminal::Head));
                tails.insert(tn.id, pick(|d| d.drives == Terminal::Tail));
            }
        }
    }
    for &(s, d) in &t.edges {
        for &x in &tails[&s] {
            for &y in &heads[&d] {
                edges.push((x, y));
            }
        }
    }
    let mut dag = DeviceDag {
        id: t.id,
        stage_count: 0,
        nodes,
        edges,
    };
    dag.stage_count = main_path_stages(&dag).unwrap_or(0);
    Ok(dag)
}

/// Number of Gm stages on the main path, when one exists.
pub fn main_path_stages(g: &DeviceDag) -> Option<usize> {
    let idx = g.index().ok()?;
    let order = topo_order(&idx.succs, &idx.preds).ok()?;
    let inputs = g
        .nodes
        .iter()
        .filter(|n| matches!(n.role, NodeRole::Input))
        .count();
    let outputs = g
        .nodes
        .iter()
        .filter(|n| matches!(n.role, NodeRole::Output))
        .count();
    if inputs != 1 || outputs != 1 {
        return None;
    }
    find_main_path(g, &idx, &order).map(|p| p.len() - 2)
}

/// Every cover of the circuit's devices by basis entries, found by brute
/// force over device subsets and entry device assignments.
pub fn enumerate_decompositions(g: &DeviceDag, b: &SubgraphBasis) -> Result<Vec<Decomposition>> {
    let count = g.device_count();
    if count > ENUMERATION_LIMIT {
        return Err(CktError::SizeGuard {
            actual: count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let (c, idx) = prepare(g)?;
    let devices: Vec<usize> = (0..idx.len())
        .filter(|&v| c.nodes[v].device().is_some())
        .collect();
    let mut out = Vec::new();
    let mut chosen = Vec::new();
    let mut covered = vec![false; idx.len()];
    enumerate_rec(&c, &idx, b, &devices, &mut covered, &mut chosen, &mut out);
    Ok(out
        .into_iter()
        .map(|parts| {
            let (parts, dag) = assemble(&c, &idx, parts);
            Decomposition { parts, dag }
        })
        .collect())
}

fn enumerate_rec(
    c: &DeviceDag,
    idx: &DagIndex,
    b: &SubgraphBasis,
    devices: &[usize],
    covered: &mut [bool],
    chosen: &mut Vec<Part>,
    out: &mut Vec<Vec<Part>>,
) {
    let Some(&first) = devices.iter().find(|&&v| !covered[v]) else {
        out.push(chosen.clone());
        return;
    };
    let free: Vec<usize> = devices
        .iter()
        .copied()
        .filter(|&v| !covered[v] && v != first)
        .collect();
    let max_size = b.entries.iter().map(|e| e.devices.len()).max().unwrap_or(1);
    for extra in 0..max_size {
        for rest in subsets(&free, extra) {
            let mut set = vec![first];
            set.extend(rest);
            for e in &b.entries {
                if e.devices.len() != set.len() {
                    continue;
                }
                for perm in permutations(&set) {
                    if entry_matches(c, idx, e, &perm) {
                        for &v in &perm {
                            covered[v] = true;
                        }
                        chosen.push(Part {
                            entry: e.id,
                            devices: perm.clone(),
                        });
                        enumerate_rec(c, idx, b, devices, covered, chosen, out);
                        chosen.pop();
                        for &v in &perm {
                            covered[v] = false;
                        }
                    }
                }
            }
        }
    }
}

/// Checks `nodes[i]` against entry device `i` using only DAG adjacency.
fn entry_matches(
    c: &DeviceDag,
    idx: &DagIndex,
    e: &crate::basis::BasisEntry,
    nodes: &[usize],
) -> bool {
    for (i, d) in e.devices.iter().enumerate() {
        match c.nodes[nodes[i]].device() {
            Some(dev) if dev.kind == d.kind => {}
            _ => return false,
        }
    }
    let internal = e.internal_edges();
    for i in 0..nodes.len() {
        for k in 0..nodes.len() {
            let has = idx.succs[nodes[i]].contains(&nodes[k]);
            if has != internal.contains(&(i, k)) {
                return false;
            }
        }
    }
    for &(i, k) in &internal {
        if idx.succs[nodes[i]] != [nodes[k]] || idx.preds[nodes[k]] != [nodes[i]] {
            return false;
        }
    }
    let share = |t: Terminal, reads: bool| -> bool {
        let group: Vec<usize> = (0..nodes.len())
            .filter(|&i| {
                if reads {
                    e.devices[i].reads == t
                } else {
                    e.devices[i].drives == t
                }
            })
            .collect();
        group.windows(2).all(|w| {
            if reads {
                idx.preds[nodes[w[0]]] == idx.preds[nodes[w[1]]]
            } else {
                idx.succs[nodes[w[0]]] == idx.succs[nodes[w[1]]]
            }
        })
    };
    share(Terminal::Head, true) && share(Terminal::Tail, false)
}

fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        for mut rest in subsets(&items[i + 1..], k - 1) {
            rest.insert(0, x);
            out.push(rest);
        }
    }
    out
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}
