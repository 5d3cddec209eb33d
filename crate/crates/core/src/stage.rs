// SPDX-License-Identifier: Apache-2.0

//! Electrical view of a circuit: stage nodes joined by device elements.

use std::collections::BTreeMap;
use std::fmt;

use crate::circuit::{
    canonicalize, find_main_path, topo_order, validate_circuit, DagIndex, DagNode, DeviceDag,
    DeviceInstance, DeviceKind, Direction, NodeRole, Rule,
};
use crate::error::{CktError, Result};

/// An electrical node. `Junction` nodes are the private midpoints of
/// series connections; they are not amplifier stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageNode {
    In,
    Stage(usize),
    Out,
    Junction(usize),
    Gnd,
}

impl fmt::Display for StageNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageNode::In => write!(f, "in"),
            StageNode::Stage(k) => write!(f, "n{k}"),
            StageNode::Out => write!(f, "out"),
            StageNode::Junction(k) => write!(f, "x{k}"),
            StageNode::Gnd => write!(f, "0"),
        }
    }
}

impl StageNode {
    pub fn parse(s: &str) -> Option<StageNode> {
        match s {
            "in" => Some(StageNode::In),
            "out" => Some(StageNode::Out),
            "0" => Some(StageNode::Gnd),
            _ => {
                if let Some(k) = s.strip_prefix('n') {
                    k.parse().ok().filter(|&k| k > 0).map(StageNode::Stage)
                } else if let Some(k) = s.strip_prefix('x') {
                    k.parse().ok().map(StageNode::Junction)
                } else {
                    None
                }
            }
        }
    }
}

/// One device placed between two stage nodes. `from -> to` follows the
/// unified feed-forward orientation: a feedback Gm senses `to` and drives
/// `from`; a forward Gm senses `from` and drives `to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageElement {
    pub device: DeviceInstance,
    pub from: StageNode,
    pub to: StageNode,
}

impl StageElement {
    /// (sensing node, driven node) for a Gm element.
    pub fn gm_terminals(&self) -> Option<(StageNode, StageNode)> {
        match self.device.kind {
            DeviceKind::Gm {
                direction: Direction::Feedforward,
                ..
            } => Some((self.from, self.to)),
            DeviceKind::Gm {
                direction: Direction::Feedback,
                ..
            } => Some((self.to, self.from)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageGraph {
    pub id: u64,
    /// Number of amplifier stages N; stage nodes are In, S1..S(N-1), Out.
    pub stage_count: usize,
    /// Number of private series junctions.
    pub junction_count: usize,
    pub elements: Vec<StageElement>,
}

impl StageGraph {
    /// Ordered stage nodes: In, S1..S(N-1), Out, junctions, Gnd.
    pub fn stage_nodes(&self) -> Vec<StageNode> {
        let mut v = vec![StageNode::In];
        v.extend((1..self.stage_count).map(StageNode::Stage));
        v.push(StageNode::Out);
        v.extend((0..self.junction_count).map(StageNode::Junction));
        v.push(StageNode::Gnd);
        v
    }

    /// Index of a non-ground node in the nodal system, `None` for ground.
    pub fn node_index(&self, n: StageNode) -> Option<usize> {
        let n_stage = self.stage_count;
        match n {
            StageNode::In => Some(0),
            StageNode::Stage(k) => Some(k),
            StageNode::Out => Some(n_stage),
            StageNode::Junction(k) => Some(n_stage + 1 + k),
            StageNode::Gnd => None,
        }
    }

    pub fn dim(&self) -> usize {
        self.stage_count + 1 + self.junction_count
    }

    /// Checks node references, device sanity and that no node dangles.
    pub fn check(&self) -> Result<()> {
        if self.stage_count == 0 {
            return Err(CktError::Structural(
                "stage graph needs at least one stage".into(),
            ));
        }
        let mut touched = vec![false; self.dim()];
        for (i, e) in self.elements.iter().enumerate() {
            e.device.check()?;
            for n in [e.from, e.to] {
                match n {
                    StageNode::Stage(k) if k == 0 || k >= self.stage_count => {
                        return Err(CktError::Structural(format!(
                            "element {i}: no stage node {n}"
                        )))
                    }
                    StageNode::Junction(k) if k >= self.junction_count => {
                        return Err(CktError::Structural(format!(
                            "element {i}: no junction {n}"
                        )))
                    }
                    _ => {}
                }
                if let Some(ix) = self.node_index(n) {
                    touched[ix] = true;
                }
            }
            if e.from == e.to {
                return Err(CktError::Structural(format!(
                    "element {i} connects {} to itself",
                    e.from
                )));
            }
        }
        if let Some(ix) = touched.iter().position(|t| !t) {
            let name = self.stage_nodes()[ix];
            return Err(CktError::Structural(format!(
                "stage node {name} is dangling"
            )));
        }
        Ok(())
    }
}

/// The junction each node of a [`DeviceDag`] reads from and drives.
#[derive(Debug, Clone)]
pub struct Junctions {
    pub count: usize,
    /// Junction read by each node (`None` for Input).
    pub reads: Vec<Option<usize>>,
    /// Junction driven by each node (`None` for Output).
    pub drives: Vec<Option<usize>>,
    pub input: usize,
    pub output: usize,
}

impl Junctions {
    /// Recovers electrical junctions from device adjacency. Each junction is
    /// a complete bipartite block between the devices driving it and the
    /// devices reading it; anything else has no junction assignment.
    pub fn reconstruct(g: &DeviceDag, idx: &DagIndex) -> Result<Junctions> {
        let n = idx.len();
        let fail = |msg: String| Err(CktError::Conversion(msg));
        let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
        let mut input = None;
        let mut output = None;
        for v in 0..n {
            match g.nodes[v].role {
                NodeRole::Input => {
                    if !idx.preds[v].is_empty() {
                        return fail("input node has predecessors".into());
                    }
                    input = Some(v);
                }
                _ if idx.preds[v].is_empty() => {
                    return fail(format!(
                        "node {} reads a junction nobody drives",
                        g.nodes[v].id
                    ))
                }
                _ => groups.entry(&idx.preds[v]).or_default().push(v),
            }
            if matches!(g.nodes[v].role, NodeRole::Output) {
                output = Some(v);
            }
        }
        let (Some(input), Some(output)) = (input, output) else {
            return fail("missing input or output node".into());
        };
        let mut reads = vec![None; n];
        let mut drives = vec![None; n];
        for (j, (drivers, readers)) in groups.iter().enumerate() {
            for &r in readers {
                reads[r] = Some(j);
            }
            for &d in drivers.iter() {
                if drives[d].is_some() || idx.succs[d] != *readers {
                    return fail(format!(
                        "node {} has no consistent output junction",
                        g.nodes[d].id
                    ));
                }
                drives[d] = Some(j);
            }
        }
        for (v, d) in drives.iter().enumerate() {
            if v != output && d.is_none() {
                return fail(format!("node {} drives nothing", g.nodes[v].id));
            }
        }
        let jin = drives[input].expect("checked above");
        let jout = reads[output].expect("output has predecessors");
        if jin == jout {
            return fail("input and output share a junction".into());
        }
        Ok(Junctions {
            count: groups.len(),
            reads,
            drives,
            input: jin,
            output: jout,
        })
    }
}

/// Converts a valid circuit into its stage graph. Node order follows the
/// canonical form of `g`, so the result does not depend on `g`'s ids.
pub fn to_stage_graph(g: &DeviceDag) -> Result<StageGraph> {
    let report = validate_circuit(g)?;
    if !report.is_valid_circuit {
        if report.violations == [Rule::StageAssignment] {
            return Err(CktError::Conversion(
                "no consistent stage assignment".into(),
            ));
        }
        return Err(CktError::InvalidCircuit(report.violations));
    }
    let (c, _) = canonicalize(g)?;
    let idx = c.index()?;
    let order = topo_order(&idx.succs, &idx.preds)?;
    let junctions = Junctions::reconstruct(&c, &idx)?;
    let path = find_main_path(&c, &idx, &order)
        .ok_or_else(|| CktError::Conversion("no main path".into()))?;
    let stages = path.len() - 2;

    let mut label: Vec<Option<StageNode>> = vec![None; junctions.count];
    label[junctions.input] = Some(StageNode::In);
    label[junctions.output] = Some(StageNode::Out);
    for (k, &v) in path[1..path.len() - 2].iter().enumerate() {
        let j = junctions.drives[v].expect("main-path stage drives a junction");
        label[j] = Some(StageNode::Stage(k + 1));
    }
    let mut next = 0;
    let mut elements = Vec::with_capacity(c.device_count());
    for v in 0..idx.len() {
        let NodeRole::Device(d) = c.nodes[v].role else {
            continue;
        };
        let mut name = |j: usize| {
            *label[j].get_or_insert_with(|| {
                next += 1;
                StageNode::Junction(next - 1)
            })
        };
        let from = name(junctions.reads[v].expect("device reads a junction"));
        let to = name(junctions.drives[v].expect("device drives a junction"));
        elements.push(StageElement {
            device: d,
            from,
            to,
        });
    }
    Ok(StageGraph {
        id: g.id,
        stage_count: stages,
        junction_count: next,
        elements,
    })
}

/// Rebuilds the device graph (canonical form) from a stage graph.
pub fn from_stage_graph(s: &StageGraph) -> Result<DeviceDag> {
    s.check()?;
    if s.elements
        .iter()
        .any(|e| e.from == StageNode::Gnd || e.to == StageNode::Gnd)
    {
        return Err(CktError::Conversion(
            "elements tied to ground have no device-graph form".into(),
        ));
    }
    let m = s.elements.len();
    let mut nodes = Vec::with_capacity(m + 2);
    nodes.push(DagNode {
        id: 0,
        role: NodeRole::Input,
    });
    for (i, e) in s.elements.iter().enumerate() {
        nodes.push(DagNode {
            id: i as u32 + 1,
            role: NodeRole::Device(e.device),
        });
    }
    let out_id = m as u32 + 1;
    nodes.push(DagNode {
        id: out_id,
        role: NodeRole::Output,
    });
    let mut edges = Vec::new();
    for (i, a) in s.elements.iter().enumerate() {
        if a.from == StageNode::In {
            edges.push((0, i as u32 + 1));
        }
        if a.to == StageNode::Out {
            edges.push((i as u32 + 1, out_id));
        }
        for (k, b) in s.elements.iter().enumerate() {
            if a.to == b.from {
                edges.push((i as u32 + 1, k as u32 + 1));
            }
        }
    }
    let dag = DeviceDag {
        id: s.id,
        stage_count: s.stage_count,
        nodes,
        edges,
    };
    Ok(canonicalize(&dag)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{dag_from_parts, DeviceInstance, Polarity};

    fn gm() -> NodeRole {
        NodeRole::Device(DeviceInstance::gm(
            Polarity::Positive,
            Direction::Feedforward,
            1e-3,
            1e6,
            1e-13,
        ))
    }

    fn three_stage_with_miller() -> DeviceDag {
        // In -> g1 -> S1 -> g2 -> S2 -> g3 -> Out, C between S1 and S2
        dag_from_parts(
            7,
            3,
            &[
                NodeRole::Input,
                gm(),
                gm(),
                gm(),
                NodeRole::Device(DeviceInstance::capacitor(1e-13)),
                NodeRole::Output,
            ],
            &[(0, 1), (1, 2), (1, 4), (2, 3), (4, 3), (3, 5)],
        )
    }

    #[test]
    fn three_stage_mapping_has_five_nodes_four_elements() {
        let s = to_stage_graph(&three_stage_with_miller()).unwrap();
        assert_eq!(s.stage_nodes().len(), 5);
        assert_eq!(s.elements.len(), 4);
        assert_eq!(s.junction_count, 0);
        let cap = s
            .elements
            .iter()
            .find(|e| e.device.kind == DeviceKind::C)
            .unwrap();
        assert_eq!(
            (cap.from, cap.to),
            (StageNode::Stage(1), StageNode::Stage(2))
        );
    }

    #[test]
    fn main_path_only_two_stage() {
        let g = dag_from_parts(
            0,
            2,
            &[NodeRole::Input, gm(), gm(), NodeRole::Output],
            &[(0, 1), (1, 2), (2, 3)],
        );
        let s = to_stage_graph(&g).unwrap();
        assert_eq!(s.elements.len(), 2);
        assert_eq!(
            (s.elements[0].from, s.elements[0].to),
            (StageNode::In, StageNode::Stage(1))
        );
        assert_eq!(
            (s.elements[1].from, s.elements[1].to),
            (StageNode::Stage(1), StageNode::Out)
        );
    }

    #[test]
    fn round_trip_matches_canonical_form() {
        let g = three_stage_with_miller();
        let back = from_stage_graph(&to_stage_graph(&g).unwrap()).unwrap();
        assert_eq!(back, canonicalize(&g).unwrap().0);
    }

    #[test]
    fn inconsistent_adjacency_is_a_conversion_error() {
        // g1 feeds g2 and the cap, but the cap's reader set differs from g2's.
        let g = dag_from_parts(
            0,
            2,
            &[
                NodeRole::Input,
                gm(),
                gm(),
                NodeRole::Device(DeviceInstance::resistor(1e6)),
                NodeRole::Output,
            ],
            &[(0, 1), (0, 3), (1, 2), (3, 2), (1, 4), (2, 4), (3, 4)],
        );
        let r = validate_circuit(&g).unwrap();
        assert_eq!(r.violations, vec![Rule::StageAssignment]);
        assert!(matches!(to_stage_graph(&g), Err(CktError::Conversion(_))));
    }

    #[test]
    fn dangling_stage_node_rejected() {
        let s = StageGraph {
            id: 0,
            stage_count: 2,
            junction_count: 0,
            elements: vec![StageElement {
                device: DeviceInstance::resistor(1e6),
                from: StageNode::In,
                to: StageNode::Out,
            }],
        };
        assert!(matches!(s.check(), Err(CktError::Structural(_))));
    }

    #[test]
    fn node_names_parse_back() {
        for n in [
            StageNode::In,
            StageNode::Out,
            StageNode::Gnd,
            StageNode::Stage(2),
            StageNode::Junction(0),
        ] {
            assert_eq!(StageNode::parse(&n.to_string()), Some(n));
        }
        assert_eq!(StageNode::parse("n0"), None);
    }
}
