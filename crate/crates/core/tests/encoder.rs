// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::BTreeMap;

use cktgnn::basis::{build_default_basis, BasisEntry};
use cktgnn::circuit::{topology_hash, DeviceDag, DeviceInstance, DeviceKind, NodeRole};
use cktgnn::encoder::{BaselineEncoder, CktGnnEncoder, EncoderConfig, InnerGnn};
use cktgnn::graphlize::{graphlize, TNodeRole};
use cktgnn::nn::{Grads, ParamStore, Tape, Tensor};
use cktgnn::stage::{from_stage_graph, StageElement, StageGraph, StageNode};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::gradcheck::{check_params, project};
use common::sample_circuit;

/// Same circuit with shuffled node storage and fresh node ids.
fn relabel(g: &DeviceDag, seed: u64) -> DeviceDag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = (0..g.nodes.len() as u32).map(|i| 100 + 3 * i).collect();
    ids.shuffle(&mut rng);
    let map: BTreeMap<u32, u32> = g.nodes.iter().map(|n| n.id).zip(ids).collect();
    let mut nodes = g.nodes.clone();
    for n in &mut nodes {
        n.id = map[&n.id];
    }
    nodes.shuffle(&mut rng);
    let mut edges: Vec<(u32, u32)> = g.edges.iter().map(|(a, b)| (map[a], map[b])).collect();
    edges.shuffle(&mut rng);
    DeviceDag {
        id: g.id,
        stage_count: g.stage_count,
        nodes,
        edges,
    }
}

/// Every device at the geometric centre of its range so that only
/// topology differs between circuits.
fn flatten_values(g: &DeviceDag) -> DeviceDag {
    let mut h = g.clone();
    for n in &mut h.nodes {
        if let NodeRole::Device(d) = &mut n.role {
            let (lo, hi) = d.kind.slots()[0].range();
            d.value = (lo * hi).sqrt();
            if let Some(l) = &mut d.load {
                l.r = 1e6;
                l.c = 1e-13;
            }
        }
    }
    h
}

fn ckt_encoder(seed: u64) -> (ParamStore, CktGnnEncoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = CktGnnEncoder::new(&mut store, "enc", EncoderConfig::default(), &mut rng).unwrap();
    (store, enc)
}

fn ckt_embed(store: &ParamStore, enc: &CktGnnEncoder, g: &DeviceDag) -> Vec<f64> {
    let b = build_default_basis();
    let mut tape = Tape::new();
    let z = enc.encode(&mut tape, store, g, &b).unwrap();
    tape.value(z).data.clone()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cktgnn_embedding_ignores_node_labels(seed in any::<u64>(), perm in any::<u64>()) {
        let b = build_default_basis();
        let g = sample_circuit(seed, &b);
        let (store, enc) = ckt_encoder(seed);
        let d = max_abs_diff(&ckt_embed(&store, &enc, &g), &ckt_embed(&store, &enc, &relabel(&g, perm)));
        prop_assert!(d < 1e-12, "difference {d}");
    }

    #[test]
    fn baseline_embedding_ignores_node_labels(seed in any::<u64>(), perm in any::<u64>()) {
        let b = build_default_basis();
        let g = sample_circuit(seed, &b);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = BaselineEncoder::new(&mut store, "enc", EncoderConfig::default(), &mut rng).unwrap();
        let embed = |g: &DeviceDag| {
            let mut tape = Tape::new();
            let z = enc.encode(&mut tape, &store, g).unwrap();
            tape.value(z).data.clone()
        };
        let d = max_abs_diff(&embed(&g), &embed(&relabel(&g, perm)));
        prop_assert!(d < 1e-9, "difference {d}");
    }
}

#[test]
fn distinct_topologies_get_distinct_embeddings() {
    let b = build_default_basis();
    let mut seen = BTreeMap::new();
    let mut seed = 0;
    while seen.len() < 100 {
        let g = sample_circuit(seed, &b);
        seed += 1;
        seen.entry(topology_hash(&g).unwrap())
            .or_insert_with(|| flatten_values(&g));
    }
    let (store, enc) = ckt_encoder(11);
    let zs: Vec<Vec<f64>> = seen.values().map(|g| ckt_embed(&store, &enc, g)).collect();
    let mut collided = 0;
    for i in 0..zs.len() {
        if (0..i).any(|j| max_abs_diff(&zs[i], &zs[j]) < 1e-9) {
            collided += 1;
        }
    }
    assert!(
        collided <= 1,
        "{collided} of 100 topologies share an embedding"
    );
}

#[test]
fn embedding_width_is_outer_hidden() {
    let b = build_default_basis();
    let (store, enc) = ckt_encoder(2);
    let z = ckt_embed(&store, &enc, &sample_circuit(5, &b));
    assert_eq!(z.len(), EncoderConfig::default().outer_hidden);
    assert!(z.iter().all(|v| v.is_finite()));
}

#[test]
fn device_values_change_the_embedding() {
    let b = build_default_basis();
    let g = sample_circuit(9, &b);
    let mut h = g.clone();
    for n in &mut h.nodes {
        if let NodeRole::Device(d) = &mut n.role {
            d.value *= 0.8;
        }
    }
    let (store, enc) = ckt_encoder(3);
    assert!(max_abs_diff(&ckt_embed(&store, &enc, &g), &ckt_embed(&store, &enc, &h)) > 1e-9);
}

fn inner_gnn(seed: u64) -> (ParamStore, InnerGnn) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gnn = InnerGnn::new(&mut store, "inner", &EncoderConfig::default(), &mut rng).unwrap();
    (store, gnn)
}

fn inner_embed(store: &ParamStore, gnn: &InnerGnn, entry: &BasisEntry, params: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let h = gnn.embed(&mut tape, store, entry, params).unwrap();
    tape.value(h).data.clone()
}

/// Raw slot values for one device, drawn uniformly in normalized space.
fn random_slots(kind: DeviceKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    kind.slots()
        .iter()
        .map(|s| s.denormalize(rng.random_range(0.05..0.95)))
        .collect()
}

/// The entry with its two devices stored in the opposite order, and the
/// parameter vector permuted to match.
fn swap_devices(entry: &BasisEntry, params: &[f64]) -> (BasisEntry, Vec<f64>) {
    let n0 = entry.devices[0].kind.slots().len();
    let mut e = entry.clone();
    e.devices.reverse();
    let mut p = params[n0..].to_vec();
    p.extend_from_slice(&params[..n0]);
    (e, p)
}

#[test]
fn device_order_inside_an_entry_is_invisible() {
    let b = build_default_basis();
    let (par, _) = b
        .parallel_entry(DeviceKind::GM_POS_FWD, DeviceKind::R)
        .unwrap();
    let ser = b
        .series_entry(DeviceKind::GM_POS_FWD, DeviceKind::R)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for draw in 0..50 {
        let (store, gnn) = inner_gnn(draw);
        for id in [par, ser] {
            let entry = b.entry(id).unwrap();
            let params: Vec<f64> = entry
                .devices
                .iter()
                .flat_map(|d| random_slots(d.kind, &mut rng))
                .collect();
            let (swapped, p) = swap_devices(entry, &params);
            let d = max_abs_diff(
                &inner_embed(&store, &gnn, entry, &params),
                &inner_embed(&store, &gnn, &swapped, &p),
            );
            assert!(d < 1e-12, "entry {id}: difference {d}");
        }
    }
}

#[test]
fn parallel_and_series_entries_are_distinguished() {
    let b = build_default_basis();
    let (par, gm_first) = b
        .parallel_entry(DeviceKind::GM_POS_FWD, DeviceKind::R)
        .unwrap();
    let ser = b
        .series_entry(DeviceKind::GM_POS_FWD, DeviceKind::R)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut differ = 0;
    for draw in 0..100 {
        let (store, gnn) = inner_gnn(1000 + draw);
        let gm = random_slots(DeviceKind::GM_POS_FWD, &mut rng);
        let r = random_slots(DeviceKind::R, &mut rng);
        let gm_r = [gm.clone(), r.clone()].concat();
        let par_params = if gm_first {
            gm_r.clone()
        } else {
            [r, gm].concat()
        };
        let hp = inner_embed(&store, &gnn, b.entry(par).unwrap(), &par_params);
        let hs = inner_embed(&store, &gnn, b.entry(ser).unwrap(), &gm_r);
        if max_abs_diff(&hp, &hs) > 1e-9 {
            differ += 1;
        }
    }
    assert!(differ >= 99, "only {differ} of 100 weight draws differ");
}

fn chain_element(kind: DeviceKind, from: StageNode, to: StageNode) -> StageElement {
    let device = match kind {
        DeviceKind::R => DeviceInstance::resistor(1e6),
        DeviceKind::C => DeviceInstance::capacitor(1e-13),
        _ => DeviceInstance::from_slots(kind, &[1e-3, 1e6, 1e-13]).unwrap(),
    };
    StageElement { device, from, to }
}

/// Four-stage Gm chain plus one resistor from `r_from` to the output.
fn chain_with_resistor(r_from: StageNode) -> DeviceDag {
    let path = [
        StageNode::In,
        StageNode::Stage(1),
        StageNode::Stage(2),
        StageNode::Stage(3),
        StageNode::Out,
    ];
    let mut elements: Vec<StageElement> = path
        .windows(2)
        .map(|w| chain_element(DeviceKind::GM_POS_FWD, w[0], w[1]))
        .collect();
    elements.push(chain_element(DeviceKind::R, r_from, StageNode::Out));
    from_stage_graph(&StageGraph {
        id: 0,
        stage_count: 4,
        junction_count: 0,
        elements,
    })
    .unwrap()
}

fn node_type(role: &NodeRole) -> usize {
    match role {
        NodeRole::Device(d) => d.kind.index(),
        NodeRole::Input => 6,
        NodeRole::Output => 7,
    }
}

/// Sorted (type, predecessor types, successor types) of every node.
fn one_hop_signature(g: &DeviceDag) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
    let ty: BTreeMap<u32, usize> = g.nodes.iter().map(|n| (n.id, node_type(&n.role))).collect();
    let mut sig: Vec<_> = g
        .nodes
        .iter()
        .map(|n| {
            let mut p: Vec<usize> = g
                .edges
                .iter()
                .filter(|e| e.1 == n.id)
                .map(|e| ty[&e.0])
                .collect();
            let mut s: Vec<usize> = g
                .edges
                .iter()
                .filter(|e| e.0 == n.id)
                .map(|e| ty[&e.1])
                .collect();
            p.sort_unstable();
            s.sort_unstable();
            (ty[&n.id], p, s)
        })
        .collect();
    sig.sort();
    sig
}

/// One round of message passing on device-level nodes with type features,
/// `relu(W [x_v, sum x_pred, sum x_succ] + b)`, sum pooled.
fn one_round_mpnn(g: &DeviceDag, w: &[Vec<f64>], bias: &[f64]) -> Vec<f64> {
    let onehot = |t: usize| {
        let mut v = vec![0.0; 8];
        v[t] = 1.0;
        v
    };
    let ty: BTreeMap<u32, usize> = g.nodes.iter().map(|n| (n.id, node_type(&n.role))).collect();
    let mut out = vec![0.0; bias.len()];
    for n in &g.nodes {
        let mut x = onehot(ty[&n.id]);
        let mut pred = vec![0.0; 8];
        let mut succ = vec![0.0; 8];
        for &(a, c) in &g.edges {
            if c == n.id {
                pred[ty[&a]] += 1.0;
            }
            if a == n.id {
                succ[ty[&c]] += 1.0;
            }
        }
        x.extend(pred);
        x.extend(succ);
        for (o, (row, b)) in out.iter_mut().zip(w.iter().zip(bias)) {
            let a: f64 = row.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() + b;
            *o += a.max(0.0);
        }
    }
    out
}

#[test]
fn two_level_encoder_separates_a_one_hop_equivalent_pair() {
    let across_last = chain_with_resistor(StageNode::Stage(3));
    let bridging = chain_with_resistor(StageNode::Stage(2));
    assert_ne!(
        topology_hash(&across_last).unwrap(),
        topology_hash(&bridging).unwrap()
    );
    assert_eq!(
        one_hop_signature(&across_last),
        one_hop_signature(&bridging)
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut ckt_differ, mut mpnn_ties) = (0, 0);
    for draw in 0..100 {
        let (store, enc) = ckt_encoder(2000 + draw);
        let za = ckt_embed(&store, &enc, &across_last);
        let zb = ckt_embed(&store, &enc, &bridging);
        let norm = za
            .iter()
            .zip(&zb)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > 1e-6 {
            ckt_differ += 1;
        }
        let w: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..24).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let bias: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ma = one_round_mpnn(&across_last, &w, &bias);
        let mb = one_round_mpnn(&bridging, &w, &bias);
        if max_abs_diff(&ma, &mb) < 1e-12 {
            mpnn_ties += 1;
        }
    }
    assert!(ckt_differ >= 99, "only {ckt_differ} of 100 draws differ");
    assert_eq!(mpnn_ties, 100);
}

#[test]
fn tie_order_in_the_outer_pass_is_invisible() {
    let b = build_default_basis();
    for seed in 0..50 {
        let t = graphlize(&sample_circuit(seed, &b), &b).unwrap();
        let (store, enc) = ckt_encoder(seed);
        let embed = |t: &cktgnn::graphlize::TransformedDag| {
            let mut tape = Tape::new();
            let z = enc.encode_transformed(&mut tape, &store, t, &b).unwrap();
            tape.value(z).data.clone()
        };
        let z = embed(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let mut u = t.clone();
            u.nodes.shuffle(&mut rng);
            u.edges.shuffle(&mut rng);
            let d = max_abs_diff(&z, &embed(&u));
            assert!(d < 1e-12, "seed {seed}: difference {d}");
        }
    }
}

#[test]
fn a_value_change_reaches_the_embedding_only_through_its_subgraph() {
    let b = build_default_basis();
    let mut checked = 0;
    for seed in 0..40 {
        let t = graphlize(&sample_circuit(seed, &b), &b).unwrap();
        let subs: Vec<usize> = (0..t.nodes.len())
            .filter(|&i| matches!(t.nodes[i].role, TNodeRole::Sub { .. }))
            .collect();
        if subs.len() < 2 {
            continue;
        }
        let k = subs[seed as usize % subs.len()];
        let mut u = t.clone();
        if let TNodeRole::Sub { params, .. } = &mut u.nodes[k].role {
            params[0] *= 0.9;
        }
        let (store, enc) = ckt_encoder(seed);
        let (preds, succs) = t.adjacency().unwrap();
        let out = t
            .nodes
            .iter()
            .position(|n| matches!(n.role, TNodeRole::Output))
            .unwrap();
        let mut tape = Tape::new();
        let xs = enc.node_inputs(&mut tape, &store, &t, &b).unwrap();
        let ys = enc.node_inputs(&mut tape, &store, &u, &b).unwrap();
        for i in 0..xs.len() {
            let same = tape.value(xs[i]).data == tape.value(ys[i]).data;
            assert_eq!(same, i != k, "seed {seed}: node {i}");
        }
        let z = enc
            .outer
            .run(&mut tape, &store, &xs, &preds, &succs)
            .unwrap()[out];
        let z_changed = enc
            .outer
            .run(&mut tape, &store, &ys, &preds, &succs)
            .unwrap()[out];
        let mut restored = ys.clone();
        restored[k] = xs[k];
        let z_restored = enc
            .outer
            .run(&mut tape, &store, &restored, &preds, &succs)
            .unwrap()[out];
        assert_eq!(tape.value(z).data, tape.value(z_restored).data);
        assert!(max_abs_diff(&tape.value(z).data, &tape.value(z_changed).data) > 1e-12);
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn scalar_head_gradients_match_central_differences() {
    let b = build_default_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..3 {
        let g = sample_circuit(seed, &b);
        let (store, enc) = ckt_encoder(seed);
        let width = EncoderConfig::default().outer_hidden;
        let head = Tensor::row((0..width).map(|_| rng.random_range(-1.0..1.0)).collect());
        let c = check_params(&store, 100, 1e-5, 1e-7, &mut rng, |s| {
            let mut tape = Tape::new();
            let z = enc.encode(&mut tape, s, &g, &b)?;
            let l = project(&mut tape, z, &head)?;
            let grads = tape.backward(l);
            let mut out = Grads::zeros_like(s);
            tape.accumulate_param_grads(&grads, &mut out);
            Ok((tape.scalar(l), out))
        })
        .unwrap();
        assert!(c.worst < 1e-4, "seed {seed}: {c:?}");
    }
}
