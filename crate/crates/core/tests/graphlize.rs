// SPDX-License-Identifier: Apache-2.0

mod common;

use std::cmp::Reverse;

use cktgnn::basis::{build_basis, build_default_basis, PassiveOrder, SubgraphBasis};
use cktgnn::circuit::{canonicalize, topo_order, validate_circuit, DeviceDag};
use cktgnn::graphlize::{
    degraphlize, enumerate_decompositions, graphlize, Decomposition, TNodeRole,
};
use proptest::prelude::*;

use common::sample_circuit;

/// Brute-force choice: fewest parts, then the largest descending order
/// tuple, then the smallest partner vector over device positions.
fn brute_force_best(g: &DeviceDag, b: &SubgraphBasis) -> Decomposition {
    let all = enumerate_decompositions(g, b).unwrap();
    assert!(!all.is_empty());
    let key = |d: &Decomposition| {
        let mut orders: Vec<usize> = d.parts.iter().map(|p| b.order(p.entry)).collect();
        orders.sort_unstable_by(|a, c| c.cmp(a));
        let n = d
            .parts
            .iter()
            .flat_map(|p| p.devices.iter())
            .max()
            .map_or(0, |m| m + 1);
        let mut partner = vec![usize::MAX; n];
        for p in &d.parts {
            for &v in &p.devices {
                partner[v] = p.devices.iter().copied().find(|&x| x != v).unwrap_or(v);
            }
        }
        let partner: Vec<usize> = partner.into_iter().filter(|&x| x != usize::MAX).collect();
        (d.parts.len(), Reverse(orders), partner)
    };
    all.into_iter().min_by(|a, c| key(a).cmp(&key(c))).unwrap()
}

fn check_round_trip(g: &DeviceDag, b: &SubgraphBasis) {
    let t = graphlize(g, b).unwrap();
    let back = degraphlize(&t, b).unwrap();
    let (cg, hg) = canonicalize(g).unwrap();
    let (cb, hb) = canonicalize(&back).unwrap();
    assert_eq!(hg, hb);
    assert_eq!(cg, cb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn degraphlize_inverts_graphlize(seed in any::<u64>()) {
        let b = build_default_basis();
        check_round_trip(&sample_circuit(seed, &b), &b);
    }

    #[test]
    fn graphlize_matches_brute_force(seed in any::<u64>()) {
        let b = build_default_basis();
        let g = sample_circuit(seed, &b);
        prop_assume!(g.device_count() <= 12);
        let best = brute_force_best(&g, &b);
        prop_assert_eq!(graphlize(&g, &b).unwrap(), best.dag);
    }

    #[test]
    fn passive_order_swap_is_invisible(seed in any::<u64>()) {
        let b = build_default_basis();
        let swapped = build_basis(PassiveOrder::CAboveR);
        let g = sample_circuit(seed, &b);
        prop_assert_eq!(graphlize(&g, &b).unwrap(), graphlize(&g, &swapped).unwrap());
    }

    #[test]
    fn sub_nodes_follow_a_topological_order(seed in any::<u64>()) {
        let b = build_default_basis();
        let t = graphlize(&sample_circuit(seed, &b), &b).unwrap();
        let (preds, succs) = t.adjacency().unwrap();
        let order = topo_order(&succs, &preds).unwrap();
        prop_assert_eq!(order, (0..t.nodes.len()).collect::<Vec<_>>());
        prop_assert!(matches!(t.nodes[0].role, TNodeRole::Input));
        prop_assert!(matches!(t.nodes.last().unwrap().role, TNodeRole::Output));
    }

    #[test]
    fn transformed_params_match_entry_slots(seed in any::<u64>()) {
        let b = build_default_basis();
        let t = graphlize(&sample_circuit(seed, &b), &b).unwrap();
        for n in &t.nodes {
            if let TNodeRole::Sub { entry, params } = &n.role {
                prop_assert_eq!(params.len(), b.entry(*entry).unwrap().slot_count());
            }
        }
    }

    #[test]
    fn degraphlized_circuits_stay_valid(seed in any::<u64>()) {
        let b = build_default_basis();
        let t = graphlize(&sample_circuit(seed, &b), &b).unwrap();
        let back = degraphlize(&t, &b).unwrap();
        prop_assert!(validate_circuit(&back).unwrap().is_valid_circuit);
    }
}

#[test]
fn round_trip_over_a_thousand_circuits() {
    let b = build_default_basis();
    for seed in 0..1000 {
        check_round_trip(&sample_circuit(seed, &b), &b);
    }
}

#[test]
fn fewer_parts_always_wins() {
    let b = build_default_basis();
    for seed in 0..100 {
        let g = sample_circuit(seed, &b);
        if g.device_count() > 12 {
            continue;
        }
        let fewest = enumerate_decompositions(&g, &b)
            .unwrap()
            .iter()
            .map(|d| d.parts.len())
            .min()
            .unwrap();
        assert_eq!(graphlize(&g, &b).unwrap().entry_sequence().len(), fewest);
    }
}

#[test]
fn basis_doc_matches_the_catalog() {
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/basis.md"))
        .unwrap();
    assert!(doc.ends_with(&build_default_basis().catalog_markdown()));
}
