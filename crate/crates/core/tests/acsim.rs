// SPDX-License-Identifier: Apache-2.0

mod common;

use std::f64::consts::PI;

use cktgnn::acsim::{
    build_mna, compute_fom, extract_specs, simulate, transfer_at, FomWeights, SweepConfig,
};
use cktgnn::basis::build_default_basis;
use cktgnn::circuit::{DeviceInstance, Direction, Polarity};
use cktgnn::dataset::{generate_records, header_for, load_dataset, write_dataset, SamplerConfig};
use cktgnn::netlist::{export_netlist, parse_netlist};
use cktgnn::stage::{from_stage_graph, to_stage_graph, StageElement, StageGraph, StageNode};
use num_complex::Complex64;
use proptest::prelude::*;

fn gm(g: f64, r: f64, c: f64, from: StageNode, to: StageNode) -> StageElement {
    StageElement {
        device: DeviceInstance::gm(Polarity::Positive, Direction::Feedforward, g, r, c),
        from,
        to,
    }
}

fn single_pole() -> StageGraph {
    StageGraph {
        id: 0,
        stage_count: 1,
        junction_count: 0,
        elements: vec![gm(1e-3, 1e6, 1e-12, StageNode::In, StageNode::Out)],
    }
}

#[test]
fn single_pole_matches_closed_form() {
    let s = extract_specs(&build_mna(&single_pole()).unwrap(), &SweepConfig::default());
    assert!(s.converged);
    assert!((s.gain_db.unwrap() - 60.0).abs() < 0.01);
    let bw = 1.0 / (2.0 * PI * 1e-6);
    assert!((s.bw_hz.unwrap() - bw).abs() / bw < 1e-3);
    let pm = 180.0 - (1e6f64 - 1.0).sqrt().atan().to_degrees();
    assert!((s.pm_deg.unwrap() - pm).abs() < 0.05, "{:?}", s.pm_deg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cascade_response_matches_closed_form(
        lg1 in -4.0..-2.0f64, lr1 in 4.0..6.0f64, lc1 in -14.0..-12.0f64,
        lg2 in -4.0..-2.0f64, lr2 in 4.0..6.0f64, lc2 in -14.0..-12.0f64,
        lf in 0.0..10.0f64,
    ) {
        let (g1, r1, c1) = (10f64.powf(lg1), 10f64.powf(lr1), 10f64.powf(lc1));
        let (g2, r2, c2) = (10f64.powf(lg2), 10f64.powf(lr2), 10f64.powf(lc2));
        let s = StageGraph {
            id: 0,
            stage_count: 2,
            junction_count: 0,
            elements: vec![
                gm(g1, r1, c1, StageNode::In, StageNode::Stage(1)),
                gm(g2, r2, c2, StageNode::Stage(1), StageNode::Out),
            ],
        };
        let sys = build_mna(&s).unwrap();
        let f = 10f64.powf(lf);
        let w = Complex64::new(0.0, 2.0 * PI * f);
        let want = g1 * r1 * g2 * r2 / ((1.0 + w * r1 * c1) * (1.0 + w * r2 * c2));
        let got = transfer_at(&sys, f).unwrap();
        prop_assert!((got - want).norm() <= 1e-9 * want.norm(), "{got} vs {want}");
    }
}

#[test]
fn sweep_grid_covers_the_decades() {
    let cfg = SweepConfig::default();
    let f = cfg.frequencies();
    assert_eq!(f[0], cfg.f_start_hz);
    assert!((f[f.len() - 1] / cfg.f_stop_hz - 1.0).abs() < 1e-9);
    assert_eq!(f.len(), 12 * cfg.points_per_decade + 1);
}

#[test]
fn fom_uses_the_stated_weights() {
    let s = extract_specs(&build_mna(&single_pole()).unwrap(), &SweepConfig::default());
    let (g, b, p) = s.specs().unwrap();
    let want = g / 20.0 + b.log10() + (1.0 - (p - 60.0).abs() / 60.0).max(0.0);
    assert!((compute_fom(&s, &FomWeights::default()).unwrap() - want).abs() < 1e-12);
}

#[test]
fn single_pole_netlist_golden() {
    let text = export_netlist(&single_pole(), &SweepConfig::default()).unwrap();
    let want = format!(
        "* {} id=0 stages=1 junctions=0\n\
         Gf1 out 0 in 0 -1e-3\n\
         RL1 out 0 1e6\n\
         CL1 out 0 1e-12\n\
         Vin in 0 AC 1\n\
         .ac dec 60 1e0 1e12\n\
         .end\n",
        cktgnn::TOOL_VERSION
    );
    assert_eq!(text, want);
    assert_eq!(parse_netlist(&text).unwrap(), single_pole());
}

#[test]
fn netlists_round_trip_sampled_circuits() {
    let b = build_default_basis();
    let sweep = SweepConfig::default();
    for seed in 0..200 {
        let g = common::sample_circuit(seed, &b);
        let s = to_stage_graph(&g).unwrap();
        let back = parse_netlist(&export_netlist(&s, &sweep).unwrap()).unwrap();
        assert_eq!(back, s);
        let a = simulate(&g, &sweep, &FomWeights::default()).unwrap();
        let c = simulate(
            &from_stage_graph(&back).unwrap(),
            &sweep,
            &FomWeights::default(),
        )
        .unwrap();
        assert_eq!(a, c);
    }
}

#[test]
fn dataset_records_resimulate_to_their_stored_results() {
    let cfg = SamplerConfig {
        seed: 12,
        ..Default::default()
    };
    let sweep = SweepConfig::default();
    let w = FomWeights::default();
    let b = build_default_basis();
    let (recs, _) = generate_records(60, &cfg, &sweep, &w, &b).unwrap();
    for r in &recs {
        assert_eq!(simulate(&r.dag, &sweep, &w).unwrap(), r.sim);
        assert!(r.sim.converged);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &header_for(recs.len(), &cfg, &sweep, &w), &recs).unwrap();
    let (_, back) = load_dataset(&path).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, c) in back.iter().zip(&recs) {
        assert_eq!(a.dag, c.dag);
        assert_eq!(a.fom(), c.fom());
    }
    let (again, _) = generate_records(60, &cfg, &sweep, &w, &b).unwrap();
    assert!(again.iter().zip(&recs).all(|(a, c)| a.dag == c.dag));
}
