// SPDX-License-Identifier: Apache-2.0

mod common;

use cktgnn::basis::build_default_basis;
use cktgnn::generator::{
    train, DecodeMode, Example, ModelKind, NodeSeq, TrainConfig, TrainState, Vae, VaeConfig,
};
use cktgnn::graphlize::graphlize;
use cktgnn::nn::{Grads, ParamStore, Tape};
use cktgnn::CktError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::gradcheck::check_params;
use common::sample_circuit;

fn small(kind: ModelKind) -> VaeConfig {
    VaeConfig {
        kind,
        latent: 8,
        ..Default::default()
    }
}

fn examples(n: u64) -> Vec<Example> {
    let b = build_default_basis();
    (0..n)
        .map(|s| Example::new(&sample_circuit(s, &b), &b).unwrap())
        .collect()
}

fn loss_and_grads(
    vae: &Vae,
    ex: &Example,
    eps: &[f64],
    store: &ParamStore,
) -> cktgnn::Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let (l, _) = vae.loss(&mut tape, store, ex, eps)?;
    let g = tape.backward(l);
    let mut grads = Grads::zeros_like(store);
    tape.accumulate_param_grads(&g, &mut grads);
    Ok((tape.scalar(l), grads))
}

#[test]
fn loss_gradients_match_central_differences() {
    let b = build_default_basis();
    let mut seed = 0;
    let g = loop {
        let g = sample_circuit(seed, &b);
        seed += 1;
        if graphlize(&g, &b).unwrap().entry_sequence().len() == 3 {
            break g;
        }
    };
    let ex = Example::new(&g, &b).unwrap();
    for kind in [ModelKind::Cktgnn, ModelKind::Baseline] {
        let vae = Vae::new(small(kind), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = vae.draw_eps(&mut rng);
        let c = check_params(&vae.store, 200, 1e-5, 1e-4, &mut rng, |s| {
            loss_and_grads(&vae, &ex, &eps, s)
        })
        .unwrap();
        assert!(c.worst < 1e-4, "{kind:?}: {c:?}");
    }
}

#[test]
fn loss_parts_add_up() {
    let ex = &examples(1)[0];
    let vae = Vae::new(small(ModelKind::Cktgnn), 0).unwrap();
    let eps = vec![0.0; 8];
    let mut tape = Tape::new();
    let (_, p) = vae.loss(&mut tape, &vae.store, ex, &eps).unwrap();
    let sum = p.recon_type + p.recon_edge + p.recon_param + vae.cfg.kl_weight * p.kl;
    assert!((p.total - sum).abs() < 1e-12);
    assert!(p.kl >= 0.0);
}

#[test]
fn immediate_stop_decodes_the_bare_chain() {
    let mut vae = Vae::new(small(ModelKind::Cktgnn), 0).unwrap();
    let stop = vae.vocab.types();
    let id = vae.store.id("dec.type.1.b").unwrap();
    vae.store.value_mut(id).data[stop] = 1e3;
    let lv = vae.store.id("vae.logvar.b").unwrap();
    vae.store.value_mut(lv).data.fill(-20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = vae.decode(&[0.0; 8], DecodeMode::Sample, &mut rng).unwrap();
    assert!(d.seq.types.is_empty());
    assert!(!d.truncated);
    let c = vae.realize(&d.seq);
    assert_eq!(c.dag.as_ref().map(|g| g.nodes.len()), Some(2));
    assert!(!c.is_valid_circuit());
}

#[test]
fn greedy_decoding_is_deterministic() {
    for kind in [ModelKind::Cktgnn, ModelKind::Baseline] {
        let vae = Vae::new(small(kind), 3).unwrap();
        let z: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let a = vae
            .decode(&z, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = vae
            .decode(&z, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(a.seq, b.seq);
        assert!(a.seq.len() <= vae.cfg.max_nodes + 1);
    }
}

#[test]
fn decode_rejects_wrong_latent_width() {
    let vae = Vae::new(small(ModelKind::Cktgnn), 0).unwrap();
    let err = vae
        .decode(
            &[0.0; 3],
            DecodeMode::Greedy,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
    assert!(matches!(err, CktError::Shape { .. }));
}

#[test]
fn sequences_round_trip_through_both_views() {
    for ex in examples(30) {
        let vae = Vae::new(small(ModelKind::Cktgnn), 0).unwrap();
        let t = ex
            .seq(ModelKind::Cktgnn)
            .to_transformed(&vae.vocab)
            .unwrap();
        assert_eq!(
            NodeSeq::from_transformed(&t).unwrap(),
            *ex.seq(ModelKind::Cktgnn)
        );
        let g = ex.seq(ModelKind::Baseline).to_device_dag().unwrap();
        assert_eq!(
            cktgnn::circuit::topology_hash(&g).unwrap(),
            cktgnn::circuit::topology_hash(&ex.dag).unwrap()
        );
    }
}

#[test]
fn checkpoint_round_trip_keeps_latents() {
    let ex = &examples(1)[0];
    let vae = Vae::new(small(ModelKind::Baseline), 9).unwrap();
    let mut bytes = Vec::new();
    vae.save(&mut bytes, None).unwrap();
    let (back, state) = Vae::load(&mut bytes.as_slice()).unwrap();
    assert!(state.is_none());
    assert_eq!(back.cfg, vae.cfg);
    assert_eq!(back.latent_mean(ex).unwrap(), vae.latent_mean(ex).unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = examples(12);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 4,
        lr: 1e-3,
        seed: 5,
        ..Default::default()
    };
    let mut straight = Vae::new(small(ModelKind::Cktgnn), 1).unwrap();
    let mut st = TrainState::new(&cfg);
    train(&mut straight, &data, &cfg, &mut st, |_, _, _| Ok(())).unwrap();

    let mut first = Vae::new(small(ModelKind::Cktgnn), 1).unwrap();
    let half = TrainConfig { epochs: 2, ..cfg };
    let mut st2 = TrainState::new(&cfg);
    train(&mut first, &data, &half, &mut st2, |_, _, _| Ok(())).unwrap();
    let mut bytes = Vec::new();
    first.save(&mut bytes, Some(&st2)).unwrap();
    let (mut resumed, state) = Vae::load(&mut bytes.as_slice()).unwrap();
    let mut state = state.unwrap();
    assert_eq!(state.epochs_done, 2);
    train(&mut resumed, &data, &cfg, &mut state, |_, _, _| Ok(())).unwrap();

    assert_eq!(state.history, st.history);
    for id in straight.store.ids() {
        assert_eq!(straight.store.value(id), resumed.store.value(id));
    }
}

#[test]
fn small_batch_training_memorizes_a_few_circuits() {
    let data = examples(4);
    let mut vae = Vae::new(
        VaeConfig {
            kl_weight: 0.0,
            ..small(ModelKind::Cktgnn)
        },
        2,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 600,
        batch_size: 1,
        lr: 1e-3,
        patience: 1000,
        ..Default::default()
    };
    let mut st = TrainState::new(&cfg);
    train(&mut vae, &data, &cfg, &mut st, |_, _, _| Ok(())).unwrap();
    let first = st.history[0];
    let last = *st.history.last().unwrap();
    assert!(last < 0.2 * first, "loss {first} -> {last}");
}

#[test]
fn training_rejects_a_batch_larger_than_the_data() {
    let data = examples(2);
    let mut vae = Vae::new(small(ModelKind::Cktgnn), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 3,
        ..Default::default()
    };
    let mut st = TrainState::new(&cfg);
    assert!(train(&mut vae, &data, &cfg, &mut st, |_, _, _| Ok(())).is_err());
}
