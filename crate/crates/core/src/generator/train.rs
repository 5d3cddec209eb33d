// SPDX-License-Identifier: Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DecodeMode, Example, LossParts, Vae};
use crate::error::{CktError, Result};
use crate::nn::{Grads, PlateauSchedule, Sgd, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub patience: usize,
    pub factor: f64,
    /// Trailing window of the moving average fed to the schedule.
    pub smoothing_window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            lr: 1e-4,
            momentum: 0.9,
            patience: 20,
            factor: 0.1,
            smoothing_window: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 || self.smoothing_window == 0 {
            return Err(CktError::Config(
                "batch_size and smoothing_window must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(CktError::Config(
                "lr must be positive and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to continue a run at an epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub schedule: PlateauSchedule,
    /// Mean per-example total loss of each finished epoch.
    pub history: Vec<f64>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut schedule = PlateauSchedule::new(cfg.lr);
        schedule.patience = cfg.patience;
        schedule.factor = cfg.factor;
        TrainState {
            config: *cfg,
            epochs_done: 0,
            schedule,
            history: Vec::new(),
        }
    }
}

/// Per-example mean losses of one epoch and the rate used for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub parts: LossParts,
    pub lr: f64,
}

pub const CURVE_HEADER: &str = "epoch,total,recon_type,recon_edge,recon_param,kl,lr";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, p.total, p.recon_type, p.recon_edge, p.recon_param, p.kl, self.lr
        )
    }
}

/// Trailing moving average with the given window.
pub fn smoothed(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Minibatch SGD on the summed batch loss, continuing from `state` until
/// `cfg.epochs` epochs are done. Each epoch draws its shuffle and noise from
/// a stream keyed by the epoch index, so a resumed run repeats exactly.
pub fn train(
    vae: &mut Vae,
    data: &[Example],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochStats, &Vae, &TrainState) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    cfg.check()?;
    if data.len() < cfg.batch_size {
        return Err(CktError::Config(format!(
            "dataset of {} examples is smaller than the batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let opt = Sgd {
        momentum: cfg.momentum,
    };
    let mut out = Vec::new();
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let lr = state.schedule.lr;
        let mut sum = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::zeros_like(&vae.store);
            for &i in batch {
                let eps = vae.draw_eps(&mut rng);
                let mut tape = Tape::new();
                let (loss, parts) = vae.loss(&mut tape, &vae.store, &data[i], &eps)?;
                if !parts.total.is_finite() {
                    return Err(CktError::Numerical(format!(
                        "non-finite loss in epoch {}",
                        epoch + 1
                    )));
                }
                let g = tape.backward(loss);
                tape.accumulate_param_grads(&g, &mut grads);
                sum.add(&parts);
            }
            opt.step(&mut vae.store, &grads, lr)?;
        }
        let parts = sum.scaled(1.0 / data.len() as f64);
        state.history.push(parts.total);
        let smooth = *smoothed(&state.history, cfg.smoothing_window)
            .last()
            .expect("nonempty");
        state.schedule.observe(smooth);
        state.epochs_done += 1;
        let stats = EpochStats {
            epoch: epoch + 1,
            parts,
            lr,
        };
        on_epoch(&stats, vae, state)?;
        out.push(stats);
    }
    Ok(out)
}

/// Fraction of examples whose greedy decode from the posterior mean has
/// exactly the original node types and edges.
pub fn reconstruction_accuracy(vae: &Vae, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hits = 0;
    for ex in data {
        let mu = vae.latent_mean(ex)?;
        let d = vae.decode(&mu, DecodeMode::Greedy, &mut rng)?;
        if !d.truncated && d.seq.same_topology(ex.seq(vae.cfg.kind)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
