// SPDX-License-Identifier: Apache-2.0

//! Expected-improvement batch Bayesian optimization in the latent space and
//! the generation / predictivity metric suite.

pub mod gp;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

pub use gp::{max_min_subset, rmse_pearson, GpConfig, GpHyper, GpModel};

use crate::acsim::{simulate, FomWeights, SimResult, SweepConfig};
use crate::circuit::{topology_hash, DeviceDag};
use crate::dataset::DatasetRecord;
use crate::error::{CktError, Result};
use crate::generator::{DecodeMode, Example, Vae};

/// Expected improvement over `best` for a maximization problem.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    let d = mu - best;
    if !(sigma > 0.0) {
        return d.max(0.0);
    }
    let n = Normal::standard();
    let u = d / sigma;
    (d * n.cdf(u) + sigma * n.pdf(u)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Acquisition {
    Ei,
    Random,
}

impl Acquisition {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ei" => Ok(Acquisition::Ei),
            "random" => Ok(Acquisition::Random),
            _ => Err(CktError::Config(format!(
                "unknown acquisition {s:?} (expected ei or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub batch_size: usize,
    pub iterations: usize,
    /// Standard-normal latent draws added to each pool.
    pub prior_pool: usize,
    /// Perturbations of the best observed latents added to each pool.
    pub perturb_pool: usize,
    pub perturb_sigma: f64,
    pub incumbents: usize,
    /// Labeled dataset records encoded as the initial design.
    pub initial: usize,
    pub seed: u64,
    pub gp: GpConfig,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            batch_size: 50,
            iterations: 10,
            prior_pool: 500,
            perturb_pool: 500,
            perturb_sigma: 0.2,
            incumbents: 10,
            initial: 100,
            seed: 0,
            gp: GpConfig::default(),
        }
    }
}

impl BoConfig {
    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 || self.initial < 2 || self.incumbents == 0 {
            return Err(CktError::Config(
                "batch_size and incumbents must be positive and the initial design needs two points".into(),
            ));
        }
        if self.prior_pool + self.perturb_pool < self.batch_size {
            return Err(CktError::Config(
                "candidate pool is smaller than the batch".into(),
            ));
        }
        if !(self.perturb_sigma > 0.0) {
            return Err(CktError::Config("perturb_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// One evaluated candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub candidate_id: usize,
    pub valid: bool,
    pub fom: Option<f64>,
    pub best_so_far: f64,
}

pub const TRAJECTORY_HEADER: &str = "iteration,candidate_id,valid,fom,best_so_far";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestCircuit {
    pub iteration: usize,
    pub fom: f64,
    pub dag: DeviceDag,
    pub sim: SimResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoOutcome {
    pub acquisition: Acquisition,
    pub rows: Vec<TrajectoryRow>,
    /// Best FoM after each iteration; entry 0 is the initial design.
    pub best_by_iteration: Vec<f64>,
    pub best: BestCircuit,
}

impl BoOutcome {
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from(TRAJECTORY_HEADER);
        s.push('\n');
        for r in &self.rows {
            let fom = r.fom.map(|f| format!("{f:.9}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.9}",
                r.iteration, r.candidate_id, r.valid as u8, fom, r.best_so_far
            );
        }
        s
    }
}

/// Picks the seeded initial design from the dataset.
pub fn initial_design(records: &[DatasetRecord], n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, records.len(), n.min(records.len())).into_vec();
    idx.sort_unstable();
    idx
}

struct Observed {
    z: Vec<f64>,
    fom: f64,
}

fn decode_and_simulate(
    vae: &Vae,
    z: &[f64],
    sweep: &SweepConfig,
    weights: &FomWeights,
) -> Result<Option<(DeviceDag, SimResult, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = vae.decode(z, DecodeMode::Greedy, &mut rng)?;
    if d.truncated {
        return Ok(None);
    }
    let c = vae.realize(&d.seq);
    if !c.is_valid_circuit() {
        return Ok(None);
    }
    let Some(g) = c.dag else { return Ok(None) };
    let sim = match simulate(&g, sweep, weights) {
        Ok(s) => s,
        Err(_) => return Ok(None),
    };
    Ok(sim.fom.filter(|f| f.is_finite()).map(|f| (g, sim, f)))
}

/// Batch optimization over the latent space. The initial design encodes
/// `records[initial_design(..)]`; each iteration scores a fresh pool and
/// evaluates `batch_size` candidates. Only valid circuits are simulated.
pub fn bo_loop(
    vae: &Vae,
    records: &[DatasetRecord],
    sweep: &SweepConfig,
    weights: &FomWeights,
    cfg: &BoConfig,
    acq: Acquisition,
) -> Result<BoOutcome> {
    cfg.check()?;
    let design = initial_design(records, cfg.initial, cfg.seed);
    if design.len() < 2 {
        return Err(CktError::Config(
            "dataset too small for the initial design".into(),
        ));
    }
    let mut obs = Vec::with_capacity(design.len() + cfg.iterations * cfg.batch_size);
    let mut best: Option<BestCircuit> = None;
    for &i in &design {
        let r = &records[i];
        let ex = Example::new(&r.dag, &vae.basis)?;
        let fom = r.fom();
        obs.push(Observed {
            z: vae.latent_mean(&ex)?,
            fom,
        });
        if best.as_ref().is_none_or(|b| fom > b.fom) {
            best = Some(BestCircuit {
                iteration: 0,
                fom,
                dag: r.dag.clone(),
                sim: r.sim,
            });
        }
    }
    let mut best = best.expect("nonempty design");
    let mut best_by_iteration = vec![best.fom];
    let mut rows = Vec::new();
    let mut next_id = 0;
    let latent = vae.cfg.latent;
    for it in 1..=cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(it as u64);
        let pool = candidate_pool(&obs, latent, cfg, &mut rng);
        let chosen: Vec<usize> = match acq {
            Acquisition::Random => sample_indices(&mut rng, pool.len(), cfg.batch_size).into_vec(),
            Acquisition::Ei => {
                let x: Vec<Vec<f64>> = obs.iter().map(|o| o.z.clone()).collect();
                let y: Vec<f64> = obs.iter().map(|o| o.fom).collect();
                let model = GpModel::fit(&x, &y, &cfg.gp)?;
                let incumbent = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let scores: Vec<f64> = pool
                    .par_iter()
                    .map(|z| {
                        let (m, v) = model.predict(z);
                        expected_improvement(m, v.sqrt(), incumbent)
                    })
                    .collect();
                let mut order: Vec<usize> = (0..pool.len()).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                order.truncate(cfg.batch_size);
                order
            }
        };
        let results: Vec<Result<Option<(DeviceDag, SimResult, f64)>>> = chosen
            .par_iter()
            .map(|&k| decode_and_simulate(vae, &pool[k], sweep, weights))
            .collect();
        for (&k, res) in chosen.iter().zip(results) {
            let res = res?;
            let fom = res.as_ref().map(|r| r.2);
            if let Some((g, sim, f)) = res {
                obs.push(Observed {
                    z: pool[k].clone(),
                    fom: f,
                });
                if f > best.fom {
                    best = BestCircuit {
                        iteration: it,
                        fom: f,
                        dag: g,
                        sim,
                    };
                }
            }
            rows.push(TrajectoryRow {
                iteration: it,
                candidate_id: next_id,
                valid: fom.is_some(),
                fom,
                best_so_far: best.fom,
            });
            next_id += 1;
        }
        best_by_iteration.push(best.fom);
    }
    Ok(BoOutcome {
        acquisition: acq,
        rows,
        best_by_iteration,
        best,
    })
}

fn candidate_pool(
    obs: &[Observed],
    latent: usize,
    cfg: &BoConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let mut pool = Vec::with_capacity(cfg.prior_pool + cfg.perturb_pool);
    for _ in 0..cfg.prior_pool {
        pool.push(
            (0..latent)
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect(),
        );
    }
    let mut top: Vec<usize> = (0..obs.len()).collect();
    top.sort_by(|&a, &b| obs[b].fom.total_cmp(&obs[a].fom).then(a.cmp(&b)));
    top.truncate(cfg.incumbents);
    for k in 0..cfg.perturb_pool {
        let base = &obs[top[k % top.len()]].z;
        pool.push(
            base.iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut *rng);
                    v + cfg.perturb_sigma * e
                })
                .collect(),
        );
    }
    pool
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prior_points: usize,
    pub decodes_per_point: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub gp: GpConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prior_points: 1000,
            decodes_per_point: 10,
            holdout_fraction: 0.1,
            seed: 0,
            gp: GpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub decodes: usize,
    pub valid_dag_pct: f64,
    pub valid_circuit_pct: f64,
    /// Share of valid circuits whose topology is absent from the training set.
    pub novel_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetric {
    pub target: String,
    pub rmse: f64,
    pub pearson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub model: String,
    pub config: EvalConfig,
    pub train_size: usize,
    pub holdout_size: usize,
    pub generation: GenerationMetrics,
    pub regression: Vec<RegressionMetric>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let g = &self.generation;
        let mut s = String::new();
        let _ = writeln!(s, "model {}  ({} decodes)", self.model, g.decodes);
        let _ = writeln!(
            s,
            "{:<16}{:>10}",
            "valid DAGs",
            format!("{:.2}%", g.valid_dag_pct)
        );
        let _ = writeln!(
            s,
            "{:<16}{:>10}",
            "valid circuits",
            format!("{:.2}%", g.valid_circuit_pct)
        );
        let _ = writeln!(
            s,
            "{:<16}{:>10}",
            "novel circuits",
            format!("{:.2}%", g.novel_pct)
        );
        let _ = writeln!(s, "{:<16}{:>10}{:>10}", "target", "rmse", "pearson");
        for r in &self.regression {
            let _ = writeln!(s, "{:<16}{:>10.4}{:>10.4}", r.target, r.rmse, r.pearson);
        }
        s
    }
}

/// Decodes `prior_points` standard-normal latents `decodes_per_point` times
/// each in sampling mode and tallies validity and novelty.
pub fn generation_metrics(
    vae: &Vae,
    train: &[DatasetRecord],
    cfg: &EvalConfig,
) -> Result<GenerationMetrics> {
    let known: BTreeSet<u64> = train
        .iter()
        .map(|r| topology_hash(&r.dag))
        .collect::<Result<_>>()?;
    let per_point: Vec<Result<(usize, usize, usize)>> = (0..cfg.prior_points)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(p as u64);
            let z = vae.draw_eps(&mut rng);
            let (mut dags, mut ckts, mut novel) = (0, 0, 0);
            for _ in 0..cfg.decodes_per_point {
                let d = vae.decode(&z, DecodeMode::Sample, &mut rng)?;
                let c = vae.realize(&d.seq);
                dags += c.is_valid_dag() as usize;
                if c.is_valid_circuit() {
                    ckts += 1;
                    let h = topology_hash(c.dag.as_ref().expect("valid circuit has a graph"))?;
                    novel += !known.contains(&h) as usize;
                }
            }
            Ok((dags, ckts, novel))
        })
        .collect();
    let (mut dags, mut ckts, mut novel) = (0, 0, 0);
    for r in per_point {
        let (a, b, c) = r?;
        dags += a;
        ckts += b;
        novel += c;
    }
    let total = cfg.prior_points * cfg.decodes_per_point;
    let pct = |k: usize, n: usize| {
        if n == 0 {
            0.0
        } else {
            100.0 * k as f64 / n as f64
        }
    };
    Ok(GenerationMetrics {
        decodes: total,
        valid_dag_pct: pct(dags, total),
        valid_circuit_pct: pct(ckts, total),
        novel_pct: pct(novel, ckts),
    })
}

pub const REGRESSION_TARGETS: [&str; 4] = ["gain_db", "log10_bw", "pm_deg", "fom"];

/// Regression targets in [`REGRESSION_TARGETS`] order.
pub fn targets(r: &DatasetRecord) -> [f64; 4] {
    let (g, b, p) = r.sim.specs().unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    [g, b.log10(), p, r.fom()]
}

/// Posterior means of each record.
pub fn latent_means(vae: &Vae, records: &[DatasetRecord]) -> Result<Vec<Vec<f64>>> {
    records
        .par_iter()
        .map(|r| vae.latent_mean(&Example::new(&r.dag, &vae.basis)?))
        .collect()
}

/// GP regression from latent means to each target, scored on `test`.
pub fn latent_regression(
    vae: &Vae,
    train: &[DatasetRecord],
    test: &[DatasetRecord],
    gp: &GpConfig,
) -> Result<Vec<RegressionMetric>> {
    let xtr = latent_means(vae, train)?;
    let xte = latent_means(vae, test)?;
    let ytr: Vec<[f64; 4]> = train.iter().map(targets).collect();
    let yte: Vec<[f64; 4]> = test.iter().map(targets).collect();
    let mut out = Vec::new();
    for (t, name) in REGRESSION_TARGETS.iter().enumerate() {
        let y: Vec<f64> = ytr.iter().map(|v| v[t]).collect();
        let truth: Vec<f64> = yte.iter().map(|v| v[t]).collect();
        let model = GpModel::fit(&xtr, &y, gp)?;
        let pred: Vec<f64> = xte.iter().map(|q| model.predict(q).0).collect();
        let (rmse, pearson) = rmse_pearson(&pred, &truth);
        out.push(RegressionMetric {
            target: name.to_string(),
            rmse,
            pearson,
        });
    }
    Ok(out)
}

/// Full metric report: generation on the prior plus latent regression on a
/// seeded holdout split of `records`.
pub fn eval_suite(vae: &Vae, records: &[DatasetRecord], cfg: &EvalConfig) -> Result<EvalReport> {
    let (tr, te) = crate::dataset::split_indices(records.len(), cfg.holdout_fraction, cfg.seed);
    if tr.len() < 2 || te.is_empty() {
        return Err(CktError::Config(
            "dataset too small for a holdout split".into(),
        ));
    }
    let train: Vec<DatasetRecord> = tr.iter().map(|&i| records[i].clone()).collect();
    let test: Vec<DatasetRecord> = te.iter().map(|&i| records[i].clone()).collect();
    let generation = generation_metrics(vae, &train, cfg)?;
    let regression = latent_regression(vae, &train, &test, &cfg.gp)?;
    Ok(EvalReport {
        tool_version: crate::TOOL_VERSION.to_string(),
        model: vae.cfg.kind.name().to_string(),
        config: *cfg,
        train_size: train.len(),
        holdout_size: test.len(),
        generation,
        regression,
    })
}
