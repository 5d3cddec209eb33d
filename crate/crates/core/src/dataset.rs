// SPDX-License-Identifier: Apache-2.0

//! Random op-amp generation, labeling by simulation, and JSONL storage.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acsim::{simulate, FomWeights, SimResult, SweepConfig};
use crate::basis::{Combination, SubgraphBasis, Terminal};
use crate::circuit::{
    canonicalize, validate_circuit, DeviceDag, DeviceInstance, DeviceKind, NodeRole, C_RANGE,
    GM_RANGE, R_RANGE,
};
use crate::error::{CktError, Result};
use crate::graphlize::{graphlize, TransformedDag};
use crate::stage::{from_stage_graph, StageElement, StageGraph, StageNode};

pub const DATASET_FORMAT: &str = "cktgnn-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Relative weights of N = 2 and N = 3.
    pub stage_weights: [f64; 2],
    /// Relative weights of 0, 1, 2, ... auxiliary connections.
    pub aux_count_weights: Vec<f64>,
    /// Per basis entry selection weight for auxiliary connections.
    pub entry_weights: Vec<f64>,
    pub r_range: (f64, f64),
    pub c_range: (f64, f64),
    pub gm_range: (f64, f64),
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            stage_weights: [1.0, 1.0],
            aux_count_weights: vec![1.0; 4],
            entry_weights: vec![1.0; 24],
            r_range: R_RANGE,
            c_range: C_RANGE,
            gm_range: GM_RANGE,
            max_attempts: 100,
            seed: 0,
        }
    }
}

fn check_weights(name: &str, w: &[f64]) -> Result<()> {
    if w.is_empty()
        || w.iter().any(|x| !(*x >= 0.0) || !x.is_finite())
        || w.iter().all(|x| *x == 0.0)
    {
        return Err(CktError::Config(format!(
            "{name} must be nonnegative and not all zero"
        )));
    }
    Ok(())
}

impl SamplerConfig {
    pub fn check(&self, b: &SubgraphBasis) -> Result<()> {
        check_weights("stage_weights", &self.stage_weights)?;
        check_weights("aux_count_weights", &self.aux_count_weights)?;
        check_weights("entry_weights", &self.entry_weights)?;
        if self.entry_weights.len() != b.len() {
            return Err(CktError::Config(format!(
                "entry_weights has {} values, basis has {} entries",
                self.entry_weights.len(),
                b.len()
            )));
        }
        for (name, (lo, hi)) in [
            ("r", self.r_range),
            ("c", self.c_range),
            ("gm", self.gm_range),
        ] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(CktError::Config(format!(
                    "{name}_range must satisfy 0 < lo <= hi"
                )));
            }
        }
        if self.max_attempts == 0 {
            return Err(CktError::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    10f64.powf(rng.random_range(lo.log10()..=hi.log10()))
}

fn placeholder(kind: DeviceKind, cfg: &SamplerConfig) -> DeviceInstance {
    let mid = |(lo, hi): (f64, f64)| (lo * hi).sqrt();
    match kind {
        DeviceKind::Gm { .. } => DeviceInstance {
            kind,
            value: mid(cfg.gm_range),
            load: Some(crate::circuit::ParasiticLoad {
                r: mid(cfg.r_range),
                c: mid(cfg.c_range),
            }),
        },
        DeviceKind::R => DeviceInstance::resistor(mid(cfg.r_range)),
        DeviceKind::C => DeviceInstance::capacitor(mid(cfg.c_range)),
    }
}

fn stage_node(k: usize, n: usize) -> StageNode {
    match k {
        0 => StageNode::In,
        k if k == n => StageNode::Out,
        k => StageNode::Stage(k),
    }
}

/// Draws a topology: N forward Gm stages on the main path plus auxiliary
/// basis entries between distinct stage pairs. Adjacent pairs only take a
/// single R or C. Values are mid-range placeholders.
pub fn sample_topology(
    rng: &mut impl Rng,
    cfg: &SamplerConfig,
    b: &SubgraphBasis,
) -> Result<DeviceDag> {
    cfg.check(b)?;
    let stage_dist =
        WeightedIndex::new(cfg.stage_weights).map_err(|e| CktError::Config(e.to_string()))?;
    let aux_dist =
        WeightedIndex::new(&cfg.aux_count_weights).map_err(|e| CktError::Config(e.to_string()))?;
    for _ in 0..cfg.max_attempts {
        let n = 2 + stage_dist.sample(rng);
        let mut elements: Vec<StageElement> = (0..n)
            .map(|k| StageElement {
                device: placeholder(DeviceKind::GM_POS_FWD, cfg),
                from: stage_node(k, n),
                to: stage_node(k + 1, n),
            })
            .collect();
        let pairs: Vec<(usize, usize)> = (0..=n)
            .flat_map(|i| (i + 1..=n).map(move |j| (i, j)))
            .collect();
        let aux = aux_dist.sample(rng).min(pairs.len());
        let mut junctions = 0;
        let mut ok = true;
        for p in sample_indices(rng, pairs.len(), aux).into_iter() {
            let (i, j) = pairs[p];
            let adjacent = j == i + 1;
            let weights: Vec<f64> = b
                .entries
                .iter()
                .map(|e| {
                    let allowed = !adjacent
                        || (e.combination == Combination::Single && !e.devices[0].kind.is_gm());
                    if allowed {
                        cfg.entry_weights[e.id]
                    } else {
                        0.0
                    }
                })
                .collect();
            let Ok(dist) = WeightedIndex::new(&weights) else {
                ok = false;
                break;
            };
            let e = &b.entries[dist.sample(rng)];
            let node = |t: Terminal, junctions: usize| match t {
                Terminal::Head => stage_node(i, n),
                Terminal::Tail => stage_node(j, n),
                Terminal::Internal(k) => StageNode::Junction(junctions + k as usize),
            };
            let mut internal = 0;
            for d in &e.devices {
                for t in [d.reads, d.drives] {
                    if let Terminal::Internal(k) = t {
                        internal = internal.max(k as usize + 1);
                    }
                }
                elements.push(StageElement {
                    device: placeholder(d.kind, cfg),
                    from: node(d.reads, junctions),
                    to: node(d.drives, junctions),
                });
            }
            junctions += internal;
        }
        if !ok {
            continue;
        }
        let s = StageGraph {
            id: 0,
            stage_count: n,
            junction_count: junctions,
            elements,
        };
        let Ok(g) = from_stage_graph(&s) else {
            continue;
        };
        if validate_circuit(&g)?.is_valid_circuit {
            return Ok(g);
        }
    }
    Err(CktError::Sampling(format!(
        "no valid topology after {} attempts",
        cfg.max_attempts
    )))
}

/// Redraws every device value log-uniformly from its range.
pub fn sample_params(rng: &mut impl Rng, g: &DeviceDag, cfg: &SamplerConfig) -> DeviceDag {
    let mut out = g.clone();
    for n in &mut out.nodes {
        if let NodeRole::Device(d) = &mut n.role {
            match d.kind {
                DeviceKind::Gm { .. } => {
                    d.value = log_uniform(rng, cfg.gm_range);
                    let load = d.load.as_mut().expect("gm carries a load");
                    load.r = log_uniform(rng, cfg.r_range);
                    load.c = log_uniform(rng, cfg.c_range);
                }
                DeviceKind::R => d.value = log_uniform(rng, cfg.r_range),
                DeviceKind::C => d.value = log_uniform(rng, cfg.c_range),
            }
        }
    }
    out
}

/// Deterministic per-attempt random stream.
pub fn attempt_rng(seed: u64, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub n: usize,
    pub sampler: SamplerConfig,
    pub sweep: SweepConfig,
    pub fom_weights: FomWeights,
    pub fom_formula: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub dag: DeviceDag,
    pub transformed: TransformedDag,
    pub sim: SimResult,
    /// Canonical hash, 16 hex digits.
    pub hash: String,
}

impl DatasetRecord {
    pub fn hash_u64(&self) -> u64 {
        u64::from_str_radix(&self.hash, 16).unwrap_or(0)
    }

    pub fn fom(&self) -> f64 {
        self.sim.fom.expect("stored records are converged")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub requested: usize,
    pub stored: usize,
    pub attempts: usize,
    pub non_converged: usize,
    pub duplicates: usize,
    pub failed: usize,
    pub convergence_rate: f64,
    /// min, 25%, median, 75%, max
    pub fom_quantiles: Option<[f64; 5]>,
    pub wall_seconds: f64,
}

pub fn quantiles(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (v.len() - 1) as f64;
        let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
    };
    Some([q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)])
}

enum Attempt {
    Ok(Box<DatasetRecord>),
    NotConverged,
    Failed,
}

fn run_attempt(
    attempt: u64,
    cfg: &SamplerConfig,
    sweep: &SweepConfig,
    w: &FomWeights,
    b: &SubgraphBasis,
) -> Attempt {
    let work = || -> Result<Option<DatasetRecord>> {
        let mut rng = attempt_rng(cfg.seed, attempt);
        let topo = sample_topology(&mut rng, cfg, b)?;
        let g = sample_params(&mut rng, &topo, cfg);
        let (g, hash) = canonicalize(&g)?;
        let sim = simulate(&g, sweep, w)?;
        if !sim.converged || sim.fom.is_none() {
            return Ok(None);
        }
        let transformed = graphlize(&g, b)?;
        Ok(Some(DatasetRecord {
            id: 0,
            dag: g,
            transformed,
            sim,
            hash: format!("{hash:016x}"),
        }))
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(work)) {
        Ok(Ok(Some(r))) => Attempt::Ok(Box::new(r)),
        Ok(Ok(None)) => Attempt::NotConverged,
        _ => Attempt::Failed,
    }
}

/// Runs `f` on a pool with `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CktError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Samples, simulates and labels circuits until `n` distinct converged
/// records exist. Record order is fixed by attempt index, so output does
/// not depend on the worker count.
pub fn generate_records(
    n: usize,
    cfg: &SamplerConfig,
    sweep: &SweepConfig,
    w: &FomWeights,
    b: &SubgraphBasis,
) -> Result<(Vec<DatasetRecord>, DatasetSummary)> {
    cfg.check(b)?;
    sweep.check()?;
    w.check()?;
    let start = Instant::now();
    let mut records = Vec::with_capacity(n);
    let mut seen = HashSet::new();
    let (mut attempts, mut non_converged, mut duplicates, mut failed) = (0usize, 0, 0, 0);
    let limit = 20 * n + 1000;
    while records.len() < n {
        if attempts >= limit {
            return Err(CktError::Sampling(format!(
                "only {} of {n} records after {attempts} attempts",
                records.len()
            )));
        }
        let need = n - records.len();
        let batch = (need + need / 20 + 8).min(limit - attempts);
        let results: Vec<Attempt> = (attempts..attempts + batch)
            .into_par_iter()
            .map(|a| run_attempt(a as u64, cfg, sweep, w, b))
            .collect();
        for r in results {
            attempts += 1;
            match r {
                Attempt::Ok(mut rec) => {
                    if records.len() == n {
                        continue;
                    }
                    if !seen.insert(rec.hash.clone()) {
                        duplicates += 1;
                        continue;
                    }
                    rec.id = records.len() as u64;
                    rec.dag.id = rec.id;
                    rec.transformed.id = rec.id;
                    records.push(*rec);
                }
                Attempt::NotConverged => non_converged += 1,
                Attempt::Failed => failed += 1,
            }
        }
    }
    let foms: Vec<f64> = records.iter().map(|r| r.fom()).collect();
    let summary = DatasetSummary {
        requested: n,
        stored: records.len(),
        attempts,
        non_converged,
        duplicates,
        failed,
        convergence_rate: if attempts == 0 {
            1.0
        } else {
            1.0 - (non_converged + failed) as f64 / attempts as f64
        },
        fom_quantiles: quantiles(&foms),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((records, summary))
}

pub fn header_for(
    n: usize,
    cfg: &SamplerConfig,
    sweep: &SweepConfig,
    w: &FomWeights,
) -> DatasetHeader {
    DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        tool_version: crate::TOOL_VERSION.into(),
        n,
        sampler: cfg.clone(),
        sweep: *sweep,
        fom_weights: *w,
        fom_formula: w.describe(),
    }
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, records: &[DatasetRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut f, header)?;
    f.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Generates and writes a dataset file.
pub fn generate_dataset(
    n: usize,
    cfg: &SamplerConfig,
    sweep: &SweepConfig,
    w: &FomWeights,
    b: &SubgraphBasis,
    out_path: &Path,
) -> Result<DatasetSummary> {
    let (records, summary) = generate_records(n, cfg, sweep, w, b)?;
    write_dataset(out_path, &header_for(n, cfg, sweep, w), &records)?;
    Ok(summary)
}

/// Reads a dataset file; rejects unknown formats and versions.
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let f = BufReader::new(File::open(path)?);
    let mut lines = f.lines();
    let first = lines
        .next()
        .ok_or_else(|| CktError::Format(format!("{} is empty", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(CktError::Format(format!(
            "unsupported dataset {} v{} (expected {DATASET_FORMAT} v{DATASET_VERSION})",
            header.format, header.version
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((header, records))
}

/// Seeded shuffle split into (train, holdout) index lists, each sorted.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b1d);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let test = ((n as f64) * holdout_fraction).round() as usize;
    let (te, tr) = idx.split_at(test.min(n));
    let mut tr = tr.to_vec();
    let mut te = te.to_vec();
    tr.sort_unstable();
    te.sort_unstable();
    (tr, te)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_default_basis;
    use crate::circuit::{dag_from_parts, DeviceInstance, Direction, Polarity};

    #[test]
    fn zero_aux_two_stage_is_the_minimal_chain() {
        let cfg = SamplerConfig {
            stage_weights: [1.0, 0.0],
            aux_count_weights: vec![1.0],
            ..SamplerConfig::default()
        };
        let b = build_default_basis();
        let g = sample_topology(&mut attempt_rng(1, 0), &cfg, &b).unwrap();
        let gm = || {
            NodeRole::Device(DeviceInstance::gm(
                Polarity::Positive,
                Direction::Feedforward,
                1e-3,
                1e6,
                1e-13,
            ))
        };
        let want = dag_from_parts(
            0,
            2,
            &[NodeRole::Input, gm(), gm(), NodeRole::Output],
            &[(0, 1), (1, 2), (2, 3)],
        );
        assert_eq!(g.edges, canonicalize(&want).unwrap().0.edges);
        assert_eq!(g.device_count(), 2);
    }

    #[test]
    fn same_seed_same_circuit() {
        let cfg = SamplerConfig::default();
        let b = build_default_basis();
        let mk = || {
            let mut rng = attempt_rng(9, 3);
            let t = sample_topology(&mut rng, &cfg, &b).unwrap();
            sample_params(&mut rng, &t, &cfg).to_json().unwrap()
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn bad_weights_rejected() {
        let b = build_default_basis();
        let cfg = SamplerConfig {
            entry_weights: vec![0.0; 24],
            ..SamplerConfig::default()
        };
        assert!(matches!(cfg.check(&b), Err(CktError::Config(_))));
        let cfg = SamplerConfig {
            entry_weights: vec![1.0; 3],
            ..SamplerConfig::default()
        };
        assert!(cfg.check(&b).is_err());
    }

    #[test]
    fn quantiles_of_known_list() {
        let q = quantiles(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(q, [1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(quantiles(&[]).is_none());
    }

    #[test]
    fn split_is_a_partition() {
        let (tr, te) = split_indices(50, 0.2, 4);
        assert_eq!(te.len(), 10);
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
