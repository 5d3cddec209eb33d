// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use cktgnn::acsim::{bode, bode_csv, build_mna, simulate, FomWeights, SweepConfig};
use cktgnn::basis::build_default_basis;
use cktgnn::circuit::{canonicalize, DeviceDag};
use cktgnn::dataset::{
    generate_records, header_for, load_dataset, split_indices, with_workers, write_dataset,
    DatasetRecord, SamplerConfig,
};
use cktgnn::generator::{
    train, Example, ModelKind, TrainConfig, TrainState, Vae, VaeConfig, CURVE_HEADER,
};
use cktgnn::graphlize::{graphlize, TNodeRole};
use cktgnn::netlist::{export_netlist, parse_netlist};
use cktgnn::search::{bo_loop, eval_suite, Acquisition, BoConfig, EvalConfig};
use cktgnn::stage::{from_stage_graph, to_stage_graph};
use cktgnn::svg::LineChart;
use cktgnn::{CktError, Result, TOOL_VERSION};

#[derive(Parser, Debug)]
#[command(
    name = "cktgnn",
    version,
    about = "Op-amp topology encoding, simulation and latent-space optimization"
)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "CKT_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "CKT_WORKERS", default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SimArgs {
    #[arg(long, env = "CKT_F_START", default_value_t = 1.0)]
    f_start: f64,
    #[arg(long, env = "CKT_F_STOP", default_value_t = 1e12)]
    f_stop: f64,
    #[arg(long, env = "CKT_POINTS_PER_DECADE", default_value_t = 60)]
    points_per_decade: usize,
    #[arg(long, env = "CKT_W_GAIN", default_value_t = 1.0)]
    w_gain: f64,
    #[arg(long, env = "CKT_W_BW", default_value_t = 1.0)]
    w_bw: f64,
    #[arg(long, env = "CKT_W_PM", default_value_t = 1.0)]
    w_pm: f64,
    #[arg(long, env = "CKT_PM_TARGET", default_value_t = 60.0)]
    pm_target: f64,
}

impl SimArgs {
    fn sweep(&self) -> Result<SweepConfig> {
        let s = SweepConfig {
            f_start_hz: self.f_start,
            f_stop_hz: self.f_stop,
            points_per_decade: self.points_per_decade,
            ..Default::default()
        };
        s.check()?;
        Ok(s)
    }

    fn weights(&self) -> Result<FomWeights> {
        let w = FomWeights {
            w_gain: self.w_gain,
            w_bw: self.w_bw,
            w_pm: self.w_pm,
            pm_target_deg: self.pm_target,
        };
        w.check()?;
        Ok(w)
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Sample, simulate and store a labeled circuit dataset.
    GenDataset {
        #[arg(long, env = "CKT_N", default_value_t = 10000)]
        n: usize,
        #[arg(long, env = "CKT_OUT")]
        out: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Simulate one circuit (device-graph JSON or netlist).
    Simulate {
        #[arg(long = "in", env = "CKT_IN")]
        input: PathBuf,
        #[arg(long, env = "CKT_OUT_DIR", default_value = ".")]
        out_dir: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Print the subgraph-basis form of one circuit.
    Graphlize {
        #[arg(long = "in", env = "CKT_IN")]
        input: PathBuf,
        #[arg(long, env = "CKT_OUT")]
        out: Option<PathBuf>,
    },
    /// Write the SPICE netlist of one circuit.
    Netlist {
        #[arg(long = "in", env = "CKT_IN")]
        input: PathBuf,
        #[arg(long, env = "CKT_OUT")]
        out: Option<PathBuf>,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Train a VAE on a dataset.
    Train {
        #[arg(long, env = "CKT_DATASET")]
        dataset: PathBuf,
        #[arg(long, env = "CKT_MODEL", default_value = "cktgnn")]
        model: String,
        #[arg(long, env = "CKT_OUT_DIR", default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, env = "CKT_EPOCHS", default_value_t = 200)]
        epochs: usize,
        #[arg(long, env = "CKT_BATCH_SIZE", default_value_t = 64)]
        batch_size: usize,
        #[arg(long, env = "CKT_LR", default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, env = "CKT_LATENT", default_value_t = 56)]
        latent: usize,
        #[arg(long, env = "CKT_KL_WEIGHT", default_value_t = 0.005)]
        kl_weight: f64,
        #[arg(long, env = "CKT_HOLDOUT_FRACTION", default_value_t = 0.1)]
        holdout_fraction: f64,
        /// Epochs between checkpoint writes.
        #[arg(long, env = "CKT_CHECKPOINT_EVERY", default_value_t = 10)]
        checkpoint_every: usize,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, env = "CKT_RESUME")]
        resume: Option<PathBuf>,
    },
    /// Generation and latent-regression metrics for a trained model.
    Eval {
        #[arg(long, env = "CKT_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "CKT_DATASET")]
        dataset: PathBuf,
        #[arg(long, env = "CKT_OUT")]
        out: Option<PathBuf>,
        #[arg(long, env = "CKT_POINTS", default_value_t = 1000)]
        points: usize,
        #[arg(long, env = "CKT_DECODES", default_value_t = 10)]
        decodes: usize,
        #[arg(long, env = "CKT_HOLDOUT_FRACTION", default_value_t = 0.1)]
        holdout_fraction: f64,
    },
    /// Batch Bayesian optimization in the latent space.
    Optimize {
        #[arg(long, env = "CKT_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "CKT_DATASET")]
        dataset: PathBuf,
        #[arg(long, env = "CKT_OUT_DIR", default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, env = "CKT_ITERATIONS", default_value_t = 10)]
        iterations: usize,
        #[arg(long, env = "CKT_BATCH_SIZE", default_value_t = 50)]
        batch_size: usize,
        #[arg(long, env = "CKT_INITIAL", default_value_t = 100)]
        initial: usize,
        /// ei or random
        #[arg(long, env = "CKT_ACQUISITION", default_value = "ei")]
        acquisition: String,
    },
    /// Per-epoch training and per-encode wall times of both encoders.
    Bench {
        #[arg(long, env = "CKT_DATASET")]
        dataset: PathBuf,
        #[arg(long, env = "CKT_OUT")]
        out: PathBuf,
        #[arg(long, env = "CKT_EPOCHS", default_value_t = 2)]
        epochs: usize,
        #[arg(long, env = "CKT_ENCODES", default_value_t = 200)]
        encodes: usize,
        #[arg(long, env = "CKT_BATCH_SIZE", default_value_t = 64)]
        batch_size: usize,
    },
}

fn io_err(path: &Path, e: std::io::Error) -> CktError {
    CktError::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CktError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: no such file", path.display()),
        )))
    }
}

/// `# <tool> config=<json>` line heading CSV outputs.
fn csv_stamp(config: &serde_json::Value) -> String {
    format!("# {TOOL_VERSION} config={config}\n")
}

fn svg_stamp(config: &serde_json::Value) -> String {
    format!("{TOOL_VERSION} config={config}")
}

/// Device graph from JSON or from a netlist (first line starting with `*`).
fn read_circuit(path: &Path) -> Result<DeviceDag> {
    let text = read_text(path)?;
    if text.trim_start().starts_with('*') {
        from_stage_graph(&parse_netlist(&text)?)
    } else {
        DeviceDag::from_json(&text)
    }
}

fn load_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    require_file(path)?;
    Ok(load_dataset(path)?.1)
}

fn load_model(path: &Path) -> Result<(Vae, Option<TrainState>)> {
    require_file(path)?;
    Vae::load_path(path)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenDataset { n, out, sim } => {
            let sampler = SamplerConfig {
                seed: cli.seed,
                ..Default::default()
            };
            let (sweep, w) = (sim.sweep()?, sim.weights()?);
            let (records, summary) =
                generate_records(*n, &sampler, &sweep, &w, &build_default_basis())?;
            write_dataset(out, &header_for(*n, &sampler, &sweep, &w), &records).map_err(
                |e| match e {
                    CktError::Io(io) => io_err(out, io),
                    e => e,
                },
            )?;
            println!("wrote {} records to {}", summary.stored, out.display());
            println!(
                "attempts {}  non-converged {}  duplicates {}  failed {}  convergence {:.4}",
                summary.attempts,
                summary.non_converged,
                summary.duplicates,
                summary.failed,
                summary.convergence_rate
            );
            if let Some(q) = summary.fom_quantiles {
                println!(
                    "fom min {:.4}  q25 {:.4}  median {:.4}  q75 {:.4}  max {:.4}",
                    q[0], q[1], q[2], q[3], q[4]
                );
            }
        }
        Cmd::Simulate {
            input,
            out_dir,
            sim,
        } => {
            let g = read_circuit(input)?;
            let (sweep, w) = (sim.sweep()?, sim.weights()?);
            let config = json!({"sweep": sweep, "fom_weights": w, "input": input});
            let r = simulate(&g, &sweep, &w)?;
            let points = bode(&build_mna(&to_stage_graph(&g)?)?, &sweep)?;
            write_text(
                &out_dir.join("bode.csv"),
                &format!(
                    "{}frequency_hz,magnitude_db,phase_deg\n{}",
                    csv_stamp(&config),
                    bode_csv(&points)
                ),
            )?;
            let mut mag = LineChart::new("Bode magnitude", "frequency (Hz)", "dB")
                .series("|H|", points.iter().map(|p| (p.0, p.1)).collect());
            mag.log_x = true;
            mag.comment = svg_stamp(&config);
            write_text(&out_dir.join("bode_magnitude.svg"), &mag.to_svg())?;
            let mut ph = LineChart::new("Bode phase", "frequency (Hz)", "degrees")
                .series("arg H", points.iter().map(|p| (p.0, p.2)).collect());
            ph.log_x = true;
            ph.comment = svg_stamp(&config);
            write_text(&out_dir.join("bode_phase.svg"), &ph.to_svg())?;
            let report = json!({"tool_version": TOOL_VERSION, "config": config, "result": r});
            write_text(
                &out_dir.join("specs.json"),
                &format!("{}\n", serde_json::to_string_pretty(&report)?),
            )?;
            let show = |v: Option<f64>| {
                v.map(|x| format!("{x:.6}"))
                    .unwrap_or_else(|| "none".into())
            };
            println!(
                "converged {}  gain_db {}  bw_hz {}  ugf_hz {}  pm_deg {}  fom {}",
                r.converged,
                show(r.gain_db),
                show(r.bw_hz),
                show(r.ugf_hz),
                show(r.pm_deg),
                show(r.fom)
            );
        }
        Cmd::Graphlize { input, out } => {
            let basis = build_default_basis();
            let (g, _) = canonicalize(&read_circuit(input)?)?;
            let t = graphlize(&g, &basis)?;
            let mut refs = Vec::new();
            for n in &t.nodes {
                if let TNodeRole::Sub { entry, .. } = &n.role {
                    refs.push(json!({"node": n.id, "entry_id": entry, "entry": basis.entry(*entry)?.name()}));
                }
            }
            let doc = json!({"tool_version": TOOL_VERSION, "config": {"input": input}, "transformed": t, "entries": refs});
            let text = format!("{}\n", serde_json::to_string_pretty(&doc)?);
            match out {
                Some(p) => write_text(p, &text)?,
                None => print!("{text}"),
            }
        }
        Cmd::Netlist { input, out, sim } => {
            let g = read_circuit(input)?;
            let text = export_netlist(&to_stage_graph(&g)?, &sim.sweep()?)?;
            match out {
                Some(p) => write_text(p, &text)?,
                None => print!("{text}"),
            }
        }
        Cmd::Train {
            dataset,
            model,
            out_dir,
            epochs,
            batch_size,
            lr,
            latent,
            kl_weight,
            holdout_fraction,
            checkpoint_every,
            resume,
        } => {
            let records = load_records(dataset)?;
            let (mut vae, mut state) = match resume {
                Some(p) => {
                    let (v, s) = load_model(p)?;
                    let s = s.ok_or_else(|| {
                        CktError::Format(format!("{} has no training state", p.display()))
                    })?;
                    (v, s)
                }
                None => {
                    let cfg = VaeConfig {
                        kind: ModelKind::parse(model)?,
                        latent: *latent,
                        kl_weight: *kl_weight,
                        ..Default::default()
                    };
                    let tc = TrainConfig {
                        epochs: *epochs,
                        batch_size: *batch_size,
                        lr: *lr,
                        seed: cli.seed,
                        ..Default::default()
                    };
                    (Vae::new(cfg, cli.seed)?, TrainState::new(&tc))
                }
            };
            let mut tc = state.config;
            tc.epochs = *epochs;
            state.config = tc;
            let (tr, _) = split_indices(records.len(), *holdout_fraction, tc.seed);
            let data: Vec<Example> = tr
                .iter()
                .map(|&i| Example::new(&records[i].dag, &vae.basis))
                .collect::<Result<_>>()?;
            let config = json!({
                "model": vae.cfg,
                "train": tc,
                "dataset": dataset,
                "holdout_fraction": holdout_fraction,
                "train_examples": data.len(),
            });
            let ckpt = out_dir.join("model.ckpt");
            std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
            let mut curve = csv_stamp(&config);
            curve.push_str(CURVE_HEADER);
            curve.push('\n');
            let every = (*checkpoint_every).max(1);
            let stats = train(&mut vae, &data, &tc, &mut state, |s, v, st| {
                let _ = writeln!(curve, "{}", s.csv_row());
                if s.epoch % every == 0 || s.epoch == tc.epochs {
                    v.save_path(&ckpt, Some(st))?;
                }
                Ok(())
            })?;
            if stats.is_empty() {
                vae.save_path(&ckpt, Some(&state))?;
            }
            write_text(&out_dir.join("curves.csv"), &curve)?;
            let first = state.history.len() - stats.len();
            let mut chart = LineChart::new("Training loss", "epoch", "per-example loss")
                .series(
                    "total",
                    state
                        .history
                        .iter()
                        .enumerate()
                        .map(|(i, v)| ((i + 1) as f64, *v))
                        .collect(),
                )
                .series(
                    "recon type",
                    stats
                        .iter()
                        .map(|s| (s.epoch as f64, s.parts.recon_type))
                        .collect(),
                )
                .series(
                    "recon edge",
                    stats
                        .iter()
                        .map(|s| (s.epoch as f64, s.parts.recon_edge))
                        .collect(),
                );
            chart.comment = svg_stamp(&config);
            write_text(&out_dir.join("curves.svg"), &chart.to_svg())?;
            match (state.history.get(first), state.history.last()) {
                (Some(a), Some(b)) => println!(
                    "trained {} epochs {}..{}  loss {a:.6} -> {b:.6}  checkpoint {}",
                    vae.cfg.kind.name(),
                    first + 1,
                    state.epochs_done,
                    ckpt.display()
                ),
                _ => println!("nothing to do: {} epochs already done", state.epochs_done),
            }
        }
        Cmd::Eval {
            checkpoint,
            dataset,
            out,
            points,
            decodes,
            holdout_fraction,
        } => {
            let (vae, _) = load_model(checkpoint)?;
            let records = load_records(dataset)?;
            let cfg = EvalConfig {
                prior_points: *points,
                decodes_per_point: *decodes,
                holdout_fraction: *holdout_fraction,
                seed: cli.seed,
                ..Default::default()
            };
            let report = eval_suite(&vae, &records, &cfg)?;
            if let Some(p) = out {
                let doc = json!({"report": report, "checkpoint": checkpoint, "dataset": dataset});
                write_text(p, &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
            }
            print!("{}", report.table());
        }
        Cmd::Optimize {
            checkpoint,
            dataset,
            out_dir,
            iterations,
            batch_size,
            initial,
            acquisition,
        } => {
            let (vae, _) = load_model(checkpoint)?;
            let (header, records) = {
                require_file(dataset)?;
                load_dataset(dataset)?
            };
            let acq = Acquisition::parse(acquisition)?;
            let cfg = BoConfig {
                batch_size: *batch_size,
                iterations: *iterations,
                initial: *initial,
                seed: cli.seed,
                ..Default::default()
            };
            let out = bo_loop(
                &vae,
                &records,
                &header.sweep,
                &header.fom_weights,
                &cfg,
                acq,
            )?;
            let config = json!({
                "bo": cfg,
                "acquisition": acq,
                "checkpoint": checkpoint,
                "dataset": dataset,
                "sweep": header.sweep,
                "fom_weights": header.fom_weights,
            });
            write_text(
                &out_dir.join("trajectory.csv"),
                &format!("{}{}", csv_stamp(&config), out.trajectory_csv()),
            )?;
            let mut chart = LineChart::new("Best FoM found", "iteration", "FoM").series(
                acquisition,
                out.best_by_iteration
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i as f64, *v))
                    .collect(),
            );
            chart.comment = svg_stamp(&config);
            write_text(&out_dir.join("best_so_far.svg"), &chart.to_svg())?;
            let doc = json!({
                "tool_version": TOOL_VERSION,
                "config": config,
                "best_by_iteration": out.best_by_iteration,
                "best": out.best,
            });
            write_text(
                &out_dir.join("best.json"),
                &format!("{}\n", serde_json::to_string_pretty(&doc)?),
            )?;
            write_text(
                &out_dir.join("best.cir"),
                &export_netlist(&to_stage_graph(&out.best.dag)?, &header.sweep)?,
            )?;
            let valid = out.rows.iter().filter(|r| r.valid).count();
            println!(
                "best fom {:.6} (iteration {})  valid {valid}/{}",
                out.best.fom,
                out.best.iteration,
                out.rows.len()
            );
        }
        Cmd::Bench {
            dataset,
            out,
            epochs,
            encodes,
            batch_size,
        } => {
            let records = load_records(dataset)?;
            let basis = build_default_basis();
            let data: Vec<Example> = records
                .iter()
                .map(|r| Example::new(&r.dag, &basis))
                .collect::<Result<_>>()?;
            let config = json!({"dataset": dataset, "epochs": epochs, "encodes": encodes, "batch_size": batch_size, "examples": data.len()});
            let mut csv = csv_stamp(&config);
            csv.push_str("model,measure,index,value\n");
            for kind in [ModelKind::Cktgnn, ModelKind::Baseline] {
                let max_len = data.iter().map(|e| e.seq(kind).len()).max().unwrap_or(0);
                let _ = writeln!(csv, "{},max_sequence_length,0,{max_len}", kind.name());
                let mut vae = Vae::new(
                    VaeConfig {
                        kind,
                        ..Default::default()
                    },
                    cli.seed,
                )?;
                let tc = TrainConfig {
                    epochs: *epochs,
                    batch_size: (*batch_size).min(data.len().max(1)),
                    seed: cli.seed,
                    ..Default::default()
                };
                let mut state = TrainState::new(&tc);
                let mut t = Instant::now();
                let mut times = Vec::new();
                train(&mut vae, &data, &tc, &mut state, |_, _, _| {
                    times.push(t.elapsed().as_secs_f64());
                    t = Instant::now();
                    Ok(())
                })?;
                for (i, s) in times.iter().enumerate() {
                    let _ = writeln!(csv, "{},epoch_seconds,{},{s:.6}", kind.name(), i + 1);
                }
                let n = (*encodes).min(data.len());
                let t = Instant::now();
                for ex in &data[..n] {
                    vae.latent_mean(ex)?;
                }
                let per = if n == 0 {
                    0.0
                } else {
                    t.elapsed().as_secs_f64() / n as f64
                };
                let _ = writeln!(csv, "{},encode_seconds,0,{per:.9}", kind.name());
                println!(
                    "{}: max length {max_len}  encode {:.3} ms",
                    kind.name(),
                    per * 1e3
                );
            }
            write_text(out, &csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error: kind=usage message={first}");
            return ExitCode::from(2);
        }
    };
    let res = with_workers(cli.workers, || run(&cli)).and_then(|r| r);
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} message={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
