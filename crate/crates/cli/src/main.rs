use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nbsmt::engine::Evaluation;
use nbsmt::prune::{activation_sparsity, magnitude_prune, sparsity_report, ActivationSparsity, LayerSparsity};
use nbsmt::recalib::{stat_drift, RecalibLog, StatDrift};
use nbsmt::quant::DEFAULT_CALIBRATION_SAMPLES;
use nbsmt::sweep::{output_stem, run_sweep, write_dat, Strategy, SweepSpec, DEFAULT_EXHAUSTIVE_LIMIT};
use nbsmt::{
    calibrate, load_dataset, load_model, recalibrate, sample_calibration_subset, save_model, top1_accuracy,
    ArrayConfig, DatasetFormat, EngineOptions, ExecutionMode, LabeledDataset, LayerGraph, Parallelism,
    QuantParams, RecalibPlan, ThreadConfig, ThreadCount,
};

#[derive(Parser)]
#[command(name = "nbsmt", version, about = "NB-SMT systolic array simulator for quantized CNNs")]
struct Cli {
    /// Seed for every sampled subset.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Processing-element grid, RxC.
    #[arg(long, global = true, default_value = "32x32")]
    array: ArrayConfig,
    /// Images per forward pass.
    #[arg(long, global = true, default_value_t = 200)]
    eval_batch: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Image file (mnist-idx, labels inferred) or batch file/directory (cifar10-bin).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mnist-idx")]
    format: DatasetFormat,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ThreadArgs {
    /// Thread count for every eligible layer.
    #[arg(long, default_value = "4T")]
    threads: ThreadCount,
    /// Per-layer overrides, e.g. conv2=2,conv3=1T.
    #[arg(long, default_value = "")]
    threads_per_layer: String,
}

impl ThreadArgs {
    fn config(&self) -> Result<ThreadConfig> {
        Ok(ThreadConfig::parse_overrides(self.threads, &self.threads_per_layer)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fp32,
    A8w8,
    Nbsmt,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    /// All 4T, then each eligible layer alone at 2T.
    #[value(name = "flip-one-to-2T", alias = "flip2")]
    FlipOneTo2T,
    /// All 4T, then each eligible layer alone at 1T.
    #[value(name = "flip-one-to-1T", alias = "flip1")]
    FlipOneTo1T,
    /// Every assignment with at most --max-flips layers moved off 4T.
    Exhaustive,
}

#[derive(Subcommand)]
enum Command {
    /// Derive quantization parameters from a sampled calibration subset.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = DEFAULT_CALIBRATION_SAMPLES)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy and cycle report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Quantization parameters from `calibrate`.
        #[arg(long, visible_alias = "qparams")]
        quant: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "nbsmt")]
        mode: Mode,
        #[command(flatten)]
        threads: ThreadArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regather BatchNorm statistics under NB-SMT execution.
    Recalibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, visible_alias = "qparams")]
        quant: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        threads: ThreadArgs,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 100)]
        batches: usize,
        #[arg(long, default_value_t = 0.1)]
        momentum: f64,
        /// Output model directory.
        #[arg(long)]
        out: PathBuf,
        /// Per-batch statistics log (JSON).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Magnitude-prune the NB-SMT eligible convolutions.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sparsity: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Speedup/accuracy sweep over per-layer thread assignments.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, visible_alias = "qparams")]
        quant: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "flip-one-to-2T")]
        strategy: StrategyArg,
        /// Most layers moved off 4T in an exhaustive sweep.
        #[arg(long, default_value_t = 2)]
        max_flips: usize,
        /// Refuse exhaustive sweeps with more configurations than this.
        #[arg(long, default_value_t = DEFAULT_EXHAUSTIVE_LIMIT)]
        max_configs: usize,
        /// Recalibrate BatchNorm for each configuration before evaluating it.
        #[arg(long)]
        recalib: bool,
        /// Recalibration images (same format). Defaults to --data.
        #[arg(long)]
        recal_data: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        recal_batch_size: usize,
        #[arg(long, default_value_t = 100)]
        recal_batches: usize,
        /// Output stem: writes <stem>.json, <stem>.dat and <stem>_front.dat.
        /// A trailing .dat is accepted.
        #[arg(long)]
        out: PathBuf,
    },
    /// Weight and activation sparsity, and statistics drift between models.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, visible_alias = "qparams")]
        quant: Option<PathBuf>,
        /// Measure activation sparsity on this dataset (needs --quant).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "mnist-idx")]
        format: DatasetFormat,
        #[arg(long)]
        limit: Option<usize>,
        /// Compare running statistics against this model.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Report {
    weights: Vec<LayerSparsity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    activations: Option<Vec<ActivationSparsity>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drift: Option<Vec<StatDrift>>,
}

#[derive(Serialize)]
struct RecalibSummary {
    threads: String,
    drift: Vec<StatDrift>,
}

fn load_data(graph: &LayerGraph, path: &Path, format: DatasetFormat, limit: Option<usize>) -> Result<LabeledDataset> {
    let ds = load_dataset(path, format, &graph.input_norm)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(match limit {
        Some(n) if n < ds.len() => ds.head(n),
        _ => ds,
    })
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let parallelism = match cli.jobs {
        Some(1) => Parallelism::Sequential,
        _ => Parallelism::Parallel,
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let opts = EngineOptions {
        array: cli.array,
        batch_size: cli.eval_batch.max(1),
        parallelism,
    };
    match cli.cmd {
        Command::Calibrate { model, data, samples, out } => {
            let graph = load_model(&model)?;
            let ds = load_data(&graph, &data.data, data.format, data.limit)?;
            let subset = sample_calibration_subset(&ds, samples.min(ds.len()), cli.seed)?;
            let q = calibrate(&graph, &subset, &opts)?;
            q.save(&out)?;
            log::info!("wrote {}", out.display());
        }
        Command::Eval { model, quant, data, mode, threads, out } => {
            let graph = load_model(&model)?;
            let q = quant.map(QuantParams::load).transpose()?;
            let ds = load_data(&graph, &data.data, data.format, data.limit)?;
            let mode = match mode {
                Mode::Fp32 => ExecutionMode::Float32,
                Mode::A8w8 => ExecutionMode::QuantReference,
                Mode::Nbsmt => ExecutionMode::Nbsmt(threads.config()?),
            };
            let ev: Evaluation = top1_accuracy(&graph, q.as_ref(), &ds, &mode, &opts)?;
            write_json(&ev, out.as_deref())?;
        }
        Command::Recalibrate { model, quant, data, threads, batch_size, batches, momentum, out, log } => {
            let graph = load_model(&model)?;
            let q = QuantParams::load(&quant)?;
            let ds = load_data(&graph, &data.data, data.format, data.limit)?;
            let plan = RecalibPlan {
                batch_size,
                num_batches: batches,
                momentum,
                threads: threads.config()?,
            };
            let r = recalibrate(&graph, &q, &ds, &plan, &opts)?;
            save_model(&r.graph, &out)?;
            if let Some(p) = log {
                write_json::<RecalibLog>(&r.log, Some(&p))?;
            }
            write_json(
                &RecalibSummary {
                    threads: plan.threads.label(&graph),
                    drift: stat_drift(&graph, &r.graph)?,
                },
                None,
            )?;
        }
        Command::Prune { model, sparsity, out } => {
            let graph = load_model(&model)?;
            let pruned = magnitude_prune(&graph, sparsity)?;
            save_model(&pruned, &out)?;
            write_json(&sparsity_report(&pruned, None)?, None)?;
        }
        Command::Sweep {
            model,
            quant,
            data,
            strategy,
            max_flips,
            max_configs,
            recalib,
            recal_data,
            recal_batch_size,
            recal_batches,
            out,
        } => {
            let graph = load_model(&model)?;
            let q = QuantParams::load(&quant)?;
            let ds = load_data(&graph, &data.data, data.format, data.limit)?;
            let recal_ds = match (recalib, recal_data) {
                (false, None) => None,
                (_, Some(p)) => Some(load_data(&graph, &p, data.format, None)?),
                (true, None) => Some(ds.clone()),
            };
            let strategy = match strategy {
                StrategyArg::FlipOneTo2T => Strategy::FlipOneTo2T,
                StrategyArg::FlipOneTo1T => Strategy::FlipOneTo1T,
                StrategyArg::Exhaustive => Strategy::Exhaustive { max_flips, limit: max_configs },
            };
            let plan = RecalibPlan {
                batch_size: recal_batch_size,
                num_batches: recal_batches,
                ..Default::default()
            };
            let spec = SweepSpec {
                strategy,
                recalib: recal_ds.as_ref().map(|d| (d, plan)),
            };
            let report = run_sweep(&graph, &q, &ds, &spec, &opts)?;
            let stem = output_stem(&out)?;
            let mut json = stem.clone().into_os_string();
            json.push(".json");
            write_json(&report, Some(Path::new(&json)))?;
            write_dat(&report, &stem)?;
        }
        Command::Report { model, quant, data, format, limit, against, out } => {
            let graph = load_model(&model)?;
            let q = quant.map(QuantParams::load).transpose()?;
            let activations = match (&data, &q) {
                (Some(p), Some(q)) => {
                    let ds = load_data(&graph, p, format, limit)?;
                    Some(activation_sparsity(&graph, q, &ds, &opts)?)
                }
                (Some(_), None) => anyhow::bail!(nbsmt::Error::InvalidArgument(
                    "activation sparsity needs --quant".into()
                )),
                _ => None,
            };
            let drift = against
                .map(|p| -> Result<_> { Ok(stat_drift(&graph, &load_model(p)?)?) })
                .transpose()?;
            let report = Report {
                weights: sparsity_report(&graph, q.as_ref())?,
                activations,
                drift,
            };
            write_json(&report, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NBSMT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<nbsmt::Error>()
                .or_else(|| e.chain().find_map(|c| c.downcast_ref::<nbsmt::Error>()))
                .map_or("other", |e| e.kind());
            let line = serde_json::json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
