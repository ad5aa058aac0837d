//! Speedup/accuracy sweeps over per-layer thread assignments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::engine::{top1_accuracy, EngineOptions, ExecutionMode};
use crate::error::{Error, Result};
use crate::gemm::ThreadConfig;
use crate::model::LayerGraph;
use crate::quant::QuantParams;
use crate::recalib::{recalibrate, RecalibPlan};
use crate::squeeze::ThreadCount;

/// Largest exhaustive sweep accepted unless the caller raises the bound.
pub const DEFAULT_EXHAUSTIVE_LIMIT: usize = 729;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// All layers at 4T, then each layer alone dropped to 2T.
    FlipOneTo2T,
    /// All layers at 4T, then each layer alone dropped to 1T.
    FlipOneTo1T,
    /// Every configuration with at most `max_flips` layers moved from 4T to
    /// 2T or 1T. Refused when that is more than `limit` configurations.
    Exhaustive { max_flips: usize, limit: usize },
    Explicit(Vec<ThreadConfig>),
}

/// Number of configurations with at most `max_flips` of `layers` moved off 4T.
pub fn exhaustive_count(layers: usize, max_flips: usize) -> u128 {
    let mut total = 0u128;
    let mut choose = 1u128;
    for f in 0..=max_flips.min(layers) {
        total = total.saturating_add(choose.saturating_mul(1u128 << f.min(127)));
        choose = choose.saturating_mul((layers - f) as u128) / (f as u128 + 1);
    }
    total
}

/// Next `f`-subset of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let f = idx.len();
    for i in (0..f).rev() {
        if idx[i] < n - f + i {
            idx[i] += 1;
            for j in i + 1..f {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Configurations a strategy visits, in a fixed order.
pub fn enumerate_configs(graph: &LayerGraph, strategy: &Strategy) -> Result<Vec<ThreadConfig>> {
    let names: Vec<String> = graph.eligible_layers().map(|l| l.name.clone()).collect();
    let base = ThreadConfig::uniform(ThreadCount::Four);
    let flip = |t: ThreadCount| {
        std::iter::once(base.clone())
            .chain(names.iter().map(|n| base.clone().with(n.clone(), t)))
            .collect::<Vec<_>>()
    };
    match strategy {
        Strategy::FlipOneTo2T => Ok(flip(ThreadCount::Two)),
        Strategy::FlipOneTo1T => Ok(flip(ThreadCount::One)),
        Strategy::Exhaustive { max_flips, limit } => {
            let count = exhaustive_count(names.len(), *max_flips);
            if count > *limit as u128 {
                return Err(Error::InvalidArgument(format!(
                    "exhaustive sweep over {} layers with up to {max_flips} flips needs {count} configurations, above the limit of {limit}",
                    names.len()
                )));
            }
            // By number of flipped layers, then layer subset, then 2T before 1T.
            let mut out = Vec::with_capacity(count as usize);
            for f in 0..=(*max_flips).min(names.len()) {
                let mut idx: Vec<usize> = (0..f).collect();
                loop {
                    for bits in 0..1usize << f {
                        let mut cfg = base.clone();
                        for (pos, &layer) in idx.iter().enumerate() {
                            let t = if bits >> (f - 1 - pos) & 1 == 0 { ThreadCount::Two } else { ThreadCount::One };
                            cfg.overrides.insert(names[layer].clone(), t);
                        }
                        out.push(cfg);
                    }
                    if !next_combination(&mut idx, names.len()) {
                        break;
                    }
                }
            }
            Ok(out)
        }
        Strategy::Explicit(cfgs) => {
            for c in cfgs {
                c.check(graph)?;
            }
            Ok(cfgs.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub thread_config: ThreadConfig,
    pub label: String,
    pub recalibrated: bool,
    pub speedup: f64,
    pub top1: f64,
    /// Percentage points below the FP32 model.
    pub accuracy_decrease: f64,
    pub collision_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub fp32_top1: f64,
    pub points: Vec<SweepPoint>,
    pub front: Vec<SweepPoint>,
}

#[derive(Debug, Clone)]
pub struct SweepSpec<'a> {
    pub strategy: Strategy,
    /// Recalibrate BatchNorm separately for every configuration.
    pub recalib: Option<(&'a LabeledDataset, RecalibPlan)>,
}

pub fn run_sweep(
    graph: &LayerGraph,
    qparams: &QuantParams,
    eval: &LabeledDataset,
    spec: &SweepSpec<'_>,
    opts: &EngineOptions,
) -> Result<SweepReport> {
    let configs = enumerate_configs(graph, &spec.strategy)?;
    let fp32 = top1_accuracy(graph, None, eval, &ExecutionMode::Float32, opts)?.top1;
    let mut points = Vec::with_capacity(configs.len());
    for cfg in configs {
        log::info!("sweep {}", cfg.label(graph));
        let recal_graph;
        let g = match &spec.recalib {
            Some((source, plan)) => {
                let plan = RecalibPlan {
                    threads: cfg.clone(),
                    ..plan.clone()
                };
                recal_graph = recalibrate(graph, qparams, source, &plan, opts)?.graph;
                &recal_graph
            }
            None => graph,
        };
        let ev = top1_accuracy(g, Some(qparams), eval, &ExecutionMode::Nbsmt(cfg.clone()), opts)?;
        points.push(SweepPoint {
            label: cfg.label(graph),
            thread_config: cfg,
            recalibrated: spec.recalib.is_some(),
            speedup: ev.speedup,
            top1: ev.top1,
            accuracy_decrease: 100.0 * (fp32 - ev.top1),
            collision_rate: ev.cycles.mean_collision_rate(),
        });
    }
    let front = pareto_front(&points);
    Ok(SweepReport {
        fp32_top1: fp32,
        points,
        front,
    })
}

/// Points not dominated in (higher speedup, lower accuracy decrease),
/// ordered by speedup. Exact duplicates of a front point stay on the front.
pub fn pareto_front(points: &[SweepPoint]) -> Vec<SweepPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| points[j].speedup.total_cmp(&points[i].speedup).then(i.cmp(&j)));
    let mut keep = Vec::new();
    let mut best = f64::INFINITY;
    let mut g = 0;
    while g < order.len() {
        let s = points[order[g]].speedup;
        let end = g + order[g..].iter().take_while(|&&i| points[i].speedup == s).count();
        let group_min = order[g..end]
            .iter()
            .map(|&i| points[i].accuracy_decrease)
            .fold(f64::INFINITY, f64::min);
        if group_min < best {
            keep.extend(
                order[g..end]
                    .iter()
                    .copied()
                    .filter(|&i| points[i].accuracy_decrease == group_min),
            );
            best = group_min;
        }
        g = end;
    }
    keep.sort_by(|&i, &j| points[i].speedup.total_cmp(&points[j].speedup).then(i.cmp(&j)));
    keep.into_iter().map(|i| points[i].clone()).collect()
}

fn dat_lines(points: &[SweepPoint]) -> String {
    let mut s = String::from("# speedup accuracy_decrease\n");
    for p in points {
        writeln!(s, "{:.6} {:.6}", p.speedup, p.accuracy_decrease).unwrap();
    }
    s
}

/// Strips a trailing `.dat` so `fig` and `fig.dat` name the same outputs.
pub fn output_stem(out: &Path) -> Result<PathBuf> {
    let bad = || Error::InvalidArgument(format!("bad output path {}", out.display()));
    let name = out.file_name().and_then(|n| n.to_str()).ok_or_else(bad)?;
    let name = name.strip_suffix(".dat").filter(|n| !n.is_empty()).unwrap_or(name);
    Ok(out.with_file_name(name))
}

/// Writes `<stem>.dat` with every point and `<stem>_front.dat` with the
/// Pareto front, for plotting. A trailing `.dat` on `out` is dropped first.
/// Returns both paths.
pub fn write_dat(report: &SweepReport, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let stem = output_stem(out)?;
    let name = stem.file_name().and_then(|n| n.to_str()).unwrap();
    let all = stem.with_file_name(format!("{name}.dat"));
    let front = stem.with_file_name(format!("{name}_front.dat"));
    std::fs::write(&all, dat_lines(&report.points)).map_err(|e| Error::io(&all, e))?;
    std::fs::write(&front, dat_lines(&report.front)).map_err(|e| Error::io(&front, e))?;
    Ok((all, front))
}
