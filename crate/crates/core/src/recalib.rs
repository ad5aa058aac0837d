//! BatchNorm recalibration under NB-SMT execution.
//!
//! Training-subset images are pushed through the noisy array with every
//! BatchNorm normalizing by its own batch statistics; after each batch the
//! running mean and (unbiased) variance move toward the batch values by
//! an exponential moving average. Nothing else in the graph changes: no
//! gradients, no touching gamma, beta or any weight.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::engine::{Engine, EngineOptions, ExecutionMode, ForwardOptions};
use crate::error::{Error, Result};
use crate::gemm::ThreadConfig;
use crate::model::{LayerGraph, LayerKind};
use crate::quant::QuantParams;
use crate::squeeze::ThreadCount;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecalibPlan {
    pub batch_size: usize,
    pub num_batches: usize,
    /// EMA weight of each new batch, in (0, 1].
    pub momentum: f64,
    pub threads: ThreadConfig,
}

impl Default for RecalibPlan {
    fn default() -> Self {
        Self {
            batch_size: 64,
            num_batches: 100,
            momentum: 0.1,
            threads: ThreadConfig::uniform(ThreadCount::Four),
        }
    }
}

impl RecalibPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in (0, 1], got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.num_batches == 0 {
            return Err(Error::InvalidArgument(
                "batch size and batch count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Running statistics of one BatchNorm after a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatSnapshot {
    pub layer: String,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecalibLog {
    /// One entry per batch, each listing every BatchNorm layer.
    pub batches: Vec<Vec<StatSnapshot>>,
}

#[derive(Debug, Clone)]
pub struct Recalibrated {
    pub graph: LayerGraph,
    pub log: RecalibLog,
}

/// `(1 - m) * old + m * batch`.
pub fn ema_update(old: f32, batch: f64, momentum: f64) -> f32 {
    ((1.0 - momentum) * old as f64 + momentum * batch) as f32
}

/// Indices of batch `b`: consecutive samples, wrapping around the source.
fn batch_indices(b: usize, batch_size: usize, len: usize) -> Vec<usize> {
    let bs = batch_size.min(len);
    (0..bs).map(|j| (b * bs + j) % len).collect()
}

/// Regathers running statistics of every BatchNorm under `plan.threads`.
///
/// Only `source.images` is read. Batches are taken in source order, so the
/// result is deterministic.
pub fn recalibrate(
    graph: &LayerGraph,
    qparams: &QuantParams,
    source: &LabeledDataset,
    plan: &RecalibPlan,
    opts: &EngineOptions,
) -> Result<Recalibrated> {
    plan.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidArgument("recalibration source is empty".into()));
    }
    if graph.batchnorm_layers().next().is_none() {
        return Err(Error::InvalidArgument("graph has no BatchNorm layer".into()));
    }
    let mut current = graph.clone();
    let mut log = RecalibLog::default();
    let fwd = ForwardOptions {
        stat_collection: true,
        ..Default::default()
    };
    for b in 0..plan.num_batches {
        let idx = batch_indices(b, plan.batch_size, source.len());
        let batch = source.images.gather_batch(&idx);
        // Train-mode BN never reads running stats, so the engine can be
        // rebuilt per batch from the evolving graph without changing results.
        let engine = Engine::new(
            &current,
            Some(qparams),
            ExecutionMode::Nbsmt(plan.threads.clone()),
            opts.clone(),
        )?;
        let out = engine.run(&batch, &fwd)?;
        let mut snaps = Vec::with_capacity(out.bn_stats.len());
        for st in out.bn_stats {
            let LayerKind::BatchNorm(bn) = &mut current.layers[st.layer].kind else {
                unreachable!("stats come from batchnorm layers")
            };
            for c in 0..bn.channels() {
                bn.running_mean[c] = ema_update(bn.running_mean[c], st.mean[c], plan.momentum);
                bn.running_var[c] = ema_update(bn.running_var[c], st.var_unbiased[c], plan.momentum);
            }
            snaps.push(StatSnapshot {
                layer: st.name,
                batch_mean: st.mean,
                batch_var: st.var_unbiased,
                running_mean: bn.running_mean.clone(),
                running_var: bn.running_var.clone(),
            });
        }
        log.batches.push(snaps);
    }
    current.validate()?;
    Ok(Recalibrated {
        graph: current,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatDrift {
    pub layer: String,
    /// L2 norm of the per-channel running-mean change.
    pub mean_delta: f64,
    /// L2 norm of the per-channel running-variance change.
    pub var_delta: f64,
}

/// Per-BatchNorm change in running statistics between two graphs of the
/// same architecture.
pub fn stat_drift(before: &LayerGraph, after: &LayerGraph) -> Result<Vec<StatDrift>> {
    let mismatch = || Error::InvalidArgument("stat_drift needs graphs of the same architecture".into());
    if before.layers.len() != after.layers.len() {
        return Err(mismatch());
    }
    let mut out = Vec::new();
    for (a, b) in before.layers.iter().zip(&after.layers) {
        if a.name != b.name || a.kind.tag() != b.kind.tag() {
            return Err(mismatch());
        }
        if let (LayerKind::BatchNorm(x), LayerKind::BatchNorm(y)) = (&a.kind, &b.kind) {
            if x.channels() != y.channels() {
                return Err(mismatch());
            }
            let l2 = |u: &[f32], v: &[f32]| {
                u.iter()
                    .zip(v)
                    .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            out.push(StatDrift {
                layer: a.name.clone(),
                mean_delta: l2(&x.running_mean, &y.running_mean),
                var_delta: l2(&x.running_var, &y.running_var),
            });
        }
    }
    Ok(out)
}
