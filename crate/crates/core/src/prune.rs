//! Magnitude pruning of NB-SMT layers and sparsity reporting.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::engine::{Engine, EngineOptions, ExecutionMode, ForwardOptions};
use crate::error::{Error, Result};
use crate::model::{LayerGraph, LayerKind};
use crate::quant::{quantize_activation_value, quantize_weights, QuantParams};

/// Zeroes the `ceil(sparsity * n)` smallest-magnitude weights of every
/// NB-SMT eligible convolution, independently per layer. Equal magnitudes
/// are pruned in index order. Biases are left alone.
pub fn magnitude_prune(graph: &LayerGraph, sparsity: f64) -> Result<LayerGraph> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!(
            "sparsity must be in [0, 1), got {sparsity}"
        )));
    }
    let mut out = graph.clone();
    for layer in out.layers.iter_mut() {
        if !layer.is_nbsmt_eligible() {
            continue;
        }
        let LayerKind::Conv2d(conv) = &mut layer.kind else { continue };
        prune_slice(conv.weight.data_mut(), sparsity);
    }
    Ok(out)
}

fn prune_slice(w: &mut [f32], sparsity: f64) {
    let count = (sparsity * w.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..w.len()).collect();
    // Stable sort keeps index order among equal magnitudes.
    order.sort_by(|&i, &j| w[i].abs().total_cmp(&w[j].abs()));
    for &i in &order[..count.min(w.len())] {
        w[i] = 0.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: String,
    pub weights: usize,
    /// Fraction of float weights equal to zero.
    pub weight_sparsity: f64,
    /// Fraction of int8 weight codes equal to zero, when quantized.
    pub quantized_weight_sparsity: Option<f64>,
}

/// Weight sparsity of every NB-SMT eligible convolution.
pub fn sparsity_report(graph: &LayerGraph, qparams: Option<&QuantParams>) -> Result<Vec<LayerSparsity>> {
    let mut out = Vec::new();
    for layer in graph.eligible_layers() {
        let LayerKind::Conv2d(conv) = &layer.kind else { continue };
        let w = &conv.weight;
        let zeros = w.data().iter().filter(|&&x| x == 0.0).count();
        let quantized_weight_sparsity = match qparams {
            Some(q) => {
                let qw = quantize_weights(w, &q.get(&layer.name)?.weight_scales)?;
                Some(qw.data.iter().filter(|&&x| x == 0).count() as f64 / qw.data.len() as f64)
            }
            None => None,
        };
        out.push(LayerSparsity {
            layer: layer.name.clone(),
            weights: w.numel(),
            weight_sparsity: zeros as f64 / w.numel() as f64,
            quantized_weight_sparsity,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSparsity {
    pub layer: String,
    /// Fraction of quantized input activations (padding excluded) equal to zero.
    pub zero_fraction: f64,
}

/// Input activation sparsity of every NB-SMT eligible layer over `ds`,
/// measured on the A8W8 reference path.
pub fn activation_sparsity(
    graph: &LayerGraph,
    qparams: &QuantParams,
    ds: &LabeledDataset,
    opts: &EngineOptions,
) -> Result<Vec<ActivationSparsity>> {
    let engine = Engine::new(graph, Some(qparams), ExecutionMode::QuantReference, opts.clone())?;
    let eligible: Vec<usize> = graph
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_nbsmt_eligible())
        .map(|(i, _)| i)
        .collect();
    let mut zeros = vec![0usize; eligible.len()];
    let mut totals = vec![0usize; eligible.len()];
    let fwd = ForwardOptions {
        taps: true,
        ..Default::default()
    };
    let bs = opts.batch_size.max(1);
    for start in (0..ds.len()).step_by(bs) {
        let end = (start + bs).min(ds.len());
        let batch = ds.images.slice_batch(start, end);
        let out = engine.run(&batch, &fwd)?;
        for (slot, &li) in eligible.iter().enumerate() {
            let input = if li == 0 { &batch } else { &out.taps[li - 1].1 };
            let qp = qparams.get(&graph.layers[li].name)?;
            zeros[slot] += input
                .data()
                .iter()
                .filter(|&&x| quantize_activation_value(x, qp.act_scale, qp.act_zero_point) == 0)
                .count();
            totals[slot] += input.numel();
        }
    }
    Ok(eligible
        .iter()
        .enumerate()
        .map(|(slot, &li)| ActivationSparsity {
            layer: graph.layers[li].name.clone(),
            zero_fraction: if totals[slot] == 0 { 0.0 } else { zeros[slot] as f64 / totals[slot] as f64 },
        })
        .collect())
}
