//! Forward pass of the CNN in float, A8W8 reference and NB-SMT modes.
//!
//! Conv/FC layers run in the integer domain: quantize the layer input,
//! lower to GEMM, accumulate (exactly or on the NB-SMT array), dequantize
//! and add the float bias. BatchNorm, ReLU and max-pool stay in float.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::gemm::{
    im2col_lower, nbsmt_gemm, ArrayConfig, CycleReport, GemmOperands, GemmStats,
    ThreadConfig,
};
use crate::model::{ActShape, BatchNormParams, Conv2d, LayerGraph, LayerKind};
use crate::par::{self, Parallelism};
use crate::quant::{quantize_activation_value, quantize_weights, LayerQuantParams, QuantParams};
use crate::squeeze::ThreadCount;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "threads", rename_all = "snake_case")]
pub enum ExecutionMode {
    Float32,
    /// A8W8 with exact accumulation everywhere.
    QuantReference,
    Nbsmt(ThreadConfig),
}

impl ExecutionMode {
    pub fn label(&self) -> String {
        match self {
            ExecutionMode::Float32 => "float32".into(),
            ExecutionMode::QuantReference => "quant_reference".into(),
            ExecutionMode::Nbsmt(t) => format!("nbsmt({t})"),
        }
    }

    fn threads_for(&self, layer: &crate::model::Layer) -> ThreadCount {
        match self {
            ExecutionMode::Nbsmt(cfg) => cfg.threads_for(layer),
            _ => ThreadCount::One,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOptions {
    pub array: ArrayConfig,
    /// Images per forward pass in [`top1_accuracy`] and calibration.
    pub batch_size: usize,
    pub parallelism: Parallelism,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            array: ArrayConfig::default(),
            batch_size: 200,
            parallelism: Parallelism::default(),
        }
    }
}

/// Optional extras for one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Normalize with batch statistics at every BatchNorm and report them.
    pub stat_collection: bool,
    /// Keep every layer's output.
    pub taps: bool,
    /// Record min/max of every conv/FC input (float values).
    pub observe_inputs: bool,
}

/// Statistics of one BatchNorm input over a batch, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub layer: usize,
    pub name: String,
    pub mean: Vec<f64>,
    pub var_biased: Vec<f64>,
    pub var_unbiased: Vec<f64>,
    /// Values reduced per channel (N*H*W).
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// N x classes.
    pub logits: Tensor,
    pub cycles: CycleReport,
    pub taps: Vec<(String, Tensor)>,
    pub bn_stats: Vec<BnBatchStats>,
    pub input_ranges: BTreeMap<String, (f32, f32)>,
}

struct QuantLayer {
    qp: LayerQuantParams,
    /// N x K, row-major.
    weights: Vec<i8>,
    /// sum_k w[n][k], for the zero-point correction.
    weight_sums: Vec<i32>,
}

/// A graph bound to an execution mode, with weights pre-quantized.
pub struct Engine<'g> {
    graph: &'g LayerGraph,
    mode: ExecutionMode,
    opts: EngineOptions,
    shapes: Vec<ActShape>,
    quant: Vec<Option<QuantLayer>>,
}

impl<'g> Engine<'g> {
    pub fn new(
        graph: &'g LayerGraph,
        qparams: Option<&QuantParams>,
        mode: ExecutionMode,
        opts: EngineOptions,
    ) -> Result<Self> {
        let shapes = graph.shapes()?;
        if let ExecutionMode::Nbsmt(cfg) = &mode {
            cfg.check(graph)?;
        }
        let mut quant = Vec::with_capacity(graph.layers.len());
        for layer in &graph.layers {
            let weight = match (&mode, &layer.kind) {
                (ExecutionMode::Float32, _) => None,
                (_, LayerKind::Conv2d(c)) => Some(&c.weight),
                (_, LayerKind::FullyConnected(f)) => Some(&f.weight),
                _ => None,
            };
            let Some(weight) = weight else {
                quant.push(None);
                continue;
            };
            let qparams = qparams.ok_or_else(|| Error::MissingQuantParams(layer.name.clone()))?;
            let qp = qparams.get(&layer.name)?.clone();
            let q = quantize_weights(weight, &qp.weight_scales)?;
            let k = weight.item_len();
            let weight_sums = q
                .data
                .chunks(k)
                .map(|row| row.iter().map(|&x| x as i32).sum())
                .collect();
            quant.push(Some(QuantLayer {
                qp,
                weights: q.data,
                weight_sums,
            }));
        }
        Ok(Self {
            graph,
            mode,
            opts,
            shapes,
            quant,
        })
    }

    pub fn mode(&self) -> &ExecutionMode {
        &self.mode
    }

    /// Runs one batch (N, C, H, W) through the graph.
    pub fn run(&self, batch: &Tensor, fwd: &ForwardOptions) -> Result<ForwardOutput> {
        let [c, h, w] = self.graph.input_shape;
        if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::InvalidArgument(format!(
                "batch shape {:?} does not match model input {:?}",
                batch.shape(),
                self.graph.input_shape
            )));
        }
        let n = batch.batch();
        let par = self.opts.parallelism;
        let mut x = batch.clone();
        let mut out = ForwardOutput {
            logits: Tensor::zeros(vec![n, self.graph.num_classes]),
            cycles: CycleReport::default(),
            taps: Vec::new(),
            bn_stats: Vec::new(),
            input_ranges: BTreeMap::new(),
        };
        for (i, layer) in self.graph.layers.iter().enumerate() {
            let shape = self.shapes[i];
            if fwd.observe_inputs && layer.kind.is_gemm() {
                let (lo, hi) = x
                    .data()
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                out.input_ranges.insert(layer.name.clone(), (lo, hi));
            }
            let threads = self.mode.threads_for(layer);
            x = match &layer.kind {
                LayerKind::Conv2d(conv) => {
                    let ActShape::Spatial { h, w, .. } = shape else {
                        unreachable!("validated graph")
                    };
                    let (oh, ow) = conv.output_hw(h, w).expect("validated graph");
                    let (y, m, k, st) = match &self.quant[i] {
                        None => float_conv(conv, &x, n, (h, w), par)?,
                        Some(ql) => self.quant_conv(conv, ql, &x, n, (h, w), threads, &layer.name)?,
                    };
                    out.cycles
                        .layer_mut(&layer.name, threads, layer.nbsmt_exempt)
                        .record(m, k, conv.out_channels(), self.opts.array, &st);
                    rows_to_nchw(&y, n, conv.out_channels(), oh, ow)
                }
                LayerKind::FullyConnected(fc) => {
                    let (out_f, in_f) = (fc.out_features(), fc.in_features());
                    let (mut y, st) = match &self.quant[i] {
                        None => (float_gemm(x.data(), fc.weight.data(), n, in_f, out_f, par), GemmStats::default()),
                        Some(ql) => {
                            let a = quantize_slice(x.data(), &ql.qp);
                            self.int_gemm(ql, a, n, in_f, out_f, threads, &layer.name)?
                        }
                    };
                    for row in y.chunks_mut(out_f) {
                        for (v, b) in row.iter_mut().zip(&fc.bias) {
                            *v += b;
                        }
                    }
                    out.cycles
                        .layer_mut(&layer.name, threads, layer.nbsmt_exempt)
                        .record(n, in_f, out_f, self.opts.array, &st);
                    Tensor::new(vec![n, out_f], y)?
                }
                LayerKind::BatchNorm(bn) => {
                    if fwd.stat_collection {
                        let stats = batch_stats(&x, bn.channels());
                        let y = normalize_with(&x, bn, &stats.mean, &stats.var_biased);
                        out.bn_stats.push(BnBatchStats {
                            layer: i,
                            name: layer.name.clone(),
                            ..stats
                        });
                        y
                    } else {
                        let mean: Vec<f64> = bn.running_mean.iter().map(|&v| v as f64).collect();
                        let var: Vec<f64> = bn.running_var.iter().map(|&v| v as f64).collect();
                        normalize_with(&x, bn, &mean, &var)
                    }
                }
                LayerKind::Relu => {
                    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    x
                }
                LayerKind::MaxPool { kernel, stride } => maxpool(&x, *kernel, *stride),
            };
            if fwd.taps {
                out.taps.push((layer.name.clone(), x.clone()));
            }
        }
        out.logits = x.reshape(vec![n, self.graph.num_classes])?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn quant_conv(
        &self,
        conv: &Conv2d,
        ql: &QuantLayer,
        x: &Tensor,
        n: usize,
        hw: (usize, usize),
        threads: ThreadCount,
        name: &str,
    ) -> Result<(Vec<f32>, usize, usize, GemmStats)> {
        let q = quantize_slice(x.data(), &ql.qp);
        let (a, m, k) = im2col_lower(conv, &q, n, hw, ql.qp.act_zero_point)?;
        let (mut y, st) = self.int_gemm(ql, a, m, k, conv.out_channels(), threads, name)?;
        let cout = conv.out_channels();
        for row in y.chunks_mut(cout) {
            for (v, b) in row.iter_mut().zip(&conv.bias) {
                *v += b;
            }
        }
        Ok((y, m, k, st))
    }

    /// Integer GEMM plus dequantization (no bias).
    #[allow(clippy::too_many_arguments)]
    fn int_gemm(
        &self,
        ql: &QuantLayer,
        a: Vec<u8>,
        m: usize,
        k: usize,
        n: usize,
        threads: ThreadCount,
        name: &str,
    ) -> Result<(Vec<f32>, GemmStats)> {
        let par = self.opts.parallelism;
        let ops = GemmOperands {
            m,
            k,
            n,
            a,
            w: ql.weights.clone(),
        };
        let zp = ql.qp.act_zero_point as i32;
        if threads != ThreadCount::One && zp != 0 {
            return Err(Error::InvalidArgument(format!(
                "layer {name}: NB-SMT layers need a zero activation zero-point, got {zp}"
            )));
        }
        let (acc, st) = nbsmt_gemm(&ops, threads, par).map_err(|e| match e {
            Error::Overflow(_) => Error::Overflow(name.to_string()),
            e => e,
        })?;
        let s_a = ql.qp.act_scale;
        let mut y = vec![0f32; m * n];
        for (row_out, row_acc) in y.chunks_mut(n).zip(acc.chunks(n)) {
            for j in 0..n {
                let v = row_acc[j] - zp * ql.weight_sums[j];
                row_out[j] = v as f32 * (s_a * ql.qp.weight_scales[j]);
            }
        }
        Ok((y, st))
    }
}

fn quantize_slice(x: &[f32], qp: &LayerQuantParams) -> Vec<u8> {
    x.iter()
        .map(|&v| quantize_activation_value(v, qp.act_scale, qp.act_zero_point))
        .collect()
}

/// `out[m][n] = sum_k a[m][k] * w[n][k]` in f32.
fn float_gemm(a: &[f32], w: &[f32], m: usize, k: usize, n: usize, par: Parallelism) -> Vec<f32> {
    const ROWS: usize = 256;
    let mut out = vec![0f32; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    par::chunks_mut_reduce(
        &mut out,
        ROWS * n,
        par,
        (),
        |ci, chunk| {
            let rows = chunk.len() / n;
            let a_blk = &a[ci * ROWS * k..][..rows * k];
            // SAFETY: the slices cover rows x k, n x k and rows x n elements
            // with the strides given.
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a_blk.as_ptr(),
                    k as isize,
                    1,
                    w.as_ptr(),
                    1,
                    k as isize,
                    0.0,
                    chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        },
        |_, _| (),
    );
    out
}

fn float_conv(
    conv: &Conv2d,
    x: &Tensor,
    n: usize,
    hw: (usize, usize),
    par: Parallelism,
) -> Result<(Vec<f32>, usize, usize, GemmStats)> {
    let (h, w) = hw;
    let cin = conv.in_channels();
    let (oh, ow) = conv.output_hw(h, w).expect("validated graph");
    let (kh, kw) = conv.kernel();
    let k = cin * kh * kw;
    let m = n * oh * ow;
    let (s, p) = (conv.stride as isize, conv.padding as isize);
    let mut cols = vec![0f32; m * k];
    let src = x.data();
    for (r, row) in cols.chunks_mut(k).enumerate() {
        let b = r / (oh * ow);
        let (oy, ox) = ((r / ow) % oh, r % ow);
        let img = &src[b * cin * h * w..];
        let mut col = 0;
        for c in 0..cin {
            for ky in 0..kh {
                let iy = oy as isize * s + ky as isize - p;
                for kx in 0..kw {
                    let ix = ox as isize * s + kx as isize - p;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        row[col] = img[(c * h + iy as usize) * w + ix as usize];
                    }
                    col += 1;
                }
            }
        }
    }
    let cout = conv.out_channels();
    let mut y = float_gemm(&cols, conv.weight.data(), m, k, cout, par);
    for row in y.chunks_mut(cout) {
        for (v, b) in row.iter_mut().zip(&conv.bias) {
            *v += b;
        }
    }
    Ok((y, m, k, GemmStats::default()))
}

/// GEMM rows `(image, oy, ox)` x channels into N, C, H, W.
fn rows_to_nchw(y: &[f32], n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let mut out = vec![0f32; n * c * h * w];
    let plane = h * w;
    for b in 0..n {
        for p in 0..plane {
            let row = &y[(b * plane + p) * c..][..c];
            for (ch, &v) in row.iter().enumerate() {
                out[(b * c + ch) * plane + p] = v;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("sizes agree")
}

fn channel_layout(x: &Tensor, channels: usize) -> (usize, usize) {
    let n = x.batch();
    let per_image = x.item_len();
    (n, per_image / channels)
}

/// Per-channel mean and variance over N (and H, W when spatial).
fn batch_stats(x: &Tensor, channels: usize) -> BnBatchStats {
    let (n, plane) = channel_layout(x, channels);
    let data = x.data();
    let count = n * plane;
    let mut mean = vec![0f64; channels];
    let mut var_b = vec![0f64; channels];
    let mut var_u = vec![0f64; channels];
    for c in 0..channels {
        let values = (0..n).flat_map(|b| data[(b * channels + c) * plane..][..plane].iter());
        let sum: f64 = values.clone().map(|&v| v as f64).sum();
        let mu = sum / count as f64;
        let ss: f64 = values.map(|&v| (v as f64 - mu).powi(2)).sum();
        mean[c] = mu;
        var_b[c] = ss / count as f64;
        var_u[c] = if count > 1 { ss / (count - 1) as f64 } else { 0.0 };
    }
    BnBatchStats {
        layer: 0,
        name: String::new(),
        mean,
        var_biased: var_b,
        var_unbiased: var_u,
        count,
    }
}

fn normalize_with(x: &Tensor, bn: &BatchNormParams, mean: &[f64], var: &[f64]) -> Tensor {
    let channels = bn.channels();
    let (n, plane) = channel_layout(x, channels);
    let mut y = x.clone();
    let data = y.data_mut();
    for c in 0..channels {
        let inv = 1.0 / (var[c] + bn.eps as f64).sqrt();
        let scale = (bn.gamma[c] as f64 * inv) as f32;
        let shift = (bn.beta[c] as f64 - mean[c] * bn.gamma[c] as f64 * inv) as f32;
        for b in 0..n {
            for v in &mut data[(b * channels + c) * plane..][..plane] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

fn maxpool(x: &Tensor, kernel: usize, stride: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in src.chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        m = m.max(plane[(oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).expect("sizes agree")
}

/// Runs one batch in inference mode.
pub fn forward(
    graph: &LayerGraph,
    qparams: Option<&QuantParams>,
    batch: &Tensor,
    mode: &ExecutionMode,
    opts: &EngineOptions,
) -> Result<ForwardOutput> {
    Engine::new(graph, qparams, mode.clone(), opts.clone())?.run(batch, &ForwardOptions::default())
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: ExecutionMode,
    pub top1: f64,
    pub correct: usize,
    pub total: usize,
    pub speedup: f64,
    pub cycles: CycleReport,
}

/// Top-1 accuracy of `mode` over `ds`, with merged cycle accounting.
pub fn top1_accuracy(
    graph: &LayerGraph,
    qparams: Option<&QuantParams>,
    ds: &LabeledDataset,
    mode: &ExecutionMode,
    opts: &EngineOptions,
) -> Result<Evaluation> {
    let engine = Engine::new(graph, qparams, mode.clone(), opts.clone())?;
    let bs = opts.batch_size.max(1);
    let mut correct = 0;
    let mut cycles = CycleReport::default();
    for start in (0..ds.len()).step_by(bs) {
        let end = (start + bs).min(ds.len());
        let out = engine.run(&ds.images.slice_batch(start, end), &ForwardOptions::default())?;
        let classes = graph.num_classes;
        correct += out
            .logits
            .data()
            .chunks(classes)
            .zip(&ds.labels[start..end])
            .filter(|(row, &l)| argmax(row) == l as usize)
            .count();
        cycles.merge(&out.cycles);
    }
    let total = ds.len();
    Ok(Evaluation {
        mode: mode.clone(),
        top1: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        speedup: cycles.speedup(),
        cycles,
    })
}

/// Folds every BatchNorm into the convolution right before it.
pub fn fold_batchnorm(graph: &LayerGraph) -> Result<LayerGraph> {
    let mut layers: Vec<crate::model::Layer> = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let LayerKind::BatchNorm(bn) = &layer.kind else {
            layers.push(layer.clone());
            continue;
        };
        let prev = layers.last_mut().and_then(|l| match &mut l.kind {
            LayerKind::Conv2d(c) => Some(c),
            _ => None,
        });
        let Some(conv) = prev else {
            return Err(Error::Validation {
                layer: i,
                name: layer.name.clone(),
                detail: "batchnorm does not directly follow a convolution".into(),
            });
        };
        let per = conv.weight.item_len();
        for c in 0..bn.channels() {
            let inv = 1.0 / (bn.running_var[c] as f64 + bn.eps as f64).sqrt();
            let g = bn.gamma[c] as f64 * inv;
            for v in &mut conv.weight.data_mut()[c * per..(c + 1) * per] {
                *v = (*v as f64 * g) as f32;
            }
            conv.bias[c] =
                ((conv.bias[c] as f64 - bn.running_mean[c] as f64) * g + bn.beta[c] as f64) as f32;
        }
    }
    let mut folded = graph.clone();
    folded.layers = layers;
    folded.validate()?;
    Ok(folded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::tiny_graph;
    use crate::model::{InputNorm, Layer};
    use crate::quant::calibrate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![n, 1, 8, 8],
            (0..n * 64).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
        )
        .unwrap()
    }

    fn dataset(n: usize, seed: u64) -> LabeledDataset {
        LabeledDataset::new(images(n, seed), (0..n as u32).map(|i| i % 3).collect(), 3).unwrap()
    }

    /// Direct nested-loop convolution, independent of im2col.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Vec<f32> {
        let s = x.shape();
        let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = conv.output_hw(h, w).unwrap();
        let (kh, kw) = conv.kernel();
        let cout = conv.out_channels();
        let mut out = vec![0f32; n * cout * oh * ow];
        for b in 0..n {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias[o] as f64;
                        for c in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.data()[((o * cin + c) * kh + ky) * kw + kx];
                                    let xv = x.data()[((b * cin + c) * h + iy as usize) * w + ix as usize];
                                    acc += wv as f64 * xv as f64;
                                }
                            }
                        }
                        out[((b * cout + o) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn float_conv_matches_naive() {
        let g = tiny_graph(11);
        let LayerKind::Conv2d(conv) = &g.layers[0].kind else { panic!() };
        let x = images(3, 2);
        let (y, ..) = float_conv(conv, &x, 3, (8, 8), Parallelism::Sequential).unwrap();
        let y = rows_to_nchw(&y, 3, 4, 8, 8);
        for (a, b) in y.data().iter().zip(naive_conv(conv, &x)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn strided_conv_shapes() {
        let conv = Conv2d {
            weight: Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| i as f32 * 0.1).collect()).unwrap(),
            bias: vec![0.5, -0.5],
            stride: 2,
            padding: 0,
        };
        let x = images(1, 3);
        let (y, m, k, _) = float_conv(&conv, &x, 1, (8, 8), Parallelism::Sequential).unwrap();
        assert_eq!((m, k), (9, 9));
        let y = rows_to_nchw(&y, 1, 2, 3, 3);
        for (a, b) in y.data().iter().zip(naive_conv(&conv, &x)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn quant_reference_equals_all_one_thread() {
        let g = tiny_graph(12);
        let opts = EngineOptions::default();
        let q = calibrate(&g, &dataset(32, 1), &opts).unwrap();
        let x = images(16, 9);
        let r = forward(&g, Some(&q), &x, &ExecutionMode::QuantReference, &opts).unwrap();
        let one = ExecutionMode::Nbsmt(ThreadConfig::uniform(ThreadCount::One));
        let t = forward(&g, Some(&q), &x, &one, &opts).unwrap();
        assert_eq!(r.logits, t.logits);
        assert_eq!(t.cycles.speedup(), 1.0);
    }

    #[test]
    fn quantized_close_to_float() {
        let g = tiny_graph(13);
        let opts = EngineOptions::default();
        let q = calibrate(&g, &dataset(64, 1), &opts).unwrap();
        let x = images(8, 5);
        let f = forward(&g, None, &x, &ExecutionMode::Float32, &opts).unwrap();
        let r = forward(&g, Some(&q), &x, &ExecutionMode::QuantReference, &opts).unwrap();
        let scale = f.logits.data().iter().fold(0f32, |m, v| m.max(v.abs()));
        for (a, b) in f.logits.data().iter().zip(r.logits.data()) {
            assert!((a - b).abs() < 0.05 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn nbsmt_is_deterministic_and_counts_collisions() {
        let g = tiny_graph(14);
        let opts = EngineOptions::default();
        let q = calibrate(&g, &dataset(32, 1), &opts).unwrap();
        let x = images(10, 6);
        let mode = ExecutionMode::Nbsmt(ThreadConfig::uniform(ThreadCount::Four));
        let a = forward(&g, Some(&q), &x, &mode, &opts).unwrap();
        let b = forward(&g, Some(&q), &x, &mode, &opts).unwrap();
        assert_eq!(a, b);
        let conv2 = a.cycles.layer("conv2").unwrap();
        assert_eq!(conv2.threads, ThreadCount::Four);
        assert!(conv2.collision_rate > 0.0);
        assert_eq!(a.cycles.layer("conv1").unwrap().threads, ThreadCount::One);
        assert!(a.cycles.speedup() > 1.0);

        let seq = EngineOptions {
            parallelism: Parallelism::Sequential,
            ..opts.clone()
        };
        assert_eq!(forward(&g, Some(&q), &x, &mode, &seq).unwrap(), a);
    }

    #[test]
    fn zero_input_is_stable() {
        let g = tiny_graph(15);
        let opts = EngineOptions::default();
        let q = calibrate(&g, &dataset(16, 1), &opts).unwrap();
        let x = Tensor::zeros(vec![2, 1, 8, 8]);
        let mode = ExecutionMode::Nbsmt(ThreadConfig::uniform(ThreadCount::Four));
        let a = forward(&g, Some(&q), &x, &mode, &opts).unwrap();
        let b = forward(&g, Some(&q), &x, &mode, &opts).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.logits.data()[..3], a.logits.data()[3..]);
    }

    #[test]
    fn missing_qparams_is_an_error() {
        let g = tiny_graph(16);
        let x = images(1, 1);
        let err = forward(&g, None, &x, &ExecutionMode::QuantReference, &EngineOptions::default());
        assert!(matches!(err, Err(Error::MissingQuantParams(_))));
    }

    #[test]
    fn accuracy_on_perfect_and_tied_predictions() {
        // A graph whose logits are the flattened input: FC with identity weights.
        let fc = crate::model::FullyConnected {
            weight: Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
            bias: vec![0.0; 3],
        };
        let conv = Conv2d {
            weight: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            bias: vec![0.0],
            stride: 1,
            padding: 0,
        };
        let g = LayerGraph::new(
            "id",
            [1, 1, 3],
            3,
            InputNorm::identity(1),
            vec![
                Layer::new("conv", LayerKind::Conv2d(conv)),
                Layer::new("fc", LayerKind::FullyConnected(fc)),
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![3, 1, 1, 3], vec![5., 1., 0., 0., 2., 1., 1., 1., 1.]).unwrap();
        let ds = LabeledDataset::new(x, vec![0, 1, 0], 3).unwrap();
        let e = top1_accuracy(&g, None, &ds, &ExecutionMode::Float32, &EngineOptions::default()).unwrap();
        assert_eq!(e.top1, 1.0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn adversarial_labels_give_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 3000;
        let logits: Vec<f32> = (0..n * 10).map(|_| rng.random()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let hits = logits
            .chunks(10)
            .zip(&labels)
            .filter(|(r, &l)| argmax(r) == l)
            .count();
        let acc = hits as f64 / n as f64;
        // 0.1 +- 4 sigma (sigma ~ 0.0055).
        assert!((acc - 0.1).abs() < 0.022, "{acc}");
    }

    #[test]
    fn fold_identity_bn_keeps_weights() {
        let mut g = tiny_graph(17);
        for l in &mut g.layers {
            if let LayerKind::BatchNorm(bn) = &mut l.kind {
                *bn = BatchNormParams {
                    eps: f32::MIN_POSITIVE,
                    ..BatchNormParams::identity(bn.channels(), 1e-5)
                };
            }
        }
        let f = fold_batchnorm(&g).unwrap();
        assert_eq!(f.layers.len(), g.layers.len() - 3);
        let (LayerKind::Conv2d(a), LayerKind::Conv2d(b)) = (&g.layers[3].kind, &f.layers[2].kind) else {
            panic!()
        };
        assert_eq!(a.weight, b.weight);
    }

    #[test]
    fn fold_matches_unfolded_forward() {
        let g = tiny_graph(18);
        let f = fold_batchnorm(&g).unwrap();
        let x = images(6, 4);
        let opts = EngineOptions::default();
        let a = forward(&g, None, &x, &ExecutionMode::Float32, &opts).unwrap();
        let b = forward(&f, None, &x, &ExecutionMode::Float32, &opts).unwrap();
        for (u, v) in a.logits.data().iter().zip(b.logits.data()) {
            assert!((u - v).abs() <= 1e-5 * u.abs().max(1.0), "{u} vs {v}");
        }
    }

    #[test]
    fn fold_requires_adjacent_conv() {
        let mut g = tiny_graph(19);
        g.layers.swap(1, 2); // relu before bn
        assert!(fold_batchnorm(&g).is_err());
    }

    #[test]
    fn stat_collection_normalizes_with_batch_stats() {
        let g = tiny_graph(20);
        let x = images(12, 8);
        let engine = Engine::new(&g, None, ExecutionMode::Float32, EngineOptions::default()).unwrap();
        let out = engine
            .run(&x, &ForwardOptions { stat_collection: true, taps: true, ..Default::default() })
            .unwrap();
        assert_eq!(out.bn_stats.len(), 3);
        // bn1's output has per-channel mean beta and std ~gamma.
        let (_, bn1_out) = &out.taps[1];
        let LayerKind::BatchNorm(bn) = &g.layers[1].kind else { panic!() };
        let stats = batch_stats(bn1_out, 4);
        for c in 0..4 {
            assert!((stats.mean[c] - bn.beta[c] as f64).abs() < 1e-4);
            assert!((stats.var_biased[c].sqrt() - bn.gamma[c] as f64).abs() < 1e-3);
        }
    }
}
