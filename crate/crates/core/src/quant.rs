//! 8-bit post-training quantization.
//!
//! Activations: unsigned, one affine (scale, zero-point) per layer input,
//! from the plain min/max seen on a calibration subset. Weights: signed,
//! symmetric, one scale per output channel, range `[-127, 127]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::engine::{Engine, EngineOptions, ExecutionMode, ForwardOptions};
use crate::error::{Error, Result};
use crate::model::{LayerGraph, LayerKind};
use crate::tensor::Tensor;

/// Smallest scale ever emitted; dead channels and constant inputs use it.
pub const SCALE_FLOOR: f32 = 1e-8;
pub const WEIGHT_QMAX: i32 = 127;
pub const ACT_QMAX: i32 = 255;

/// Quantization parameters of one conv/FC layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantParams {
    pub act_scale: f32,
    pub act_zero_point: u8,
    pub weight_scales: Vec<f32>,
}

/// Per-layer parameters keyed by layer name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantParams {
    pub layers: BTreeMap<String, LayerQuantParams>,
}

impl QuantParams {
    pub fn get(&self, layer: &str) -> Result<&LayerQuantParams> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::MissingQuantParams(layer.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in &self.layers {
            let bad = |d: &str| Error::InvalidArgument(format!("qparams for {name}: {d}"));
            if !(p.act_scale > 0.0 && p.act_scale.is_finite()) {
                return Err(bad("act_scale must be positive"));
            }
            if p.weight_scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(bad("weight scales must be positive"));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let q: QuantParams = serde_json::from_str(&text)?;
        q.validate()?;
        Ok(q)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(p, text).map_err(|e| Error::io(p, e))
    }
}

/// Quantized tensor. `scales` holds one entry (per-tensor) or one per index
/// of the leading axis (per-channel).
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub scales: Vec<f32>,
    pub zero_point: i32,
}

impl<T: Copy + Into<i32>> QTensor<T> {
    fn scale_at(&self, flat: usize) -> f32 {
        if self.scales.len() == 1 {
            self.scales[0]
        } else {
            let per = self.data.len() / self.scales.len();
            self.scales[flat / per]
        }
    }
}

/// Per-channel symmetric scale from the channel's largest magnitude.
pub fn weight_scale(max_abs: f32) -> f32 {
    (max_abs / WEIGHT_QMAX as f32).max(SCALE_FLOOR)
}

/// Affine unsigned parameters covering `[min, max]` (widened to include 0).
pub fn activation_params(min: f32, max: f32) -> (f32, u8) {
    let lo = min.min(0.0);
    let hi = max.max(0.0);
    let scale = ((hi - lo) / ACT_QMAX as f32).max(SCALE_FLOOR);
    let zp = (-lo / scale).round().clamp(0.0, ACT_QMAX as f32);
    (scale, zp as u8)
}

/// `clamp(round_half_away(w / scale), -127, 127)`.
#[inline]
pub fn quantize_weight_value(w: f32, scale: f32) -> i8 {
    (w / scale)
        .round()
        .clamp(-(WEIGHT_QMAX as f32), WEIGHT_QMAX as f32) as i8
}

/// `clamp(round_half_up(a / scale) + zp, 0, 255)`.
#[inline]
pub fn quantize_activation_value(a: f32, scale: f32, zero_point: u8) -> u8 {
    ((a / scale + 0.5).floor() + zero_point as f32).clamp(0.0, ACT_QMAX as f32) as u8
}

/// Quantizes a weight tensor with one scale per leading-axis channel.
pub fn quantize_weights(w: &Tensor, scales: &[f32]) -> Result<QTensor<i8>> {
    let channels = w.batch();
    if scales.len() != channels || scales.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need {channels} positive weight scales, got {}",
            scales.len()
        )));
    }
    let per = w.item_len();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| quantize_weight_value(x, scales[i / per.max(1)]))
        .collect();
    Ok(QTensor {
        shape: w.shape().to_vec(),
        data,
        scales: scales.to_vec(),
        zero_point: 0,
    })
}

pub fn quantize_activations(a: &Tensor, scale: f32, zero_point: u8) -> QTensor<u8> {
    QTensor {
        shape: a.shape().to_vec(),
        data: a
            .data()
            .iter()
            .map(|&x| quantize_activation_value(x, scale, zero_point))
            .collect(),
        scales: vec![scale],
        zero_point: zero_point as i32,
    }
}

/// Elementwise `scale * (q - zero_point)`.
pub fn dequantize<T: Copy + Into<i32>>(q: &QTensor<T>) -> Tensor {
    let data = q
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| q.scale_at(i) * (v.into() - q.zero_point) as f32)
        .collect();
    Tensor::new(q.shape.clone(), data).expect("qtensor shape is consistent")
}

/// Per-channel weight scales of a conv or FC weight tensor.
pub fn channel_weight_scales(w: &Tensor) -> Vec<f32> {
    let per = w.item_len().max(1);
    w.data()
        .chunks(per)
        .map(|c| weight_scale(c.iter().fold(0.0f32, |m, x| m.max(x.abs()))))
        .collect()
}

/// Calibration subset size used when none is given.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 512;

/// Derives quantization parameters from float forward passes over `subset`.
///
/// Deterministic for a given subset order; min/max reduce independently of
/// batching and scheduling.
pub fn calibrate(graph: &LayerGraph, subset: &LabeledDataset, opts: &EngineOptions) -> Result<QuantParams> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("empty calibration subset".into()));
    }
    let engine = Engine::new(graph, None, ExecutionMode::Float32, opts.clone())?;
    let fwd = ForwardOptions {
        observe_inputs: true,
        ..Default::default()
    };
    let mut ranges: BTreeMap<String, (f32, f32)> = BTreeMap::new();
    let n = subset.len();
    let bs = opts.batch_size.max(1);
    for start in (0..n).step_by(bs) {
        let batch = subset.images.slice_batch(start, (start + bs).min(n));
        let out = engine.run(&batch, &fwd)?;
        for (name, (lo, hi)) in out.input_ranges {
            let e = ranges.entry(name).or_insert((f32::INFINITY, f32::NEG_INFINITY));
            e.0 = e.0.min(lo);
            e.1 = e.1.max(hi);
        }
    }
    let mut layers = BTreeMap::new();
    for layer in &graph.layers {
        let weight = match &layer.kind {
            LayerKind::Conv2d(c) => &c.weight,
            LayerKind::FullyConnected(f) => &f.weight,
            _ => continue,
        };
        let (lo, hi) = ranges[&layer.name];
        let (act_scale, act_zero_point) = activation_params(lo, hi);
        layers.insert(
            layer.name.clone(),
            LayerQuantParams {
                act_scale,
                act_zero_point,
                weight_scales: channel_weight_scales(weight),
            },
        );
    }
    Ok(QuantParams { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weight_scale_examples() {
        assert!((weight_scale(1.27) - 0.01).abs() < 1e-9);
        assert_eq!(weight_scale(0.0), SCALE_FLOOR);
    }

    #[test]
    fn activation_param_examples() {
        let (s, zp) = activation_params(0.0, 5.1);
        assert!((s - 0.02).abs() < 1e-8);
        assert_eq!(zp, 0);
        let (s, zp) = activation_params(0.0, 0.0);
        assert_eq!((s, zp), (SCALE_FLOOR, 0));
        // Signed input range gets a nonzero zero-point.
        let (s, zp) = activation_params(-0.4242, 2.8215);
        assert!(zp > 0);
        assert_eq!(quantize_activation_value(0.0, s, zp), zp);
    }

    #[test]
    fn weight_quantization_examples() {
        assert_eq!(quantize_weight_value(0.635, 0.01), 64);
        assert_eq!(quantize_weight_value(-1.27, 0.01), -127);
        assert_eq!(quantize_weight_value(0.0, 0.01), 0);
        assert_eq!(quantize_weight_value(-5.0, 0.01), -127);
    }

    #[test]
    fn activation_quantization_examples() {
        assert_eq!(quantize_activation_value(2.55, 0.02, 0), 128);
        assert_eq!(quantize_activation_value(-1.0, 0.02, 0), 0);
        assert_eq!(quantize_activation_value(10.0, 0.02, 0), 255);
    }

    #[test]
    fn dequantize_examples() {
        let q = QTensor {
            shape: vec![1],
            data: vec![64i8],
            scales: vec![0.01],
            zero_point: 0,
        };
        assert!((dequantize(&q).data()[0] - 0.64).abs() < 1e-7);
        let q = QTensor {
            shape: vec![1],
            data: vec![10u8],
            scales: vec![0.5],
            zero_point: 10,
        };
        assert_eq!(dequantize(&q).data()[0], 0.0);
    }

    #[test]
    fn per_channel_weights() {
        let w = Tensor::new(vec![2, 2], vec![1.27, -0.5, 0.0, 0.0]).unwrap();
        let scales = channel_weight_scales(&w);
        assert_eq!(scales[1], SCALE_FLOOR);
        let q = quantize_weights(&w, &scales).unwrap();
        assert_eq!(q.data, [127, -50, 0, 0]);
        assert!(quantize_weights(&w, &[0.1]).is_err());
    }

    #[test]
    fn activation_roundtrip_error_bounded_on_grid() {
        // Exhaustive sweep over a dense value grid covering the whole range.
        for &(lo, hi) in &[(0.0f32, 5.1f32), (-0.42, 2.82), (0.0, 0.37)] {
            let (s, zp) = activation_params(lo, hi);
            let steps = 20_000;
            for i in 0..=steps {
                let x = lo.min(0.0) + (hi - lo.min(0.0)) * i as f32 / steps as f32;
                let q = quantize_activation_value(x, s, zp);
                let back = s * (q as i32 - zp as i32) as f32;
                assert!((back - x).abs() <= s / 2.0 + 1e-5 * s.max(x.abs()), "x={x} q={q} back={back}");
            }
        }
    }

    #[test]
    fn qparams_json_round_trip_exact() {
        let mut q = QuantParams::default();
        q.layers.insert(
            "conv2".into(),
            LayerQuantParams {
                act_scale: 0.013_723_4,
                act_zero_point: 0,
                weight_scales: vec![0.1 / 3.0, 1e-8, 7.7e-3],
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.json");
        q.save(&p).unwrap();
        assert_eq!(QuantParams::load(&p).unwrap(), q);
    }

    proptest! {
        #[test]
        fn weights_symmetric(w in -3.0f32..3.0, s in 0.001f32..0.05) {
            prop_assert_eq!(quantize_weight_value(-w, s), -quantize_weight_value(w, s));
            prop_assert!(quantize_weight_value(w, s) != i8::MIN);
        }

        #[test]
        fn weight_error_bound(w in -1.0f32..1.0, max_abs in 1.0f32..2.0) {
            let s = weight_scale(max_abs);
            let back = quantize_weight_value(w, s) as f32 * s;
            prop_assert!((back - w).abs() <= s / 2.0 + 1e-6);
        }

        #[test]
        fn requantizing_dequantized_is_identity(q in any::<u8>(), s in 0.001f32..0.1) {
            let x = s * q as f32;
            prop_assert_eq!(quantize_activation_value(x, s, 0), q);
        }
    }
}
