//! Layer graph and the on-disk model container.
//!
//! A container is a directory holding `manifest.json` plus one raw
//! little-endian `f32` blob per tensor. Every blob entry records its byte
//! length and SHA-256 so a truncated or edited file is caught at load time.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNormParams {
    /// Identity normalization over `channels` channels.
    pub fn identity(channels: usize, eps: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self) -> std::result::Result<(), String> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err("batchnorm vectors differ in channel extent".into());
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(format!("momentum must be in [0,1], got {}", self.momentum));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err("negative running variance".into());
        }
        let all = [&self.gamma, &self.beta, &self.running_mean, &self.running_var];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err("non-finite batchnorm parameter".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// O, I, Kh, Kw.
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
    /// Reduction depth of the lowered GEMM.
    pub fn reduction_len(&self) -> usize {
        self.weight.shape()[1..].iter().product()
    }
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.stride == 0 || ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullyConnected {
    /// Out, In.
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl FullyConnected {
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d(Conv2d),
    BatchNorm(BatchNormParams),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    FullyConnected(FullyConnected),
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::BatchNorm(_) => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::FullyConnected(_) => "fc",
        }
    }

    /// Conv and FC layers run on the MAC array.
    pub fn is_gemm(&self) -> bool {
        matches!(self, LayerKind::Conv2d(_) | LayerKind::FullyConnected(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Never accelerated by NB-SMT; always runs at one thread.
    pub nbsmt_exempt: bool,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            nbsmt_exempt: false,
        }
    }

    /// A non-exempt convolution: the only kind NB-SMT accelerates.
    pub fn is_nbsmt_eligible(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d(_)) && !self.nbsmt_exempt
    }
}

/// Per-channel input normalization applied to raw `[0,1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Activation shape flowing between layers (per image).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(self) -> usize {
        match self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn channels(self) -> usize {
        match self {
            ActShape::Spatial { c, .. } => c,
            ActShape::Flat(n) => n,
        }
    }
}

/// Ordered CNN layers plus the metadata needed to feed them.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    pub arch: String,
    /// C, H, W of one input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub input_norm: InputNorm,
    pub layers: Vec<Layer>,
    /// Free-form manifest fields carried through untouched (e.g. trainer notes).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl LayerGraph {
    /// Builds and validates a graph, marking the first convolution and all
    /// fully connected layers NB-SMT exempt.
    pub fn new(
        arch: impl Into<String>,
        input_shape: [usize; 3],
        num_classes: usize,
        input_norm: InputNorm,
        mut layers: Vec<Layer>,
    ) -> Result<Self> {
        let first_conv = layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Conv2d(_)));
        for (i, layer) in layers.iter_mut().enumerate() {
            match layer.kind {
                LayerKind::Conv2d(_) if Some(i) == first_conv => layer.nbsmt_exempt = true,
                LayerKind::FullyConnected(_) => layer.nbsmt_exempt = true,
                _ => {}
            }
        }
        let graph = Self {
            arch: arch.into(),
            input_shape,
            num_classes,
            input_norm,
            layers,
            metadata: BTreeMap::new(),
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn eligible_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.is_nbsmt_eligible())
    }

    /// Input shape seen by each layer, followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input_shape;
        let mut cur = ActShape::Spatial { c, h, w };
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(cur);
            let mismatch = |detail: String| Error::ShapeMismatch {
                layer: i,
                name: layer.name.clone(),
                detail,
            };
            cur = match (&layer.kind, cur) {
                (LayerKind::Conv2d(conv), ActShape::Spatial { c, h, w }) => {
                    if conv.weight.shape().len() != 4 {
                        return Err(mismatch(format!(
                            "conv weight must be 4-d, got {:?}",
                            conv.weight.shape()
                        )));
                    }
                    if conv.in_channels() != c {
                        return Err(mismatch(format!(
                            "conv expects {} input channels, got {c}",
                            conv.in_channels()
                        )));
                    }
                    if conv.bias.len() != conv.out_channels() {
                        return Err(mismatch(format!(
                            "bias length {} != {} output channels",
                            conv.bias.len(),
                            conv.out_channels()
                        )));
                    }
                    let (oh, ow) = conv
                        .output_hw(h, w)
                        .ok_or_else(|| mismatch(format!("kernel does not fit {h}x{w} input")))?;
                    ActShape::Spatial {
                        c: conv.out_channels(),
                        h: oh,
                        w: ow,
                    }
                }
                (LayerKind::Conv2d(_), ActShape::Flat(_)) => {
                    return Err(mismatch("conv applied to flattened input".into()))
                }
                (LayerKind::BatchNorm(bn), s) => {
                    if bn.channels() != s.channels() {
                        return Err(mismatch(format!(
                            "batchnorm has {} channels, input has {}",
                            bn.channels(),
                            s.channels()
                        )));
                    }
                    s
                }
                (LayerKind::Relu, s) => s,
                (LayerKind::MaxPool { kernel, stride }, ActShape::Spatial { c, h, w }) => {
                    if *kernel == 0 || *stride == 0 || h < *kernel || w < *kernel {
                        return Err(mismatch(format!(
                            "maxpool {kernel}/{stride} does not fit {h}x{w}"
                        )));
                    }
                    ActShape::Spatial {
                        c,
                        h: (h - kernel) / stride + 1,
                        w: (w - kernel) / stride + 1,
                    }
                }
                (LayerKind::MaxPool { .. }, ActShape::Flat(_)) => {
                    return Err(mismatch("maxpool applied to flattened input".into()))
                }
                (LayerKind::FullyConnected(fc), s) => {
                    if fc.weight.shape().len() != 2 {
                        return Err(mismatch(format!(
                            "fc weight must be 2-d, got {:?}",
                            fc.weight.shape()
                        )));
                    }
                    if fc.in_features() != s.len() {
                        return Err(mismatch(format!(
                            "fc expects {} inputs, got {}",
                            fc.in_features(),
                            s.len()
                        )));
                    }
                    if fc.bias.len() != fc.out_features() {
                        return Err(mismatch(format!(
                            "bias length {} != {} outputs",
                            fc.bias.len(),
                            fc.out_features()
                        )));
                    }
                    ActShape::Flat(fc.out_features())
                }
            };
        }
        out.push(cur);
        Ok(out)
    }

    /// Checks shape compatibility and every value invariant.
    pub fn validate(&self) -> Result<()> {
        if self.input_norm.mean.len() != self.input_shape[0]
            || self.input_norm.std.len() != self.input_shape[0]
        {
            return Err(Error::Manifest(
                "input_norm must have one mean/std per input channel".into(),
            ));
        }
        if self.input_norm.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Manifest("input_norm std must be positive".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate layer name {} at index {i}",
                    layer.name
                )));
            }
            let invalid = |detail: String| Error::Validation {
                layer: i,
                name: layer.name.clone(),
                detail,
            };
            match &layer.kind {
                LayerKind::Conv2d(c) => {
                    if !c.weight.is_finite() || c.bias.iter().any(|x| !x.is_finite()) {
                        return Err(invalid("non-finite conv parameter".into()));
                    }
                }
                LayerKind::FullyConnected(f) => {
                    if !f.weight.is_finite() || f.bias.iter().any(|x| !x.is_finite()) {
                        return Err(invalid("non-finite fc parameter".into()));
                    }
                }
                LayerKind::BatchNorm(bn) => bn.check().map_err(invalid)?,
                LayerKind::Relu | LayerKind::MaxPool { .. } => {}
            }
        }
        let shapes = self.shapes()?;
        let last = *shapes.last().expect("shapes includes the output");
        if last.len() != self.num_classes {
            return Err(Error::Manifest(format!(
                "graph produces {} outputs, manifest declares {} classes",
                last.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Hash of every learned parameter except BN running statistics.
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            h.update(layer.name.as_bytes());
            let mut feed = |v: &[f32]| {
                for x in v {
                    h.update(x.to_le_bytes());
                }
            };
            match &layer.kind {
                LayerKind::Conv2d(c) => {
                    feed(c.weight.data());
                    feed(&c.bias);
                }
                LayerKind::FullyConnected(f) => {
                    feed(f.weight.data());
                    feed(&f.bias);
                }
                LayerKind::BatchNorm(bn) => {
                    feed(&bn.gamma);
                    feed(&bn.beta);
                }
                LayerKind::Relu | LayerKind::MaxPool { .. } => {}
            }
        }
        hex(&h.finalize())
    }

    pub fn batchnorm_layers(&self) -> impl Iterator<Item = (usize, &Layer, &BatchNormParams)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match &l.kind {
            LayerKind::BatchNorm(bn) => Some((i, l, bn)),
            _ => None,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Manifest schema

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobRef {
    file: String,
    len: u64,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    kind: String,
    name: String,
    shape: Vec<usize>,
    #[serde(default)]
    blob: BTreeMap<String, BlobRef>,
    #[serde(default)]
    nbsmt_exempt: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    momentum: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    arch: String,
    input_shape: [usize; 3],
    num_classes: usize,
    input_norm: InputNorm,
    layers: Vec<LayerEntry>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

struct BlobReader<'a> {
    dir: &'a Path,
    index: usize,
    entry: &'a LayerEntry,
}

impl BlobReader<'_> {
    fn read(&self, role: &str, expected: usize) -> Result<Vec<f32>> {
        let blob = self.entry.blob.get(role).ok_or_else(|| {
            Error::Manifest(format!(
                "layer {} ({}): missing blob '{role}'",
                self.index, self.entry.name
            ))
        })?;
        let path = self.dir.join(&blob.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mismatch = |detail: String| Error::ShapeMismatch {
            layer: self.index,
            name: self.entry.name.clone(),
            detail,
        };
        if blob.len != expected as u64 * 4 {
            return Err(mismatch(format!(
                "blob '{role}' declares {} bytes, shape needs {}",
                blob.len,
                expected * 4
            )));
        }
        if bytes.len() as u64 != blob.len {
            return Err(mismatch(format!(
                "blob '{role}' is {} bytes on disk, manifest says {}",
                bytes.len(),
                blob.len
            )));
        }
        if sha256_hex(&bytes) != blob.sha256 {
            return Err(Error::Checksum {
                layer: self.index,
                name: self.entry.name.clone(),
                blob: role.to_string(),
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn required<T>(&self, v: Option<T>, field: &str) -> Result<T> {
        v.ok_or_else(|| {
            Error::Manifest(format!(
                "layer {} ({}): missing field '{field}'",
                self.index, self.entry.name
            ))
        })
    }
}

/// Loads and validates a model container directory.
pub fn load_model(path: impl AsRef<Path>) -> Result<LayerGraph> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported container version {}",
            manifest.version
        )));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (index, entry) in manifest.layers.iter().enumerate() {
        let r = BlobReader { dir, index, entry };
        let shape_err = |detail: String| Error::ShapeMismatch {
            layer: index,
            name: entry.name.clone(),
            detail,
        };
        let kind = match entry.kind.as_str() {
            "conv2d" => {
                if entry.shape.len() != 4 {
                    return Err(shape_err(format!("conv shape must be 4-d: {:?}", entry.shape)));
                }
                let n: usize = entry.shape.iter().product();
                let weight = Tensor::new(entry.shape.clone(), r.read("weight", n)?)?;
                let bias = r.read("bias", entry.shape[0])?;
                LayerKind::Conv2d(Conv2d {
                    weight,
                    bias,
                    stride: r.required(entry.stride, "stride")?,
                    padding: r.required(entry.padding, "padding")?,
                })
            }
            "fc" => {
                if entry.shape.len() != 2 {
                    return Err(shape_err(format!("fc shape must be 2-d: {:?}", entry.shape)));
                }
                let n: usize = entry.shape.iter().product();
                let weight = Tensor::new(entry.shape.clone(), r.read("weight", n)?)?;
                let bias = r.read("bias", entry.shape[0])?;
                LayerKind::FullyConnected(FullyConnected { weight, bias })
            }
            "batchnorm" => {
                if entry.shape.len() != 1 {
                    return Err(shape_err(format!(
                        "batchnorm shape must be [channels]: {:?}",
                        entry.shape
                    )));
                }
                let c = entry.shape[0];
                LayerKind::BatchNorm(BatchNormParams {
                    gamma: r.read("gamma", c)?,
                    beta: r.read("beta", c)?,
                    running_mean: r.read("running_mean", c)?,
                    running_var: r.read("running_var", c)?,
                    eps: r.required(entry.eps, "eps")?,
                    momentum: r.required(entry.momentum, "momentum")?,
                })
            }
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool {
                kernel: r.required(entry.kernel, "kernel")?,
                stride: r.required(entry.stride, "stride")?,
            },
            other => {
                return Err(Error::Manifest(format!(
                    "layer {index} ({}): unknown kind '{other}'",
                    entry.name
                )))
            }
        };
        layers.push(Layer {
            name: entry.name.clone(),
            kind,
            nbsmt_exempt: entry.nbsmt_exempt,
        });
    }
    let graph = LayerGraph {
        arch: manifest.arch,
        input_shape: manifest.input_shape,
        num_classes: manifest.num_classes,
        input_norm: manifest.input_norm,
        layers,
        metadata: manifest.extra,
    };
    graph.validate()?;
    Ok(graph)
}

/// Writes `graph` as a container directory, creating it if needed.
pub fn save_model(graph: &LayerGraph, path: impl AsRef<Path>) -> Result<()> {
    graph.validate()?;
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let mut blob = BTreeMap::new();
        let mut write = |role: &str, data: &[f32]| -> Result<()> {
            let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
            let file = format!("{}.{role}.bin", layer.name);
            let p = dir.join(&file);
            fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
            blob.insert(
                role.to_string(),
                BlobRef {
                    file,
                    len: bytes.len() as u64,
                    sha256: sha256_hex(&bytes),
                },
            );
            Ok(())
        };
        let mut entry = LayerEntry {
            kind: layer.kind.tag().to_string(),
            name: layer.name.clone(),
            shape: vec![],
            blob: BTreeMap::new(),
            nbsmt_exempt: layer.nbsmt_exempt,
            stride: None,
            padding: None,
            kernel: None,
            eps: None,
            momentum: None,
        };
        match &layer.kind {
            LayerKind::Conv2d(c) => {
                write("weight", c.weight.data())?;
                write("bias", &c.bias)?;
                entry.shape = c.weight.shape().to_vec();
                entry.stride = Some(c.stride);
                entry.padding = Some(c.padding);
            }
            LayerKind::FullyConnected(f) => {
                write("weight", f.weight.data())?;
                write("bias", &f.bias)?;
                entry.shape = f.weight.shape().to_vec();
            }
            LayerKind::BatchNorm(bn) => {
                write("gamma", &bn.gamma)?;
                write("beta", &bn.beta)?;
                write("running_mean", &bn.running_mean)?;
                write("running_var", &bn.running_var)?;
                entry.shape = vec![bn.channels()];
                entry.eps = Some(bn.eps);
                entry.momentum = Some(bn.momentum);
            }
            LayerKind::Relu => {}
            LayerKind::MaxPool { kernel, stride } => {
                entry.kernel = Some(*kernel);
                entry.stride = Some(*stride);
            }
        }
        entry.blob = blob;
        entries.push(entry);
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        arch: graph.arch.clone(),
        input_shape: graph.input_shape,
        num_classes: graph.num_classes,
        input_norm: graph.input_norm.clone(),
        layers: entries,
        extra: graph.metadata.clone(),
    };
    let p = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::testutil::tiny_graph;
    use super::*;

    #[test]
    fn default_exemptions() {
        let g = tiny_graph(1);
        let exempt: Vec<_> = g
            .layers
            .iter()
            .filter(|l| l.nbsmt_exempt)
            .map(|l| l.name.as_str())
            .collect();
        assert_eq!(exempt, ["conv1", "fc"]);
        let eligible: Vec<_> = g.eligible_layers().map(|l| l.name.as_str()).collect();
        assert_eq!(eligible, ["conv2", "conv3"]);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut g = tiny_graph(7);
        g.metadata
            .insert("note".into(), serde_json::json!({"fp32_top1": 0.99}));
        let dir = tempfile::tempdir().unwrap();
        save_model(&g, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn wrong_blob_length_names_the_layer() {
        let g = tiny_graph(3);
        let dir = tempfile::tempdir().unwrap();
        save_model(&g, dir.path()).unwrap();
        // Truncate conv2's weight blob and patch its manifest length to match.
        let blob = dir.path().join("conv2.weight.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m["layers"][3]["blob"]["weight"]["len"] = serde_json::json!(bytes.len() - 4);
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        match load_model(dir.path()) {
            Err(Error::ShapeMismatch { layer, name, .. }) => {
                assert_eq!(layer, 3);
                assert_eq!(name, "conv2");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let g = tiny_graph(4);
        let dir = tempfile::tempdir().unwrap();
        save_model(&g, dir.path()).unwrap();
        let blob = dir.path().join("bn2.gamma.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 0x01;
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::Checksum { layer: 4, .. })
        ));
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\"version\": 1").unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn nan_weight_rejected_on_save() {
        let mut g = tiny_graph(5);
        if let LayerKind::Conv2d(c) = &mut g.layers[3].kind {
            c.weight.data_mut()[2] = f32::NAN;
        }
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_model(&g, dir.path()),
            Err(Error::Validation { layer: 3, .. })
        ));
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let g = tiny_graph(6);
        let mut layers = g.layers.clone();
        layers.remove(3); // drop conv2: bn2 now sees 4 channels
        let err = LayerGraph::new("bad", [1, 8, 8], 3, g.input_norm.clone(), layers).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { layer: 3, .. }));
    }

    #[test]
    fn unwritable_path() {
        let g = tiny_graph(2);
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plainfile");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(save_model(&g, &file), Err(Error::Io { .. })));
    }
}
