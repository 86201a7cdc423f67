//! Three small CNN families, split into a feature extractor `φ` and a
//! prediction head `g` so that `predict(x) == g(φ(x))` holds bit-for-bit.
//!
//! * `cnn-a`: two conv blocks and one fully connected layer (shallow, wide).
//! * `cnn-b`: four conv blocks and two fully connected layers (deep, narrow).
//! * `cnn-c`: three conv blocks with an identity skip around the middle one.
//!
//! The designated feature layer is the last pooling layer. A "neuron" is one
//! channel of that layer, summarized per image by its spatial maximum (or mean,
//! see [`ChannelReduction`]).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "cnn-a")]
    CnnA,
    #[serde(rename = "cnn-b")]
    CnnB,
    #[serde(rename = "cnn-c")]
    CnnC,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::CnnA, Arch::CnnB, Arch::CnnC];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::CnnA => "cnn-a",
            Arch::CnnB => "cnn-b",
            Arch::CnnC => "cnn-c",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-a" => Ok(Arch::CnnA),
            "cnn-b" => Ok(Arch::CnnB),
            "cnn-c" => Ok(Arch::CnnC),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `x * scale + shift`.
    Normalize { scale: f64, shift: f64 },
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// `x + relu(conv(x))` with a shape-preserving 3x3 convolution.
    ResidualConv { channels: usize, kernel: usize },
    Relu,
    MaxPool,
    Flatten,
    Linear { d_in: usize, d_out: usize },
}

impl LayerSpec {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                in_ch, out_ch, kernel, ..
            } => vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]],
            LayerSpec::ResidualConv { channels, kernel } => {
                vec![vec![channels, channels, kernel, kernel], vec![channels]]
            }
            LayerSpec::Linear { d_in, d_out } => vec![vec![d_out, d_in], vec![d_out]],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Index into `layers` whose output is the feature map `φ`.
    pub feature_layer: usize,
}

// Maps a typical background (~220) to 0 and low-contrast foreground
// differences (~15-50 grey levels) to roughly unit scale.
const NORMALIZE: LayerSpec = LayerSpec::Normalize {
    scale: 1.0 / 32.0,
    shift: -220.0 / 32.0,
};

fn conv(in_ch: usize, out_ch: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_ch,
        out_ch,
        kernel: 3,
        stride: 1,
        pad: 1,
    }
}

impl ModelSpec {
    pub fn new(arch: Arch, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        use LayerSpec::*;
        let [c, h, w] = input_shape;
        if c == 0 || h < 16 || w < 16 || num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "model needs >=16x16 input and >=2 classes, got {input_shape:?} / {num_classes}"
            )));
        }
        let (layers, feat_ch, pools) = match arch {
            Arch::CnnA => (
                vec![NORMALIZE, conv(c, 16), Relu, MaxPool, conv(16, 24), Relu, MaxPool],
                24,
                2,
            ),
            Arch::CnnB => (
                vec![
                    NORMALIZE,
                    conv(c, 8),
                    Relu,
                    conv(8, 8),
                    Relu,
                    MaxPool,
                    conv(8, 16),
                    Relu,
                    conv(16, 16),
                    Relu,
                    MaxPool,
                ],
                16,
                2,
            ),
            Arch::CnnC => (
                vec![
                    NORMALIZE,
                    conv(c, 12),
                    Relu,
                    MaxPool,
                    ResidualConv {
                        channels: 12,
                        kernel: 3,
                    },
                    conv(12, 24),
                    Relu,
                    MaxPool,
                ],
                24,
                2,
            ),
        };
        let (fh, fw) = (h >> pools, w >> pools);
        let feature_layer = layers.len() - 1;
        let flat = feat_ch * fh * fw;
        let mut layers = layers;
        layers.push(Flatten);
        match arch {
            Arch::CnnB => {
                layers.extend([Linear { d_in: flat, d_out: 32 }, Relu, Linear { d_in: 32, d_out: num_classes }]);
            }
            _ => layers.push(Linear {
                d_in: flat,
                d_out: num_classes,
            }),
        }
        let spec = Self {
            arch,
            input_shape,
            num_classes,
            layers,
            feature_layer,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Check the layer list by shape inference.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("model spec: {m}")));
        if self.feature_layer >= self.layers.len() {
            return bad("feature layer out of range".into());
        }
        if let Some(i) = self.layers.iter().position(|l| matches!(l, LayerSpec::Linear { .. })) {
            if i <= self.feature_layer {
                return bad("feature layer must precede every fully connected layer".into());
            }
        }
        let mut shape = self.input_shape.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape.as_slice()) {
                (LayerSpec::Normalize { .. } | LayerSpec::Relu, _) => shape,
                (
                    LayerSpec::Conv {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        pad,
                    },
                    [c, h, w],
                ) if c == in_ch && *stride > 0 && h + 2 * pad >= *kernel && w + 2 * pad >= *kernel => {
                    vec![*out_ch, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1]
                }
                (LayerSpec::ResidualConv { channels, kernel }, [c, _, _]) if c == channels && kernel % 2 == 1 => shape,
                (LayerSpec::MaxPool, [c, h, w]) if *h >= 2 && *w >= 2 => vec![*c, h / 2, w / 2],
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::Linear { d_in, d_out }, [d]) if d == d_in => vec![*d_out],
                (layer, s) => return bad(format!("layer {i} ({layer:?}) cannot take shape {s:?}")),
            };
            if i == self.feature_layer && shape.len() != 3 {
                return bad("feature layer must produce a (channels, h, w) map".into());
            }
        }
        if shape != [self.num_classes] {
            return bad(format!("output shape {shape:?} != [{}]", self.num_classes));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// `(channels, h, w)` of the feature map for one image.
    pub fn feature_shape(&self) -> [usize; 3] {
        let mut shape = self.input_shape.to_vec();
        for layer in &self.layers[..=self.feature_layer] {
            shape = match (layer, shape.as_slice()) {
                (LayerSpec::Conv { out_ch, kernel, stride, pad, .. }, [_, h, w]) => {
                    vec![*out_ch, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1]
                }
                (LayerSpec::MaxPool, [c, h, w]) => vec![*c, h / 2, w / 2],
                _ => shape,
            };
        }
        [shape[0], shape[1], shape[2]]
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_shape()[0]
    }
}

/// How a feature-map channel is reduced to one activation per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelReduction {
    #[default]
    Max,
    Mean,
}

/// Parameters bound into a graph, one id per parameter tensor.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Tensor>,
}

const EVAL_CHUNK: usize = 64;

impl Model {
    /// Fresh model on 32x32 RGB inputs.
    pub fn build(arch: Arch, num_classes: usize, seed: u64) -> Result<Self> {
        Self::build_for(arch, [3, 32, 32], num_classes, seed)
    }

    pub fn build_for(arch: Arch, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Self> {
        let spec = ModelSpec::new(arch, input_shape, num_classes)?;
        let mut rng = util::rng_for(seed, &[0x200]);
        let mut params = Vec::new();
        for layer in &spec.layers {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            let w_shape = &shapes[0];
            let fan_in: usize = w_shape[1..].iter().product();
            // He-uniform for layers feeding a ReLU, LeCun-uniform for the output layer.
            let gain = if std::ptr::eq(layer, spec.layers.last().expect("non-empty")) { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            let n: usize = w_shape.iter().product();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::new(w_shape.clone(), w)?);
            params.push(Tensor::zeros(&shapes[1]));
        }
        Ok(Self { spec, params })
    }

    pub fn from_parts(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::InvalidArgument("parameter tensors do not match the model spec".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// SHA-256 over the spec JSON and the parameter bytes.
    pub fn fingerprint(&self) -> String {
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        util::sha256_hex(&[&spec, &util::f64_le_bytes(self.flat_params())])
    }

    /// Add the parameters to `g` as trainable params or frozen constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let params = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if trainable {
                    g.param(&format!("{}.p{i}", self.spec.arch), p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        Bound { params }
    }

    fn apply_layers(&self, g: &mut Graph, mut x: NodeId, bound: &Bound, range: std::ops::Range<usize>) -> Result<NodeId> {
        let mut p = self.spec.layers[..range.start]
            .iter()
            .map(|l| l.param_shapes().len())
            .sum::<usize>();
        for layer in &self.spec.layers[range] {
            x = match *layer {
                LayerSpec::Normalize { scale, shift } => g.affine(x, scale, shift)?,
                LayerSpec::Conv { stride, pad, .. } => {
                    let y = g.conv2d(x, bound.params[p], bound.params[p + 1], stride, pad)?;
                    p += 2;
                    y
                }
                LayerSpec::ResidualConv { kernel, .. } => {
                    let y = g.conv2d(x, bound.params[p], bound.params[p + 1], 1, kernel / 2)?;
                    p += 2;
                    let y = g.relu(y)?;
                    g.add(x, y)?
                }
                LayerSpec::Relu => g.relu(x)?,
                LayerSpec::MaxPool => g.maxpool2(x)?,
                LayerSpec::Flatten => g.flatten(x)?,
                LayerSpec::Linear { .. } => {
                    let y = g.linear(x, bound.params[p], bound.params[p + 1])?;
                    p += 2;
                    y
                }
            };
        }
        Ok(x)
    }

    /// Feature extractor `φ`: input batch node to feature-map node.
    pub fn stem(&self, g: &mut Graph, x: NodeId, bound: &Bound) -> Result<NodeId> {
        self.apply_layers(g, x, bound, 0..self.spec.feature_layer + 1)
    }

    /// Prediction head `g`: feature-map node to logits node.
    pub fn head(&self, g: &mut Graph, features: NodeId, bound: &Bound) -> Result<NodeId> {
        self.apply_layers(g, features, bound, self.spec.feature_layer + 1..self.spec.layers.len())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.spec.input_shape {
            let mut expected = vec![s.first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.spec.input_shape);
            return Err(Error::shape("model input batch", &expected, s));
        }
        Ok(s[0])
    }

    /// Run the full network on an `(n, c, h, w)` batch, returning `(features, logits)`.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = self.check_batch(batch)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let mut shape = vec![n];
        shape.extend_from_slice(&self.spec.input_shape);
        let x = g.input("x", &shape);
        let feat = self.stem(&mut g, x, &bound)?;
        let logits = self.head(&mut g, feat, &bound)?;
        g.forward(&[("x", batch)])?;
        Ok((g.value(feat)?.clone(), g.value(logits)?.clone()))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.chunked(batch, |b| Ok(self.forward(b)?.1))
    }

    /// Softmax class probabilities, `(n, K)`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        softmax(self.logits(batch)?)
    }

    /// Feature map `φ(x)`, `(n, channels, h, w)`.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        self.chunked(batch, |b| Ok(self.forward(b)?.0))
    }

    /// Head logits on a given `(n, channels, h, w)` feature batch.
    pub fn head_logits(&self, features: &Tensor) -> Result<Tensor> {
        let fs = self.spec.feature_shape();
        let s = features.shape();
        if s.len() != 4 || s[1..] != fs {
            return Err(Error::shape("feature batch", &[s.first().copied().unwrap_or(1), fs[0], fs[1], fs[2]], s));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = g.input("phi", s);
        let logits = self.head(&mut g, f, &bound)?;
        g.forward(&[("phi", features)])?;
        Ok(g.value(logits)?.clone())
    }

    /// `g(φ)` as probabilities.
    pub fn head_probs(&self, features: &Tensor) -> Result<Tensor> {
        softmax(self.head_logits(features)?)
    }

    fn chunked(&self, batch: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        if n <= EVAL_CHUNK {
            return f(batch);
        }
        let per: usize = self.spec.input_shape.iter().product();
        let mut out: Option<(Vec<usize>, Vec<f64>)> = None;
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let mut shape = vec![end - start];
            shape.extend_from_slice(&self.spec.input_shape);
            let chunk = Tensor::new(shape, batch.data()[start * per..end * per].to_vec())?;
            let r = f(&chunk)?;
            match &mut out {
                None => out = Some((r.shape()[1..].to_vec(), r.into_data())),
                Some((_, data)) => data.extend_from_slice(r.data()),
            }
        }
        let (rest, data) = out.expect("n > 0");
        let mut shape = vec![n];
        shape.extend(rest);
        Tensor::new(shape, data)
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &TrainingMeta) -> Result<()> {
        util::write_file(path, &encode_checkpoint(self, meta)?)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, TrainingMeta)> {
        let bytes = util::read_file(path)?;
        decode_checkpoint(&bytes).map_err(|e| match e {
            Error::Corrupt { reason, .. } => Error::Corrupt {
                path: path.to_path_buf(),
                reason,
            },
            Error::HashMismatch { expected, actual, .. } => Error::HashMismatch {
                path: path.to_path_buf(),
                expected,
                actual,
            },
            other => other,
        })
    }
}

fn softmax(logits: Tensor) -> Result<Tensor> {
    let k = logits.shape()[1];
    let shape = logits.shape().to_vec();
    let probs = crate::tensor::softmax_rows(logits.data(), k);
    Tensor::new(shape, probs)
}

/// Per-image, per-channel activation: `out[image][channel]`.
pub fn channel_activations(features: &Tensor, reduction: ChannelReduction) -> Vec<Vec<f64>> {
    let s = features.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    (0..n)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let vals = &features.data()[(i * c + ch) * plane..][..plane];
                    match reduction {
                        ChannelReduction::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                        ChannelReduction::Mean => vals.iter().sum::<f64>() / plane as f64,
                    }
                })
                .collect()
        })
        .collect()
}

/// Stack single images `(c, h, w)` into a batch.
pub fn batch_of<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let items: Vec<&Tensor> = images.into_iter().collect();
    Tensor::stack(&items)
}

/// Hyperparameters of an adversarial-training run, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialMeta {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub steps: usize,
    /// Consistent term divided by the feature size.
    pub per_element_consistency: bool,
    /// How the inner attack's target class was chosen.
    pub target_rule: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub adversarial: Option<AdversarialMeta>,
    /// Hash of the checkpoint this run started from, if any.
    #[serde(default)]
    pub init_from: Option<String>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    spec: ModelSpec,
    meta: TrainingMeta,
}

/// Layout: magic, version (u32 LE), header JSON length (u64 LE), header JSON,
/// payload byte length (u64 LE), SHA-256 of header JSON + payload (32 bytes),
/// then the parameters as little-endian `f64` in spec order.
pub fn encode_checkpoint(model: &Model, meta: &TrainingMeta) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&CheckpointHeader {
        spec: model.spec.clone(),
        meta: meta.clone(),
    })?;
    let payload = util::f64_le_bytes(model.flat_params());
    let hash = hex::decode(util::sha256_hex(&[&json, &payload])).expect("hex from sha");
    let mut out = Vec::with_capacity(64 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&hash);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// SHA-256 (hex) stored in an encoded checkpoint.
pub fn checkpoint_hash(bytes: &[u8]) -> Result<String> {
    let (_, _, hash, _) = split_checkpoint(bytes)?;
    Ok(hex::encode(hash))
}

fn split_checkpoint(bytes: &[u8]) -> Result<(u32, &[u8], &[u8], &[u8])> {
    let corrupt = |r: &str| Error::Corrupt {
        path: "<checkpoint>".into(),
        reason: r.to_string(),
    };
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| corrupt("truncated"))?;
        at += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    let json_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let json = take(json_len)?;
    let payload_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let hash = take(32)?;
    let payload = take(payload_len)?;
    if at != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((version, json, hash, payload))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, TrainingMeta)> {
    let (version, json, hash, payload) = split_checkpoint(bytes)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            what: "checkpoint".into(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let actual = util::sha256_hex(&[json, payload]);
    if actual != hex::encode(hash) {
        return Err(Error::HashMismatch {
            path: "<checkpoint>".into(),
            expected: hex::encode(hash),
            actual,
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    header.spec.validate()?;
    let shapes = header.spec.param_shapes();
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(Error::Corrupt {
            path: "<checkpoint>".into(),
            reason: format!("payload holds {} values, spec needs {total}", payload.len() / 8),
        });
    }
    let flat = util::f64_from_le(payload);
    let mut params = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        params.push(Tensor::new(s, flat[at..at + n].to_vec())?);
        at += n;
    }
    Ok((Model::from_parts(header.spec, params)?, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Model::build(Arch::CnnA, 16, 3).unwrap();
        let b = Model::build(Arch::CnnA, 16, 3).unwrap();
        let c = Model::build(Arch::CnnA, 16, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn param_counts_differ() {
        let counts: Vec<usize> = Arch::ALL.iter().map(|a| Model::build(*a, 16, 0).unwrap().param_count()).collect();
        assert_ne!(counts[0], counts[1]);
        assert_ne!(counts[1], counts[2]);
        assert_ne!(counts[0], counts[2]);
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        for arch in Arch::ALL {
            let m = Model::build(arch, 16, 0).unwrap();
            let (feat, logits) = m.forward(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
            assert_eq!(logits.shape(), &[2, 16]);
            assert!(logits.is_finite());
            let fs = m.spec().feature_shape();
            assert_eq!(feat.shape(), &[2, fs[0], fs[1], fs[2]]);
        }
    }

    #[test]
    fn spec_rejects_misplaced_feature_layer() {
        let mut spec = ModelSpec::new(Arch::CnnA, [3, 32, 32], 16).unwrap();
        spec.feature_layer = spec.layers.len() - 1;
        assert!(spec.validate().is_err());
        assert!(matches!("cnn-z".parse::<Arch>(), Err(Error::UnknownArch(_))));
    }

    #[test]
    fn checkpoint_roundtrip_and_tamper() {
        let m = Model::build(Arch::CnnC, 4, 1).unwrap();
        let meta = TrainingMeta {
            epochs: 2,
            seed: 9,
            adversarial: Some(AdversarialMeta {
                alpha: 0.5,
                beta: 0.1,
                eps: 1.0,
                steps: 10,
                per_element_consistency: true,
                target_rule: "uniform".into(),
            }),
            init_from: None,
        };
        let bytes = encode_checkpoint(&m, &meta).unwrap();
        let (back, meta_back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);

        let mut tampered = bytes.clone();
        let last = tampered.len() - 1;
        tampered[last] ^= 1;
        assert!(matches!(decode_checkpoint(&tampered), Err(Error::HashMismatch { .. })));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(decode_checkpoint(&wrong_version), Err(Error::VersionMismatch { .. })));
    }
}
