//! Trace a prediction back to feature-layer channels: prediction difference
//! under channel removal, influential-neuron retrieval, occlusion maps and a
//! consistency check against neuron profiles.

use serde::{Deserialize, Serialize};

use crate::analysis::{feature_vectors, NeuronProfile};
use crate::attack::argmax;
use crate::error::{Error, Result};
use crate::synthdata::Split;
use crate::taxonomy::{cosine_sim_c, CategoricalDistribution, CorrelationMatrix};
use crate::tensor::{softmax_rows, Tensor};
use crate::zoo::{channel_activations, ChannelReduction, Model};

/// How a channel is removed from the feature map.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "values")]
pub enum Removal {
    #[default]
    Zero,
    /// Fill channel `i` with `values[i]` (e.g. its mean activation over a reference set).
    Constant(Vec<f64>),
}

/// Output space in which the prediction difference is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdSpace {
    #[default]
    Probabilities,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    Threshold(f64),
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub selection: Selection,
    pub removal: Removal,
    pub space: PdSpace,
    pub tau_sim: f64,
    pub patch: usize,
    pub stride: usize,
    /// Compute an occlusion map for each selected channel.
    pub maps: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            selection: Selection::TopK(2),
            removal: Removal::Zero,
            space: PdSpace::Probabilities,
            tau_sim: 0.2,
            patch: 8,
            stride: 4,
            maps: true,
        }
    }
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(shape)
}

fn head_output(model: &Model, features: &Tensor, space: PdSpace) -> Result<Tensor> {
    match space {
        PdSpace::Probabilities => model.head_probs(features),
        PdSpace::Logits => model.head_logits(features),
    }
}

/// Mean spatial activation of each channel over a reference set, for
/// [`Removal::Constant`].
pub fn channel_means(model: &Model, images: &[&Tensor]) -> Result<Vec<f64>> {
    let feats = feature_vectors(model, images)?;
    let [c, h, w] = model.spec().feature_shape();
    let plane = h * w;
    let mut means = vec![0.0; c];
    for f in &feats {
        for (ch, m) in means.iter_mut().enumerate() {
            *m += f[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
    }
    Ok(means.into_iter().map(|m| m / feats.len().max(1) as f64).collect())
}

/// Prediction differences `‖g(φ) − g(φ∖i)‖²_C` for every channel `i`.
pub fn prediction_differences(model: &Model, x: &Tensor, c: &CorrelationMatrix, removal: &Removal, space: PdSpace) -> Result<Vec<f64>> {
    let [channels, h, w] = model.spec().feature_shape();
    if let Removal::Constant(v) = removal {
        if v.len() != channels {
            return Err(Error::shape("removal fill values", &[channels], &[v.len()]));
        }
    }
    let feat = model.features(&as_batch(x)?)?;
    let base = head_output(model, &feat, space)?;
    let plane = h * w;
    let mut data = Vec::with_capacity(channels * feat.len());
    for ch in 0..channels {
        let start = data.len();
        data.extend_from_slice(feat.data());
        let slot = &mut data[start + ch * plane..start + (ch + 1) * plane];
        match removal {
            Removal::Zero => slot.fill(0.0),
            Removal::Constant(v) => slot.fill(v[ch]),
        }
    }
    let removed = head_output(model, &Tensor::new(vec![channels, channels, h, w], data)?, space)?;
    (0..channels)
        .map(|ch| {
            let diff: Vec<f64> = base.data().iter().zip(removed.row_slice(ch)).map(|(a, b)| a - b).collect();
            let pd = c.inner(&diff, &diff)?;
            debug_assert!(pd >= -1e-9, "negative prediction difference {pd}");
            Ok(pd)
        })
        .collect()
}

pub fn prediction_difference(model: &Model, x: &Tensor, channel: usize, c: &CorrelationMatrix, removal: &Removal, space: PdSpace) -> Result<f64> {
    let channels = model.spec().feature_channels();
    if channel >= channels {
        return Err(Error::InvalidArgument(format!("channel {channel} out of range (0..{channels})")));
    }
    Ok(prediction_differences(model, x, c, removal, space)?[channel])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Influence {
    pub channel: usize,
    pub pd: f64,
}

/// Sort by PD descending (ties to the smaller channel) and select.
pub fn select_influential(pds: &[f64], selection: Selection) -> Vec<Influence> {
    let mut all: Vec<Influence> = pds.iter().enumerate().map(|(channel, &pd)| Influence { channel, pd }).collect();
    all.sort_by(|a, b| b.pd.total_cmp(&a.pd).then(a.channel.cmp(&b.channel)));
    match selection {
        Selection::Threshold(tau) => all.retain(|i| i.pd > tau),
        Selection::TopK(k) => all.truncate(k),
    }
    all
}

pub fn influential_neurons(model: &Model, x: &Tensor, c: &CorrelationMatrix, selection: Selection, cfg: &TraceConfig) -> Result<Vec<Influence>> {
    let pds = prediction_differences(model, x, c, &cfg.removal, cfg.space)?;
    Ok(select_influential(&pds, selection))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceTarget {
    Channel(usize),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyMap {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub stride: usize,
    pub target: EvidenceTarget,
    /// Row-major drops: original value minus occluded value.
    pub values: Vec<f64>,
}

/// Grid positions along one axis: `⌈(extent − patch)/stride⌉ + 1`.
pub fn grid_len(extent: usize, patch: usize, stride: usize) -> usize {
    (extent - patch).div_ceil(stride) + 1
}

fn target_values(model: &Model, batch: &Tensor, target: EvidenceTarget) -> Result<Vec<f64>> {
    let (feat, logits) = model.forward(batch)?;
    Ok(match target {
        EvidenceTarget::Channel(ch) => channel_activations(&feat, ChannelReduction::Max).into_iter().map(|r| r[ch]).collect(),
        EvidenceTarget::Class(cls) => {
            let k = logits.shape()[1];
            softmax_rows(logits.data(), k).chunks_exact(k).map(|r| r[cls]).collect()
        }
    })
}

/// Occlude a `patch × patch` square (clipped at the border) with `fill` at
/// every grid position and record the drop in the target value.
pub fn discrepancy_map(model: &Model, x: &Tensor, target: EvidenceTarget, patch: usize, stride: usize, fill: [f64; 3]) -> Result<DiscrepancyMap> {
    let [c, h, w] = model.spec().input_shape;
    if x.shape() != [c, h, w] {
        return Err(Error::shape("occlusion image", &[c, h, w], x.shape()));
    }
    if patch == 0 || stride == 0 || patch > h || patch > w {
        return Err(Error::InvalidArgument(format!("patch {patch} / stride {stride} do not fit a {h}x{w} image")));
    }
    match target {
        EvidenceTarget::Channel(ch) if ch >= model.spec().feature_channels() => {
            return Err(Error::InvalidArgument(format!("channel {ch} out of range")))
        }
        EvidenceTarget::Class(k) if k >= model.num_classes() => return Err(Error::UnknownClass(k)),
        _ => {}
    }
    let base = target_values(model, &as_batch(x)?, target)?[0];
    let (rows, cols) = (grid_len(h, patch, stride), grid_len(w, patch, stride));
    let mut values = Vec::with_capacity(rows * cols);
    let positions: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |q| (r, q))).collect();
    for chunk in positions.chunks(64) {
        let mut data = Vec::with_capacity(chunk.len() * x.len());
        for &(r, q) in chunk {
            let start = data.len();
            data.extend_from_slice(x.data());
            let img = &mut data[start..];
            for (ch, f) in fill.iter().enumerate().take(c) {
                for py in r * stride..(r * stride + patch).min(h) {
                    for px in q * stride..(q * stride + patch).min(w) {
                        img[(ch * h + py) * w + px] = *f;
                    }
                }
            }
        }
        let occluded = target_values(model, &Tensor::new(vec![chunk.len(), c, h, w], data)?, target)?;
        values.extend(occluded.into_iter().map(|v| base - v));
    }
    Ok(DiscrepancyMap {
        rows,
        cols,
        patch,
        stride,
        target,
        values,
    })
}

impl DiscrepancyMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Binary PGM (P5), drops linearly mapped to 0..255 (largest drop brightest),
    /// each grid cell drawn as a `scale × scale` block.
    pub fn to_pgm(&self, scale: usize) -> Vec<u8> {
        let scale = scale.max(1);
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (w, h) = (self.cols * scale, self.rows * scale);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                let v = (self.get(y / scale, x / scale) - lo) / span;
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub channels: Vec<usize>,
    /// `cos_C(p_a, p_b)` for every pair of selected channels, row-major.
    pub pairwise: Vec<Vec<f64>>,
    /// `cos_C(p_i, onehot(ŷ))` per selected channel.
    pub to_prediction: Vec<f64>,
    pub min_to_prediction: f64,
    pub tau_sim: f64,
    pub consistent: bool,
}

/// Compare the selected neurons' preferred classes with each other and with
/// the prediction; inconsistent when some neuron's similarity to `ŷ` is below
/// `tau_sim`.
pub fn influence_consistency(
    selected: &[Influence],
    profiles: &[NeuronProfile],
    predicted: usize,
    c: &CorrelationMatrix,
    tau_sim: f64,
) -> Result<Consistency> {
    if selected.is_empty() {
        return Err(Error::Empty("selected neurons".into()));
    }
    let dists: Vec<&CategoricalDistribution> = selected
        .iter()
        .map(|s| {
            profiles
                .iter()
                .find(|p| p.channel == s.channel)
                .map(|p| &p.p)
                .ok_or_else(|| Error::MissingArtifact(format!("profile for channel {}", s.channel)))
        })
        .collect::<Result<_>>()?;
    let onehot = CategoricalDistribution::one_hot(c.k(), predicted)?;
    let pairwise = dists
        .iter()
        .map(|a| dists.iter().map(|b| cosine_sim_c(a, b, c)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let to_prediction = dists.iter().map(|p| cosine_sim_c(p, &onehot, c)).collect::<Result<Vec<_>>>()?;
    let min_to_prediction = to_prediction.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Consistency {
        channels: selected.iter().map(|s| s.channel).collect(),
        pairwise,
        to_prediction,
        min_to_prediction,
        tau_sim,
        consistent: min_to_prediction >= tau_sim,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub split: Split,
    pub class: usize,
    pub sample_id: usize,
    /// Target class when the input is an adversarial record.
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedNeuron {
    pub channel: usize,
    pub pd: f64,
    /// Most common real-image class among the channel's top set.
    pub profile_top_class: usize,
    pub map: Option<DiscrepancyMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub image: ImageRef,
    pub model: String,
    pub predicted: usize,
    pub probability: f64,
    pub pd: Vec<f64>,
    pub selected: Vec<SelectedNeuron>,
    pub consistency: Consistency,
    pub config: TraceConfig,
}

/// Full trace of one input against precomputed neuron profiles.
pub fn trace(
    model: &Model,
    x: &Tensor,
    image: ImageRef,
    profiles: &[NeuronProfile],
    c: &CorrelationMatrix,
    fill: [f64; 3],
    cfg: &TraceConfig,
) -> Result<TraceReport> {
    let probs = model.predict(&as_batch(x)?)?;
    let predicted = argmax(probs.data());
    let pd = prediction_differences(model, x, c, &cfg.removal, cfg.space)?;
    let chosen = select_influential(&pd, cfg.selection);
    let consistency = influence_consistency(&chosen, profiles, predicted, c, cfg.tau_sim)?;
    let selected = chosen
        .iter()
        .map(|s| {
            let profile = profiles.iter().find(|p| p.channel == s.channel).expect("checked by consistency");
            let map = if cfg.maps {
                Some(discrepancy_map(model, x, EvidenceTarget::Channel(s.channel), cfg.patch, cfg.stride, fill)?)
            } else {
                None
            };
            Ok(SelectedNeuron {
                channel: s.channel,
                pd: s.pd,
                profile_top_class: argmax(profile.p.probs()),
                map,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceReport {
        image,
        model: model.arch().to_string(),
        predicted,
        probability: probs.data()[predicted],
        pd,
        selected,
        consistency,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::Arch;

    fn img(v: f64) -> Tensor {
        Tensor::full(&[3, 32, 32], v)
    }

    #[test]
    fn grid_geometry() {
        assert_eq!(grid_len(32, 32, 4), 1);
        assert_eq!(grid_len(32, 8, 4), 7);
        assert_eq!(grid_len(32, 8, 5), 6);
    }

    #[test]
    fn pd_is_zero_for_disconnected_channel() {
        let mut m = Model::build(Arch::CnnA, 4, 3).unwrap();
        let [c, h, w] = m.spec().feature_shape();
        let plane = h * w;
        // zero the output-layer weights reading channel 1
        let wlast = m.params().len() - 2;
        let d_in = c * plane;
        let data = m.params_mut()[wlast].data_mut();
        for row in data.chunks_exact_mut(d_in) {
            row[plane..2 * plane].fill(0.0);
        }
        let cm = CorrelationMatrix::identity(4);
        let pds = prediction_differences(&m, &img(200.0), &cm, &Removal::Zero, PdSpace::Probabilities).unwrap();
        assert_eq!(pds[1], 0.0);
    }

    #[test]
    fn identity_kernel_is_squared_euclidean() {
        let m = Model::build(Arch::CnnC, 4, 1).unwrap();
        let x = img(120.0);
        let cm = CorrelationMatrix::identity(4);
        let pd = prediction_difference(&m, &x, 2, &cm, &Removal::Zero, PdSpace::Probabilities).unwrap();
        let feat = m.features(&as_batch(&x).unwrap()).unwrap();
        let base = m.head_probs(&feat).unwrap();
        let mut removed = feat.clone();
        let [_, h, w] = m.spec().feature_shape();
        removed.data_mut()[2 * h * w..3 * h * w].fill(0.0);
        let after = m.head_probs(&removed).unwrap();
        let sq: f64 = base.data().iter().zip(after.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((pd - sq).abs() <= 1e-15);
    }

    #[test]
    fn selection_contracts() {
        let pds = [0.1, 0.3, 0.3, 0.0];
        let all = select_influential(&pds, Selection::TopK(4));
        assert_eq!(all.iter().map(|i| i.channel).collect::<Vec<_>>(), vec![1, 2, 0, 3]);
        assert!(select_influential(&pds, Selection::Threshold(0.5)).is_empty());
    }

    #[test]
    fn full_patch_is_one_cell() {
        let m = Model::build(Arch::CnnA, 4, 0).unwrap();
        let map = discrepancy_map(&m, &img(100.0), EvidenceTarget::Class(0), 32, 4, [0.0; 3]).unwrap();
        assert_eq!((map.rows, map.cols), (1, 1));
        let pgm = map.to_pgm(2);
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
    }
}
