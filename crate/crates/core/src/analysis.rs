//! Neuron profiling over the class taxonomy, representation ratios of
//! adversarial images, and a class-conditional Gaussian detector.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{argmax, AdversarialRecord};
use crate::error::{Error, Result};
use crate::synthdata::LabeledImage;
use crate::taxonomy::{cosine_sim_c, lc_score, CategoricalDistribution, CorrelationMatrix};
use crate::tensor::Tensor;
use crate::util;
use crate::zoo::{channel_activations, ChannelReduction, Model};

const CHUNK: usize = 64;

/// Run `f` on feature/logit batches of at most `CHUNK` images.
fn for_each_chunk(model: &Model, images: &[&Tensor], mut f: impl FnMut(&Tensor, &Tensor)) -> Result<()> {
    for chunk in images.chunks(CHUNK) {
        let (feat, logits) = model.forward(&Tensor::stack(chunk)?)?;
        f(&feat, &logits);
    }
    Ok(())
}

/// `out[image][channel]` activations at the feature layer.
pub fn activation_matrix(model: &Model, images: &[&Tensor], reduction: ChannelReduction) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for_each_chunk(model, images, |feat, _| out.extend(channel_activations(feat, reduction)))?;
    Ok(out)
}

/// Flattened feature vectors `φ(x)`, one per image.
pub fn feature_vectors(model: &Model, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for_each_chunk(model, images, |feat, _| {
        let per = feat.len() / feat.shape()[0];
        out.extend(feat.data().chunks_exact(per).map(<[f64]>::to_vec));
    })?;
    Ok(out)
}

/// Size of a top set: `⌊fraction·n⌋`, at least 1.
pub fn top_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).max(1).min(n)
}

/// Indices of the `top_count(n, fraction)` largest activations, ties to the
/// smaller index.
pub fn select_top(activations: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if activations.is_empty() {
        return Err(Error::Empty("activation set".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut ids: Vec<usize> = (0..activations.len()).collect();
    ids.sort_by(|&a, &b| activations[b].total_cmp(&activations[a]).then(a.cmp(&b)));
    ids.truncate(top_count(activations.len(), fraction));
    Ok(ids)
}

/// Top images of one channel and the label distribution of that top set.
pub fn top_activations(
    model: &Model,
    channel: usize,
    items: &[&LabeledImage],
    fraction: f64,
    reduction: ChannelReduction,
) -> Result<(Vec<usize>, CategoricalDistribution)> {
    if channel >= model.spec().feature_channels() {
        return Err(Error::InvalidArgument(format!("channel {channel} out of range")));
    }
    let images: Vec<&Tensor> = items.iter().map(|r| &r.image).collect();
    let acts: Vec<f64> = activation_matrix(model, &images, reduction)?.iter().map(|row| row[channel]).collect();
    let ids = select_top(&acts, fraction)?;
    let dist = CategoricalDistribution::from_labels(ids.iter().map(|&i| items[i].label), model.num_classes())?;
    Ok((ids, dist))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    /// Fraction of each set kept as the channel's top images.
    pub fraction: f64,
    /// Width of the LC bins in the summary.
    pub bin_width: f64,
    pub reduction: ChannelReduction,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            fraction: 0.05,
            bin_width: 0.05,
            reduction: ChannelReduction::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronProfile {
    pub model: String,
    pub layer: usize,
    pub channel: usize,
    pub real_top: Vec<usize>,
    pub adv_top: Vec<usize>,
    /// Ground-truth classes of the real top set.
    pub p: CategoricalDistribution,
    /// Original classes of the adversarial top set.
    pub q: CategoricalDistribution,
    /// Target classes of the same adversarial top set.
    pub q_tilde: CategoricalDistribution,
    pub lc: f64,
    pub cs1: f64,
    pub cs2: f64,
    pub entropy_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_cs1: f64,
    pub mean_cs2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub config: ProfileConfig,
    pub real_count: usize,
    pub adversarial_count: usize,
    pub mean_lc: f64,
    pub mean_cs1: f64,
    pub mean_cs2: f64,
    /// Pearson correlation across neurons; `None` without variance.
    pub corr_lc_cs1: Option<f64>,
    pub corr_lc_cs2: Option<f64>,
    pub bins: Vec<LcBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub profiles: Vec<NeuronProfile>,
    pub summary: ProfileSummary,
}

/// Labels of one set, as seen by the profiler.
pub struct LabeledActivations<'a> {
    /// `acts[image][channel]`.
    pub acts: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

/// Profiles from precomputed activations. `adv_original` and `adv_target`
/// label the same adversarial images.
pub fn profile_from_activations(
    model_id: &str,
    layer: usize,
    real: LabeledActivations<'_>,
    adv: &[Vec<f64>],
    adv_original: &[usize],
    adv_target: &[usize],
    cfg: &ProfileConfig,
    c: &CorrelationMatrix,
) -> Result<ProfileSet> {
    let k = c.k();
    if real.acts.is_empty() || adv.is_empty() {
        return Err(Error::Empty("profiling set".into()));
    }
    if real.acts.len() != real.labels.len() || adv.len() != adv_original.len() || adv.len() != adv_target.len() {
        return Err(Error::InvalidArgument("activation and label counts differ".into()));
    }
    let channels = real.acts[0].len();
    let mut profiles = Vec::with_capacity(channels);
    for ch in 0..channels {
        let r: Vec<f64> = real.acts.iter().map(|row| row[ch]).collect();
        let a: Vec<f64> = adv.iter().map(|row| row[ch]).collect();
        let real_top = select_top(&r, cfg.fraction)?;
        let adv_top = select_top(&a, cfg.fraction)?;
        let p = CategoricalDistribution::from_labels(real_top.iter().map(|&i| real.labels[i]), k)?;
        let q = CategoricalDistribution::from_labels(adv_top.iter().map(|&i| adv_original[i]), k)?;
        let q_tilde = CategoricalDistribution::from_labels(adv_top.iter().map(|&i| adv_target[i]), k)?;
        profiles.push(NeuronProfile {
            model: model_id.to_string(),
            layer,
            channel: ch,
            lc: lc_score(&p, c)?,
            cs1: cosine_sim_c(&p, &q, c)?,
            cs2: cosine_sim_c(&p, &q_tilde, c)?,
            entropy_p: p.entropy(),
            real_top,
            adv_top,
            p,
            q,
            q_tilde,
        });
    }
    let summary = summarize(&profiles, cfg, real.acts.len(), adv.len());
    Ok(ProfileSet { profiles, summary })
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len().max(1) as f64;
    v.sum::<f64>() / n
}

fn summarize(profiles: &[NeuronProfile], cfg: &ProfileConfig, real_count: usize, adversarial_count: usize) -> ProfileSummary {
    let lc: Vec<f64> = profiles.iter().map(|p| p.lc).collect();
    let cs1: Vec<f64> = profiles.iter().map(|p| p.cs1).collect();
    let cs2: Vec<f64> = profiles.iter().map(|p| p.cs2).collect();
    let mut bins: Vec<LcBin> = Vec::new();
    let mut keyed: Vec<(i64, &NeuronProfile)> = profiles.iter().map(|p| ((p.lc / cfg.bin_width).floor() as i64, p)).collect();
    keyed.sort_by_key(|(b, p)| (*b, p.channel));
    for group in keyed.chunk_by(|a, b| a.0 == b.0) {
        let b = group[0].0 as f64;
        bins.push(LcBin {
            lo: b * cfg.bin_width,
            hi: (b + 1.0) * cfg.bin_width,
            count: group.len(),
            mean_cs1: mean(group.iter().map(|(_, p)| p.cs1)),
            mean_cs2: mean(group.iter().map(|(_, p)| p.cs2)),
        });
    }
    ProfileSummary {
        config: cfg.clone(),
        real_count,
        adversarial_count,
        mean_lc: mean(lc.iter().copied()),
        mean_cs1: mean(cs1.iter().copied()),
        mean_cs2: mean(cs2.iter().copied()),
        corr_lc_cs1: util::pearson(&lc, &cs1),
        corr_lc_cs2: util::pearson(&lc, &cs2),
        bins,
    }
}

/// One profile per feature-layer channel of `model`.
pub fn profile_neurons(
    model: &Model,
    real: &[&LabeledImage],
    adversarial: &[&AdversarialRecord],
    cfg: &ProfileConfig,
    c: &CorrelationMatrix,
) -> Result<ProfileSet> {
    if c.k() != model.num_classes() {
        return Err(Error::InvalidArgument("correlation matrix and model disagree on K".into()));
    }
    let real_images: Vec<&Tensor> = real.iter().map(|r| &r.image).collect();
    let adv_images: Vec<&Tensor> = adversarial.iter().map(|r| &r.image).collect();
    let real_acts = activation_matrix(model, &real_images, cfg.reduction)?;
    let adv_acts = activation_matrix(model, &adv_images, cfg.reduction)?;
    let labels: Vec<usize> = real.iter().map(|r| r.label).collect();
    let orig: Vec<usize> = adversarial.iter().map(|r| r.class).collect();
    let targ: Vec<usize> = adversarial.iter().map(|r| r.target).collect();
    profile_from_activations(
        model.arch().as_str(),
        model.spec().feature_layer,
        LabeledActivations {
            acts: &real_acts,
            labels: &labels,
        },
        &adv_acts,
        &orig,
        &targ,
        cfg,
        c,
    )
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance from a point to every member of a set.
pub fn mean_dist_to_set(point: &[f64], set: &[&[f64]]) -> f64 {
    set.iter().map(|s| dist(point, s)).sum::<f64>() / set.len() as f64
}

/// Mean distance over all cross pairs of two sets.
pub fn mean_dist_between(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += dist(x, y);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Mean distance over unordered distinct pairs of one set (self-pairs excluded).
pub fn mean_dist_within(set: &[&[f64]]) -> f64 {
    let n = set.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += dist(set[i], set[j]);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    /// Index of the adversarial record in its set.
    pub record: usize,
    pub class: usize,
    pub target: usize,
    pub r1: f64,
    pub r2: f64,
    pub n_class: usize,
    pub n_target: usize,
}

/// `r₁ = d̄(φ*, Φ_y) / d̄(Φ_y, Φ_y)` and `r₂ = d̄(φ*, Φ_{y*}) / d̄(Φ_y, Φ_{y*})`.
pub fn ratios_from_features(adv: &[f64], class_set: &[&[f64]], target_set: &[&[f64]]) -> Result<(f64, f64)> {
    if class_set.len() < 2 || target_set.len() < 2 {
        return Err(Error::Degenerate("ratio class sets need >= 2 members".into()));
    }
    let within = mean_dist_within(class_set);
    let between = mean_dist_between(class_set, target_set);
    if !(within > 0.0) || !(between > 0.0) {
        return Err(Error::Degenerate("identical representations give a zero denominator".into()));
    }
    Ok((mean_dist_to_set(adv, class_set) / within, mean_dist_to_set(adv, target_set) / between))
}

/// Per-class validation features, with cached denominators.
pub struct RatioContext {
    by_class: Vec<Vec<Vec<f64>>>,
}

impl RatioContext {
    pub fn new(model: &Model, validation: &[&LabeledImage]) -> Result<Self> {
        let images: Vec<&Tensor> = validation.iter().map(|r| &r.image).collect();
        let feats = feature_vectors(model, &images)?;
        let mut by_class = vec![Vec::new(); model.num_classes()];
        for (f, r) in feats.into_iter().zip(validation) {
            by_class.get_mut(r.label).ok_or(Error::UnknownClass(r.label))?.push(f);
        }
        Ok(Self { by_class })
    }

    pub fn class_set(&self, class: usize) -> Vec<&[f64]> {
        self.by_class.get(class).map_or_else(Vec::new, |v| v.iter().map(Vec::as_slice).collect())
    }

    pub fn ratio(&self, record: usize, adv_features: &[f64], class: usize, target: usize) -> Result<RatioRecord> {
        let a = self.class_set(class);
        let b = self.class_set(target);
        let (r1, r2) = ratios_from_features(adv_features, &a, &b)?;
        Ok(RatioRecord {
            record,
            class,
            target,
            r1,
            r2,
            n_class: a.len(),
            n_target: b.len(),
        })
    }
}

/// Ratios for one adversarial record against the validation class sets.
pub fn repr_ratios(model: &Model, record: &AdversarialRecord, validation: &[&LabeledImage]) -> Result<RatioRecord> {
    let ctx = RatioContext::new(model, validation)?;
    let f = feature_vectors(model, &[&record.image])?;
    ctx.ratio(0, &f[0], record.class, record.target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioError {
    pub record: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub records: Vec<RatioRecord>,
    pub errors: Vec<RatioError>,
    pub mean_r1: f64,
    pub mean_r2: f64,
}

pub fn ratio_table(model: &Model, records: &[&AdversarialRecord], validation: &[&LabeledImage]) -> Result<RatioTable> {
    let ctx = RatioContext::new(model, validation)?;
    let images: Vec<&Tensor> = records.iter().map(|r| &r.image).collect();
    let feats = feature_vectors(model, &images)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (i, (r, f)) in records.iter().zip(&feats).enumerate() {
        match ctx.ratio(i, f, r.class, r.target) {
            Ok(row) => rows.push(row),
            Err(e) => errors.push(RatioError {
                record: i,
                error: e.to_string(),
            }),
        }
    }
    Ok(RatioTable {
        mean_r1: mean(rows.iter().map(|r| r.r1)),
        mean_r2: mean(rows.iter().map(|r| r.r2)),
        records: rows,
        errors,
    })
}

pub const DETECTOR_MAGIC: &[u8; 8] = b"ADVLDETR";
pub const DETECTOR_VERSION: u32 = 1;
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

/// Per-class diagonal Gaussian over flattened features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub num_classes: usize,
    pub dim: usize,
    pub floor: f64,
    pub counts: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl DetectorModel {
    /// Maximum-likelihood mean and variance (divide by n) per class.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], num_classes: usize, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::InvalidArgument("variance floor must be > 0".into()));
        }
        let dim = features.first().ok_or_else(|| Error::Empty("detector training set".into()))?.len();
        let mut counts = vec![0usize; num_classes];
        let mut means = vec![vec![0.0; dim]; num_classes];
        for (f, &y) in features.iter().zip(labels) {
            *counts.get_mut(y).ok_or(Error::UnknownClass(y))? += 1;
            for (m, v) in means[y].iter_mut().zip(f) {
                *m += v;
            }
        }
        if let Some(c) = counts.iter().position(|&n| n < 2) {
            return Err(Error::Degenerate(format!("class {c} has fewer than 2 training images")));
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut variances = vec![vec![0.0; dim]; num_classes];
        for (f, &y) in features.iter().zip(labels) {
            for ((s, v), m) in variances[y].iter_mut().zip(f).zip(&means[y]) {
                *s += (v - m) * (v - m);
            }
        }
        for (var, &n) in variances.iter_mut().zip(&counts) {
            var.iter_mut().for_each(|v| *v = (*v / n as f64).max(floor));
        }
        Ok(Self {
            num_classes,
            dim,
            floor,
            counts,
            means,
            variances,
        })
    }

    /// Diagonal-Gaussian log density of `v` under `class`.
    pub fn log_density(&self, class: usize, v: &[f64]) -> Result<f64> {
        if class >= self.num_classes {
            return Err(Error::UnknownClass(class));
        }
        if v.len() != self.dim {
            return Err(Error::shape("detector feature", &[self.dim], &[v.len()]));
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut s = 0.0;
        for ((x, m), var) in v.iter().zip(&self.means[class]).zip(&self.variances[class]) {
            s += (two_pi * var).ln() + (x - m) * (x - m) / var;
        }
        Ok(-0.5 * s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            num_classes: usize,
            dim: usize,
            floor: f64,
            counts: &'a [usize],
        }
        let json = serde_json::to_vec(&Header {
            num_classes: self.num_classes,
            dim: self.dim,
            floor: self.floor,
            counts: &self.counts,
        })?;
        let payload = util::f64_le_bytes(self.means.iter().chain(&self.variances).flatten().copied());
        let hash = hex::decode(util::sha256_hex(&[&json, &payload])).expect("hex from sha");
        let mut out = Vec::new();
        out.extend_from_slice(DETECTOR_MAGIC);
        out.extend_from_slice(&DETECTOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&hash);
        out.extend_from_slice(&payload);
        util::write_file(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            num_classes: usize,
            dim: usize,
            floor: f64,
            counts: Vec<usize>,
        }
        let bytes = util::read_file(path)?;
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 20 || &bytes[..8] != DETECTOR_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != DETECTOR_VERSION {
            return Err(Error::VersionMismatch {
                what: "detector".into(),
                expected: DETECTOR_VERSION,
                found: version,
            });
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + json_len).ok_or_else(|| corrupt("truncated header"))?;
        let hash = bytes.get(20 + json_len..52 + json_len).ok_or_else(|| corrupt("truncated hash"))?;
        let payload = &bytes[(52 + json_len).min(bytes.len())..];
        let actual = util::sha256_hex(&[json, payload]);
        if actual != hex::encode(hash) {
            return Err(Error::HashMismatch {
                path: path.to_path_buf(),
                expected: hex::encode(hash),
                actual,
            });
        }
        let h: Header = serde_json::from_slice(json)?;
        let values = util::f64_from_le(payload);
        if values.len() != 2 * h.num_classes * h.dim || h.counts.len() != h.num_classes {
            return Err(corrupt("payload does not match header"));
        }
        let rows: Vec<Vec<f64>> = values.chunks_exact(h.dim.max(1)).map(<[f64]>::to_vec).collect();
        let (means, variances) = rows.split_at(h.num_classes);
        Ok(Self {
            num_classes: h.num_classes,
            dim: h.dim,
            floor: h.floor,
            counts: h.counts,
            means: means.to_vec(),
            variances: variances.to_vec(),
        })
    }
}

pub fn fit_detector(model: &Model, train: &[&LabeledImage], floor: f64) -> Result<DetectorModel> {
    let images: Vec<&Tensor> = train.iter().map(|r| &r.image).collect();
    let feats = feature_vectors(model, &images)?;
    let labels: Vec<usize> = train.iter().map(|r| r.label).collect();
    DetectorModel::fit(&feats, &labels, model.num_classes(), floor)
}

/// Log density of each image's features under its predicted class.
pub fn detector_scores(detector: &DetectorModel, model: &Model, images: &[&Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    let mut err = None;
    for_each_chunk(model, images, |feat, logits| {
        let per = feat.len() / feat.shape()[0];
        for (i, f) in feat.data().chunks_exact(per).enumerate() {
            let y_hat = argmax(logits.row_slice(i));
            match detector.log_density(y_hat, f) {
                Ok(s) => out.push(s),
                Err(e) => {
                    err.get_or_insert(e);
                }
            }
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

pub fn detector_score(detector: &DetectorModel, model: &Model, x: &Tensor) -> Result<f64> {
    Ok(detector_scores(detector, model, &[x])?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Inputs with score strictly below this are flagged adversarial.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC of the rule "flag if score < threshold" with adversarial as positive.
/// AUC is the rank statistic `P(adv < clean) + ½·P(adv = clean)`.
pub fn roc_auc(clean: &[f64], adversarial: &[f64]) -> Result<Roc> {
    if clean.is_empty() || adversarial.is_empty() {
        return Err(Error::Empty("ROC score set".into()));
    }
    if clean.iter().chain(adversarial).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("ROC scores".into()));
    }
    let mut c = clean.to_vec();
    c.sort_by(f64::total_cmp);
    let mut a = adversarial.to_vec();
    a.sort_by(f64::total_cmp);
    let (mut below, mut ties) = (0u64, 0u64);
    for s in &a {
        let lo = c.partition_point(|v| v < s);
        let hi = c.partition_point(|v| v <= s);
        below += (c.len() - hi) as u64;
        ties += (hi - lo) as u64;
    }
    let auc = (below as f64 + 0.5 * ties as f64) / (c.len() as f64 * a.len() as f64);

    let mut thresholds: Vec<f64> = c.iter().chain(&a).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let last = *thresholds.last().expect("non-empty");
    thresholds.push(if last.is_finite() { last.next_up() } else { last });
    let points = thresholds
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            fpr: c.partition_point(|v| *v < t) as f64 / c.len() as f64,
            tpr: a.partition_point(|v| *v < t) as f64 / a.len() as f64,
        })
        .collect();
    Ok(Roc { points, auc })
}
