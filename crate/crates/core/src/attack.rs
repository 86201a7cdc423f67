//! Targeted adversarial examples: the ensemble-optimization attack, the
//! iterative targeted fast-gradient-sign variant, least-likely target choice
//! and adversarial-set construction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{Dataset, LabeledImage, Split};
use crate::tensor::{Graph, NodeId, OptimizerKind, OptimizerState, Reduction, Tensor};
use crate::util;
use crate::zoo::{Arch, Model};

pub const ADV_SET_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "images.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Ensemble,
    TargetedFgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Weight of the distance term.
    pub lambda: f64,
    /// Adam step size in pixel units.
    pub step_size: f64,
    pub max_iters: usize,
    /// Stop once every model gives the target more than this probability.
    pub confidence: f64,
    /// Use `‖x* − x‖²` instead of `‖x* − x‖`.
    pub squared_distance: bool,
    pub members: Vec<Arch>,
    /// Per-step magnitude and step count of the FGS variant.
    pub fgs_eps: f64,
    pub fgs_steps: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            step_size: 5.0,
            max_iters: 20,
            confidence: 0.9,
            squared_distance: false,
            members: Arch::ALL.to_vec(),
            fgs_eps: 1.0,
            fgs_steps: 10,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.step_size > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidConfig(format!(
                "attack needs lambda >= 0, step > 0, iterations >= 1 (got {}, {}, {})",
                self.lambda, self.step_size, self.max_iters
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) || !(self.fgs_eps >= 0.0) {
            return Err(Error::InvalidConfig("confidence must be in [0,1] and fgs_eps >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialRecord {
    pub split: Split,
    /// Original class `y`.
    pub class: usize,
    pub sample_id: usize,
    /// `(3, H, W)` in [0, 255].
    pub image: Tensor,
    pub target: usize,
    pub kind: AttackKind,
    pub iterations: usize,
    pub l2: f64,
    /// `p(y*)` under each attacked model, in ensemble order.
    pub target_probs: Vec<f64>,
    pub success: bool,
    /// Objective value before each step and after the last one.
    pub loss_trace: Vec<f64>,
}

fn clip_pixels(v: &mut [f64]) {
    for p in v.iter_mut() {
        *p = p.clamp(0.0, 255.0);
    }
}

fn l2_between(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_image(x: &Tensor, model: &Model) -> Result<()> {
    if x.shape() != model.spec().input_shape {
        return Err(Error::shape("attack image", &model.spec().input_shape, x.shape()));
    }
    if x.data().iter().any(|v| !(0.0..=255.0).contains(v)) {
        return Err(Error::InvalidArgument("attack image must lie in [0, 255]".into()));
    }
    Ok(())
}

/// Differentiable graph `x -> (logits, CE(logits, targets))` for one model.
struct LossGraph {
    graph: Graph,
    x: NodeId,
    logits: NodeId,
    loss: NodeId,
}

impl LossGraph {
    fn new(model: &Model, batch: usize, targets: &[usize]) -> Result<Self> {
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph, false);
        let mut shape = vec![batch];
        shape.extend_from_slice(&model.spec().input_shape);
        let x = graph.input_with_grad("x", &shape);
        let feat = model.stem(&mut graph, x, &bound)?;
        let logits = model.head(&mut graph, feat, &bound)?;
        let loss = graph.cross_entropy(logits, targets, Reduction::Sum)?;
        Ok(Self { graph, x, logits, loss })
    }

    /// Returns `(loss, probabilities, input gradient)`.
    fn run(&mut self, x: &Tensor) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.graph.forward(&[("x", x)])?;
        let loss = self.graph.value(self.loss)?.item();
        if !loss.is_finite() {
            return Err(Error::NonFinite("attack loss".into()));
        }
        let logits = self.graph.value(self.logits)?;
        let probs = crate::tensor::softmax_rows(logits.data(), logits.shape()[1]);
        self.graph.backward(self.loss)?;
        let grad = self.graph.grad(self.x).expect("input requires grad").to_vec();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("input gradient".into()));
        }
        Ok((loss, probs, grad))
    }
}

/// Summed cross-entropy of `batch` against `targets` and its gradient with
/// respect to the pixels.
pub fn loss_input_gradient(model: &Model, batch: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let mut lg = LossGraph::new(model, n, targets)?;
    let (loss, _, grad) = lg.run(batch)?;
    Ok((loss, Tensor::new(batch.shape().to_vec(), grad)?))
}

/// The `n` classes with the smallest ensemble-average probability, ascending;
/// ties go to the smaller class id.
pub fn least_likely_targets(models: &[&Model], x: &Tensor, n: usize) -> Result<Vec<usize>> {
    let first = models.first().ok_or_else(|| Error::Empty("attack ensemble".into()))?;
    let k = first.num_classes();
    if n >= k {
        return Err(Error::InvalidArgument(format!("need n < K, got n={n}, K={k}")));
    }
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(x.shape());
    let batch = x.clone().reshape(batch_shape)?;
    let mut avg = vec![0.0; k];
    for m in models {
        let p = m.predict(&batch)?;
        for (a, v) in avg.iter_mut().zip(p.data()) {
            *a += v / models.len() as f64;
        }
    }
    let mut ids: Vec<usize> = (0..k).collect();
    ids.sort_by(|&a, &b| avg[a].total_cmp(&avg[b]).then(a.cmp(&b)));
    ids.truncate(n);
    Ok(ids)
}

/// Minimize `λ·d(x, x*) + Σᵢ CE(y*, fᵢ(x*))` over `x*` with pixel-space Adam,
/// clipping to [0, 255] after each step.
pub fn ensemble_attack(models: &[&Model], x: &Tensor, y: usize, y_star: usize, cfg: &AttackConfig) -> Result<AdversarialRecord> {
    cfg.validate()?;
    let first = models.first().ok_or_else(|| Error::Empty("attack ensemble".into()))?;
    check_image(x, first)?;
    let k = first.num_classes();
    if y_star == y || y_star >= k || y >= k {
        return Err(Error::InvalidArgument(format!("target {y_star} must differ from label {y} and be < {k}")));
    }
    let mut graphs = models.iter().map(|m| LossGraph::new(m, 1, &[y_star])).collect::<Result<Vec<_>>>()?;
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(x.shape());
    let mut adv = vec![x.clone().reshape(batch_shape)?];
    let mut opt = OptimizerState::new(OptimizerKind::adam(cfg.step_size), adv.iter());

    let mut loss_trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut iterations = 0;
    let mut target_probs;
    loop {
        let diff: Vec<f64> = adv[0].data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let (dist_term, mut grad) = if cfg.squared_distance {
            (dist * dist, diff.iter().map(|d| 2.0 * cfg.lambda * d).collect::<Vec<_>>())
        } else if dist > 0.0 {
            (dist, diff.iter().map(|d| cfg.lambda * d / dist).collect())
        } else {
            (0.0, vec![0.0; diff.len()])
        };
        let mut total = cfg.lambda * dist_term;
        target_probs = Vec::with_capacity(models.len());
        for lg in graphs.iter_mut() {
            let (loss, probs, g) = lg.run(&adv[0])?;
            total += loss;
            target_probs.push(probs[y_star]);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("attack objective at iteration {iterations}")));
        }
        loss_trace.push(total);
        if iterations == cfg.max_iters || target_probs.iter().all(|p| *p > cfg.confidence) {
            break;
        }
        opt.step(&mut adv, &[&grad])?;
        clip_pixels(adv[0].data_mut());
        iterations += 1;
    }

    let image = adv.pop().expect("one tensor").reshape(x.shape().to_vec())?;
    let mut success = true;
    for lg in graphs.iter() {
        let logits = lg.graph.value(lg.logits)?;
        success &= argmax(logits.data()) == y_star;
    }
    Ok(AdversarialRecord {
        split: Split::Validation,
        class: y,
        sample_id: 0,
        l2: l2_between(image.data(), x.data()),
        image,
        target: y_star,
        kind: AttackKind::Ensemble,
        iterations,
        target_probs,
        success,
        loss_trace,
    })
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `T` steps of `x ← clip(x − ε·sign ∇ₓ CE(y*, f(x)))` on an `(n, c, h, w)`
/// batch. `targets[i]` is the target of image `i`.
pub fn targeted_fgs(model: &Model, batch: &Tensor, targets: &[usize], eps: f64, steps: usize) -> Result<Tensor> {
    signed_steps(model, batch, targets, -eps, steps)
}

/// Shared loop for the targeted (negative `signed_eps`) and untargeted
/// (positive) sign-gradient methods.
pub(crate) fn signed_steps(model: &Model, batch: &Tensor, targets: &[usize], signed_eps: f64, steps: usize) -> Result<Tensor> {
    if !signed_eps.is_finite() {
        return Err(Error::InvalidArgument("FGS step must be finite".into()));
    }
    let n = batch.shape().first().copied().unwrap_or(0);
    if targets.len() != n {
        return Err(Error::shape("FGS targets", &[n], &[targets.len()]));
    }
    let mut x = batch.clone();
    if signed_eps == 0.0 || steps == 0 {
        return Ok(x);
    }
    let mut lg = LossGraph::new(model, n, targets)?;
    for _ in 0..steps {
        let (_, _, grad) = lg.run(&x)?;
        for (p, g) in x.data_mut().iter_mut().zip(&grad) {
            let s = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *p = (*p + signed_eps * s).clamp(0.0, 255.0);
        }
    }
    Ok(x)
}

/// One adversarial image per entry, for the FGS variant.
pub fn fgs_record(model: &Model, item: &LabeledImage, y_star: usize, eps: f64, steps: usize) -> Result<AdversarialRecord> {
    let mut shape = vec![1];
    shape.extend_from_slice(item.image.shape());
    let batch = item.image.clone().reshape(shape)?;
    let adv = targeted_fgs(model, &batch, &[y_star], eps, steps)?;
    let probs = model.predict(&adv)?;
    let image = adv.reshape(item.image.shape().to_vec())?;
    Ok(AdversarialRecord {
        split: item.split,
        class: item.label,
        sample_id: item.sample_id,
        l2: l2_between(image.data(), item.image.data()),
        image,
        target: y_star,
        kind: AttackKind::TargetedFgs,
        iterations: steps,
        target_probs: vec![probs.data()[y_star]],
        success: argmax(probs.data()) == y_star,
        loss_trace: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordIndex {
    pub split: Split,
    pub class: usize,
    pub sample_id: usize,
    pub target: usize,
    pub kind: AttackKind,
    pub iterations: usize,
    pub l2: f64,
    pub target_probs: Vec<f64>,
    pub success: bool,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackFailure {
    pub class: usize,
    pub sample_id: usize,
    pub target: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialManifest {
    pub format_version: u32,
    pub config: AttackConfig,
    pub n_targets: usize,
    pub dataset_hash: String,
    pub dataset_seed: u64,
    /// Fingerprints of the attacked models, in ensemble order.
    pub models: Vec<(Arch, String)>,
    pub image_shape: [usize; 3],
    pub attempted: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub failures: Vec<AttackFailure>,
    pub mean_l2: f64,
    pub mean_clean_norm: f64,
    pub mean_iterations: f64,
    pub records: Vec<RecordIndex>,
    pub payload: String,
    pub payload_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSet {
    pub manifest: AdversarialManifest,
    pub records: Vec<AdversarialRecord>,
}

/// Attack every validation image against its `n_targets` least likely classes.
pub fn build_adversarial_set(dataset: &Dataset, models: &[&Model], n_targets: usize, cfg: &AttackConfig) -> Result<AdversarialSet> {
    let items: Vec<&LabeledImage> = dataset.validation.iter().collect();
    build_adversarial_set_for(dataset, &items, models, n_targets, cfg)
}

/// As [`build_adversarial_set`] on a chosen subset of images.
pub fn build_adversarial_set_for(
    dataset: &Dataset,
    items: &[&LabeledImage],
    models: &[&Model],
    n_targets: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialSet> {
    build_adversarial_set_with(dataset, items, models, n_targets, cfg, 1)
}

/// Target class and outcome of one attack.
type Attempt = (usize, std::result::Result<AdversarialRecord, String>);

fn attack_item(item: &LabeledImage, models: &[&Model], n_targets: usize, cfg: &AttackConfig) -> Result<Vec<Attempt>> {
    let targets = least_likely_targets(models, &item.image, n_targets)?;
    Ok(targets
        .into_iter()
        .map(|t| {
            let r = ensemble_attack(models, &item.image, item.label, t, cfg).map(|mut rec| {
                rec.split = item.split;
                rec.sample_id = item.sample_id;
                rec
            });
            (t, r.map_err(|e| e.to_string()))
        })
        .collect())
}

/// As [`build_adversarial_set_for`], spreading images over `workers` threads.
/// The result does not depend on the worker count.
pub fn build_adversarial_set_with(
    dataset: &Dataset,
    items: &[&LabeledImage],
    models: &[&Model],
    n_targets: usize,
    cfg: &AttackConfig,
    workers: usize,
) -> Result<AdversarialSet> {
    cfg.validate()?;
    let first = models.first().ok_or_else(|| Error::Empty("attack ensemble".into()))?;
    let workers = workers.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    let per_item: Vec<Result<Vec<Attempt>>> = if workers == 1 {
        items.iter().map(|it| attack_item(it, models, n_targets, cfg)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || part.iter().map(|it| attack_item(it, models, n_targets, cfg)).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("attack worker panicked")).collect()
        })
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut attempted = 0;
    let mut clean_norm_sum = 0.0;
    for (item, attempts) in items.iter().zip(per_item) {
        for (t, r) in attempts? {
            attempted += 1;
            match r {
                Ok(rec) => {
                    clean_norm_sum += item.image.l2_norm();
                    records.push(rec);
                }
                Err(error) => failures.push(AttackFailure {
                    class: item.label,
                    sample_id: item.sample_id,
                    target: t,
                    error,
                }),
            }
        }
    }
    let n = records.len().max(1) as f64;
    let successes = records.iter().filter(|r| r.success).count();
    let payload = encode_payload(&records);
    let manifest = AdversarialManifest {
        format_version: ADV_SET_VERSION,
        config: cfg.clone(),
        n_targets,
        dataset_hash: dataset.content_hash(),
        dataset_seed: dataset.config.seed,
        models: models.iter().map(|m| (m.arch(), m.fingerprint())).collect(),
        image_shape: first.spec().input_shape,
        attempted,
        successes,
        success_rate: successes as f64 / attempted.max(1) as f64,
        failures,
        mean_l2: records.iter().map(|r| r.l2).sum::<f64>() / n,
        mean_clean_norm: clean_norm_sum / n,
        mean_iterations: records.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
        records: records.iter().map(index_of).collect(),
        payload: PAYLOAD.into(),
        payload_hash: util::sha256_hex(&[&payload]),
    };
    Ok(AdversarialSet { manifest, records })
}

fn index_of(r: &AdversarialRecord) -> RecordIndex {
    RecordIndex {
        split: r.split,
        class: r.class,
        sample_id: r.sample_id,
        target: r.target,
        kind: r.kind,
        iterations: r.iterations,
        l2: r.l2,
        target_probs: r.target_probs.clone(),
        success: r.success,
        loss_trace: r.loss_trace.clone(),
    }
}

fn encode_payload(records: &[AdversarialRecord]) -> Vec<u8> {
    util::f64_le_bytes(records.iter().flat_map(|r| r.image.data().iter().copied()))
}

impl AdversarialSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn successful(&self) -> impl Iterator<Item = &AdversarialRecord> {
        self.records.iter().filter(|r| r.success)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        util::write_file(&dir.join(PAYLOAD), &encode_payload(&self.records))?;
        util::write_json(&dir.join(MANIFEST), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: AdversarialManifest = util::read_json(&dir.join(MANIFEST))?;
        if manifest.format_version != ADV_SET_VERSION {
            return Err(Error::VersionMismatch {
                what: "adversarial set".into(),
                expected: ADV_SET_VERSION,
                found: manifest.format_version,
            });
        }
        let path = dir.join(&manifest.payload);
        let bytes = util::read_file(&path)?;
        let actual = util::sha256_hex(&[&bytes]);
        if actual != manifest.payload_hash {
            return Err(Error::HashMismatch {
                path,
                expected: manifest.payload_hash.clone(),
                actual,
            });
        }
        let per: usize = manifest.image_shape.iter().product();
        if bytes.len() != per * 8 * manifest.records.len() {
            return Err(Error::Corrupt {
                path,
                reason: format!("payload has {} bytes for {} records", bytes.len(), manifest.records.len()),
            });
        }
        let values = util::f64_from_le(&bytes);
        let records = manifest
            .records
            .iter()
            .zip(values.chunks_exact(per))
            .map(|(ix, px)| {
                Ok(AdversarialRecord {
                    split: ix.split,
                    class: ix.class,
                    sample_id: ix.sample_id,
                    image: Tensor::new(manifest.image_shape.to_vec(), px.to_vec())?,
                    target: ix.target,
                    kind: ix.kind,
                    iterations: ix.iterations,
                    l2: ix.l2,
                    target_probs: ix.target_probs.clone(),
                    success: ix.success,
                    loss_trace: ix.loss_trace.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, records })
    }
}
