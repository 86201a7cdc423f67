//! Standard and adversarial training loops plus accuracy evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, argmax};
use crate::error::{Error, Result};
use crate::synthdata::{Dataset, LabeledImage};
use crate::tensor::{Graph, OptimizerKind, OptimizerState, Reduction, Tensor};
use crate::util;
use crate::zoo::{AdversarialMeta, Model, TrainingMeta};

/// Rule used to draw `y*` inside adversarial training.
pub const TARGET_RULE: &str = "uniform-random-non-true-per-image-per-epoch";

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    /// Multiply the learning rate by `gamma` every `every` epochs.
    pub every: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: Option<StepDecay>,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    /// Per-step size of the inner targeted FGS attack.
    pub eps: f64,
    /// Number of inner FGS steps.
    pub steps: usize,
    /// Divide the consistent term by the feature size, so `beta` does not
    /// depend on the width of the feature layer.
    pub per_element_consistency: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            optimizer: OptimizerKind::sgd(0.02, 0.9, 5e-5),
            schedule: Some(StepDecay { every: 5, gamma: 0.5 }),
            seed: 0,
            alpha: 0.5,
            beta: 0.1,
            eps: 1.0,
            steps: 10,
            per_element_consistency: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.beta >= 0.0) || !(self.eps >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= alpha <= 1, beta >= 0, eps >= 0 (got {}, {}, {})",
                self.alpha, self.beta, self.eps
            )));
        }
        if let Some(s) = &self.schedule {
            if s.every == 0 || !(s.gamma > 0.0) {
                return Err(Error::InvalidConfig("schedule needs every >= 1 and gamma > 0".into()));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.optimizer.lr();
        match &self.schedule {
            Some(s) => base * s.gamma.powi((epoch / s.every) as i32),
            None => base,
        }
    }

    /// True when the objective reduces to plain cross-entropy on clean inputs.
    pub fn is_degenerate(&self) -> bool {
        self.alpha == 1.0 && self.beta == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total objective over the epoch's batches.
    pub loss: f64,
    pub clean_ce: f64,
    pub adv_ce: f64,
    pub consistent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub adversarial: bool,
    pub config: TrainConfig,
    /// Mean training cross-entropy before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub clean_accuracy: f64,
    /// Validation accuracy under the inner attack's FGS step, when adversarial.
    pub adversarial_accuracy: Option<f64>,
    /// Kept out of the JSON so reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn meta(&self) -> TrainingMeta {
        TrainingMeta {
            epochs: self.epochs.len(),
            seed: self.config.seed,
            adversarial: self.adversarial.then(|| AdversarialMeta {
                alpha: self.config.alpha,
                beta: self.config.beta,
                eps: self.config.eps,
                steps: self.config.steps,
                per_element_consistency: self.config.per_element_consistency,
                target_rule: TARGET_RULE.into(),
            }),
            init_from: None,
        }
    }
}

/// Stack images into an `(n, c, h, w)` batch with their labels.
pub fn batch_from(items: &[&LabeledImage]) -> Result<(Tensor, Vec<usize>)> {
    if items.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let images: Vec<&Tensor> = items.iter().map(|r| &r.image).collect();
    Ok((Tensor::stack(&images)?, items.iter().map(|r| r.label).collect()))
}

fn epoch_order(cfg: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut util::rng_for(cfg.seed, &[0x300, epoch as u64]));
    order
}

fn mean_ce(model: &Model, items: &[&LabeledImage]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in items.chunks(EVAL_CHUNK) {
        let (x, y) = batch_from(chunk)?;
        let p = model.predict(&x)?;
        let k = p.shape()[1];
        total += y.iter().enumerate().map(|(i, &c)| -p.data()[i * k + c].max(1e-300).ln()).sum::<f64>();
    }
    Ok(total / items.len() as f64)
}

struct Terms {
    total: f64,
    clean: f64,
    adv: f64,
    consistent: f64,
}

/// One plain cross-entropy update. Shared by both loops so the degenerate
/// adversarial objective follows exactly the same arithmetic.
fn clean_step(model: &mut Model, opt: &mut OptimizerState, x: &Tensor, y: &[usize]) -> Result<Terms> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let xi = g.input("x", x.shape());
    let feat = model.stem(&mut g, xi, &bound)?;
    let logits = model.head(&mut g, feat, &bound)?;
    let loss = g.cross_entropy(logits, y, Reduction::Mean)?;
    g.forward(&[("x", x)])?;
    let value = g.value(loss)?.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    g.backward(loss)?;
    let grads: Vec<&[f64]> = bound.params.iter().map(|p| g.grad(*p).expect("param grad")).collect();
    opt.step(model.params_mut(), &grads)?;
    Ok(Terms {
        total: value,
        clean: value,
        adv: 0.0,
        consistent: 0.0,
    })
}

fn adversarial_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    x: &Tensor,
    y: &[usize],
    targets: &[usize],
) -> Result<Terms> {
    // The generated batch is treated as data: no gradient flows through it.
    let xa = attack::targeted_fgs(model, x, targets, cfg.eps, cfg.steps)?;
    let n = y.len() as f64;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let xi = g.input("x", x.shape());
    let xai = g.input("x_adv", x.shape());
    let feat = model.stem(&mut g, xi, &bound)?;
    let logits = model.head(&mut g, feat, &bound)?;
    let feat_a = model.stem(&mut g, xai, &bound)?;
    let logits_a = model.head(&mut g, feat_a, &bound)?;
    let ce = g.cross_entropy(logits, y, Reduction::Mean)?;
    let ce_a = g.cross_entropy(logits_a, y, Reduction::Mean)?;
    let diff = g.sub(feat, feat_a)?;
    let sq = g.sum_squares(diff)?;
    // Per-image squared distance, averaged over the batch (and optionally
    // over feature elements).
    let per_image = if cfg.per_element_consistency {
        model.spec().feature_shape().iter().product::<usize>() as f64
    } else {
        1.0
    };
    let cons = g.scale(sq, 1.0 / (n * per_image))?;
    let t1 = g.scale(ce, cfg.alpha)?;
    let t2 = g.scale(ce_a, 1.0 - cfg.alpha)?;
    let t3 = g.scale(cons, cfg.beta)?;
    let s = g.add(t1, t2)?;
    let loss = g.add(s, t3)?;
    g.forward(&[("x", x), ("x_adv", &xa)])?;
    let value = g.value(loss)?.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("adversarial training loss".into()));
    }
    let terms = Terms {
        total: value,
        clean: g.value(ce)?.item(),
        adv: g.value(ce_a)?.item(),
        consistent: g.value(cons)?.item(),
    };
    g.backward(loss)?;
    let grads: Vec<&[f64]> = bound.params.iter().map(|p| g.grad(*p).expect("param grad")).collect();
    opt.step(model.params_mut(), &grads)?;
    Ok(terms)
}

fn run(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig, adversarial: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let train: Vec<&LabeledImage> = dataset.train.iter().collect();
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let k = model.num_classes();
    if dataset.num_classes() != k {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model {k}",
            dataset.num_classes()
        )));
    }
    let initial_loss = mean_ce(model, &train)?;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), model.params().iter());
    let skip_generation = !adversarial || cfg.is_degenerate();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.set_lr(lr);
        let order = epoch_order(cfg, train.len(), epoch);
        let mut target_rng = util::rng_for(cfg.seed, &[0x301, epoch as u64]);
        let (mut sums, mut batches) = ([0.0; 4], 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let items: Vec<&LabeledImage> = idx.iter().map(|&i| train[i]).collect();
            let (x, y) = batch_from(&items)?;
            let terms = if skip_generation {
                clean_step(model, &mut opt, &x, &y)?
            } else {
                let targets: Vec<usize> = y
                    .iter()
                    .map(|&c| {
                        let t = target_rng.gen_range(0..k - 1);
                        if t >= c {
                            t + 1
                        } else {
                            t
                        }
                    })
                    .collect();
                adversarial_step(model, &mut opt, cfg, &x, &y, &targets)?
            };
            for (s, v) in sums.iter_mut().zip([terms.total, terms.clean, terms.adv, terms.consistent]) {
                *s += v;
            }
            batches += 1;
        }
        let b = batches as f64;
        epochs.push(EpochStats {
            epoch,
            lr,
            loss: sums[0] / b,
            clean_ce: sums[1] / b,
            adv_ce: sums[2] / b,
            consistent: sums[3] / b,
        });
    }
    let val: Vec<&LabeledImage> = dataset.validation.iter().collect();
    let clean_accuracy = evaluate(model, &val, 1)?.top1;
    let adversarial_accuracy = if adversarial && !val.is_empty() {
        Some(evaluate_fgs(model, &val, cfg.eps)?)
    } else {
        None
    };
    Ok(TrainReport {
        adversarial,
        config: cfg.clone(),
        initial_loss,
        epochs,
        clean_accuracy,
        adversarial_accuracy,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Mini-batch SGD on cross-entropy. Batch order per epoch derives from `cfg.seed`.
pub fn train_standard(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    run(model, dataset, cfg, false)
}

/// Minimize `α·CE(x) + (1−α)·CE(x*) + β·‖φ(x) − φ(x*)‖²` where `x*` is a
/// targeted FGS image generated from the current parameters each batch.
pub fn train_adversarial(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    run(model, dataset, cfg, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub n: usize,
    pub top1: f64,
    pub k: usize,
    pub topk: f64,
}

/// Rank of `label` among the row's classes: number of classes ahead of it,
/// with ties going to the smaller id.
fn rank_of(row: &[f64], label: usize) -> usize {
    let p = row[label];
    row.iter().enumerate().filter(|(j, v)| **v > p || (**v == p && *j < label)).count()
}

/// Top-1 and top-k accuracy of an `(n, K)` score matrix.
pub fn accuracy_from_scores(scores: &Tensor, labels: &[usize], k: usize) -> Result<Accuracy> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("evaluation set".into()));
    }
    if scores.shape().len() != 2 || scores.shape()[0] != n {
        return Err(Error::shape("score matrix", &[n, scores.shape().last().copied().unwrap_or(0)], scores.shape()));
    }
    let (mut top1, mut topk) = (0usize, 0usize);
    for (i, &y) in labels.iter().enumerate() {
        let row = scores.row_slice(i);
        top1 += usize::from(argmax(row) == y);
        topk += usize::from(rank_of(row, y) < k);
    }
    Ok(Accuracy {
        n,
        top1: top1 as f64 / n as f64,
        k,
        topk: topk as f64 / n as f64,
    })
}

pub fn evaluate(model: &Model, items: &[&LabeledImage], k: usize) -> Result<Accuracy> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let (x, y) = batch_from(items)?;
    accuracy_from_scores(&model.predict(&x)?, &y, k)
}

/// Accuracy on adversarial records, scored against the original class.
pub fn evaluate_records(model: &Model, records: &[&attack::AdversarialRecord], k: usize) -> Result<Accuracy> {
    if records.is_empty() {
        return Err(Error::Empty("adversarial set".into()));
    }
    let images: Vec<&Tensor> = records.iter().map(|r| &r.image).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.class).collect();
    accuracy_from_scores(&model.predict(&Tensor::stack(&images)?)?, &labels, k)
}

/// Top-1 accuracy after one untargeted step `x + ε·sign ∇ₓ CE(y, f(x))`.
pub fn evaluate_fgs(model: &Model, items: &[&LabeledImage], eps: f64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut correct = 0usize;
    for chunk in items.chunks(EVAL_CHUNK) {
        let (x, y) = batch_from(chunk)?;
        let xa = attack::signed_steps(model, &x, &y, eps, 1)?;
        let acc = accuracy_from_scores(&model.predict(&xa)?, &y, 1)?;
        correct += (acc.top1 * chunk.len() as f64).round() as usize;
    }
    Ok(correct as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_exhaustive_topk() {
        let scores = Tensor::new(vec![3, 3], vec![0.9, 0.05, 0.05, 0.1, 0.8, 0.1, 0.2, 0.2, 0.6]).unwrap();
        let acc = accuracy_from_scores(&scores, &[0, 1, 2], 1).unwrap();
        assert_eq!(acc.top1, 1.0);
        let acc = accuracy_from_scores(&scores, &[2, 0, 1], 3).unwrap();
        assert_eq!(acc.topk, 1.0);
        assert_eq!(acc.top1, 0.0);
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let scores = Tensor::new(vec![1, 3], vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(accuracy_from_scores(&scores, &[0], 1).unwrap().top1, 1.0);
        assert_eq!(accuracy_from_scores(&scores, &[1], 1).unwrap().top1, 0.0);
        assert_eq!(accuracy_from_scores(&scores, &[1], 2).unwrap().topk, 1.0);
    }

    #[test]
    fn empty_set_is_an_error() {
        let m = Model::build(crate::zoo::Arch::CnnA, 4, 0).unwrap();
        assert!(matches!(evaluate(&m, &[], 1), Err(Error::Empty(_))));
    }

    #[test]
    fn schedule_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.02);
        assert_eq!(cfg.lr_at(5), 0.01);
        assert!(TrainConfig { alpha: 1.5, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { alpha: 1.0, beta: 0.0, ..cfg }.is_degenerate());
    }
}
