//! Fit per-class Gaussians to training features and score clean and
//! adversarial images by the log-density of their predicted class.
//!
//! ```bash
//! cargo run -p advlens --release --example gaussian_detector -- target/ensemble
//! ```

use std::path::PathBuf;

use advlens::analysis::{detector_scores, fit_detector, roc_auc};
use advlens::attack::AdversarialSet;
use advlens::synthdata::Dataset;
use advlens::zoo::{Arch, Model};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> advlens::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/ensemble".into()));
    let data = Dataset::load(&dir.join("data"))?;
    let set = AdversarialSet::load(&dir.join("adversarial"))?;
    let train: Vec<_> = data.train.iter().collect();
    let clean: Vec<_> = data.validation.iter().map(|r| &r.image).collect();
    let adv: Vec<_> = set.successful().map(|r| &r.image).collect();
    for arch in Arch::ALL {
        let (model, _) = Model::load_checkpoint(&dir.join(format!("{arch}.ckpt")))?;
        let det = fit_detector(&model, &train, 1e-6)?;
        let cs = detector_scores(&det, &model, &clean)?;
        let advs = detector_scores(&det, &model, &adv)?;
        let roc = roc_auc(&cs, &advs)?;
        println!(
            "{arch}: mean log-density clean {:.1} adversarial {:.1}, AUC {:.3} over {} thresholds",
            mean(&cs),
            mean(&advs),
            roc.auc,
            roc.points.len()
        );
    }
    Ok(())
}
