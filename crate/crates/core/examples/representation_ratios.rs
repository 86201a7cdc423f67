//! Where adversarial images land in feature space relative to their
//! original and target classes. r1 > 1 means the image sits further from
//! its own class than that class's members do from each other; r2 < 1
//! means it sits closer to the target class than the target class does
//! to the original one.
//!
//! ```bash
//! cargo run -p advlens --release --example representation_ratios -- target/ensemble
//! ```

use std::path::PathBuf;

use advlens::analysis::ratio_table;
use advlens::attack::AdversarialSet;
use advlens::synthdata::Dataset;
use advlens::zoo::{Arch, Model};

fn main() -> advlens::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/ensemble".into()));
    let data = Dataset::load(&dir.join("data"))?;
    let set = AdversarialSet::load(&dir.join("adversarial"))?;
    let val: Vec<_> = data.validation.iter().collect();
    let adv: Vec<_> = set.successful().collect();
    for arch in Arch::ALL {
        let (model, _) = Model::load_checkpoint(&dir.join(format!("{arch}.ckpt")))?;
        let t = ratio_table(&model, &adv, &val)?;
        let above = t.records.iter().filter(|r| r.r1 > 1.0).count();
        let below = t.records.iter().filter(|r| r.r2 < 1.0).count();
        println!(
            "{arch}: mean r1 {:.3} (>1 for {above}/{n}), mean r2 {:.3} (<1 for {below}/{n}), {} skipped",
            t.mean_r1,
            t.mean_r2,
            t.errors.len(),
            n = t.records.len()
        );
    }
    Ok(())
}
