//! Fine-tune a trained model with adversarial images regenerated every
//! batch, then compare clean and FGS accuracy before and after.
//!
//! ```bash
//! cargo run -p advlens --release --example adversarial_training -- target/ensemble cnn-a
//! ```

use std::path::PathBuf;

use advlens::cli::default_adversarial_training;
use advlens::synthdata::Dataset;
use advlens::training::{evaluate, evaluate_fgs, train_adversarial};
use advlens::zoo::Model;

fn main() -> advlens::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "target/ensemble".into()));
    let arch = args.next().unwrap_or_else(|| "cnn-a".into());
    let data = Dataset::load(&dir.join("data"))?;
    let (standard, _) = Model::load_checkpoint(&dir.join(format!("{arch}.ckpt")))?;
    let val: Vec<_> = data.validation.iter().collect();

    let mut tuned = standard.clone();
    let report = train_adversarial(&mut tuned, &data, &default_adversarial_training())?;
    for e in &report.epochs {
        println!("epoch {} lr {:.4} loss {:.4}", e.epoch, e.lr, e.loss);
    }
    for (name, m) in [("standard", &standard), ("adversarial", &tuned)] {
        println!(
            "{name:>11}: clean {:.3}, FGS eps=1 {:.3}, eps=5 {:.3}",
            evaluate(m, &val, 1)?.top1,
            evaluate_fgs(m, &val, 1.0)?,
            evaluate_fgs(m, &val, 5.0)?
        );
    }
    tuned.save_checkpoint(&dir.join(format!("{arch}.adv.ckpt")), &report.meta())?;
    Ok(())
}
