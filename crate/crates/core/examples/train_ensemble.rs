//! Train the three architectures on a small shape dataset and save checkpoints.
//!
//! ```bash
//! cargo run -p advlens --example train_ensemble -- target/ensemble
//! ```

use std::path::PathBuf;
use std::time::Instant;

use advlens::synthdata::{generate, DatasetConfig};
use advlens::training::{evaluate, train_standard, TrainConfig};
use advlens::zoo::{Arch, Model};

fn main() -> advlens::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/ensemble".into()));
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(12);
    let data = generate(&DatasetConfig {
        train_per_class: std::env::var("PER_CLASS").ok().and_then(|v| v.parse().ok()).unwrap_or(40),
        val_per_class: 13,
        ..DatasetConfig::default()
    })?;
    data.save(&out.join("data"))?;
    let val: Vec<_> = data.validation.iter().collect();
    for (i, arch) in Arch::ALL.into_iter().enumerate() {
        let mut model = Model::build(arch, data.num_classes(), 100 + i as u64)?;
        let cfg = TrainConfig {
            epochs,
            seed: i as u64,
            ..TrainConfig::default()
        };
        let t = Instant::now();
        let report = train_standard(&mut model, &data, &cfg)?;
        let acc = evaluate(&model, &val, 3)?;
        println!(
            "{arch}: {} params, loss {:.3} -> {:.3}, val top-1 {:.3} top-3 {:.3} ({:.1}s)",
            model.param_count(),
            report.initial_loss,
            report.epochs.last().map_or(f64::NAN, |e| e.loss),
            acc.top1,
            acc.topk,
            t.elapsed().as_secs_f64()
        );
        for e in &report.epochs {
            println!("  epoch {:2} lr {:.4} loss {:.4}", e.epoch, e.lr, e.loss);
        }
        model.save_checkpoint(&out.join(format!("{arch}.ckpt")), &report.meta())?;
    }
    Ok(())
}
