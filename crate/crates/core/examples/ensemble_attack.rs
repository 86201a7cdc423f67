//! Attack a trained ensemble (see `train_ensemble`) with the ensemble
//! optimization attack against least-likely targets, then save the set.
//!
//! ```bash
//! cargo run -p advlens --example ensemble_attack -- target/ensemble 200
//! ```

use std::path::PathBuf;
use std::time::Instant;

use advlens::attack::{build_adversarial_set_for, AttackConfig};
use advlens::synthdata::Dataset;
use advlens::zoo::{Arch, Model};

fn main() -> advlens::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "target/ensemble".into()));
    let limit: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(64);
    let data = Dataset::load(&dir.join("data"))?;
    let models = Arch::ALL
        .iter()
        .map(|a| Ok(Model::load_checkpoint(&dir.join(format!("{a}.ckpt")))?.0))
        .collect::<advlens::Result<Vec<_>>>()?;
    let refs: Vec<&Model> = models.iter().collect();

    // Spread the sample evenly over classes.
    let step = (data.validation.len() / limit).max(1);
    let items: Vec<_> = data.validation.iter().step_by(step).take(limit).collect();
    let t = Instant::now();
    let set = build_adversarial_set_for(&data, &items, &refs, 1, &AttackConfig::default())?;
    let m = &set.manifest;
    println!(
        "{} attacks, success {:.3}, mean L2 {:.1} vs clean norm {:.1} ({:.2}%), mean iterations {:.1} ({:.1}s)",
        m.attempted,
        m.success_rate,
        m.mean_l2,
        m.mean_clean_norm,
        100.0 * m.mean_l2 / m.mean_clean_norm,
        m.mean_iterations,
        t.elapsed().as_secs_f64()
    );
    let (mut pairs, mut nonincreasing) = (0, 0);
    for r in &set.records {
        for w in r.loss_trace.windows(2) {
            pairs += 1;
            nonincreasing += usize::from(w[1] <= w[0]);
        }
    }
    println!("loss non-increasing in {nonincreasing}/{pairs} consecutive steps");
    set.save(&dir.join("adversarial"))?;
    Ok(())
}
