//! Profile every feature channel of one trained model: which classes its
//! most activating real and adversarial images belong to, and how the LC
//! of the real profile relates to CS1 / CS2. Needs the output of
//! `train_ensemble` and `ensemble_attack`.
//!
//! ```bash
//! cargo run -p advlens --release --example neuron_profiles -- target/ensemble cnn-b
//! ```

use std::path::PathBuf;

use advlens::analysis::{profile_neurons, ProfileConfig};
use advlens::attack::AdversarialSet;
use advlens::synthdata::Dataset;
use advlens::taxonomy::CorrelationMatrix;
use advlens::zoo::Model;

fn main() -> advlens::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "target/ensemble".into()));
    let arch = args.next().unwrap_or_else(|| "cnn-b".into());
    let data = Dataset::load(&dir.join("data"))?;
    let (model, _) = Model::load_checkpoint(&dir.join(format!("{arch}.ckpt")))?;
    let set = AdversarialSet::load(&dir.join("adversarial"))?;
    let c = CorrelationMatrix::build(&data.taxonomy, 1.0)?;

    let real: Vec<_> = data.validation.iter().collect();
    let adv: Vec<_> = set.successful().collect();
    let ps = profile_neurons(&model, &real, &adv, &ProfileConfig::default(), &c)?;
    println!("channel   LC     CS1    CS2   top real classes");
    for p in &ps.profiles {
        let mut classes: Vec<(usize, f64)> = p.p.probs().iter().copied().enumerate().filter(|(_, v)| *v > 0.0).collect();
        classes.sort_by(|a, b| b.1.total_cmp(&a.1));
        let top: Vec<String> = classes.iter().take(3).map(|(k, v)| format!("{k}:{v:.2}")).collect();
        println!("{:>7} {:.3}  {:.3}  {:.3}  {}", p.channel, p.lc, p.cs1, p.cs2, top.join(" "));
    }
    let s = &ps.summary;
    println!(
        "\nmean LC {:.3} CS1 {:.3} CS2 {:.3}; corr(LC,CS1) {:?} corr(LC,CS2) {:?}",
        s.mean_lc, s.mean_cs1, s.mean_cs2, s.corr_lc_cs1, s.corr_lc_cs2
    );
    for b in s.bins.iter().filter(|b| b.count > 0) {
        println!("  LC [{:.2},{:.2}) n={:<3} CS1 {:.3} CS2 {:.3}", b.lo, b.hi, b.count, b.mean_cs1, b.mean_cs2);
    }
    Ok(())
}
