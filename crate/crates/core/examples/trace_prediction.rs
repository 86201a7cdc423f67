//! Explain single predictions: the channels whose removal moves the output
//! most, the classes those channels respond to, and an occlusion map per
//! channel written as PGM.
//!
//! ```bash
//! cargo run -p advlens --release --example trace_prediction -- target/ensemble cnn-b 3
//! ```

use std::path::PathBuf;

use advlens::analysis::{profile_neurons, ProfileConfig};
use advlens::attack::AdversarialSet;
use advlens::synthdata::Dataset;
use advlens::taxonomy::CorrelationMatrix;
use advlens::tracing::{trace, ImageRef, TraceConfig, TraceReport};
use advlens::zoo::Model;

fn show(label: &str, r: &TraceReport, out: &std::path::Path) -> Result<(), Box<dyn std::error::Error>> {
    println!(
        "{label}: predicted {} ({:.2}), {}",
        r.predicted,
        r.probability,
        if r.consistency.consistent { "consistent" } else { "FLAGGED" }
    );
    for (s, sim) in r.selected.iter().zip(&r.consistency.to_prediction) {
        println!("  channel {:>3} PD {:.4} prefers class {:>2} (similarity to prediction {:.2})", s.channel, s.pd, s.profile_top_class, sim);
        if let Some(map) = &s.map {
            std::fs::write(out.join(format!("{label}-ch{}.pgm", s.channel)), map.to_pgm(8))?;
        }
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "target/ensemble".into()));
    let arch = args.next().unwrap_or_else(|| "cnn-b".into());
    let count: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(3);
    let data = Dataset::load(&dir.join("data"))?;
    let (model, _) = Model::load_checkpoint(&dir.join(format!("{arch}.ckpt")))?;
    let set = AdversarialSet::load(&dir.join("adversarial"))?;
    let c = CorrelationMatrix::build(&data.taxonomy, 1.0)?;
    let real: Vec<_> = data.validation.iter().collect();
    let adv: Vec<_> = set.successful().collect();
    let profiles = profile_neurons(&model, &real, &adv, &ProfileConfig::default(), &c)?.profiles;
    let out = dir.join("traces");
    std::fs::create_dir_all(&out)?;
    let cfg = TraceConfig::default();
    let fill = data.mean_pixel();

    for r in adv.iter().take(count) {
        let clean = data.get(r.split, r.class, r.sample_id).expect("attacked image is in the dataset");
        let before = trace(&model, &clean.image, ImageRef { split: r.split, class: r.class, sample_id: r.sample_id, target: None }, &profiles, &c, fill, &cfg)?;
        let after = trace(&model, &r.image, ImageRef { split: r.split, class: r.class, sample_id: r.sample_id, target: Some(r.target) }, &profiles, &c, fill, &cfg)?;
        println!("image {} of class {} attacked toward {}", r.sample_id, r.class, r.target);
        show(&format!("clean-{}-{}", r.class, r.sample_id), &before, &out)?;
        show(&format!("adv-{}-{}", r.class, r.sample_id), &after, &out)?;
    }
    println!("maps in {}", out.display());
    Ok(())
}
