//! Finite-difference check of the autodiff graph on each architecture at a
//! small input size.
//!
//! ```bash
//! cargo run -p advlens --release --example gradient_check
//! ```

use advlens::synthdata::{render_sample, DatasetConfig, Split};
use advlens::tensor::{grad_check, Graph, Reduction, Tensor};
use advlens::zoo::{Arch, Model};

fn main() -> advlens::Result<()> {
    let shapes = DatasetConfig { image_size: 16, num_classes: 4, ..DatasetConfig::default() };
    for arch in Arch::ALL {
        let model = Model::build_for(arch, [3, 16, 16], 4, 1)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let x = g.input_with_grad("x", &[2, 3, 16, 16]);
        let feats = model.stem(&mut g, x, &bound)?;
        let logits = model.head(&mut g, feats, &bound)?;
        let loss = g.cross_entropy(logits, &[0, 2], Reduction::Mean)?;
        let mut px = render_sample(&shapes, Split::Train, 0, 0);
        px.extend(render_sample(&shapes, Split::Train, 2, 0));
        let xv = Tensor::new(vec![2, 3, 16, 16], px)?;
        let step: f64 = std::env::var("STEP").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-4);
        let report = grad_check(&mut g, &[("x", &xv)], loss, step, 1e-4)?;
        println!("{arch}: max relative error {:.2e} ({})", report.max_rel_error, if report.passed { "ok" } else { "FAILED" });
        for b in &report.blocks {
            println!("  {:<12} checked {:>5} excluded {:>3} max {:.2e}", b.name, b.checked, b.excluded, b.max_rel_error);
        }
    }
    Ok(())
}
