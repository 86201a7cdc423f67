//! Class hierarchy of the shape dataset, its tree distances, the kernel
//! matrix built from them, and LC / cosine scores of a few distributions.
//!
//! ```bash
//! cargo run -p advlens --example taxonomy_kernel -- 1.0
//! ```

use advlens::synthdata::taxonomy_for;
use advlens::taxonomy::{cosine_sim_c, lc_score, CategoricalDistribution, CorrelationMatrix};

fn main() -> advlens::Result<()> {
    let sigma: f64 = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let tax = taxonomy_for(16)?;
    let k = tax.num_classes();
    println!("{k} classes, depth {}", tax.depth());
    print!("{:>4}", "");
    for b in 0..k {
        print!("{b:>3}");
    }
    println!();
    for a in 0..k {
        print!("{a:>4}");
        for b in 0..k {
            print!("{:>3}", tax.tree_distance(a, b)?);
        }
        println!("  {}", tax.class_name(a)?);
    }

    let c = CorrelationMatrix::build(&tax, sigma)?;
    println!("\nsigma {sigma}: C[0][1] {:.4}, C[0][2] {:.4}, C[0][8] {:.4}", c.get(0, 1), c.get(0, 2), c.get(0, 8));
    println!("min eigenvalue {:.3e}, jitter added {:.1e}", c.min_eigenvalue(), c.jitter());

    let spread = |ids: &[usize]| CategoricalDistribution::from_labels(ids.iter().copied(), k);
    let cases = [
        ("one class", spread(&[3])?),
        ("siblings", spread(&[0, 1])?),
        ("cousins", spread(&[0, 2])?),
        ("far apart", spread(&[0, 15])?),
        ("uniform", CategoricalDistribution::uniform(k)),
    ];
    for (name, p) in &cases {
        println!("LC {:<10} {:.4}", name, lc_score(p, &c)?);
    }
    println!("cos_C(siblings, cousins) {:.4}", cosine_sim_c(&cases[1].1, &cases[2].1, &c)?);
    Ok(())
}
