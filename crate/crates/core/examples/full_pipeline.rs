//! Every stage of the command-line pipeline on a small configuration,
//! written to a run directory, followed by the summary.
//!
//! ```bash
//! cargo run -p advlens --release --example full_pipeline -- target/tiny-run
//! ```

use std::path::PathBuf;

use advlens::cli::{run_pipeline, Run, RunConfig};

fn main() -> advlens::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/tiny-run".into()));
    let run = Run::new(&dir, RunConfig::tiny(), 1);
    let summary = run_pipeline(&run)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    println!("artifacts in {}", dir.display());
    Ok(())
}
