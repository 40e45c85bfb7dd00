//! Runs the integrator-chain sweep over r = 2..5 on a rayon pool and prints
//! one row per relative degree.
//!
//! ```text
//! cargo run --release --example relative_degree_sweep [out_dir]
//! ```

use std::path::PathBuf;

use filter_funnel::config::ExperimentConfig;
use filter_funnel::experiment::{run_sweep, write_sweep};

fn main() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/chain_sweep.toml");
    let cfg = ExperimentConfig::load(path).expect("bundled config is valid");
    let summary = run_sweep(&cfg, None).expect("sweep runs");
    print!("{}", summary.render());
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output.dir.clone());
    let csv = write_sweep(&summary, &dir, &cfg.output.stem).expect("summary written");
    println!("summary: {}", csv.display());
}
