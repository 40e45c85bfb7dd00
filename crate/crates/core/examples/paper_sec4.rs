//! Simulates the two-input nonlinear example with operator memory and
//! writes the trace, state and metadata files.
//!
//! ```text
//! cargo run --release --example paper_sec4 [out_dir]
//! ```

use std::path::PathBuf;

use filter_funnel::config::ExperimentConfig;
use filter_funnel::experiment::run_simulate;

fn main() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/paper_sec4.toml");
    let cfg = ExperimentConfig::load(path).expect("bundled config is valid");
    let dir = std::env::args().nth(1).map(PathBuf::from);
    let out = run_simulate(&cfg, dir.as_deref());
    println!("{}", out.message);
    if let Some(res) = &out.result {
        let s = res.summary();
        println!("steps accepted: {}", res.stats.accepted);
        println!("max phi*|e|: {:.4}", s.max_funnel_ratio);
        println!("max |theta_i| / theta_hat_i: {:?}", s.max_theta_ratio);
        println!("max |u|: {:.3}", s.max_u_norm);
    }
    if let Some(b) = &out.bundle {
        println!("trace written to {}", b.trace.display());
    }
    std::process::exit(out.exit_code);
}
