//! Full comparison on the fixture, writing every artifact to a directory.
//! Takes about a minute in release mode.
//!
//! cargo run --release --example compare_strategies -- [out-dir]

use std::path::{Path, PathBuf};

use freeway_opt::cli::{load_scenario, run_compare};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("compare-out"), PathBuf::from);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/inner-ring-synthetic.json");
    let exp = load_scenario(&path)?;
    let summary = run_compare(&exp, &[0.5, 0.1, 0.05], &out)?;
    for (name, s) in &summary.strategies {
        match s.ttt {
            Some(t) => println!("{name:>10}: TTT {t:.2} ({:.1}s)", s.wall_clock_s),
            None => println!("{name:>10}: failed: {}", s.error.as_deref().unwrap_or("?")),
        }
    }
    if let Some(r) = summary.reduction_vs_no_control {
        println!("reduction against free entry: {:.1}%", 100.0 * r);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
