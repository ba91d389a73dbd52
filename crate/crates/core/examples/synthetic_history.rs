//! Generates a seeded density history and prints it in the CSV layout the
//! congestion-area identification reads.
//!
//! cargo run --example synthetic_history

use std::path::Path;

use freeway_opt::cli::{generate_synthetic_history, load_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/inner-ring-synthetic.json");
    let exp = load_scenario(&path)?;
    let history = generate_synthetic_history(&exp.net, 6, 70.0, 5, 11);
    history.write_csv(std::io::stdout())?;
    Ok(())
}
