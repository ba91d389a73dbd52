//! Identifies the potential congestion area on the bundled fixture for a
//! sweep of thresholds. Lower thresholds admit weaker links, so the areas
//! nest and grow.
//!
//! cargo run --example identify_congestion_area

use std::path::Path;

use freeway_opt::cli::load_scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/inner-ring-synthetic.json");
    let exp = load_scenario(&path)?;
    for lambda in [0.5, 0.1, 0.05, 0.01] {
        let pha = exp.pha(Some(lambda))?.expect("the fixture has a history");
        println!(
            "Λ = {lambda:<5} cells {:?} ({:.1} km), subnetworks {:?}",
            pha.members,
            pha.extent_km(&exp.net),
            pha.subnetworks
        );
    }
    Ok(())
}
