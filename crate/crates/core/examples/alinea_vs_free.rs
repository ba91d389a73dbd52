//! ALINEA feedback against free entry on the fixture, with the metering
//! rates it settles on.
//!
//! cargo run --example alinea_vs_free

use std::path::Path;

use freeway_opt::cli::load_scenario;
use freeway_opt::ctm::NoControl;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/inner-ring-synthetic.json");
    let exp = load_scenario(&path)?;
    let free = exp.simulate_with(&mut NoControl)?;
    let mut alinea = exp.alinea()?;
    let fed = exp.simulate_with(&mut alinea)?;
    println!("TTT free entry {:.2}, ALINEA {:.2}", free.ttt, fed.ttt);
    for (ramp, rate) in exp.net.ramps.iter().zip(alinea.rates()) {
        println!("ramp at cell {}: final rate {:.0} veh/h", ramp.cell_id, rate);
    }
    Ok(())
}
