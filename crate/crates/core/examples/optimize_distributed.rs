//! Runs the distributed solver on a random three-subnetwork problem and
//! prints the outer-iteration trace next to the centralized optimum.
//!
//! cargo run --release --example optimize_distributed

use freeway_opt::central::{assemble, solve_centralized};
use freeway_opt::ctm::{DemandProfile, TrafficState};
use freeway_opt::dcadmm::{self, AdmmConfig};
use freeway_opt::network::{Cell, FreewayNetwork, OnRamp};
use freeway_opt::pha::CapacityConstraint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cells: Vec<Cell> = (0..6)
        .map(|i| {
            let mut c = Cell::standard(i, 1.0);
            c.wave_speed = 60.0;
            c
        })
        .collect();
    let ramps = [0, 2, 4]
        .iter()
        .map(|&cell_id| OnRamp {
            cell_id,
            metering_capacity: 1500.0,
            max_metering: 1500.0,
        })
        .collect();
    let net = FreewayNetwork::new(cells, ramps, &[2, 2, 2])?;
    let horizon = 8;
    let dt = 1.0 / 90.0;
    let demand = DemandProfile::constant(3, horizon, dt, 1300.0);
    let state = TrafficState {
        density: vec![30.0, 50.0, 70.0, 60.0, 40.0, 20.0],
        queue: vec![5.0, 10.0, 15.0],
        k: 0,
    };
    // At most 6000 veh/h through subnetworks 1 and 2 at every step.
    let capacity = CapacityConstraint {
        delta_bar: 6000.0,
        weights: vec![0.0, 1.0, 1.0],
        horizon,
    };
    let problem = assemble(&net, &state, &demand, &capacity, horizon)?;
    let central = solve_centralized(&problem, &Default::default())?;

    let out = dcadmm::run(&problem, &AdmmConfig::default())?;
    println!("outer  inner  max residual  objective");
    for row in out.report.trace.iter().step_by(5) {
        println!("{:5}  {:5}  {:12.2e}  {:.6}", row.n, row.l, row.max_r, row.objective);
    }
    let r = &out.report;
    println!(
        "converged {} after {} outer / {} inner iterations, {} messages",
        r.converged, r.outer_iterations, r.inner_iterations, r.messages
    );
    println!("distributed {:.6} vs centralized {:.6}", r.objective, central.plan.objective);
    Ok(())
}
