//! Rolls a five-cell freeway forward with free ramp entry and prints the
//! density profile every few steps.
//!
//! cargo run --example simulate_ctm

use freeway_opt::ctm::{self, DemandProfile, NoControl, TrafficState};
use freeway_opt::network::{Cell, FreewayNetwork, OnRamp};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cells: Vec<Cell> = (0..5)
        .map(|i| {
            let mut c = Cell::standard(i, 0.5);
            c.wave_speed = 60.0;
            if i == 3 {
                // A lane drop.
                c.max_flow = 2400.0;
            }
            c
        })
        .collect();
    let ramps = vec![
        OnRamp {
            cell_id: 0,
            metering_capacity: 2400.0,
            max_metering: 2400.0,
        },
        OnRamp {
            cell_id: 2,
            metering_capacity: 1500.0,
            max_metering: 1500.0,
        },
    ];
    let net = FreewayNetwork::new(cells, ramps, &[5])?;
    let dt = 20.0 / 3600.0;
    net.check_cfl(dt)?;

    let steps = 60;
    let demand = DemandProfile {
        dt,
        rates: vec![vec![2000.0; steps], vec![900.0; steps]],
    };
    let mut state = TrafficState::empty(&net);
    state.density = vec![25.0; 5];
    let sim = ctm::simulate(&net, &state, &demand, &mut NoControl, steps)?;

    println!("step  density (veh/km) per cell            queues");
    for (k, s) in sim.states.iter().enumerate().step_by(10) {
        let row: Vec<String> = s.density.iter().map(|d| format!("{d:6.1}")).collect();
        println!("{k:4}  {}  {:6.1} {:6.1}", row.join(" "), s.queue[0], s.queue[1]);
    }
    println!("total travel time: {:.2} veh·h", sim.ttt);
    Ok(())
}
