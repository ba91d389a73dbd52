//! Random networks, states and demand for property tests.

use freeway_opt::ctm::{DemandProfile, TrafficState};
use freeway_opt::network::{Cell, FreewayNetwork, OnRamp};
use rand::Rng;

/// Random chain with `n_cells` cells cut into `m` subnetworks, plus a
/// time step that satisfies the CFL bound with some margin.
pub fn random_network<R: Rng>(rng: &mut R, n_cells: usize, m: usize) -> (FreewayNetwork, f64) {
    assert!(m >= 1 && m <= n_cells);
    let cells: Vec<Cell> = (0..n_cells)
        .map(|id| Cell {
            id,
            length: rng.gen_range(0.3..1.5),
            free_flow_speed: rng.gen_range(50.0..110.0),
            wave_speed: rng.gen_range(10.0..30.0),
            max_density: rng.gen_range(80.0..160.0),
            max_flow: rng.gen_range(1500.0..4000.0),
            split_ratio: if rng.gen_bool(0.3) { rng.gen_range(0.0..0.4) } else { 0.0 },
            has_onramp: false,
            position: 0.0,
        })
        .collect();
    let mut ramps = Vec::new();
    for c in 0..n_cells {
        if c == 0 || rng.gen_bool(0.4) {
            let max_metering = rng.gen_range(600.0..1800.0);
            ramps.push(OnRamp {
                cell_id: c,
                metering_capacity: max_metering * rng.gen_range(0.5..1.0),
                max_metering,
            });
        }
    }
    // m-1 distinct cut points
    let mut cuts: Vec<usize> = (1..n_cells).collect();
    for i in 0..cuts.len() {
        let j = rng.gen_range(i..cuts.len());
        cuts.swap(i, j);
    }
    let mut cuts: Vec<usize> = cuts[..m - 1].to_vec();
    cuts.sort_unstable();
    let mut sizes = Vec::new();
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(n_cells)) {
        sizes.push(c - prev);
        prev = c;
    }
    let net = FreewayNetwork::new(cells, ramps, &sizes).unwrap();
    let bound = net
        .cells
        .iter()
        .map(|c| c.length / c.free_flow_speed.max(c.wave_speed))
        .fold(f64::INFINITY, f64::min);
    (net, bound * rng.gen_range(0.5..0.95))
}

pub fn random_state<R: Rng>(rng: &mut R, net: &FreewayNetwork) -> TrafficState {
    TrafficState {
        density: net
            .cells
            .iter()
            .map(|c| {
                if rng.gen_bool(0.1) {
                    0.0
                } else {
                    rng.gen_range(0.0..c.max_density)
                }
            })
            .collect(),
        queue: net.ramps.iter().map(|_| rng.gen_range(0.0..40.0)).collect(),
        k: 0,
    }
}

pub fn random_demand<R: Rng>(rng: &mut R, net: &FreewayNetwork, horizon: usize, dt: f64) -> DemandProfile {
    DemandProfile {
        dt,
        rates: net
            .ramps
            .iter()
            .map(|_| (0..horizon).map(|_| rng.gen_range(0.0..1500.0)).collect())
            .collect(),
    }
}
