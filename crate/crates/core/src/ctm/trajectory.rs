//! Trajectory CSV: one row per (step, cell).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Simulation;
use crate::network::FreewayNetwork;

/// Queue and ramp flow are empty for cells without a ramp; flows and speed
/// are empty on the final state, which has no outgoing step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub k: usize,
    pub cell_id: usize,
    pub rho: f64,
    pub q: Option<f64>,
    pub phi: Option<f64>,
    pub r: Option<f64>,
    pub v: Option<f64>,
}

pub fn trajectory_records(net: &FreewayNetwork, sim: &Simulation) -> Vec<TrajectoryRecord> {
    let mut out = Vec::with_capacity(sim.states.len() * net.n_cells());
    for (k, state) in sim.states.iter().enumerate() {
        let flows = sim.flows.get(k);
        for (c, rho) in state.density.iter().enumerate() {
            let ramp = net.ramp_of(c);
            out.push(TrajectoryRecord {
                k,
                cell_id: c,
                rho: *rho,
                q: ramp.map(|r| state.queue[r]),
                phi: flows.map(|f| f.outflow[c]),
                r: ramp.and_then(|r| flows.map(|f| f.ramp_flow[r])),
                v: flows.map(|f| f.speed[c]),
            });
        }
    }
    out
}

pub fn write_trajectory_csv<W: Write>(
    writer: W,
    net: &FreewayNetwork,
    sim: &Simulation,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for rec in trajectory_records(net, sim) {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(reader: R) -> Result<Vec<TrajectoryRecord>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}
