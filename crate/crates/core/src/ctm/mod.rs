//! Cell Transmission Model: forward simulation and the relaxed convex
//! model used by the optimizers.

mod relaxed;
mod trajectory;

pub use relaxed::{relaxed_feasible_set, Affine, LocalModel, RowKind, TaggedRow, VarKey, VarKind};
pub use trajectory::{read_trajectory_csv, trajectory_records, write_trajectory_csv, TrajectoryRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{Cell, FreewayNetwork};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtmError {
    #[error("state has {got} densities, network has {expected} cells")]
    DensityLength { got: usize, expected: usize },
    #[error("state has {got} queues, network has {expected} ramps")]
    QueueLength { got: usize, expected: usize },
    #[error("demand profile has {got} ramps, network has {expected}")]
    DemandRamps { got: usize, expected: usize },
    #[error("demand profile ends at step {horizon}, step {k} requested")]
    DemandHorizon { k: usize, horizon: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid demand: {0}")]
    InvalidDemand(String),
    #[error("control has wrong dimension: {0}")]
    ControlShape(String),
    #[error("horizon must be positive")]
    ZeroHorizon,
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

/// Densities per cell (veh/km) and queues per ramp (veh) at step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    pub density: Vec<f64>,
    pub queue: Vec<f64>,
    pub k: usize,
}

impl TrafficState {
    pub fn empty(net: &FreewayNetwork) -> Self {
        TrafficState {
            density: vec![0.0; net.n_cells()],
            queue: vec![0.0; net.ramps.len()],
            k: 0,
        }
    }

    /// Vehicles on the mainline plus vehicles waiting at ramps.
    pub fn vehicles(&self, net: &FreewayNetwork) -> f64 {
        let mainline: f64 = self
            .density
            .iter()
            .zip(&net.cells)
            .map(|(rho, c)| rho * c.length)
            .sum();
        mainline + self.queue.iter().sum::<f64>()
    }

    pub fn validate(&self, net: &FreewayNetwork) -> Result<(), CtmError> {
        if self.density.len() != net.n_cells() {
            return Err(CtmError::DensityLength {
                got: self.density.len(),
                expected: net.n_cells(),
            });
        }
        if self.queue.len() != net.ramps.len() {
            return Err(CtmError::QueueLength {
                got: self.queue.len(),
                expected: net.ramps.len(),
            });
        }
        for (rho, cell) in self.density.iter().zip(&net.cells) {
            if !(rho.is_finite() && *rho >= 0.0 && *rho <= cell.max_density) {
                return Err(CtmError::InvalidState(format!(
                    "density {rho} of cell {} outside [0, {}]",
                    cell.id, cell.max_density
                )));
            }
        }
        if let Some(q) = self.queue.iter().find(|q| !(q.is_finite() && **q >= 0.0)) {
            return Err(CtmError::InvalidState(format!("queue {q} is negative")));
        }
        Ok(())
    }
}

/// External on-ramp arrivals σ (veh/h) per ramp and step, with step Δt in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    pub dt: f64,
    /// `rates[ramp][k]`.
    pub rates: Vec<Vec<f64>>,
}

impl DemandProfile {
    pub fn constant(n_ramps: usize, horizon: usize, dt: f64, rate: f64) -> Self {
        DemandProfile {
            dt,
            rates: vec![vec![rate; horizon]; n_ramps],
        }
    }

    pub fn zero(net: &FreewayNetwork, horizon: usize, dt: f64) -> Self {
        Self::constant(net.ramps.len(), horizon, dt, 0.0)
    }

    /// Number of steps covered; the shortest ramp series wins.
    pub fn horizon(&self) -> usize {
        self.rates.iter().map(Vec::len).min().unwrap_or(usize::MAX)
    }

    pub fn at(&self, k: usize) -> Result<Vec<f64>, CtmError> {
        let horizon = self.horizon();
        if k >= horizon {
            return Err(CtmError::DemandHorizon { k, horizon });
        }
        Ok(self.rates.iter().map(|r| r[k]).collect())
    }

    pub fn validate(&self, net: &FreewayNetwork) -> Result<(), CtmError> {
        if self.rates.len() != net.ramps.len() {
            return Err(CtmError::DemandRamps {
                got: self.rates.len(),
                expected: net.ramps.len(),
            });
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(CtmError::InvalidDemand(format!("step {} must be positive", self.dt)));
        }
        if self.rates.iter().flatten().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(CtmError::InvalidDemand("rates must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Realized flows of one step: mainline outflow φ per cell, ramp inflow r
/// per ramp (both veh/h) and the implied speed per cell (km/h).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDecision {
    pub outflow: Vec<f64>,
    pub ramp_flow: Vec<f64>,
    pub speed: Vec<f64>,
}

/// Releasable ramp flow d = min{q/Δt, c}.
pub fn ramp_release(queue: f64, metering: f64, dt: f64) -> f64 {
    (queue / dt).min(metering)
}

/// Mainline sending flow min{vρ, φ^max}.
pub fn sending_flow(cell: &Cell, density: f64) -> f64 {
    (cell.free_flow_speed * density).min(cell.max_flow)
}

/// Traffic demand D = min{vρ, φ^max}(1 − β) + d.
pub fn demand(cell: &Cell, density: f64, release: f64) -> f64 {
    sending_flow(cell, density) * (1.0 - cell.split_ratio) + release
}

/// Traffic supply S = min{ω(ρ^max − ρ), φ^max}.
pub fn supply(cell: &Cell, density: f64) -> f64 {
    (cell.wave_speed * (cell.max_density - density)).min(cell.max_flow)
}

/// v = φ/ρ clamped to [0, v^free]; free-flow speed on an empty cell.
pub fn reconstruct_speed(cell: &Cell, outflow: f64, density: f64) -> f64 {
    if density <= 0.0 {
        cell.free_flow_speed
    } else {
        (outflow / density).clamp(0.0, cell.free_flow_speed)
    }
}

/// How the flows of a step are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    /// Demand/supply rule with the network's own metering capacities.
    Uncontrolled,
    /// Demand/supply rule with metering capacities c_i(k) per ramp.
    Metered(Vec<f64>),
    /// Flows given directly; clipped to what the state can deliver.
    Prescribed { outflow: Vec<f64>, ramp_flow: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipKind {
    Outflow,
    RampFlow,
    Merge,
    Density,
    Queue,
}

/// A correction applied during a step; `index` is a cell or ramp index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub k: usize,
    pub kind: ClipKind,
    pub index: usize,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: TrafficState,
    pub flows: FlowDecision,
    /// Corrections larger than rounding noise; empty on a clean step.
    pub clips: Vec<Clip>,
}

fn noise(scale: f64) -> f64 {
    1e-9 * (1.0 + scale.abs())
}

/// Advances `state` by one step of `demand.dt` hours.
pub fn step(
    net: &FreewayNetwork,
    state: &TrafficState,
    demand_profile: &DemandProfile,
    control: &Control,
) -> Result<StepOutcome, CtmError> {
    let n = net.n_cells();
    let dt = demand_profile.dt;
    let k = state.k;
    let sigma = demand_profile.at(k)?;
    if sigma.len() != net.ramps.len() {
        return Err(CtmError::DemandRamps {
            got: sigma.len(),
            expected: net.ramps.len(),
        });
    }
    if state.density.len() != n || state.queue.len() != net.ramps.len() {
        return Err(CtmError::ControlShape("state does not match network".into()));
    }
    let mut clips = Vec::new();
    let mut outflow = vec![0.0; n];
    let mut ramp_flow = vec![0.0; net.ramps.len()];

    match control {
        Control::Uncontrolled | Control::Metered(_) => {
            let metering: Vec<f64> = match control {
                Control::Metered(c) => {
                    if c.len() != net.ramps.len() {
                        return Err(CtmError::ControlShape(format!(
                            "{} metering rates for {} ramps",
                            c.len(),
                            net.ramps.len()
                        )));
                    }
                    c.clone()
                }
                _ => net.ramps.iter().map(|r| r.metering_capacity).collect(),
            };
            for (i, cell) in net.cells.iter().enumerate() {
                let rho = state.density[i];
                let ramp = net.ramp_of(i);
                let release = ramp.map_or(0.0, |r| {
                    ramp_release(state.queue[r], metering[r].max(0.0), dt)
                });
                let send = sending_flow(cell, rho);
                if i + 1 == n {
                    outflow[i] = send;
                    if let Some(r) = ramp {
                        ramp_flow[r] = release;
                    }
                    continue;
                }
                let d = demand(cell, rho, release);
                let s = supply(&net.cells[i + 1], state.density[i + 1]);
                let ratio = if d > 0.0 { d.min(s) / d } else { 1.0 };
                outflow[i] = send * ratio;
                if let Some(r) = ramp {
                    ramp_flow[r] = release * ratio;
                }
            }
        }
        Control::Prescribed {
            outflow: phi,
            ramp_flow: r_in,
        } => {
            if phi.len() != n || r_in.len() != net.ramps.len() {
                return Err(CtmError::ControlShape(format!(
                    "{} outflows / {} ramp flows for {} cells / {} ramps",
                    phi.len(),
                    r_in.len(),
                    n,
                    net.ramps.len()
                )));
            }
            for (i, cell) in net.cells.iter().enumerate() {
                let cap = sending_flow(cell, state.density[i]);
                let mut f = phi[i];
                if f > cap + noise(cap) || f < -noise(cap) {
                    clips.push(Clip {
                        k,
                        kind: ClipKind::Outflow,
                        index: i,
                        excess: if f > cap { f - cap } else { -f },
                    });
                }
                f = f.clamp(0.0, cap);
                let mut rf = 0.0;
                if let Some(r) = net.ramp_of(i) {
                    let ramp = &net.ramps[r];
                    let cap_r = (state.queue[r] / dt).min(ramp.max_metering);
                    rf = r_in[r];
                    if rf > cap_r + noise(cap_r) || rf < -noise(cap_r) {
                        clips.push(Clip {
                            k,
                            kind: ClipKind::RampFlow,
                            index: r,
                            excess: if rf > cap_r { rf - cap_r } else { -rf },
                        });
                    }
                    rf = rf.clamp(0.0, cap_r);
                }
                if i + 1 < n {
                    let s = supply(&net.cells[i + 1], state.density[i + 1]);
                    let merged = f * (1.0 - cell.split_ratio) + rf;
                    if merged > s {
                        if merged > s + noise(s) {
                            clips.push(Clip {
                                k,
                                kind: ClipKind::Merge,
                                index: i,
                                excess: merged - s,
                            });
                        }
                        let scale = s.max(0.0) / merged;
                        f *= scale;
                        rf *= scale;
                    }
                }
                outflow[i] = f;
                if let Some(r) = net.ramp_of(i) {
                    ramp_flow[r] = rf;
                }
            }
        }
    }

    let mut next = TrafficState {
        density: vec![0.0; n],
        queue: vec![0.0; net.ramps.len()],
        k: k + 1,
    };
    for r in 0..net.ramps.len() {
        let q = state.queue[r] + dt * (sigma[r] - ramp_flow[r]);
        if q < -noise(state.queue[r]) {
            clips.push(Clip {
                k,
                kind: ClipKind::Queue,
                index: r,
                excess: -q,
            });
        }
        next.queue[r] = q.max(0.0);
    }
    for (i, cell) in net.cells.iter().enumerate() {
        let inflow = if i > 0 {
            outflow[i - 1] * (1.0 - net.cells[i - 1].split_ratio)
        } else {
            0.0
        };
        let on = net.ramp_of(i).map_or(0.0, |r| ramp_flow[r]);
        let rho = state.density[i] + dt / cell.length * (inflow + on - outflow[i]);
        let excess = if rho < 0.0 {
            -rho
        } else {
            rho - cell.max_density
        };
        if excess > noise(cell.max_density) {
            clips.push(Clip {
                k,
                kind: ClipKind::Density,
                index: i,
                excess,
            });
        }
        next.density[i] = rho.clamp(0.0, cell.max_density);
    }
    let speed = net
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| reconstruct_speed(c, outflow[i], state.density[i]))
        .collect();
    Ok(StepOutcome {
        next,
        flows: FlowDecision {
            outflow,
            ramp_flow,
            speed,
        },
        clips,
    })
}

/// Chooses the control of each step from the current state.
pub trait Controller {
    fn control(&mut self, net: &FreewayNetwork, state: &TrafficState, demand: &DemandProfile) -> Control;
}

/// Lets vehicles enter freely at the network's own metering capacity.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoControl;

impl Controller for NoControl {
    fn control(&mut self, _: &FreewayNetwork, _: &TrafficState, _: &DemandProfile) -> Control {
        Control::Uncontrolled
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// States at k = 0..=N.
    pub states: Vec<TrafficState>,
    /// Flows applied at k = 0..N-1.
    pub flows: Vec<FlowDecision>,
    pub ttt: f64,
    pub clips: Vec<Clip>,
}

/// TTT = Σ_k Δt (Σ q + Σ ρL) over the given states.
pub fn total_travel_time(net: &FreewayNetwork, states: &[TrafficState], dt: f64) -> f64 {
    states.iter().map(|s| dt * s.vehicles(net)).sum()
}

/// Runs `steps` steps from `initial`, accumulating TTT over k = 0..steps-1.
pub fn simulate(
    net: &FreewayNetwork,
    initial: &TrafficState,
    demand_profile: &DemandProfile,
    controller: &mut dyn Controller,
    steps: usize,
) -> Result<Simulation, CtmError> {
    initial.validate(net)?;
    demand_profile.validate(net)?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut flows = Vec::with_capacity(steps);
    let mut clips = Vec::new();
    let mut state = initial.clone();
    for _ in 0..steps {
        let control = controller.control(net, &state, demand_profile);
        let out = step(net, &state, demand_profile, &control)?;
        clips.extend(out.clips);
        flows.push(out.flows);
        states.push(std::mem::replace(&mut state, out.next));
    }
    states.push(state);
    let ttt = total_travel_time(net, &states[..steps], demand_profile.dt);
    Ok(Simulation {
        states,
        flows,
        ttt,
        clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::OnRamp;

    fn cell() -> Cell {
        Cell::standard(0, 1.0)
    }

    #[test]
    fn demand_examples() {
        assert_eq!(demand(&cell(), 30.0, 0.0), 1800.0);
        assert_eq!(demand(&cell(), 0.0, 0.0), 0.0);
        let mut c = cell();
        c.split_ratio = 0.2;
        let dt = 1.0 / 60.0;
        let d = ramp_release(50.0, 600.0, dt);
        assert_eq!(d, 600.0);
        assert!((demand(&c, 120.0, d) - (2880.0 + 600.0)).abs() < 1e-12);
        assert!((demand(&c, 120.0, ramp_release(5.0, 600.0, dt)) - 3180.0).abs() < 1e-9);
    }

    #[test]
    fn supply_examples() {
        assert_eq!(supply(&cell(), 120.0), 0.0);
        assert_eq!(supply(&cell(), 0.0), 2400.0);
        let mut c = cell();
        c.max_flow = 1000.0;
        assert_eq!(supply(&c, 60.0), 1000.0);
    }

    fn two_cell_net() -> FreewayNetwork {
        let cells = vec![Cell::standard(0, 1.0), Cell::standard(1, 1.0)];
        let ramps = vec![OnRamp {
            cell_id: 0,
            metering_capacity: 1200.0,
            max_metering: 1800.0,
        }];
        FreewayNetwork::new(cells, ramps, &[2]).unwrap()
    }

    #[test]
    fn balanced_queue_is_unchanged() {
        let net = two_cell_net();
        let dt = 1.0 / 60.0;
        let state = TrafficState {
            density: vec![10.0, 10.0],
            queue: vec![30.0],
            k: 0,
        };
        // release = min(30·60, 1200) = 1200 and supply is ample
        let demand = DemandProfile::constant(1, 1, dt, 1200.0);
        let out = step(&net, &state, &demand, &Control::Uncontrolled).unwrap();
        assert_eq!(out.flows.ramp_flow[0], 1200.0);
        assert!((out.next.queue[0] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn free_flow_outflow_is_speed_times_density() {
        let net = two_cell_net();
        let state = TrafficState {
            density: vec![5.0, 7.0],
            queue: vec![0.0],
            k: 0,
        };
        let demand = DemandProfile::zero(&net, 1, 1.0 / 60.0);
        let out = step(&net, &state, &demand, &Control::Uncontrolled).unwrap();
        assert_eq!(out.flows.outflow, vec![300.0, 420.0]);
        assert!(out.clips.is_empty());
    }

    #[test]
    fn jammed_downstream_blocks_everything() {
        let net = two_cell_net();
        let state = TrafficState {
            density: vec![50.0, 120.0],
            queue: vec![40.0],
            k: 0,
        };
        let demand = DemandProfile::zero(&net, 1, 1.0 / 60.0);
        let out = step(&net, &state, &demand, &Control::Uncontrolled).unwrap();
        assert_eq!(out.flows.outflow[0], 0.0);
        assert_eq!(out.flows.ramp_flow[0], 0.0);
    }

    #[test]
    fn empty_network_has_zero_travel_time() {
        let net = two_cell_net();
        let demand = DemandProfile::zero(&net, 10, 1.0 / 60.0);
        let sim = simulate(&net, &TrafficState::empty(&net), &demand, &mut NoControl, 10).unwrap();
        assert_eq!(sim.ttt, 0.0);
        assert_eq!(sim.states.len(), 11);
    }

    #[test]
    fn prescribed_overflow_is_clipped_and_reported() {
        let net = two_cell_net();
        let state = TrafficState {
            density: vec![10.0, 10.0],
            queue: vec![0.0],
            k: 0,
        };
        let demand = DemandProfile::zero(&net, 1, 1.0 / 60.0);
        let control = Control::Prescribed {
            outflow: vec![5000.0, 0.0],
            ramp_flow: vec![0.0],
        };
        let out = step(&net, &state, &demand, &control).unwrap();
        assert_eq!(out.flows.outflow[0], 600.0);
        assert_eq!(out.clips.len(), 1);
        assert_eq!(out.clips[0].kind, ClipKind::Outflow);
    }

    #[test]
    fn speed_reconstruction() {
        assert_eq!(reconstruct_speed(&cell(), 1800.0, 30.0), 60.0);
        assert_eq!(reconstruct_speed(&cell(), 0.0, 0.0), 60.0);
        assert_eq!(reconstruct_speed(&cell(), 900.0, 30.0), 30.0);
    }
}
