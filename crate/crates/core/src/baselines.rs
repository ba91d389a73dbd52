//! Reference strategies: free entry and ALINEA density feedback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctm::{self, Control, Controller, CtmError, DemandProfile, FlowDecision, TrafficState};
use crate::network::FreewayNetwork;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("ALINEA gain must be positive, got {0}")]
    Gain(f64),
    #[error("setpoint {setpoint} for ramp {ramp} must lie in (0, {max_density})")]
    Setpoint { ramp: usize, setpoint: f64, max_density: f64 },
    #[error("{got} setpoints for {expected} ramps")]
    SetpointCount { got: usize, expected: usize },
}

/// Flows of one uncontrolled step.
pub fn no_control(
    net: &FreewayNetwork,
    state: &TrafficState,
    demand: &DemandProfile,
) -> Result<FlowDecision, CtmError> {
    Ok(ctm::step(net, state, demand, &Control::Uncontrolled)?.flows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlineaConfig {
    /// K_R, (veh/h) per (veh/km).
    pub gain: f64,
    /// ρ̂ per ramp, veh/km, for the cell the ramp feeds.
    pub setpoints: Vec<f64>,
}

impl AlineaConfig {
    pub const DEFAULT_GAIN: f64 = 70.0;

    /// Setpoint at `fraction` of the critical density φ^max / v of each fed cell.
    pub fn critical(net: &FreewayNetwork, fraction: f64) -> Self {
        AlineaConfig {
            gain: Self::DEFAULT_GAIN,
            setpoints: net
                .ramps
                .iter()
                .map(|r| {
                    let c = &net.cells[r.cell_id];
                    fraction * c.max_flow / c.free_flow_speed
                })
                .collect(),
        }
    }

    pub fn validate(&self, net: &FreewayNetwork) -> Result<(), BaselineError> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(BaselineError::Gain(self.gain));
        }
        if self.setpoints.len() != net.ramps.len() {
            return Err(BaselineError::SetpointCount {
                got: self.setpoints.len(),
                expected: net.ramps.len(),
            });
        }
        for (ramp, (&setpoint, r)) in self.setpoints.iter().zip(&net.ramps).enumerate() {
            let max_density = net.cells[r.cell_id].max_density;
            if !(setpoint > 0.0 && setpoint < max_density) {
                return Err(BaselineError::Setpoint {
                    ramp,
                    setpoint,
                    max_density,
                });
            }
        }
        Ok(())
    }
}

/// r(k+1) = clamp(r(k) + K_R (ρ̂ − ρ), 0, min(q/Δt, C^max)).
pub fn alinea_step(
    prev: f64,
    density: f64,
    setpoint: f64,
    gain: f64,
    queue: f64,
    dt: f64,
    max_metering: f64,
) -> f64 {
    let upper = (queue / dt).min(max_metering).max(0.0);
    (prev + gain * (setpoint - density)).clamp(0.0, upper)
}

/// ALINEA on every ramp, each measuring the density of the cell it feeds.
#[derive(Debug, Clone)]
pub struct Alinea {
    config: AlineaConfig,
    rates: Vec<f64>,
}

impl Alinea {
    /// Starts every ramp at its metering capacity.
    pub fn new(net: &FreewayNetwork, config: AlineaConfig) -> Result<Self, BaselineError> {
        config.validate(net)?;
        Ok(Alinea {
            rates: net.ramps.iter().map(|r| r.metering_capacity).collect(),
            config,
        })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }
}

impl Controller for Alinea {
    fn control(&mut self, net: &FreewayNetwork, state: &TrafficState, demand: &DemandProfile) -> Control {
        for (i, ramp) in net.ramps.iter().enumerate() {
            self.rates[i] = alinea_step(
                self.rates[i],
                state.density[ramp.cell_id],
                self.config.setpoints[i],
                self.config.gain,
                state.queue[i],
                demand.dt,
                ramp.max_metering,
            );
        }
        Control::Metered(self.rates.clone())
    }
}
