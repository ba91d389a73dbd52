//! Relaxed feasible set of one subnetwork with the states eliminated.
//!
//! Every density and queue over the horizon is an affine function of the
//! stacked decision vector û_i, so the relaxed flow constraints and the
//! travel-time objective become linear rows and a linear cost in û_i.

use serde::{Deserialize, Serialize};

use super::{CtmError, DemandProfile, TrafficState};
use crate::network::FreewayNetwork;
use crate::qp::Row;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarKind {
    /// Ramp inflow r of the ramp on `cell`.
    Ramp,
    /// Mainline outflow φ of `cell`.
    Outflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VarKey {
    pub kind: VarKind,
    pub cell: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    /// φ ≤ V ρ.
    OutflowSpeed,
    /// φ ≤ φ^max.
    OutflowCapacity,
    /// φ_u(1 − β_u) + r_u ≤ φ^max of the receiving cell.
    MergeCapacity,
    /// φ_u(1 − β_u) + r_u ≤ ω(ρ^max − ρ) of the receiving cell.
    MergeSupply,
    /// r ≤ C^max.
    RampCapacity,
    /// r ≤ q / Δt.
    RampQueue,
    DensityNonneg,
    DensityMax,
    QueueNonneg,
}

/// A constraint row with its origin: `cell` is the cell whose variable or
/// state the row bounds, `k` the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedRow {
    pub row: Row,
    pub kind: RowKind,
    pub cell: usize,
    pub k: usize,
}

/// `constant + Σ coeff · z[index]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub constant: f64,
    pub coeffs: Vec<(usize, f64)>,
}

impl Affine {
    pub fn constant(value: f64) -> Self {
        Affine {
            constant: value,
            coeffs: Vec::new(),
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().map(|&(j, v)| v * z[j]).sum::<f64>()
    }

    /// `self + scale · other`, merging repeated indices.
    fn add_scaled(&mut self, other: &Affine, scale: f64) {
        self.constant += scale * other.constant;
        for &(j, v) in &other.coeffs {
            self.add_term(j, scale * v);
        }
    }

    fn add_term(&mut self, j: usize, v: f64) {
        match self.coeffs.iter_mut().find(|(i, _)| *i == j) {
            Some(entry) => entry.1 += v,
            None => self.coeffs.push((j, v)),
        }
    }

    /// The row `self ≤ bound`.
    fn le(&self, bound: f64) -> Row {
        let mut coeffs: Vec<(usize, f64)> = self.coeffs.iter().copied().filter(|e| e.1 != 0.0).collect();
        coeffs.sort_by_key(|e| e.0);
        Row::new(coeffs, bound - self.constant)
    }

    fn scaled(&self, s: f64) -> Affine {
        Affine {
            constant: self.constant * s,
            coeffs: self.coeffs.iter().map(|&(j, v)| (j, v * s)).collect(),
        }
    }
}

/// The relaxed model of one subnetwork over a horizon, in physical units
/// (decisions in veh/h).
///
/// Decision layout: `own.len()` variables per step for k = 0..N-1
/// (k-major), followed by `copies.len()` variables per step. Copies are
/// the upstream neighbor's last-cell outflow and ramp inflow, which enter
/// this subnetwork's first cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub subnetwork: usize,
    pub horizon: usize,
    pub dt: f64,
    pub own: Vec<VarKey>,
    pub copies: Vec<VarKey>,
    /// Cells of the subnetwork, in order.
    pub cells: Vec<usize>,
    /// Ramp indices of the subnetwork, in order.
    pub ramps: Vec<usize>,
    pub rows: Vec<TaggedRow>,
    /// `density[c][k]` for local cell c, k = 0..=N.
    pub density: Vec<Vec<Affine>>,
    /// `queue[r][k]` for local ramp r, k = 0..=N.
    pub queue: Vec<Vec<Affine>>,
    /// Σ_{k=1}^{N} Δt (Σ q(k) + Σ ρ(k) L): the travel time the decisions influence.
    pub cost: Affine,
}

impl LocalModel {
    pub fn n_vars(&self) -> usize {
        self.horizon * (self.own.len() + self.copies.len())
    }

    pub fn n_own(&self) -> usize {
        self.horizon * self.own.len()
    }

    pub fn own_index(&self, j: usize, k: usize) -> usize {
        k * self.own.len() + j
    }

    pub fn copy_index(&self, j: usize, k: usize) -> usize {
        self.n_own() + k * self.copies.len() + j
    }

    /// Key, step and copy flag of decision `idx`.
    pub fn describe(&self, idx: usize) -> (VarKey, usize, bool) {
        if idx < self.n_own() {
            let w = self.own.len();
            (self.own[idx % w], idx / w, false)
        } else {
            let w = self.copies.len();
            let rel = idx - self.n_own();
            (self.copies[rel % w], rel / w, true)
        }
    }

    /// Index of variable `key` at step `k`, own variables first.
    pub fn index_of(&self, key: VarKey, k: usize) -> Option<usize> {
        if let Some(j) = self.own.iter().position(|&v| v == key) {
            return Some(self.own_index(j, k));
        }
        self.copies
            .iter()
            .position(|&v| v == key)
            .map(|j| self.copy_index(j, k))
    }

    /// Gradient of the cost, dense.
    pub fn cost_gradient(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.n_vars()];
        for &(j, v) in &self.cost.coeffs {
            g[j] += v;
        }
        g
    }
}

/// Builds the relaxed model of subnetwork `i` over `horizon` steps from
/// `initial`, with ramp arrivals from `demand`.
pub fn relaxed_feasible_set(
    net: &FreewayNetwork,
    i: usize,
    horizon: usize,
    initial: &TrafficState,
    demand: &DemandProfile,
) -> Result<LocalModel, CtmError> {
    if horizon == 0 {
        return Err(CtmError::ZeroHorizon);
    }
    initial.validate(net)?;
    demand.validate(net)?;
    if demand.horizon() < horizon {
        return Err(CtmError::DemandHorizon {
            k: horizon - 1,
            horizon: demand.horizon(),
        });
    }
    let sub = net.subnetwork(i)?.clone();
    let dt = demand.dt;
    let cells: Vec<usize> = sub.cells.clone().collect();
    let ramps: Vec<usize> = cells.iter().filter_map(|&c| net.ramp_of(c)).collect();

    let mut own = Vec::new();
    for &c in &cells {
        if net.ramp_of(c).is_some() {
            own.push(VarKey {
                kind: VarKind::Ramp,
                cell: c,
            });
        }
        own.push(VarKey {
            kind: VarKind::Outflow,
            cell: c,
        });
    }
    let mut copies = Vec::new();
    if sub.cells.start > 0 {
        let u = sub.cells.start - 1;
        if net.ramp_of(u).is_some() {
            copies.push(VarKey {
                kind: VarKind::Ramp,
                cell: u,
            });
        }
        copies.push(VarKey {
            kind: VarKind::Outflow,
            cell: u,
        });
    }
    let mut model = LocalModel {
        subnetwork: i,
        horizon,
        dt,
        own,
        copies,
        cells: cells.clone(),
        ramps: ramps.clone(),
        rows: Vec::new(),
        density: Vec::new(),
        queue: Vec::new(),
        cost: Affine::default(),
    };
    let var = |m: &LocalModel, kind: VarKind, cell: usize, k: usize| {
        m.index_of(VarKey { kind, cell }, k)
    };

    let mut density: Vec<Vec<Affine>> = cells
        .iter()
        .map(|&c| vec![Affine::constant(initial.density[c])])
        .collect();
    let mut queue: Vec<Vec<Affine>> = ramps
        .iter()
        .map(|&r| vec![Affine::constant(initial.queue[r])])
        .collect();
    let mut rows = Vec::new();
    let mut push = |row: Row, kind: RowKind, cell: usize, k: usize| {
        rows.push(TaggedRow { row, kind, cell, k });
    };

    for k in 0..horizon {
        for (lc, &c) in cells.iter().enumerate() {
            let cell = &net.cells[c];
            let phi = var(&model, VarKind::Outflow, c, k).expect("own outflow");
            let rho_k = density[lc][k].clone();

            // φ ≤ V ρ(k) and φ ≤ φ^max
            let mut speed = rho_k.scaled(-cell.free_flow_speed);
            speed.add_term(phi, 1.0);
            push(speed.le(0.0), RowKind::OutflowSpeed, c, k);
            push(Row::new(vec![(phi, 1.0)], cell.max_flow), RowKind::OutflowCapacity, c, k);

            // Merge into c from the upstream cell, when its flows are visible here.
            if c > 0 {
                let u = c - 1;
                if let Some(phi_u) = var(&model, VarKind::Outflow, u, k) {
                    let mut merged = Affine::default();
                    merged.add_term(phi_u, 1.0 - net.cells[u].split_ratio);
                    if let Some(r_u) = var(&model, VarKind::Ramp, u, k) {
                        merged.add_term(r_u, 1.0);
                    }
                    push(merged.le(cell.max_flow), RowKind::MergeCapacity, c, k);
                    let mut sup = merged.clone();
                    sup.add_scaled(&rho_k, cell.wave_speed);
                    push(
                        sup.le(cell.wave_speed * cell.max_density),
                        RowKind::MergeSupply,
                        c,
                        k,
                    );
                }
            }

            // Density dynamics.
            let gain = dt / cell.length;
            let mut next = rho_k.clone();
            next.add_term(phi, -gain);
            if c > 0 {
                if let Some(phi_u) = var(&model, VarKind::Outflow, c - 1, k) {
                    next.add_term(phi_u, gain * (1.0 - net.cells[c - 1].split_ratio));
                }
            }
            if let Some(r) = var(&model, VarKind::Ramp, c, k) {
                next.add_term(r, gain);
            }
            push(next.scaled(-1.0).le(0.0), RowKind::DensityNonneg, c, k + 1);
            push(next.le(cell.max_density), RowKind::DensityMax, c, k + 1);
            density[lc].push(next);
        }
        for (lr, &r) in ramps.iter().enumerate() {
            let ramp = &net.ramps[r];
            let c = ramp.cell_id;
            let idx = var(&model, VarKind::Ramp, c, k).expect("own ramp");
            push(Row::new(vec![(idx, 1.0)], ramp.max_metering), RowKind::RampCapacity, c, k);
            let q_k = queue[lr][k].clone();
            let mut rq = q_k.scaled(-1.0 / dt);
            rq.add_term(idx, 1.0);
            push(rq.le(0.0), RowKind::RampQueue, c, k);
            let mut next = q_k;
            next.constant += dt * demand.rates[r][k];
            next.add_term(idx, -dt);
            push(next.scaled(-1.0).le(0.0), RowKind::QueueNonneg, c, k + 1);
            queue[lr].push(next);
        }
    }

    let mut cost = Affine::default();
    for k in 1..=horizon {
        for (lc, &c) in cells.iter().enumerate() {
            cost.add_scaled(&density[lc][k], dt * net.cells[c].length);
        }
        for q in &queue {
            cost.add_scaled(&q[k], dt);
        }
    }
    cost.coeffs.retain(|e| e.1 != 0.0);
    cost.coeffs.sort_by_key(|e| e.0);

    model.rows = rows;
    model.density = density;
    model.queue = queue;
    model.cost = cost;
    Ok(model)
}
