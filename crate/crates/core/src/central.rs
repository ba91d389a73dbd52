//! Centralized finite-horizon problem: assembly shared with the
//! distributed solver, the reference solve and control-plan export.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctm::{
    self, relaxed_feasible_set, Control, Controller, CtmError, DemandProfile, LocalModel, RowKind,
    TrafficState, VarKey, VarKind,
};
use crate::network::FreewayNetwork;
use crate::pha::CapacityConstraint;
use crate::qp::{self, QpProblem, QpSettings, QpStatus, Row};

#[derive(Debug, Error)]
pub enum CentralError {
    #[error(transparent)]
    Ctm(#[from] CtmError),
    #[error("capacity constraint has {got} weights for {expected} subnetworks")]
    CapacityShape { got: usize, expected: usize },
    #[error("capacity horizon {got} differs from problem horizon {expected}")]
    CapacityHorizon { got: usize, expected: usize },
    #[error("problem is infeasible; violated rows: {0:?}")]
    Infeasible(Vec<String>),
    #[error("solver stopped with status {status:?} (KKT residual {residual:e})")]
    NotSolved { status: QpStatus, residual: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Units the optimizers work in: decisions are divided by `flow` (veh/h)
/// and travel time by `cost` (veh·h).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub flow: f64,
    pub cost: f64,
}

/// One subnetwork's relaxed model in solver units.
#[derive(Debug, Clone)]
pub struct AgentBlock {
    pub model: LocalModel,
    /// Rows in solver units, each normalized to unit largest coefficient.
    pub rows: Vec<Row>,
    pub row_kinds: Vec<(RowKind, usize, usize)>,
    /// Cost gradient in solver units.
    pub cost: Vec<f64>,
    /// E_i as an index map: local decision → net component.
    pub net_index: Vec<usize>,
    /// f_i as H_i: entries (k, local index, weight).
    pub capacity_terms: Vec<(usize, usize, f64)>,
    pub neighbors: Vec<usize>,
}

impl AgentBlock {
    pub fn n_vars(&self) -> usize {
        self.model.n_vars()
    }

    /// Dense H_i (horizon × local decisions).
    pub fn h_matrix(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.model.horizon, self.n_vars());
        for &(k, j, w) in &self.capacity_terms {
            h[(k, j)] += w;
        }
        h
    }

    /// Dense Ē_i (local decisions × net components).
    pub fn e_matrix(&self, n_net: usize) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n_vars(), n_net);
        for (j, &g) in self.net_index.iter().enumerate() {
            e[(j, g)] = 1.0;
        }
        e
    }

    /// Travel time J_i in veh·h for local decisions in solver units.
    pub fn travel_time(&self, z: &[f64], scaling: &Scaling) -> f64 {
        let phys: Vec<f64> = z.iter().map(|v| v * scaling.flow).collect();
        self.model.cost.eval(&phys)
    }
}

/// Where a net component lives: its key, step and owning subnetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetComponent {
    pub key: VarKey,
    pub k: usize,
    pub owner: usize,
}

#[derive(Debug, Clone)]
pub struct HorizonProblem {
    pub net: FreewayNetwork,
    pub initial: TrafficState,
    pub demand: DemandProfile,
    pub capacity: CapacityConstraint,
    pub horizon: usize,
    pub dt: f64,
    pub scaling: Scaling,
    pub agents: Vec<AgentBlock>,
    pub components: Vec<NetComponent>,
    /// Number of local copies (owner included) of each net component.
    pub holders: Vec<Vec<usize>>,
    /// δ̄ in solver units.
    pub delta: f64,
}

impl HorizonProblem {
    pub fn n_net(&self) -> usize {
        self.components.len()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Number of consensus equalities û_copy = u_owner.
    pub fn n_consensus_rows(&self) -> usize {
        self.agents
            .iter()
            .map(|a| a.model.copies.len() * a.model.horizon)
            .sum()
    }

    /// E_i u.
    pub fn local_view(&self, i: usize, u: &[f64]) -> Vec<f64> {
        self.agents[i].net_index.iter().map(|&g| u[g]).collect()
    }

    /// Σ_i J_i(E_i u) in veh·h.
    pub fn travel_time(&self, u: &[f64]) -> f64 {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, a)| a.travel_time(&self.local_view(i, u), &self.scaling))
            .sum()
    }

    /// Largest violation of the capacity rows by net decisions `u`, solver units.
    pub fn capacity_violation(&self, u: &[f64]) -> f64 {
        let mut load = vec![0.0; self.horizon];
        for (i, a) in self.agents.iter().enumerate() {
            let z = self.local_view(i, u);
            for &(k, j, w) in &a.capacity_terms {
                load[k] += w * z[j];
            }
        }
        load.iter().fold(0.0_f64, |m, l| m.max(l - self.delta))
    }

    /// Largest violation of any agent's relaxed rows at E_i u, solver units.
    pub fn local_violation(&self, u: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for (i, a) in self.agents.iter().enumerate() {
            let z = self.local_view(i, u);
            for row in &a.rows {
                worst = worst.max(row.dot(&z) - row.rhs);
            }
            for v in &z {
                worst = worst.max(-v);
            }
        }
        worst
    }

    /// Control plan carried by the net decisions `u` (solver units).
    pub fn plan(&self, u: &[f64]) -> ControlPlan {
        let n = self.net.n_cells();
        let horizon = self.horizon;
        let mut outflow = vec![vec![0.0; n]; horizon];
        let mut ramp_flow = vec![vec![0.0; self.net.ramps.len()]; horizon];
        for (c, &v) in self.components.iter().zip(u) {
            let value = v * self.scaling.flow;
            match c.key.kind {
                VarKind::Outflow => outflow[c.k][c.key.cell] = value,
                VarKind::Ramp => {
                    let r = self.net.ramp_of(c.key.cell).expect("ramp component");
                    ramp_flow[c.k][r] = value;
                }
            }
        }
        let mut density = vec![vec![0.0; n]; horizon + 1];
        let mut queue = vec![vec![0.0; self.net.ramps.len()]; horizon + 1];
        for (i, a) in self.agents.iter().enumerate() {
            let phys: Vec<f64> = self
                .local_view(i, u)
                .iter()
                .map(|v| v * self.scaling.flow)
                .collect();
            for (lc, &c) in a.model.cells.iter().enumerate() {
                for k in 0..=horizon {
                    density[k][c] = a.model.density[lc][k].eval(&phys);
                }
            }
            for (lr, &r) in a.model.ramps.iter().enumerate() {
                for k in 0..=horizon {
                    queue[k][r] = a.model.queue[lr][k].eval(&phys);
                }
            }
        }
        let mut plan = ControlPlan {
            dt: self.dt,
            outflow,
            ramp_flow,
            speed: Vec::new(),
            density,
            queue,
            objective: self.travel_time(u),
        };
        plan.speed = reconstruct_speeds(&self.net, &plan);
        plan
    }
}

/// Solver-unit scaling used by [`assemble`]: flows relative to the largest
/// mainline capacity, travel time relative to Δt² · flow · N.
pub fn default_scaling(net: &FreewayNetwork, dt: f64, horizon: usize) -> Scaling {
    let flow = net.cells.iter().map(|c| c.max_flow).fold(1.0_f64, f64::max);
    Scaling {
        flow,
        cost: dt * dt * flow * horizon as f64,
    }
}

fn normalized(row: Row) -> Row {
    let scale = row.coeffs.iter().fold(0.0_f64, |m, e| m.max(e.1.abs()));
    if scale == 0.0 {
        return row;
    }
    Row::new(
        row.coeffs.iter().map(|&(j, v)| (j, v / scale)).collect(),
        row.rhs / scale,
    )
}

/// Builds every subnetwork's relaxed model, the net-variable layout and
/// the copy maps.
pub fn assemble(
    net: &FreewayNetwork,
    initial: &TrafficState,
    demand: &DemandProfile,
    capacity: &CapacityConstraint,
    horizon: usize,
) -> Result<HorizonProblem, CentralError> {
    if capacity.weights.len() != net.n_subnetworks() {
        return Err(CentralError::CapacityShape {
            got: capacity.weights.len(),
            expected: net.n_subnetworks(),
        });
    }
    if capacity.horizon != horizon {
        return Err(CentralError::CapacityHorizon {
            got: capacity.horizon,
            expected: horizon,
        });
    }
    let dt = demand.dt;
    let scaling = default_scaling(net, dt, horizon);
    let models = (0..net.n_subnetworks())
        .map(|i| relaxed_feasible_set(net, i, horizon, initial, demand))
        .collect::<Result<Vec<_>, _>>()?;

    // Net components: each subnetwork's own variables, subnetwork-major.
    let mut components = Vec::new();
    let mut first = Vec::with_capacity(models.len());
    for (i, m) in models.iter().enumerate() {
        first.push(components.len());
        for idx in 0..m.n_own() {
            let (key, k, _) = m.describe(idx);
            components.push(NetComponent { key, k, owner: i });
        }
    }
    let mut holders: Vec<Vec<usize>> = components.iter().map(|c| vec![c.owner]).collect();

    let mut agents = Vec::with_capacity(models.len());
    for (i, model) in models.into_iter().enumerate() {
        let mut net_index = Vec::with_capacity(model.n_vars());
        for idx in 0..model.n_vars() {
            let (key, k, is_copy) = model.describe(idx);
            let g = if is_copy {
                let owner = net.subnetwork_of(key.cell).expect("copied cell exists");
                let om = &agents_model_own(net, owner);
                let j = om.iter().position(|&v| v == key).expect("owner holds the key");
                let g = first[owner] + k * om.len() + j;
                holders[g].push(i);
                g
            } else {
                first[i] + idx
            };
            net_index.push(g);
        }
        let rows: Vec<Row> = model
            .rows
            .iter()
            .map(|tr| {
                normalized(Row::new(
                    tr.row.coeffs.iter().map(|&(j, v)| (j, v * scaling.flow)).collect(),
                    tr.row.rhs,
                ))
            })
            .collect();
        let row_kinds = model.rows.iter().map(|tr| (tr.kind, tr.cell, tr.k)).collect();
        let cost: Vec<f64> = model
            .cost_gradient()
            .iter()
            .map(|g| g * scaling.flow / scaling.cost)
            .collect();
        let weight = capacity.weights[i];
        let capacity_terms = if weight > 0.0 {
            (0..model.n_own())
                .map(|idx| (idx / model.own.len(), idx, weight))
                .collect()
        } else {
            Vec::new()
        };
        agents.push(AgentBlock {
            neighbors: net.neighbors(i),
            model,
            rows,
            row_kinds,
            cost,
            net_index,
            capacity_terms,
        });
    }
    for h in &mut holders {
        h.sort_unstable();
    }
    Ok(HorizonProblem {
        net: net.clone(),
        initial: initial.clone(),
        demand: demand.clone(),
        capacity: capacity.clone(),
        horizon,
        dt,
        scaling,
        agents,
        components,
        holders,
        delta: capacity.delta_bar / scaling.flow,
    })
}

/// Own-variable keys of subnetwork `i`, per step, in layout order.
fn agents_model_own(net: &FreewayNetwork, i: usize) -> Vec<VarKey> {
    let mut own = Vec::new();
    for c in net.partition[i].cells.clone() {
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
    own
}

/// Proximal weight that makes the linear program strictly convex.
pub const REGULARIZATION: f64 = 1e-9;

/// The stacked problem over all local copies, with consensus equalities.
pub fn stacked_qp(problem: &HorizonProblem) -> (QpProblem, Vec<usize>) {
    let mut offsets = Vec::with_capacity(problem.n_agents());
    let mut n = 0;
    for a in &problem.agents {
        offsets.push(n);
        n += a.n_vars();
    }
    let mut qp = QpProblem::new(n);
    qp.p = DMatrix::from_diagonal_element(n, n, REGULARIZATION);
    for (a, &off) in problem.agents.iter().zip(&offsets) {
        for (j, c) in a.cost.iter().enumerate() {
            qp.c[off + j] = *c;
        }
        for row in &a.rows {
            qp.ineq.push(Row::new(
                row.coeffs.iter().map(|&(j, v)| (off + j, v)).collect(),
                row.rhs,
            ));
        }
    }
    if problem.agents.iter().any(|a| !a.capacity_terms.is_empty()) {
        for k in 0..problem.horizon {
            let mut coeffs = Vec::new();
            for (a, &off) in problem.agents.iter().zip(&offsets) {
                coeffs.extend(
                    a.capacity_terms
                        .iter()
                        .filter(|t| t.0 == k)
                        .map(|&(_, j, w)| (off + j, w)),
                );
            }
            qp.ineq.push(normalized(Row::new(coeffs, problem.delta)));
        }
    }
    // Owner position of each net component in the stacked vector.
    let owner_pos: Vec<usize> = problem
        .components
        .iter()
        .enumerate()
        .map(|(g, c)| {
            let a = &problem.agents[c.owner];
            offsets[c.owner] + a.net_index.iter().position(|&x| x == g).expect("owner slot")
        })
        .collect();
    for (a, &off) in problem.agents.iter().zip(&offsets) {
        for j in a.model.n_own()..a.n_vars() {
            let g = a.net_index[j];
            qp.eq.push(Row::new(vec![(off + j, 1.0), (owner_pos[g], -1.0)], 0.0));
        }
    }
    qp.nonneg = (0..n).collect();
    (qp, offsets)
}

/// Per-step flows, predicted states and objective of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPlan {
    pub dt: f64,
    /// `outflow[k][cell]`, veh/h.
    pub outflow: Vec<Vec<f64>>,
    /// `ramp_flow[k][ramp]`, veh/h.
    pub ramp_flow: Vec<Vec<f64>>,
    /// `speed[k][cell]`, km/h.
    pub speed: Vec<Vec<f64>>,
    /// Predicted `density[k][cell]` for k = 0..=N.
    pub density: Vec<Vec<f64>>,
    /// Predicted `queue[k][ramp]` for k = 0..=N.
    pub queue: Vec<Vec<f64>>,
    /// Travel time over k = 1..=N of the predicted states, veh·h.
    pub objective: f64,
}

impl ControlPlan {
    pub fn horizon(&self) -> usize {
        self.outflow.len()
    }

    /// Rows `k, subnetwork, cell_id, r, phi, v`; `r` is empty without a ramp.
    pub fn write_csv<W: Write>(&self, writer: W, net: &FreewayNetwork) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "subnetwork", "cell_id", "r", "phi", "v"])?;
        for k in 0..self.horizon() {
            for c in 0..net.n_cells() {
                let r = net
                    .ramp_of(c)
                    .map(|r| self.ramp_flow[k][r].to_string())
                    .unwrap_or_default();
                w.write_record([
                    k.to_string(),
                    net.subnetwork_of(c).unwrap_or(0).to_string(),
                    c.to_string(),
                    r,
                    self.outflow[k][c].to_string(),
                    self.speed[k][c].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// v(k) = φ(k)/ρ(k) clamped to [0, V^max], V^max on empty cells.
pub fn reconstruct_speeds(net: &FreewayNetwork, plan: &ControlPlan) -> Vec<Vec<f64>> {
    plan.outflow
        .iter()
        .enumerate()
        .map(|(k, phi)| {
            net.cells
                .iter()
                .enumerate()
                .map(|(c, cell)| ctm::reconstruct_speed(cell, phi[c], plan.density[k][c]))
                .collect()
        })
        .collect()
}

/// Replays a plan's flows step by step.
#[derive(Debug, Clone)]
pub struct PlanController {
    plan: ControlPlan,
}

impl PlanController {
    pub fn new(plan: ControlPlan) -> Self {
        PlanController { plan }
    }
}

impl Controller for PlanController {
    fn control(&mut self, _: &FreewayNetwork, state: &TrafficState, _: &DemandProfile) -> Control {
        match self.plan.outflow.get(state.k) {
            Some(outflow) => Control::Prescribed {
                outflow: outflow.clone(),
                ramp_flow: self.plan.ramp_flow[state.k].clone(),
            },
            None => Control::Uncontrolled,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CentralSolution {
    pub plan: ControlPlan,
    /// Net decisions in solver units.
    pub u: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Solves the stacked problem with the interior point kernel.
pub fn solve_centralized(
    problem: &HorizonProblem,
    settings: &QpSettings,
) -> Result<CentralSolution, CentralError> {
    let (qp_problem, offsets) = stacked_qp(problem);
    let sol = qp::solve_with(&qp_problem, settings);
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => {
            return Err(CentralError::Infeasible(describe_rows(problem, &sol.violated_rows)));
        }
        status => {
            return Err(CentralError::NotSolved {
                status,
                residual: sol.kkt.max(),
            })
        }
    }
    let u: Vec<f64> = problem
        .components
        .iter()
        .enumerate()
        .map(|(g, c)| {
            let a = &problem.agents[c.owner];
            let j = a.net_index.iter().position(|&x| x == g).expect("owner slot");
            sol.z[offsets[c.owner] + j].max(0.0)
        })
        .collect();
    Ok(CentralSolution {
        plan: problem.plan(&u),
        u,
        status: sol.status,
        iterations: sol.iterations,
        kkt_residual: sol.kkt.max(),
    })
}

fn describe_rows(problem: &HorizonProblem, rows: &[usize]) -> Vec<String> {
    let mut labels = Vec::new();
    for (i, a) in problem.agents.iter().enumerate() {
        for (kind, cell, k) in &a.row_kinds {
            labels.push(format!("subnetwork {i}: {kind:?} cell {cell} step {k}"));
        }
    }
    for k in 0..problem.horizon {
        labels.push(format!("capacity step {k}"));
    }
    rows.iter()
        .map(|&r| labels.get(r).cloned().unwrap_or_else(|| format!("row {r}")))
        .collect()
}

/// How far a plan's flows sit from the demand/supply rule evaluated on the
/// plan's own states (ramps at their upper metering bound).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RelaxationSlack {
    /// Largest amount by which a planned flow exceeds the rule, veh/h.
    pub max_excess: f64,
    /// Σ over steps and cells of flow held below the rule, veh/h.
    pub total_holdback: f64,
}

pub fn relaxation_slack(
    net: &FreewayNetwork,
    plan: &ControlPlan,
    demand: &DemandProfile,
) -> Result<RelaxationSlack, CentralError> {
    let metering = Control::Metered(net.ramps.iter().map(|r| r.max_metering).collect());
    let mut out = RelaxationSlack::default();
    for k in 0..plan.horizon() {
        let state = TrafficState {
            density: plan.density[k].iter().map(|v| v.max(0.0)).collect(),
            queue: plan.queue[k].iter().map(|v| v.max(0.0)).collect(),
            k,
        };
        let rule = ctm::step(net, &state, demand, &metering)?.flows;
        let pairs = plan.outflow[k]
            .iter()
            .zip(&rule.outflow)
            .chain(plan.ramp_flow[k].iter().zip(&rule.ramp_flow));
        for (planned, allowed) in pairs {
            out.max_excess = out.max_excess.max(planned - allowed);
            out.total_holdback += (allowed - planned).max(0.0);
        }
    }
    Ok(out)
}
