//! Double-consensus ADMM over simulated subnetwork agents.
//!
//! The outer loop is consensus ADMM on the copies each agent keeps of its
//! upstream neighbor's boundary flows. Every outer iteration solves the
//! capacity-coupled local problem with an inner dual-consensus loop in
//! which agents only exchange capacity multipliers λ with neighbors.
//! All communication goes through a [`Bus`] that refuses non-neighbor
//! messages.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::central::{AgentBlock, ControlPlan, HorizonProblem};
use crate::ctm::{self, NoControl};
use crate::qp::{FactoredQp, QpError, QpStatus, Row};

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("distributed solve needs at least two subnetworks, got {0}")]
    SingleAgent(usize),
    #[error("invalid setting: {0}")]
    Config(String),
    #[error("local problem of agent {agent}: {source}")]
    Factor { agent: usize, source: QpError },
    #[error("local problem of agent {agent} ended with {status:?}")]
    Local { agent: usize, status: QpStatus },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Ctm(#[from] ctm::CtmError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    /// Consensus penalty ρ₁ of the outer loop.
    pub rho1: f64,
    /// Dual-consensus penalty ρ₂ of the inner loop.
    pub rho2: f64,
    /// Outer stop: max_i ‖û_i − E_i u‖∞ ≤ eps_primal and ‖Δû‖∞ ≤ eps_step.
    pub eps_primal: f64,
    pub eps_step: f64,
    /// Inner stop: ‖Σ_i (H_i û_i + y_i − δ/M)‖∞ ≤ eps_inner and ‖Δû‖∞ ≤ eps_inner_step.
    pub eps_inner: f64,
    pub eps_inner_step: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    /// Worker threads for the agent updates; 0 uses the rayon default.
    pub threads: usize,
    /// Tolerance of the local quadratic programs.
    pub local_tol: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho1: 1.0,
            rho2: 1.0,
            eps_primal: 1e-4,
            eps_step: 1e-4,
            eps_inner: 1e-4,
            eps_inner_step: 1e-4,
            max_inner: 200,
            max_outer: 500,
            threads: 0,
            local_tol: 1e-10,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<(), AdmmError> {
        let finite = [("rho1", self.rho1), ("rho2", self.rho2), ("local_tol", self.local_tol)];
        for (name, v) in finite {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AdmmError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        // Stopping thresholds may be +∞, which stops a loop after one pass.
        let thresholds = [
            ("eps_primal", self.eps_primal),
            ("eps_step", self.eps_step),
            ("eps_inner", self.eps_inner),
            ("eps_inner_step", self.eps_inner_step),
        ];
        for (name, v) in thresholds {
            if !(v > 0.0) {
                return Err(AdmmError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_inner == 0 || self.max_outer == 0 {
            return Err(AdmmError::Config("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    /// Capacity multipliers λ_i, one per step.
    Dual(Vec<f64>),
    /// Local values of shared net components: (net index, value).
    Shared(Vec<(usize, f64)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub from: usize,
    pub to: usize,
    pub outer: usize,
    pub inner: usize,
    pub payload: Payload,
}

/// Point-to-point delivery restricted to the subnetwork adjacency.
#[derive(Debug, Clone)]
pub struct Bus {
    neighbors: Vec<Vec<usize>>,
    inbox: Vec<Vec<RoundMessage>>,
    delivered: usize,
}

impl Bus {
    pub fn new(neighbors: Vec<Vec<usize>>) -> Self {
        let n = neighbors.len();
        Bus {
            neighbors,
            inbox: vec![Vec::new(); n],
            delivered: 0,
        }
    }

    /// Queues `msg`. Panics when the receiver is not a neighbor of the sender.
    pub fn send(&mut self, msg: RoundMessage) {
        assert!(
            self.neighbors[msg.from].contains(&msg.to),
            "agent {} tried to message non-neighbor {}",
            msg.from,
            msg.to
        );
        self.inbox[msg.to].push(msg);
    }

    /// Drains the messages addressed to `agent`, ordered by sender.
    pub fn receive(&mut self, agent: usize) -> Vec<RoundMessage> {
        let mut msgs = std::mem::take(&mut self.inbox[agent]);
        msgs.sort_by_key(|m| m.from);
        self.delivered += msgs.len();
        msgs
    }

    pub fn delivered(&self) -> usize {
        self.delivered
    }
}

/// Everything one agent keeps between rounds.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: usize,
    pub neighbors: Vec<usize>,
    pub block: AgentBlock,
    qp: FactoredQp,
    h: DMatrix<f64>,
    kappa: f64,
    /// Local decisions û_i, solver units.
    pub u_hat: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
    /// α_ij, aligned with `neighbors`.
    pub alpha: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub theta: Vec<f64>,
    /// E_i u at the current outer iteration.
    pub net_view: Vec<f64>,
    /// Net components shared with each neighbor: (local index, net index).
    shared: Vec<Vec<(usize, usize)>>,
    /// With H_i = 0 the decisions do not depend on w, so within an outer
    /// iteration the last solve can be reused: (linear term on z, û).
    decoupled_cache: Option<(Vec<f64>, Vec<f64>)>,
    h_is_zero: bool,
}

impl AgentState {
    fn n_vars(&self) -> usize {
        self.block.n_vars()
    }

    /// Local update: solves for (û_i, y_i) and sets λ_i.
    pub fn local_update(&mut self, rho1: f64, delta_share: f64, tol: f64) -> Result<(), AdmmError> {
        let n = self.n_vars();
        let horizon = self.lambda.len();
        let w: Vec<f64> = self.p.iter().map(|p| delta_share + p).collect();
        let mut c = vec![0.0; n + horizon];
        for j in 0..n {
            let v = self.net_view[j] - self.theta[j] / rho1;
            c[j] = self.block.cost[j] - rho1 * v;
        }
        for (k, wk) in w.iter().enumerate() {
            for j in 0..n {
                c[j] -= 2.0 * self.kappa * self.h[(k, j)] * wk;
            }
            c[n + k] = -2.0 * self.kappa * wk;
        }
        let cached = match &self.decoupled_cache {
            Some((cz, z)) if self.h_is_zero && cz[..] == c[..n] => Some(z.clone()),
            _ => None,
        };
        match cached {
            Some(z) => self.u_hat.copy_from_slice(&z),
            None => {
                let sol = self.qp.solve(&c, tol);
                if sol.status != QpStatus::Optimal {
                    return Err(AdmmError::Local {
                        agent: self.id,
                        status: sol.status,
                    });
                }
                self.u_hat.copy_from_slice(&sol.z[..n]);
                if self.h_is_zero {
                    self.decoupled_cache = Some((c[..n].to_vec(), self.u_hat.clone()));
                }
            }
        }
        for k in 0..horizon {
            let hz: f64 = (0..n).map(|j| self.h[(k, j)] * self.u_hat[j]).sum();
            // The slack minimizes κ‖Hz + y − w‖² exactly at max(0, w − Hz).
            let y = (w[k] - hz).max(0.0);
            self.y[k] = y;
            self.lambda[k] = (hz + y - w[k]) * self.kappa * 2.0;
        }
        Ok(())
    }

    /// α_ij += ρ₂/2 (λ_i − λ_j), then p_i = 2Σα_ij − ρ₂Σ(λ_i + λ_j).
    pub fn dual_exchange(&mut self, received: &[(usize, Vec<f64>)], rho2: f64) {
        let horizon = self.lambda.len();
        let mut p = vec![0.0; horizon];
        for (slot, &j) in self.neighbors.iter().enumerate() {
            let lj = &received
                .iter()
                .find(|(from, _)| *from == j)
                .expect("every neighbor reports λ")
                .1;
            for k in 0..horizon {
                self.alpha[slot][k] += 0.5 * rho2 * (self.lambda[k] - lj[k]);
                p[k] += 2.0 * self.alpha[slot][k] - rho2 * (self.lambda[k] + lj[k]);
            }
        }
        self.p = p;
    }

    /// Averages every local component with the copies held by neighbors.
    /// Holders are summed in ascending agent order so all holders agree.
    pub fn net_update(&mut self, received: &[(usize, Vec<(usize, f64)>)]) {
        let n = self.n_vars();
        let mut sums: Vec<Vec<(usize, f64)>> = (0..n).map(|j| vec![(self.id, self.u_hat[j])]).collect();
        for (from, values) in received {
            for &(g, v) in values {
                if let Some(j) = self.block.net_index.iter().position(|&x| x == g) {
                    sums[j].push((*from, v));
                }
            }
        }
        for (j, entries) in sums.iter_mut().enumerate() {
            entries.sort_by_key(|e| e.0);
            let total: f64 = entries.iter().map(|e| e.1).sum();
            self.net_view[j] = total / entries.len() as f64;
        }
    }

    /// θ_i += ρ₁ (û_i − E_i u).
    pub fn theta_update(&mut self, rho1: f64) {
        for j in 0..self.n_vars() {
            self.theta[j] += rho1 * (self.u_hat[j] - self.net_view[j]);
        }
    }

    fn shared_payload(&self, slot: usize) -> Vec<(usize, f64)> {
        self.shared[slot]
            .iter()
            .map(|&(j, g)| (g, self.u_hat[j]))
            .collect()
    }

    fn consensus_residual(&self) -> f64 {
        self.u_hat
            .iter()
            .zip(&self.net_view)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Builds the agents, with û⁰ taken from an uncontrolled rollout.
pub fn init_agents(problem: &HorizonProblem, config: &AdmmConfig) -> Result<Vec<AgentState>, AdmmError> {
    config.validate()?;
    let m = problem.n_agents();
    if m < 2 {
        return Err(AdmmError::SingleAgent(m));
    }
    let rollout = ctm::simulate(
        &problem.net,
        &problem.initial,
        &problem.demand,
        &mut NoControl,
        problem.horizon,
    )?;
    let mut u0 = vec![0.0; problem.n_net()];
    for (g, comp) in problem.components.iter().enumerate() {
        let f = &rollout.flows[comp.k];
        let v = match comp.key.kind {
            ctm::VarKind::Outflow => f.outflow[comp.key.cell],
            ctm::VarKind::Ramp => f.ramp_flow[problem.net.ramp_of(comp.key.cell).expect("ramp")],
        };
        u0[g] = v / problem.scaling.flow;
    }

    let horizon = problem.horizon;
    let mut agents = Vec::with_capacity(m);
    for (i, block) in problem.agents.iter().enumerate() {
        let n = block.n_vars();
        let neighbors = block.neighbors.clone();
        let kappa = 1.0 / (4.0 * config.rho2 * neighbors.len() as f64);
        let h = block.h_matrix();
        let mut p = DMatrix::zeros(n + horizon, n + horizon);
        let hth = h.transpose() * &h;
        for a in 0..n {
            p[(a, a)] += config.rho1;
            for b in 0..n {
                p[(a, b)] += 2.0 * kappa * hth[(a, b)];
            }
            for k in 0..horizon {
                p[(a, n + k)] = 2.0 * kappa * h[(k, a)];
                p[(n + k, a)] = 2.0 * kappa * h[(k, a)];
            }
        }
        for k in 0..horizon {
            p[(n + k, n + k)] = 2.0 * kappa;
        }
        let rows: Vec<Row> = block.rows.clone();
        let qp = FactoredQp::new(&p, rows, Vec::new(), (0..n + horizon).collect())
            .map_err(|source| AdmmError::Factor { agent: i, source })?;
        let shared = neighbors
            .iter()
            .map(|&j| {
                block
                    .net_index
                    .iter()
                    .enumerate()
                    .filter(|(_, &g)| problem.holders[g].contains(&j))
                    .map(|(l, &g)| (l, g))
                    .collect()
            })
            .collect();
        let view = problem.local_view(i, &u0);
        agents.push(AgentState {
            id: i,
            alpha: vec![vec![0.0; horizon]; neighbors.len()],
            neighbors,
            block: block.clone(),
            qp,
            h: h.clone(),
            kappa,
            u_hat: view.clone(),
            y: vec![0.0; horizon],
            lambda: vec![0.0; horizon],
            p: vec![0.0; horizon],
            theta: vec![0.0; n],
            net_view: view,
            shared,
            decoupled_cache: None,
            h_is_zero: h.iter().all(|v| *v == 0.0),
        });
    }
    Ok(agents)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub n: usize,
    /// Inner iterations used by this outer iteration.
    pub l: usize,
    /// Final inner residual ‖Σ(Hû + y − δ/M)‖∞.
    pub r: f64,
    #[serde(rename = "max_R")]
    pub max_r: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Σ_i J_i(E_i u), veh·h.
    pub objective: f64,
    /// max_i ‖û_i − E_i u‖∞ at exit, solver units.
    pub consensus_residual: f64,
    pub step_residual: f64,
    pub capacity_violation: f64,
    /// Largest ‖Σ_i Ē_iᵀ θ_i‖∞ seen over the run.
    pub max_theta_sum: f64,
    /// Smallest λ entry seen over the run.
    pub min_lambda: f64,
    pub messages: usize,
    pub trace: Vec<TraceRow>,
}

impl SolverReport {
    /// Rows `n,l,r,max_R,objective`.
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub plan: ControlPlan,
    /// Net decisions u, solver units.
    pub u: Vec<f64>,
    pub report: SolverReport,
    pub wall_clock_s: f64,
}

fn run_parallel<F>(pool: &rayon::ThreadPool, agents: &mut [AgentState], f: F) -> Result<(), AdmmError>
where
    F: Fn(&mut AgentState) -> Result<(), AdmmError> + Sync + Send,
{
    pool.install(|| agents.par_iter_mut().map(&f).collect::<Result<Vec<()>, _>>())?;
    Ok(())
}

/// Inner dual-consensus loop; returns (iterations, final residual).
fn inner_loop(
    pool: &rayon::ThreadPool,
    agents: &mut [AgentState],
    bus: &mut Bus,
    problem: &HorizonProblem,
    config: &AdmmConfig,
    outer: usize,
    min_lambda: &mut f64,
) -> Result<(usize, f64), AdmmError> {
    let m = agents.len() as f64;
    let share = problem.delta / m;
    let horizon = problem.horizon;
    let mut residual = f64::INFINITY;
    for l in 1..=config.max_inner {
        let before: Vec<Vec<f64>> = agents.iter().map(|a| a.u_hat.clone()).collect();
        run_parallel(pool, agents, |a| a.local_update(config.rho1, share, config.local_tol))?;
        for a in agents.iter() {
            for &x in &a.lambda {
                *min_lambda = min_lambda.min(x);
            }
            for &j in &a.neighbors {
                bus.send(RoundMessage {
                    from: a.id,
                    to: j,
                    outer,
                    inner: l,
                    payload: Payload::Dual(a.lambda.clone()),
                });
            }
        }
        let inboxes: Vec<Vec<(usize, Vec<f64>)>> = (0..agents.len())
            .map(|i| {
                bus.receive(i)
                    .into_iter()
                    .map(|msg| match msg.payload {
                        Payload::Dual(l) => (msg.from, l),
                        Payload::Shared(_) => unreachable!("only duals travel in the inner loop"),
                    })
                    .collect()
            })
            .collect();
        for (a, inbox) in agents.iter_mut().zip(&inboxes) {
            a.dual_exchange(inbox, config.rho2);
        }

        let mut r = vec![0.0; horizon];
        for a in agents.iter() {
            for k in 0..horizon {
                let hz: f64 = (0..a.n_vars()).map(|j| a.h[(k, j)] * a.u_hat[j]).sum();
                r[k] += hz + a.y[k] - share;
            }
        }
        residual = r.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let step = agents
            .iter()
            .zip(&before)
            .flat_map(|(a, b)| a.u_hat.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0_f64, f64::max);
        if residual <= config.eps_inner && step <= config.eps_inner_step {
            return Ok((l, residual));
        }
    }
    Ok((config.max_inner, residual))
}

/// Runs the distributed solver on `problem`.
pub fn run(problem: &HorizonProblem, config: &AdmmConfig) -> Result<AdmmOutcome, AdmmError> {
    let start = Instant::now();
    let mut agents = init_agents(problem, config)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if config.threads > 0 {
        builder = builder.num_threads(config.threads);
    }
    let pool = builder.build().map_err(|e| AdmmError::Pool(e.to_string()))?;
    let mut bus = Bus::new(agents.iter().map(|a| a.neighbors.clone()).collect());

    let mut trace = Vec::new();
    let mut inner_total = 0;
    let mut min_lambda = f64::INFINITY;
    let mut max_theta_sum = 0.0_f64;
    let mut converged = false;
    let mut step = f64::INFINITY;
    let mut outer = 0;
    while outer < config.max_outer {
        outer += 1;
        let before: Vec<Vec<f64>> = agents.iter().map(|a| a.u_hat.clone()).collect();
        let (l, r) = inner_loop(&pool, &mut agents, &mut bus, problem, config, outer, &mut min_lambda)?;
        inner_total += l;

        for a in &agents {
            for (slot, &j) in a.neighbors.iter().enumerate() {
                bus.send(RoundMessage {
                    from: a.id,
                    to: j,
                    outer,
                    inner: 0,
                    payload: Payload::Shared(a.shared_payload(slot)),
                });
            }
        }
        for i in 0..agents.len() {
            let inbox: Vec<(usize, Vec<(usize, f64)>)> = bus
                .receive(i)
                .into_iter()
                .map(|msg| match msg.payload {
                    Payload::Shared(v) => (msg.from, v),
                    Payload::Dual(_) => unreachable!("only shared values travel after the inner loop"),
                })
                .collect();
            agents[i].net_update(&inbox);
            agents[i].theta_update(config.rho1);
        }
        max_theta_sum = max_theta_sum.max(theta_sum(problem, &agents));

        let max_r = agents.iter().map(AgentState::consensus_residual).fold(0.0_f64, f64::max);
        step = agents
            .iter()
            .zip(&before)
            .flat_map(|(a, b)| a.u_hat.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0_f64, f64::max);
        let u = net_decisions(problem, &agents);
        trace.push(TraceRow {
            n: outer,
            l,
            r,
            max_r,
            objective: problem.travel_time(&u),
        });
        log::debug!("outer {outer}: inner {l}, r {r:e}, max_R {max_r:e}, step {step:e}");
        if max_r <= config.eps_primal && step <= config.eps_step {
            converged = true;
            break;
        }
    }

    let u = net_decisions(problem, &agents);
    let report = SolverReport {
        converged,
        outer_iterations: outer,
        inner_iterations: inner_total,
        objective: problem.travel_time(&u),
        consensus_residual: agents.iter().map(AgentState::consensus_residual).fold(0.0_f64, f64::max),
        step_residual: step,
        capacity_violation: problem.capacity_violation(&u),
        max_theta_sum,
        min_lambda: if min_lambda.is_finite() { min_lambda } else { 0.0 },
        messages: bus.delivered(),
        trace,
    };
    Ok(AdmmOutcome {
        plan: problem.plan(&u),
        u,
        report,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Net decisions read from each component's owner.
fn net_decisions(problem: &HorizonProblem, agents: &[AgentState]) -> Vec<f64> {
    problem
        .components
        .iter()
        .enumerate()
        .map(|(g, c)| {
            let a = &agents[c.owner];
            let j = a.block.net_index.iter().position(|&x| x == g).expect("owner slot");
            a.net_view[j]
        })
        .collect()
}

/// ‖Σ_i Ē_iᵀ θ_i‖∞.
pub fn theta_sum(problem: &HorizonProblem, agents: &[AgentState]) -> f64 {
    let mut total = vec![0.0; problem.n_net()];
    for a in agents {
        for (j, &g) in a.block.net_index.iter().enumerate() {
            total[g] += a.theta[j];
        }
    }
    total.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
