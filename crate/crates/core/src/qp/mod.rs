//! Small dense convex QP kernel.
//!
//! Solves
//!
//! ```text
//!   minimize    ½ zᵀ P z + cᵀ z
//!   subject to  G z ≤ g        (inequality rows)
//!               A z = a        (equality rows)
//!               z_k ≥ 0        for k in the nonnegative index set
//! ```
//!
//! Two algorithms are provided:
//!
//! * a Mehrotra predictor-corrector interior point method ([`solve`]), which
//!   handles LPs (`P = 0`) and is used for the centralized problem, followed by
//!   an active-set polish step when the problem is small enough;
//! * a Goldfarb-Idnani dual active-set method ([`FactoredQp`]) for strictly
//!   convex problems whose Hessian and constraints are fixed while the linear
//!   term changes between solves. Agents in the distributed solver use this.
//!
//! Constraint rows are stored sparsely; `P` is dense.

mod active_set;
mod ipm;

pub use active_set::FactoredQp;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A sparse linear row `Σ coeffs[j].1 · z[coeffs[j].0]` with a right-hand side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl Row {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }

    /// Builds a row from a dense coefficient vector, dropping exact zeros.
    pub fn from_dense(dense: &[f64], rhs: f64) -> Self {
        let coeffs = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect();
        Self { coeffs, rhs }
    }

    pub fn dot(&self, z: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, v)| v * z[j]).sum()
    }

    fn inf_norm(&self) -> f64 {
        self.coeffs.iter().fold(0.0_f64, |m, &(_, v)| m.max(v.abs()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("P must be {n}x{n}, got {rows}x{cols}")]
    HessianShape { n: usize, rows: usize, cols: usize },
    #[error("linear term has length {got}, expected {n}")]
    LinearShape { n: usize, got: usize },
    #[error("P is not symmetric (entry ({i},{j}) differs by {diff:e})")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("row {row} references variable {var} but the problem has {n} variables")]
    RowIndex { row: usize, var: usize, n: usize },
    #[error("nonnegative index {0} out of range")]
    BoundIndex(usize),
    #[error("non-finite data in {0}")]
    NonFinite(&'static str),
    #[error("Hessian is not positive definite (required by the dual active-set method)")]
    NotPositiveDefinite,
}

/// `min ½zᵀPz + cᵀz  s.t.  Gz ≤ g, Az = a, z_k ≥ 0 (k ∈ nonneg)`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub c: Vec<f64>,
    pub ineq: Vec<Row>,
    pub eq: Vec<Row>,
    pub nonneg: Vec<usize>,
}

impl QpProblem {
    /// An LP/QP with `n` variables, zero Hessian and zero cost.
    pub fn new(n: usize) -> Self {
        Self {
            p: DMatrix::zeros(n, n),
            c: vec![0.0; n],
            ineq: Vec::new(),
            eq: Vec::new(),
            nonneg: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn all_nonnegative(mut self) -> Self {
        self.nonneg = (0..self.n()).collect();
        self
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let n = self.n();
        let mut quad = 0.0;
        for j in 0..n {
            if z[j] == 0.0 {
                continue;
            }
            let mut pz = 0.0;
            for i in 0..n {
                pz += self.p[(i, j)] * z[i];
            }
            quad += z[j] * pz;
        }
        0.5 * quad + dot(&self.c, z)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(QpError::HessianShape {
                n,
                rows: self.p.nrows(),
                cols: self.p.ncols(),
            });
        }
        if self.c.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("c"));
        }
        if self.p.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("P"));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let diff = (self.p[(i, j)] - self.p[(j, i)]).abs();
                let scale = 1.0 + self.p[(i, j)].abs().max(self.p[(j, i)].abs());
                if diff > 1e-12 * scale {
                    return Err(QpError::NotSymmetric { i, j, diff });
                }
            }
        }
        for (r, row) in self.ineq.iter().chain(self.eq.iter()).enumerate() {
            if !row.rhs.is_finite() || row.coeffs.iter().any(|(_, v)| !v.is_finite()) {
                return Err(QpError::NonFinite("constraint row"));
            }
            if let Some(&(var, _)) = row.coeffs.iter().find(|(j, _)| *j >= n) {
                return Err(QpError::RowIndex { row: r, var, n });
            }
        }
        if let Some(&k) = self.nonneg.iter().find(|&&k| k >= n) {
            return Err(QpError::BoundIndex(k));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    /// Input failed validation; `z` is empty.
    InvalidInput,
}

/// KKT residual norms at a candidate point, each scaled to be dimensionless.
///
/// * `stationarity`: `‖Pz + c + Gᵀμ + Aᵀy − ν‖∞ / (1 + ‖c‖∞ + ‖Pz‖∞)`
/// * `primal`: worst violation of `Gz ≤ g`, `Az = a`, `z_k ≥ 0`, divided by
///   `1 + max |rhs|`
/// * `dual`: worst negativity of `μ` and `ν`
/// * `complementarity`: `max(|μ_i (g − Gz)_i|, |ν_k z_k|) / (1 + |objective|)`
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub z: Vec<f64>,
    pub objective: f64,
    /// Multipliers of the inequality rows (`μ ≥ 0`).
    pub ineq_duals: Vec<f64>,
    /// Multipliers of the equality rows.
    pub eq_duals: Vec<f64>,
    /// Multipliers of the nonnegativity bounds, aligned with `nonneg`.
    pub bound_duals: Vec<f64>,
    pub kkt: KktResiduals,
    pub iterations: usize,
    /// Inequality rows that cannot be satisfied (filled when infeasible).
    pub violated_rows: Vec<usize>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    fn invalid() -> Self {
        Self {
            status: QpStatus::InvalidInput,
            z: Vec::new(),
            objective: f64::NAN,
            ineq_duals: Vec::new(),
            eq_duals: Vec::new(),
            bound_duals: Vec::new(),
            kkt: KktResiduals::default(),
            iterations: 0,
            violated_rows: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Method {
    /// Interior point, followed by an active-set polish on small problems.
    #[default]
    InteriorPoint,
    /// Goldfarb-Idnani; requires a positive definite `P`.
    DualActiveSet,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub method: Method,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            method: Method::InteriorPoint,
        }
    }
}

/// Solves with the interior point method.
pub fn solve(problem: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
    solve_with(
        problem,
        &QpSettings {
            tol,
            max_iter,
            method: Method::InteriorPoint,
        },
    )
}

pub fn solve_with(problem: &QpProblem, settings: &QpSettings) -> QpSolution {
    if problem.validate().is_err() {
        return QpSolution::invalid();
    }
    match settings.method {
        Method::InteriorPoint => ipm::solve(problem, settings.tol, settings.max_iter),
        Method::DualActiveSet => match FactoredQp::new(
            &problem.p,
            problem.ineq.clone(),
            problem.eq.clone(),
            problem.nonneg.clone(),
        ) {
            Ok(f) => f.solve(&problem.c, settings.tol),
            Err(_) => ipm::solve(problem, settings.tol, settings.max_iter),
        },
    }
}

/// Evaluates the scaled KKT residuals of `(z, μ, y, ν)` for `problem`.
pub fn kkt_residuals(
    problem: &QpProblem,
    z: &[f64],
    ineq_duals: &[f64],
    eq_duals: &[f64],
    bound_duals: &[f64],
) -> KktResiduals {
    kkt_parts(
        &problem.p,
        &problem.c,
        &problem.ineq,
        &problem.eq,
        &problem.nonneg,
        z,
        ineq_duals,
        eq_duals,
        bound_duals,
    )
    .0
}

/// KKT residuals and objective value from the raw problem parts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn kkt_parts(
    p: &DMatrix<f64>,
    c: &[f64],
    ineq: &[Row],
    eq: &[Row],
    nonneg: &[usize],
    z: &[f64],
    ineq_duals: &[f64],
    eq_duals: &[f64],
    bound_duals: &[f64],
) -> (KktResiduals, f64) {
    let n = c.len();
    let mut grad = c.to_vec();
    let mut pz_norm = 0.0_f64;
    let mut quad = 0.0;
    for i in 0..n {
        let mut pz = 0.0;
        for j in 0..n {
            pz += p[(i, j)] * z[j];
        }
        pz_norm = pz_norm.max(pz.abs());
        quad += z[i] * pz;
        grad[i] += pz;
    }
    let obj = 0.5 * quad + dot(c, z);
    for (row, &mu) in ineq.iter().zip(ineq_duals) {
        for &(j, v) in &row.coeffs {
            grad[j] += mu * v;
        }
    }
    for (row, &y) in eq.iter().zip(eq_duals) {
        for &(j, v) in &row.coeffs {
            grad[j] += y * v;
        }
    }
    for (&k, &nu) in nonneg.iter().zip(bound_duals) {
        grad[k] -= nu;
    }
    let stationarity = inf_norm(&grad) / (1.0 + inf_norm(c) + pz_norm);

    let mut rhs_scale = 0.0_f64;
    let mut primal = 0.0_f64;
    let mut comp = 0.0_f64;
    for (row, &mu) in ineq.iter().zip(ineq_duals) {
        let slack = row.rhs - row.dot(z);
        rhs_scale = rhs_scale.max(row.rhs.abs());
        primal = primal.max(-slack);
        comp = comp.max((mu * slack).abs());
    }
    for row in eq {
        rhs_scale = rhs_scale.max(row.rhs.abs());
        primal = primal.max((row.dot(z) - row.rhs).abs());
    }
    for (&k, &nu) in nonneg.iter().zip(bound_duals) {
        primal = primal.max(-z[k]);
        comp = comp.max((nu * z[k]).abs());
    }
    let dual = ineq_duals
        .iter()
        .chain(bound_duals)
        .fold(0.0_f64, |m, &v| m.max(-v));
    (
        KktResiduals {
            stationarity,
            primal: primal.max(0.0) / (1.0 + rhs_scale),
            dual,
            complementarity: comp / (1.0 + obj.abs()),
        },
        obj,
    )
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_qp(n: usize) -> QpProblem {
        let mut p = QpProblem::new(n);
        p.p = DMatrix::identity(n, n);
        p
    }

    #[test]
    fn projection_onto_halfline() {
        // min x² s.t. x ≥ 1
        let mut prob = QpProblem::new(1);
        prob.p[(0, 0)] = 2.0;
        prob.ineq.push(Row::new(vec![(0, -1.0)], -1.0));
        for method in [Method::InteriorPoint, Method::DualActiveSet] {
            let sol = solve_with(
                &prob,
                &QpSettings {
                    method,
                    ..Default::default()
                },
            );
            assert!(sol.is_optimal(), "{method:?}");
            assert!((sol.z[0] - 1.0).abs() < 1e-8);
            assert!((sol.objective - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn nonnegative_projection() {
        // min ½‖z − (3, −2)‖², z ≥ 0
        let mut prob = unit_qp(2).all_nonnegative();
        prob.c = vec![-3.0, 2.0];
        for method in [Method::InteriorPoint, Method::DualActiveSet] {
            let sol = solve_with(
                &prob,
                &QpSettings {
                    method,
                    ..Default::default()
                },
            );
            assert!(sol.is_optimal());
            assert!((sol.z[0] - 3.0).abs() < 1e-8, "{:?}", sol.z);
            assert!(sol.z[1].abs() < 1e-8);
            assert!(sol.kkt.max() <= 1e-8);
        }
    }

    #[test]
    fn pure_lp() {
        // min −x − y s.t. x + 2y ≤ 4, 3x + y ≤ 6, x, y ≥ 0  → (1.6, 1.2)
        let mut prob = QpProblem::new(2).all_nonnegative();
        prob.c = vec![-1.0, -1.0];
        prob.ineq.push(Row::new(vec![(0, 1.0), (1, 2.0)], 4.0));
        prob.ineq.push(Row::new(vec![(0, 3.0), (1, 1.0)], 6.0));
        let sol = solve(&prob, 1e-9, 100);
        assert!(sol.is_optimal());
        assert!((sol.z[0] - 1.6).abs() < 1e-7, "{:?}", sol.z);
        assert!((sol.z[1] - 1.2).abs() < 1e-7);
        assert!((sol.objective + 2.8).abs() < 1e-7);
    }

    #[test]
    fn equality_constrained() {
        // min ½‖z‖² s.t. z0 + z1 = 2
        let mut prob = unit_qp(2);
        prob.eq.push(Row::new(vec![(0, 1.0), (1, 1.0)], 2.0));
        for method in [Method::InteriorPoint, Method::DualActiveSet] {
            let sol = solve_with(
                &prob,
                &QpSettings {
                    method,
                    ..Default::default()
                },
            );
            assert!(sol.is_optimal());
            assert!((sol.z[0] - 1.0).abs() < 1e-8);
            assert!((sol.eq_duals[0] + 1.0).abs() < 1e-7, "{:?}", sol.eq_duals);
        }
    }

    #[test]
    fn infeasible_detected() {
        let mut prob = unit_qp(1).all_nonnegative();
        prob.ineq.push(Row::new(vec![(0, 1.0)], -1.0));
        let sol = solve(&prob, 1e-8, 100);
        assert_eq!(sol.status, QpStatus::Infeasible);
        assert_eq!(sol.violated_rows, vec![0]);
        let f = FactoredQp::new(&prob.p, prob.ineq.clone(), vec![], vec![0]).unwrap();
        assert_eq!(f.solve(&prob.c, 1e-8).status, QpStatus::Infeasible);
    }

    #[test]
    fn asymmetric_hessian_rejected() {
        let mut prob = unit_qp(2);
        prob.p[(0, 1)] = 1.0;
        assert!(matches!(
            prob.validate(),
            Err(QpError::NotSymmetric { .. })
        ));
        assert_eq!(solve(&prob, 1e-8, 10).status, QpStatus::InvalidInput);
    }

    #[test]
    fn bad_row_index_rejected() {
        let mut prob = unit_qp(2);
        prob.ineq.push(Row::new(vec![(5, 1.0)], 0.0));
        assert!(matches!(prob.validate(), Err(QpError::RowIndex { .. })));
    }

    #[test]
    fn deterministic() {
        let mut prob = unit_qp(3).all_nonnegative();
        prob.c = vec![-1.0, 0.5, -2.0];
        prob.ineq.push(Row::new(vec![(0, 1.0), (2, 1.0)], 1.0));
        let a = solve(&prob, 1e-8, 100);
        let b = solve(&prob, 1e-8, 100);
        assert_eq!(a.z, b.z);
    }
}
