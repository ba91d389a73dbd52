//! Goldfarb-Idnani dual active-set method.
//!
//! The Hessian is factored once (`J₀ = L⁻ᵀ` with `P = LLᵀ`); each solve only
//! supplies a new linear term. The method keeps `J` and the triangular `R`
//! such that `Jᵀ N_A = [R; 0]` for the active normals `N_A`, updating both
//! with Givens rotations when constraints enter or leave the active set.

use nalgebra::{Cholesky, DMatrix};

use super::{kkt_parts, QpError, QpSolution, QpStatus, Row};

#[derive(Debug, Clone)]
struct Constraint {
    /// Normal `n` of `nᵀz ≥ b`.
    normal: Vec<(usize, f64)>,
    rhs: f64,
    equality: bool,
}

/// A strictly convex QP with fixed Hessian and constraints, solvable for
/// many linear terms.
#[derive(Debug, Clone)]
pub struct FactoredQp {
    n: usize,
    p: DMatrix<f64>,
    /// `L⁻ᵀ`, column-major.
    j0: Vec<f64>,
    ineq: Vec<Row>,
    eq: Vec<Row>,
    nonneg: Vec<usize>,
    cons: Vec<Constraint>,
    rhs_scale: f64,
}

enum Activation {
    Added,
    Redundant,
    Infeasible,
}

struct Work<'a> {
    qp: &'a FactoredQp,
    x: Vec<f64>,
    j: Vec<f64>,
    r: Vec<f64>,
    active: Vec<usize>,
    u: Vec<f64>,
    /// Orientation applied to equality normals (`±1`).
    sign: Vec<f64>,
    is_active: Vec<bool>,
    d: Vec<f64>,
    z: Vec<f64>,
    rv: Vec<f64>,
    steps: usize,
}

impl FactoredQp {
    pub fn new(
        p: &DMatrix<f64>,
        ineq: Vec<Row>,
        eq: Vec<Row>,
        nonneg: Vec<usize>,
    ) -> Result<Self, QpError> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(QpError::HessianShape {
                n,
                rows: p.nrows(),
                cols: p.ncols(),
            });
        }
        let chol = Cholesky::new(p.clone()).ok_or(QpError::NotPositiveDefinite)?;
        let l = chol.l();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite)?;
        let j0m = linv.transpose();
        let j0 = j0m.as_slice().to_vec();
        if j0.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NotPositiveDefinite);
        }

        let mut cons = Vec::with_capacity(eq.len() + ineq.len() + nonneg.len());
        for row in &eq {
            cons.push(Constraint {
                normal: row.coeffs.clone(),
                rhs: row.rhs,
                equality: true,
            });
        }
        for row in &ineq {
            cons.push(Constraint {
                normal: row.coeffs.iter().map(|&(j, v)| (j, -v)).collect(),
                rhs: -row.rhs,
                equality: false,
            });
        }
        for &k in &nonneg {
            if k >= n {
                return Err(QpError::BoundIndex(k));
            }
            cons.push(Constraint {
                normal: vec![(k, 1.0)],
                rhs: 0.0,
                equality: false,
            });
        }
        let rhs_scale = ineq
            .iter()
            .chain(eq.iter())
            .fold(0.0_f64, |acc, r| acc.max(r.rhs.abs()));
        Ok(Self {
            n,
            p: p.clone(),
            j0,
            ineq,
            eq,
            nonneg,
            cons,
            rhs_scale,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn ineq_rows(&self) -> &[Row] {
        &self.ineq
    }

    /// Solves `min ½zᵀPz + cᵀz` over the stored constraints.
    pub fn solve(&self, c: &[f64], tol: f64) -> QpSolution {
        let n = self.n;
        assert_eq!(c.len(), n, "linear term length mismatch");
        let mut w = Work {
            qp: self,
            x: vec![0.0; n],
            j: self.j0.clone(),
            r: vec![0.0; n * n],
            active: Vec::new(),
            u: Vec::new(),
            sign: vec![1.0; self.cons.len()],
            is_active: vec![false; self.cons.len()],
            d: vec![0.0; n],
            z: vec![0.0; n],
            rv: vec![0.0; n],
            steps: 0,
        };
        // Unconstrained minimizer x = −J Jᵀ c.
        let mut t = vec![0.0; n];
        for (col, tc) in t.iter_mut().enumerate() {
            let jc = &w.j[col * n..(col + 1) * n];
            *tc = jc.iter().zip(c).map(|(a, b)| a * b).sum();
        }
        for col in 0..n {
            let jc = &w.j[col * n..(col + 1) * n];
            for i in 0..n {
                w.x[i] -= jc[i] * t[col];
            }
        }

        let viol_tol = 0.1 * tol * (1.0 + self.rhs_scale);
        let max_steps = 50 * (n + self.cons.len()) + 100;
        let mut status = QpStatus::Optimal;

        for e in 0..self.eq.len() {
            let s = self.slack(e, 1.0, &w.x);
            if s > 0.0 {
                w.sign[e] = -1.0;
            }
            match w.activate(e, viol_tol) {
                Activation::Added | Activation::Redundant => {}
                Activation::Infeasible => {
                    status = QpStatus::Infeasible;
                    break;
                }
            }
        }

        while status == QpStatus::Optimal {
            let mut worst = -viol_tol;
            let mut pick = None;
            for (i, con) in self.cons.iter().enumerate().skip(self.eq.len()) {
                if w.is_active[i] {
                    continue;
                }
                let s = dot_sparse(&con.normal, &w.x) - con.rhs;
                if s < worst {
                    worst = s;
                    pick = Some(i);
                }
            }
            let Some(p) = pick else { break };
            match w.activate(p, viol_tol) {
                Activation::Added | Activation::Redundant => {}
                Activation::Infeasible => status = QpStatus::Infeasible,
            }
            if w.steps > max_steps {
                status = QpStatus::MaxIterations;
            }
        }

        // Multipliers in the caller's sign conventions.
        let mut eq_duals = vec![0.0; self.eq.len()];
        let mut ineq_duals = vec![0.0; self.ineq.len()];
        let mut bound_duals = vec![0.0; self.nonneg.len()];
        let n_eq = self.eq.len();
        let n_in = self.ineq.len();
        for (&a, &ua) in w.active.iter().zip(&w.u) {
            if a < n_eq {
                eq_duals[a] = -w.sign[a] * ua;
            } else if a < n_eq + n_in {
                ineq_duals[a - n_eq] = ua;
            } else {
                bound_duals[a - n_eq - n_in] = ua;
            }
        }
        let violated_rows = if status == QpStatus::Infeasible {
            self.ineq
                .iter()
                .enumerate()
                .filter(|(_, r)| r.dot(&w.x) > r.rhs + viol_tol)
                .map(|(i, _)| i)
                .collect()
        } else {
            Vec::new()
        };
        let (kkt, objective) = kkt_parts(
            &self.p,
            c,
            &self.ineq,
            &self.eq,
            &self.nonneg,
            &w.x,
            &ineq_duals,
            &eq_duals,
            &bound_duals,
        );
        QpSolution {
            status,
            objective,
            z: w.x,
            ineq_duals,
            eq_duals,
            bound_duals,
            kkt,
            iterations: w.steps,
            violated_rows,
        }
    }

    fn slack(&self, i: usize, sign: f64, x: &[f64]) -> f64 {
        let con = &self.cons[i];
        sign * (dot_sparse(&con.normal, x) - con.rhs)
    }
}

impl Work<'_> {
    fn activate(&mut self, p: usize, viol_tol: f64) -> Activation {
        let n = self.qp.n;
        let con = &self.qp.cons[p];
        let sign = self.sign[p];
        let mut u_p = 0.0;
        loop {
            self.steps += 1;
            let iact = self.active.len();
            // d = Jᵀ n_p
            for col in 0..n {
                let jc = &self.j[col * n..(col + 1) * n];
                self.d[col] = sign * con.normal.iter().map(|&(k, v)| jc[k] * v).sum::<f64>();
            }
            // z = J₂ d₂
            self.z.iter_mut().for_each(|v| *v = 0.0);
            for col in iact..n {
                let dc = self.d[col];
                if dc == 0.0 {
                    continue;
                }
                let jc = &self.j[col * n..(col + 1) * n];
                for i in 0..n {
                    self.z[i] += dc * jc[i];
                }
            }
            // r = R⁻¹ d₁
            for i in (0..iact).rev() {
                let mut acc = self.d[i];
                for k in (i + 1)..iact {
                    acc -= self.r[i + k * n] * self.rv[k];
                }
                self.rv[i] = acc / self.r[i + i * n];
            }
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for a in 0..iact {
                if self.qp.cons[self.active[a]].equality {
                    continue;
                }
                if self.rv[a] > 0.0 {
                    let ratio = self.u[a] / self.rv[a];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(a);
                    }
                }
            }
            let d_norm2: f64 = self.d.iter().map(|v| v * v).sum();
            let zn: f64 = self.d[iact..].iter().map(|v| v * v).sum();
            let s_p = sign * (dot_sparse(&con.normal, &self.x) - con.rhs);
            let t2 = if zn > 1e-14 * d_norm2 && zn > 0.0 {
                -s_p / zn
            } else {
                f64::INFINITY
            };
            if !t2.is_finite() && con.equality && s_p.abs() <= viol_tol {
                return Activation::Redundant;
            }
            if !con.equality && s_p >= -viol_tol && u_p == 0.0 {
                // Became satisfied through earlier partial steps.
                return Activation::Redundant;
            }
            let t = t1.min(t2);
            if !t.is_finite() {
                return Activation::Infeasible;
            }
            if !t2.is_finite() {
                for a in 0..iact {
                    self.u[a] -= t * self.rv[a];
                }
                u_p += t;
                self.drop(drop_at.expect("finite t1 has an index"));
                continue;
            }
            for i in 0..n {
                self.x[i] += t * self.z[i];
            }
            for a in 0..iact {
                self.u[a] -= t * self.rv[a];
            }
            u_p += t;
            if t2 <= t1 {
                self.add(p, u_p);
                return Activation::Added;
            }
            self.drop(drop_at.expect("partial step has an index"));
        }
    }

    fn add(&mut self, p: usize, u_p: f64) {
        let n = self.qp.n;
        let iact = self.active.len();
        for col in ((iact + 1)..n).rev() {
            let a = self.d[col - 1];
            let b = self.d[col];
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            self.d[col - 1] = h;
            self.d[col] = 0.0;
            let (left, right) = self.j.split_at_mut(col * n);
            let jl = &mut left[(col - 1) * n..];
            let jr = &mut right[..n];
            for k in 0..n {
                let (x1, x2) = (jl[k], jr[k]);
                jl[k] = c * x1 + s * x2;
                jr[k] = -s * x1 + c * x2;
            }
        }
        for i in 0..=iact {
            self.r[i + iact * n] = self.d[i];
        }
        self.active.push(p);
        self.u.push(u_p);
        self.is_active[p] = true;
    }

    fn drop(&mut self, k: usize) {
        let n = self.qp.n;
        let iact = self.active.len();
        let removed = self.active.remove(k);
        self.u.remove(k);
        self.is_active[removed] = false;
        for col in k..(iact - 1) {
            for i in 0..n {
                self.r[i + col * n] = self.r[i + (col + 1) * n];
            }
        }
        for i in 0..n {
            self.r[i + (iact - 1) * n] = 0.0;
        }
        for col in k..(iact - 1) {
            let a = self.r[col + col * n];
            let b = self.r[col + 1 + col * n];
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for cc in col..(iact - 1) {
                let r1 = self.r[col + cc * n];
                let r2 = self.r[col + 1 + cc * n];
                self.r[col + cc * n] = c * r1 + s * r2;
                self.r[col + 1 + cc * n] = -s * r1 + c * r2;
            }
            self.r[col + 1 + col * n] = 0.0;
            let (left, right) = self.j.split_at_mut((col + 1) * n);
            let jl = &mut left[col * n..];
            let jr = &mut right[..n];
            for i in 0..n {
                let (x1, x2) = (jl[i], jr[i]);
                jl[i] = c * x1 + s * x2;
                jr[i] = -s * x1 + c * x2;
            }
        }
    }
}

fn dot_sparse(coeffs: &[(usize, f64)], x: &[f64]) -> f64 {
    coeffs.iter().map(|&(j, v)| v * x[j]).sum()
}
