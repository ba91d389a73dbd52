//! Mehrotra predictor-corrector interior point method.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{dot, inf_norm, kkt_residuals, QpProblem, QpSolution, QpStatus, Row};

/// Problems with more KKT unknowns than this skip the polish step.
const POLISH_LIMIT: usize = 900;

struct Factored {
    h: Cholesky<f64, Dyn>,
    /// `H⁻¹Aᵀ` and the Cholesky factor of `A H⁻¹ Aᵀ`, when equalities exist.
    schur: Option<(DMatrix<f64>, Cholesky<f64, Dyn>)>,
}

pub(super) fn solve(problem: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
    solve_inner(problem, tol, max_iter, true)
}

fn solve_inner(problem: &QpProblem, tol: f64, max_iter: usize, phase1: bool) -> QpSolution {
    let n = problem.n();
    let n_ineq = problem.ineq.len();
    // Internal inequality rows: user rows followed by -z_k ≤ 0.
    let mut rows: Vec<Row> = problem.ineq.clone();
    rows.extend(problem.nonneg.iter().map(|&k| Row::new(vec![(k, -1.0)], 0.0)));
    let m = rows.len();
    let p_eq = problem.eq.len();

    let c_norm = inf_norm(&problem.c);
    let rhs_norm = rows
        .iter()
        .chain(problem.eq.iter())
        .fold(0.0_f64, |acc, r| acc.max(r.rhs.abs()));
    let diag_scale = 1.0 + (0..n).fold(0.0_f64, |acc, i| acc.max(problem.p[(i, i)].abs()));
    let reg = 1e-12 * diag_scale;

    // Initial point: least-squares fit of the inequalities.
    let mut z = vec![0.0; n];
    let mut y = vec![0.0; p_eq];
    {
        let ones = vec![1.0; m];
        let rhs_z: Vec<f64> = {
            let mut r: Vec<f64> = problem.c.iter().map(|v| -v).collect();
            for row in &rows {
                for &(j, v) in &row.coeffs {
                    r[j] += v * row.rhs;
                }
            }
            r
        };
        let rhs_y: Vec<f64> = problem.eq.iter().map(|r| r.rhs).collect();
        if let Some(f) = factor(problem, &rows, &ones, reg.max(1e-8)) {
            let (dz, dy) = kkt_solve(&f, problem, &rhs_z, &rhs_y);
            z = dz;
            y = dy;
        }
    }
    let mut s: Vec<f64> = rows.iter().map(|r| r.rhs - r.dot(&z)).collect();
    let mut mu = vec![1.0; m];
    if m > 0 {
        let ds = (-1.5 * s.iter().cloned().fold(f64::INFINITY, f64::min)).max(0.0);
        s.iter_mut().for_each(|v| *v += ds);
        let smu: f64 = dot(&s, &mu);
        let sum_s: f64 = s.iter().sum();
        let sum_mu: f64 = mu.iter().sum();
        let shift_s = 0.5 * smu / sum_mu.max(1e-300);
        let shift_mu = 0.5 * smu / sum_s.max(1e-300);
        s.iter_mut().for_each(|v| *v = (*v + shift_s).max(1e-8));
        mu.iter_mut().for_each(|v| *v = (*v + shift_mu).max(1e-8));
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        // Residuals.
        let mut r_d = problem.c.clone();
        add_pz(problem, &z, &mut r_d);
        for (row, &u) in rows.iter().zip(&mu) {
            for &(j, v) in &row.coeffs {
                r_d[j] += u * v;
            }
        }
        for (row, &yy) in problem.eq.iter().zip(&y) {
            for &(j, v) in &row.coeffs {
                r_d[j] += yy * v;
            }
        }
        let r_p: Vec<f64> = rows
            .iter()
            .zip(&s)
            .map(|(row, &si)| row.dot(&z) + si - row.rhs)
            .collect();
        let r_e: Vec<f64> = problem.eq.iter().map(|row| row.dot(&z) - row.rhs).collect();

        let obj = problem.objective(&z);
        let comp_max = s
            .iter()
            .zip(&mu)
            .fold(0.0_f64, |acc, (a, b)| acc.max(a * b));
        let dual_ok = inf_norm(&r_d) <= tol * (1.0 + c_norm);
        let primal_ok = inf_norm(&r_p).max(inf_norm(&r_e)) <= tol * (1.0 + rhs_norm);
        let gap_ok = comp_max <= 0.1 * tol * (1.0 + obj.abs());
        if dual_ok && primal_ok && gap_ok {
            converged = true;
            break;
        }
        iterations += 1;

        let d: Vec<f64> = mu.iter().zip(&s).map(|(u, si)| u / si).collect();
        let Some(f) = factor(problem, &rows, &d, reg) else {
            break;
        };
        if m == 0 {
            let rhs_z: Vec<f64> = r_d.iter().map(|v| -v).collect();
            let rhs_y: Vec<f64> = r_e.iter().map(|v| -v).collect();
            let (dz, dy) = kkt_solve(&f, problem, &rhs_z, &rhs_y);
            axpy(1.0, &dz, &mut z);
            axpy(1.0, &dy, &mut y);
            continue;
        }
        let mu_bar = dot(&s, &mu) / m as f64;

        let newton = |r_c: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
            // r1 = −r_d − Gᵀ S⁻¹ (M r_p − r_c)
            let mut r1: Vec<f64> = r_d.iter().map(|v| -v).collect();
            for (i, row) in rows.iter().enumerate() {
                let w = (mu[i] * r_p[i] - r_c[i]) / s[i];
                for &(j, v) in &row.coeffs {
                    r1[j] -= v * w;
                }
            }
            let r2: Vec<f64> = r_e.iter().map(|v| -v).collect();
            let (dz, dy) = kkt_solve(&f, problem, &r1, &r2);
            let ds: Vec<f64> = rows
                .iter()
                .zip(&r_p)
                .map(|(row, rp)| -rp - row.dot(&dz))
                .collect();
            let dmu: Vec<f64> = (0..m)
                .map(|i| (-r_c[i] - mu[i] * ds[i]) / s[i])
                .collect();
            (dz, dy, ds, dmu)
        };

        // Predictor.
        let r_aff: Vec<f64> = s.iter().zip(&mu).map(|(a, b)| a * b).collect();
        let (_, _, ds_a, dmu_a) = newton(&r_aff);
        let alpha_a = max_step(&s, &ds_a).min(max_step(&mu, &dmu_a)).min(1.0);
        let mu_aff = (0..m)
            .map(|i| (s[i] + alpha_a * ds_a[i]) * (mu[i] + alpha_a * dmu_a[i]))
            .sum::<f64>()
            / m as f64;
        let sigma = (mu_aff / mu_bar).powi(3).clamp(0.0, 1.0);

        // Corrector.
        let r_c: Vec<f64> = (0..m)
            .map(|i| s[i] * mu[i] + ds_a[i] * dmu_a[i] - sigma * mu_bar)
            .collect();
        let (dz, dy, ds, dmu) = newton(&r_c);
        let mut alpha = (0.99 * max_step(&s, &ds).min(max_step(&mu, &dmu))).min(1.0);
        // On a quadratic objective the curvature term dsᵀdμ = dzᵀPdz is
        // nonnegative and can push the duality measure up. Once the
        // iterate is feasible, shorten the step until the measure drops.
        if dual_ok && primal_ok {
            let target = |a: f64| {
                (0..m).map(|i| (s[i] + a * ds[i]) * (mu[i] + a * dmu[i])).sum::<f64>() / m as f64
            };
            let mut halvings = 0;
            while halvings < 40 && target(alpha) > (1.0 - 0.1 * alpha * (1.0 - sigma)) * mu_bar {
                alpha *= 0.5;
                halvings += 1;
            }
        }
        axpy(alpha, &dz, &mut z);
        axpy(alpha, &dy, &mut y);
        axpy(alpha, &ds, &mut s);
        axpy(alpha, &dmu, &mut mu);
        s.iter_mut().for_each(|v| *v = v.max(1e-300));
        mu.iter_mut().for_each(|v| *v = v.max(1e-300));
    }

    if !converged {
        if phase1 {
            if let Some(violated) = infeasible_rows(problem, tol) {
                let mut sol = pack(problem, z, &mu, y, n_ineq, iterations);
                sol.status = QpStatus::Infeasible;
                sol.violated_rows = violated;
                return sol;
            }
        }
        let mut sol = pack(problem, z, &mu, y, n_ineq, iterations);
        sol.status = QpStatus::MaxIterations;
        return sol;
    }

    let mut sol = pack(problem, z, &mu, y, n_ineq, iterations);
    if let Some(polished) = polish(problem, &rows, &s, &mu, n_ineq) {
        if polished.kkt.max() <= sol.kkt.max().max(tol) {
            sol = QpSolution {
                iterations,
                ..polished
            };
        }
    }
    sol.status = QpStatus::Optimal;
    sol
}

fn pack(
    problem: &QpProblem,
    z: Vec<f64>,
    mu: &[f64],
    y: Vec<f64>,
    n_ineq: usize,
    iterations: usize,
) -> QpSolution {
    let ineq_duals = mu[..n_ineq].to_vec();
    let bound_duals = mu[n_ineq..].to_vec();
    let kkt = kkt_residuals(problem, &z, &ineq_duals, &y, &bound_duals);
    QpSolution {
        status: QpStatus::Optimal,
        objective: problem.objective(&z),
        z,
        ineq_duals,
        eq_duals: y,
        bound_duals,
        kkt,
        iterations,
        violated_rows: Vec::new(),
    }
}

fn add_pz(problem: &QpProblem, z: &[f64], out: &mut [f64]) {
    let n = problem.n();
    for j in 0..n {
        let zj = z[j];
        if zj == 0.0 {
            continue;
        }
        for i in 0..n {
            out[i] += problem.p[(i, j)] * zj;
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

fn factor(problem: &QpProblem, rows: &[Row], d: &[f64], reg: f64) -> Option<Factored> {
    let n = problem.n();
    let mut h = problem.p.clone();
    for (row, &w) in rows.iter().zip(d) {
        for &(a, va) in &row.coeffs {
            let s = w * va;
            for &(b, vb) in &row.coeffs {
                h[(a, b)] += s * vb;
            }
        }
    }
    let mut shift = reg;
    let chol = loop {
        let mut hr = h.clone();
        for i in 0..n {
            hr[(i, i)] += shift;
        }
        if let Some(c) = Cholesky::new(hr) {
            break c;
        }
        shift *= 100.0;
        if shift > 1e6 {
            return None;
        }
    };
    let schur = if problem.eq.is_empty() {
        None
    } else {
        let p = problem.eq.len();
        let mut at = DMatrix::zeros(n, p);
        for (r, row) in problem.eq.iter().enumerate() {
            for &(j, v) in &row.coeffs {
                at[(j, r)] += v;
            }
        }
        let x = chol.solve(&at);
        let mut s = at.transpose() * &x;
        let s_scale = 1.0 + (0..p).fold(0.0_f64, |acc, i| acc.max(s[(i, i)].abs()));
        for i in 0..p {
            s[(i, i)] += 1e-13 * s_scale;
        }
        let sc = Cholesky::new(s)?;
        Some((x, sc))
    };
    Some(Factored { h: chol, schur })
}

/// Solves `[H Aᵀ; A 0] [dz; dy] = [r1; r2]`.
fn kkt_solve(f: &Factored, problem: &QpProblem, r1: &[f64], r2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let r1v = DVector::from_column_slice(r1);
    match &f.schur {
        None => (f.h.solve(&r1v).as_slice().to_vec(), Vec::new()),
        Some((hinv_at, sc)) => {
            // dy = S⁻¹ (A H⁻¹ r1 − r2); dz = H⁻¹ r1 − H⁻¹Aᵀ dy
            let hr1 = f.h.solve(&r1v);
            let mut t = DVector::zeros(problem.eq.len());
            for (i, row) in problem.eq.iter().enumerate() {
                t[i] = row.dot(hr1.as_slice()) - r2[i];
            }
            let dy = sc.solve(&t);
            let dz = hr1 - hinv_at * &dy;
            (dz.as_slice().to_vec(), dy.as_slice().to_vec())
        }
    }
}

/// Re-solves the equality-constrained QP on the estimated active set.
fn polish(
    problem: &QpProblem,
    rows: &[Row],
    s: &[f64],
    mu: &[f64],
    n_ineq: usize,
) -> Option<QpSolution> {
    let n = problem.n();
    let active: Vec<usize> = (0..rows.len()).filter(|&i| s[i] < mu[i]).collect();
    let p_eq = problem.eq.len();
    let dim = n + active.len() + p_eq;
    if dim > POLISH_LIMIT {
        return None;
    }
    let eps = 1e-9;
    let mut k0 = DMatrix::zeros(dim, dim);
    for i in 0..n {
        for j in 0..n {
            k0[(i, j)] = problem.p[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = -problem.c[i];
    }
    for (a, &ri) in active.iter().enumerate() {
        let row = &rows[ri];
        for &(j, v) in &row.coeffs {
            k0[(n + a, j)] += v;
            k0[(j, n + a)] += v;
        }
        rhs[n + a] = row.rhs;
    }
    for (e, row) in problem.eq.iter().enumerate() {
        let r = n + active.len() + e;
        for &(j, v) in &row.coeffs {
            k0[(r, j)] += v;
            k0[(j, r)] += v;
        }
        rhs[r] = row.rhs;
    }
    let mut kreg = k0.clone();
    for i in 0..dim {
        kreg[(i, i)] += if i < n { eps } else { -eps };
    }
    let lu = kreg.lu();
    let mut x = lu.solve(&rhs)?;
    for _ in 0..5 {
        let resid = &rhs - &k0 * &x;
        let dx = lu.solve(&resid)?;
        x += dx;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let z: Vec<f64> = x.as_slice()[..n].to_vec();
    let mut mu_full = vec![0.0; rows.len()];
    for (a, &ri) in active.iter().enumerate() {
        mu_full[ri] = x[n + a];
    }
    if mu_full.iter().any(|&v| v < -1e-10) {
        return None;
    }
    let y: Vec<f64> = x.as_slice()[n + active.len()..].to_vec();
    let sol = pack(problem, z, &mu_full, y, n_ineq, 0);
    Some(sol)
}

/// Elastic phase-1 LP. Returns the violated inequality rows when the
/// constraints cannot be met, `None` when a feasible point exists.
fn infeasible_rows(problem: &QpProblem, tol: f64) -> Option<Vec<usize>> {
    let n = problem.n();
    let m = problem.ineq.len();
    let p_eq = problem.eq.len();
    let total = n + m + 2 * p_eq;
    let mut lp = QpProblem::new(total);
    for i in 0..total {
        lp.p[(i, i)] = 1e-9;
    }
    for i in n..total {
        lp.c[i] = 1.0;
    }
    for (i, row) in problem.ineq.iter().enumerate() {
        let mut coeffs = row.coeffs.clone();
        coeffs.push((n + i, -1.0));
        lp.ineq.push(Row::new(coeffs, row.rhs));
    }
    for (e, row) in problem.eq.iter().enumerate() {
        let mut coeffs = row.coeffs.clone();
        coeffs.push((n + m + 2 * e, 1.0));
        coeffs.push((n + m + 2 * e + 1, -1.0));
        lp.eq.push(Row::new(coeffs, row.rhs));
    }
    lp.nonneg = problem.nonneg.clone();
    lp.nonneg.extend(n..total);
    let sol = solve_inner(&lp, tol.max(1e-10), 300, false);
    if sol.status != QpStatus::Optimal {
        return None;
    }
    let scale = 1.0
        + problem
            .ineq
            .iter()
            .chain(problem.eq.iter())
            .fold(0.0_f64, |acc, r| acc.max(r.rhs.abs()).max(r.inf_norm()));
    let elastic: f64 = sol.z[n..].iter().sum();
    if elastic <= 1e-6 * scale {
        return None;
    }
    Some(
        (0..m)
            .filter(|&i| sol.z[n + i] > 1e-7 * scale)
            .collect(),
    )
}
