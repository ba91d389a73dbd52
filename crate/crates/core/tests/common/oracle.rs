//! Independent QP oracle: enumerate every active set, solve the KKT system
//! with plain Gaussian elimination, keep the best primal-dual feasible point.

use freeway_opt::qp::{QpProblem, Row};
use nalgebra::DMatrix;
use rand::Rng;

pub struct OracleSolution {
    pub z: Vec<f64>,
    pub objective: f64,
}

/// Random strictly convex QP with `n ≤ max_n` variables and at most
/// `max_cons` constraints (inequalities, one optional equality and bounds).
pub fn random_qp<R: Rng>(rng: &mut R, max_n: usize, max_cons: usize) -> QpProblem {
    random_qp_with_point(rng, max_n, max_cons).0
}

pub fn random_qp_with_point<R: Rng>(
    rng: &mut R,
    max_n: usize,
    max_cons: usize,
) -> (QpProblem, Vec<f64>) {
    let n = rng.gen_range(1..=max_n);
    let mut prob = QpProblem::new(n);
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    prob.p = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
    // Symmetrize exactly.
    let pt = prob.p.transpose();
    prob.p = (&prob.p + pt) * 0.5;
    prob.c = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let z0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();

    let total = rng.gen_range(0..=max_cons);
    let n_eq = if n > 1 && total > 0 && rng.gen_bool(0.3) { 1 } else { 0 };
    let n_bounds = rng.gen_range(0..=(total - n_eq).min(n));
    let n_ineq = total - n_eq - n_bounds;
    let random_row = |rng: &mut R| -> Vec<(usize, f64)> {
        (0..n)
            .filter_map(|j| {
                if rng.gen_bool(0.8) {
                    Some((j, rng.gen_range(-2.0..2.0)))
                } else {
                    None
                }
            })
            .collect()
    };
    for _ in 0..n_ineq {
        let coeffs = random_row(rng);
        let lhs: f64 = coeffs.iter().map(|&(j, v)| v * z0[j]).sum();
        let slack = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) };
        prob.ineq.push(Row::new(coeffs, lhs + slack));
    }
    for _ in 0..n_eq {
        let coeffs = random_row(rng);
        let lhs: f64 = coeffs.iter().map(|&(j, v)| v * z0[j]).sum();
        prob.eq.push(Row::new(coeffs, lhs));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    prob.nonneg = idx[..n_bounds].to_vec();
    prob.nonneg.sort_unstable();
    (prob, z0)
}

/// Dense Gaussian elimination with partial pivoting. `None` when singular.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-11 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for k in (i + 1)..n {
            acc -= a[i][k] * x[k];
        }
        x[i] = acc / a[i][i];
    }
    Some(x)
}

pub fn enumerate_qp(prob: &QpProblem) -> Option<OracleSolution> {
    let n = prob.n();
    // All inequalities in `row·z ≤ rhs` form, bounds included.
    let mut ineq: Vec<(Vec<f64>, f64)> = prob
        .ineq
        .iter()
        .map(|r| {
            let mut d = vec![0.0; n];
            for &(j, v) in &r.coeffs {
                d[j] += v;
            }
            (d, r.rhs)
        })
        .collect();
    for &k in &prob.nonneg {
        let mut d = vec![0.0; n];
        d[k] = -1.0;
        ineq.push((d, 0.0));
    }
    let eq: Vec<(Vec<f64>, f64)> = prob
        .eq
        .iter()
        .map(|r| {
            let mut d = vec![0.0; n];
            for &(j, v) in &r.coeffs {
                d[j] += v;
            }
            (d, r.rhs)
        })
        .collect();
    let m = ineq.len();
    let mut best: Option<OracleSolution> = None;
    for mask in 0u32..(1u32 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = active.len() + eq.len();
        let dim = n + k;
        let mut a = vec![vec![0.0; dim]; dim];
        let mut b = vec![0.0; dim];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = prob.p[(i, j)];
            }
            b[i] = -prob.c[i];
        }
        let rows: Vec<&(Vec<f64>, f64)> = active.iter().map(|&i| &ineq[i]).chain(eq.iter()).collect();
        for (r, (coef, rhs)) in rows.iter().enumerate() {
            for j in 0..n {
                a[n + r][j] = coef[j];
                a[j][n + r] = coef[j];
            }
            b[n + r] = *rhs;
        }
        let Some(x) = gauss_solve(a, b) else { continue };
        let z = &x[..n];
        let feasible = ineq.iter().all(|(coef, rhs)| {
            coef.iter().zip(z).map(|(c, v)| c * v).sum::<f64>() <= rhs + 1e-9
        });
        let duals_ok = x[n..n + active.len()].iter().all(|&l| l >= -1e-9);
        if !(feasible && duals_ok) {
            continue;
        }
        let obj = prob.objective(z);
        if best.as_ref().map_or(true, |b| obj < b.objective) {
            best = Some(OracleSolution {
                z: z.to_vec(),
                objective: obj,
            });
        }
    }
    best
}
