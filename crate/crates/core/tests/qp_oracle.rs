//! QP kernel against an active-set enumeration oracle.

mod common;

use common::oracle::{enumerate_qp, random_qp};
use freeway_opt::qp::{self, kkt_residuals, Method, QpSettings};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_five_variable_qps_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..60 {
        let prob = random_qp(&mut rng, 5, 6);
        let oracle = enumerate_qp(&prob).expect("generated problems are feasible");
        for method in [Method::InteriorPoint, Method::DualActiveSet] {
            let sol = qp::solve_with(
                &prob,
                &QpSettings {
                    tol: 1e-8,
                    max_iter: 200,
                    method,
                },
            );
            assert!(sol.is_optimal(), "case {case} {method:?}: {:?}", sol.status);
            let err = sol
                .z
                .iter()
                .zip(&oracle.z)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-6, "case {case} {method:?}: err {err:e}");
        }
    }
}

#[test]
fn reported_kkt_residuals_recompute_independently() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let prob = random_qp(&mut rng, 6, 6);
        let sol = qp::solve(&prob, 1e-8, 200);
        assert!(sol.is_optimal());
        let kkt = kkt_residuals(&prob, &sol.z, &sol.ineq_duals, &sol.eq_duals, &sol.bound_duals);
        assert!(kkt.max() <= 1e-8, "{kkt:?}");
        assert_eq!(kkt, sol.kkt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn objective_no_worse_than_any_feasible_point(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (prob, feasible) = common::oracle::random_qp_with_point(&mut rng, 6, 6);
        let sol = qp::solve(&prob, 1e-8, 200);
        prop_assert!(sol.is_optimal());
        prop_assert!(sol.objective <= prob.objective(&feasible) + 1e-8 * (1.0 + sol.objective.abs()));
    }

    #[test]
    fn argmin_invariant_under_positive_scaling(seed in any::<u64>(), s in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prob = random_qp(&mut rng, 6, 6);
        let mut scaled = prob.clone();
        scaled.p *= s;
        scaled.c.iter_mut().for_each(|v| *v *= s);
        // Scaling a row and its right-hand side together leaves the set unchanged.
        for row in scaled.ineq.iter_mut().chain(scaled.eq.iter_mut()) {
            row.rhs *= s;
            row.coeffs.iter_mut().for_each(|(_, v)| *v *= s);
        }
        let a = qp::solve(&prob, 1e-9, 200);
        let b = qp::solve(&scaled, 1e-9, 200);
        prop_assert!(a.is_optimal() && b.is_optimal());
        for (x, y) in a.z.iter().zip(&b.z) {
            prop_assert!((x - y).abs() <= 1e-6, "{} vs {}", x, y);
        }
    }
}
