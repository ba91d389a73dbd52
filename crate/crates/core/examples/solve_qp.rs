//! Solves a small box-and-budget QP with both built-in methods and prints
//! the multipliers.
//!
//! cargo run --example solve_qp

use freeway_opt::qp::{self, Method, QpProblem, QpSettings, Row};
use nalgebra::DMatrix;

fn main() {
    // min ½‖z − (3, 1, 2)‖²  s.t.  z₀ + z₁ + z₂ ≤ 4,  z₀ − z₂ = 0,  z ≥ 0
    let mut prob = QpProblem::new(3);
    prob.p = DMatrix::identity(3, 3);
    prob.c = vec![-3.0, -1.0, -2.0];
    prob.ineq.push(Row::new(vec![(0, 1.0), (1, 1.0), (2, 1.0)], 4.0));
    prob.eq.push(Row::new(vec![(0, 1.0), (2, -1.0)], 0.0));
    prob.nonneg = vec![0, 1, 2];

    for method in [Method::InteriorPoint, Method::DualActiveSet] {
        let sol = qp::solve_with(
            &prob,
            &QpSettings {
                method,
                ..Default::default()
            },
        );
        println!(
            "{method:?}: z = {:.6?}, objective {:.6}, budget multiplier {:.6}, KKT residual {:.1e}",
            sol.z,
            sol.objective,
            sol.ineq_duals[0],
            sol.kkt.max()
        );
    }
}
