//! Solves the fixture's horizon problem as one quadratic program and
//! replays the plan through the simulator.
//!
//! cargo run --release --example optimize_central

use std::path::Path;

use freeway_opt::central::{relaxation_slack, solve_centralized, PlanController};
use freeway_opt::cli::load_scenario;
use freeway_opt::ctm::NoControl;
use freeway_opt::qp::QpSettings;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/inner-ring-synthetic.json");
    let exp = load_scenario(&path)?;
    let (problem, pha) = exp.problem()?;
    println!("capacity area: subnetworks {:?}", pha.map(|p| p.subnetworks).unwrap_or_default());

    let sol = solve_centralized(&problem, &QpSettings::default())?;
    let replay = exp.simulate_with(&mut PlanController::new(sol.plan.clone()))?;
    let free = exp.simulate_with(&mut NoControl)?;
    let slack = relaxation_slack(&exp.net, &sol.plan, &exp.demand)?;
    println!(
        "{} QP iterations, KKT residual {:.1e}, optimal value {:.3}",
        sol.iterations, sol.kkt_residual, sol.plan.objective
    );
    println!(
        "replayed TTT {:.2} vs {:.2} uncontrolled; largest flow above the proportional merge rule {:.1e} veh/h",
        replay.ttt, free.ttt, slack.max_excess
    );
    Ok(())
}
