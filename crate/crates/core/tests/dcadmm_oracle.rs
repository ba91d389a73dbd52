//! Distributed solver against the centralized optimum and its own invariants.

mod common;

use common::scenarios::{random_demand, random_network, random_state};
use freeway_opt::central::{assemble, solve_centralized, HorizonProblem};
use freeway_opt::ctm::{DemandProfile, TrafficState};
use freeway_opt::dcadmm::{self, init_agents, AdmmConfig, AdmmError, Bus, Payload, RoundMessage};
use freeway_opt::network::{Cell, FreewayNetwork, OnRamp};
use freeway_opt::pha::CapacityConstraint;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_problem(seed: u64, tight: bool) -> HorizonProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cells = rng.gen_range(3..=8);
    let m = rng.gen_range(2..=n_cells.min(4));
    let (net, dt) = random_network(&mut rng, n_cells, m);
    let horizon = rng.gen_range(3..=6);
    let state = random_state(&mut rng, &net);
    let demand = random_demand(&mut rng, &net, horizon, dt);
    let capacity = if tight {
        let mut weights = vec![0.0; m];
        weights[rng.gen_range(0..m)] = 1.0;
        weights[rng.gen_range(0..m)] = 1.0;
        CapacityConstraint {
            delta_bar: rng.gen_range(1500.0..4000.0),
            weights,
            horizon,
        }
    } else {
        CapacityConstraint::slack(&net, horizon)
    };
    assemble(&net, &state, &demand, &capacity, horizon).unwrap()
}

fn three_agent_problem() -> HorizonProblem {
    let cells: Vec<Cell> = (0..6).map(|i| Cell::standard(i, 1.0)).collect();
    let ramps = [0, 2, 4]
        .iter()
        .map(|&c| OnRamp {
            cell_id: c,
            metering_capacity: 1200.0,
            max_metering: 1500.0,
        })
        .collect();
    let net = FreewayNetwork::new(cells, ramps, &[2, 2, 2]).unwrap();
    let horizon = 4;
    let demand = DemandProfile::constant(3, horizon, 1.0 / 90.0, 1400.0);
    let state = TrafficState {
        density: vec![30.0, 45.0, 60.0, 50.0, 40.0, 20.0],
        queue: vec![5.0, 10.0, 2.0],
        k: 0,
    };
    let capacity = CapacityConstraint {
        delta_bar: 5000.0,
        weights: vec![0.0, 1.0, 1.0],
        horizon,
    };
    assemble(&net, &state, &demand, &capacity, horizon).unwrap()
}

#[test]
fn matches_central_on_random_scenarios() {
    for seed in 0..6 {
        let problem = random_problem(100 + seed, seed % 2 == 0);
        let central = solve_centralized(&problem, &Default::default()).unwrap();
        let out = dcadmm::run(&problem, &AdmmConfig::default()).unwrap();
        let gap = (out.report.objective - central.plan.objective).abs() / central.plan.objective.abs().max(1e-9);
        assert!(gap < 1e-3, "seed {seed}: gap {gap:e}");
        assert!(out.report.consensus_residual <= 1e-4, "seed {seed}: {:?}", out.report.consensus_residual);
    }
}

#[test]
fn invariants_hold_on_every_iteration() {
    for seed in 0..4 {
        let problem = random_problem(200 + seed, true);
        let config = AdmmConfig {
            max_outer: 60,
            ..Default::default()
        };
        let out = dcadmm::run(&problem, &config).unwrap();
        assert!(out.report.max_theta_sum <= 1e-10, "θ sum {:e}", out.report.max_theta_sum);
        assert!(out.report.min_lambda >= -1e-9, "λ {:e}", out.report.min_lambda);
        assert_eq!(out.report.trace.len(), out.report.outer_iterations);
    }
}

#[test]
fn thread_count_does_not_change_the_result() {
    let problem = random_problem(300, true);
    let run = |threads| {
        let config = AdmmConfig {
            threads,
            max_outer: 40,
            ..Default::default()
        };
        dcadmm::run(&problem, &config).unwrap()
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.report, four.report);
    assert_eq!(one.u, four.u);
}

#[test]
fn single_subnetwork_is_rejected() {
    let net = FreewayNetwork::new(
        vec![Cell::standard(0, 1.0), Cell::standard(1, 1.0)],
        vec![OnRamp {
            cell_id: 0,
            metering_capacity: 800.0,
            max_metering: 1000.0,
        }],
        &[2],
    )
    .unwrap();
    let demand = DemandProfile::constant(1, 3, 1.0 / 90.0, 500.0);
    let problem = assemble(
        &net,
        &TrafficState::empty(&net),
        &demand,
        &CapacityConstraint::slack(&net, 3),
        3,
    )
    .unwrap();
    assert!(matches!(dcadmm::run(&problem, &AdmmConfig::default()), Err(AdmmError::SingleAgent(1))));
}

#[test]
fn bad_settings_are_rejected() {
    let problem = three_agent_problem();
    for config in [
        AdmmConfig { rho1: 0.0, ..Default::default() },
        AdmmConfig { rho2: f64::NAN, ..Default::default() },
        AdmmConfig { eps_primal: -1.0, ..Default::default() },
        AdmmConfig { max_inner: 0, ..Default::default() },
    ] {
        assert!(matches!(dcadmm::run(&problem, &config), Err(AdmmError::Config(_))));
    }
}

#[test]
#[should_panic(expected = "non-neighbor")]
fn bus_refuses_non_neighbors() {
    let mut bus = Bus::new(vec![vec![1], vec![0, 2], vec![1]]);
    bus.send(RoundMessage {
        from: 0,
        to: 2,
        outer: 1,
        inner: 1,
        payload: Payload::Dual(vec![0.0]),
    });
}

#[test]
fn dual_exchange_keeps_alpha_antisymmetric() {
    let problem = three_agent_problem();
    let config = AdmmConfig::default();
    let mut agents = init_agents(&problem, &config).unwrap();
    let share = problem.delta / agents.len() as f64;
    for _ in 0..5 {
        for a in agents.iter_mut() {
            a.local_update(config.rho1, share, config.local_tol).unwrap();
        }
        let lambdas: Vec<(usize, Vec<f64>)> = agents.iter().map(|a| (a.id, a.lambda.clone())).collect();
        for a in agents.iter_mut() {
            let inbox: Vec<(usize, Vec<f64>)> = lambdas
                .iter()
                .filter(|(j, _)| a.neighbors.contains(j))
                .cloned()
                .collect();
            a.dual_exchange(&inbox, config.rho2);
        }
        for a in &agents {
            for (slot, &j) in a.neighbors.iter().enumerate() {
                let back = agents[j].neighbors.iter().position(|&x| x == a.id).unwrap();
                for (x, y) in a.alpha[slot].iter().zip(&agents[j].alpha[back]) {
                    assert!((x + y).abs() < 1e-12, "α_ij {x} α_ji {y}");
                }
            }
        }
    }
}

#[test]
fn net_update_is_the_least_squares_average() {
    let problem = three_agent_problem();
    let config = AdmmConfig::default();
    let mut agents = init_agents(&problem, &config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for a in agents.iter_mut() {
        for v in a.u_hat.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
    }
    // u = (Σ EᵢᵀEᵢ)⁻¹ Σ Eᵢᵀ ûᵢ
    let n_net = problem.n_net();
    let mut ete = DMatrix::zeros(n_net, n_net);
    let mut rhs = DVector::zeros(n_net);
    for a in &agents {
        let e = a.block.e_matrix(n_net);
        ete += e.transpose() * &e;
        rhs += e.transpose() * DVector::from_column_slice(&a.u_hat);
    }
    let u = ete.lu().solve(&rhs).unwrap();

    let sent: Vec<(usize, Vec<(usize, f64)>)> = agents
        .iter()
        .map(|a| (a.id, a.block.net_index.iter().copied().zip(a.u_hat.iter().copied()).collect()))
        .collect();
    for a in agents.iter_mut() {
        let inbox: Vec<_> = sent.iter().filter(|(j, _)| a.neighbors.contains(j)).cloned().collect();
        a.net_update(&inbox);
        for (j, &g) in a.block.net_index.iter().enumerate() {
            assert!((a.net_view[j] - u[g]).abs() < 1e-12, "agent {} component {g}", a.id);
        }
    }
}

#[test]
fn huge_rho1_pins_the_local_update() {
    let problem = three_agent_problem();
    let config = AdmmConfig {
        rho1: 1e6,
        ..Default::default()
    };
    let mut agents = init_agents(&problem, &config).unwrap();
    let share = problem.delta / agents.len() as f64;
    for a in agents.iter_mut() {
        let view = a.net_view.clone();
        a.local_update(config.rho1, share, config.local_tol).unwrap();
        let drift = a.u_hat.iter().zip(&view).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(drift < 1e-4, "agent {} moved {drift:e}", a.id);
    }
}

#[test]
fn infinite_inner_threshold_runs_one_inner_pass() {
    let problem = three_agent_problem();
    let config = AdmmConfig {
        eps_inner: f64::INFINITY,
        eps_inner_step: f64::INFINITY,
        max_outer: 10,
        ..Default::default()
    };
    let out = dcadmm::run(&problem, &config).unwrap();
    assert!(out.report.trace.iter().all(|row| row.l == 1));
    assert_eq!(out.report.inner_iterations, out.report.outer_iterations);
}

#[test]
fn messages_only_travel_between_neighbors() {
    // The bus panics on any other message, so a full run is the check; the
    // count confirms traffic actually flowed.
    let problem = three_agent_problem();
    let out = dcadmm::run(&problem, &AdmmConfig { max_outer: 5, ..Default::default() }).unwrap();
    // Two links, both directions, one dual round per inner pass plus one share round per outer pass.
    let expected = 4 * (out.report.inner_iterations + out.report.outer_iterations);
    assert_eq!(out.report.messages, expected);
}
