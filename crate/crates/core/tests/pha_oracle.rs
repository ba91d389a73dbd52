//! Connectedness against path enumeration, and nesting of congestion areas.

mod common;

use common::pha_oracle::{brute_force_degree, random_instance};
use freeway_opt::network::{LinkEdge, LinkageGraph};
use freeway_opt::pha::{self, ConnectednessConfig, DensityHistory};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config<R: Rng>(rng: &mut R, n: usize) -> ConnectednessConfig {
    ConnectednessConfig {
        a: rng.gen_range(0.0..12.0),
        b: rng.gen_range(0.0..12.0),
        lambda: 0.0,
        seeds: vec![rng.gen_range(0..n)],
        distance_scale: if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.1..5.0) },
    }
}

#[test]
fn widest_path_equals_enumeration_on_small_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..500 {
        let (g, h) = random_instance(&mut rng);
        let cfg = config(&mut rng, g.n());
        for x in 0..g.n() {
            let fast = pha::connectedness_from(&g, x, &h, &cfg).unwrap();
            for y in 0..g.n() {
                let slow = brute_force_degree(&g, &h, &cfg, x, y);
                let ok = if slow.is_infinite() {
                    fast[y] == slow
                } else {
                    (fast[y] - slow).abs() <= 1e-12
                };
                assert!(ok, "case {case}: C({x},{y}) = {} vs {slow}", fast[y]);
            }
        }
    }
}

#[test]
fn diamond_with_two_slots() {
    // 0 - 1 - 3 and 0 - 2 - 3
    let edges = vec![
        LinkEdge { a: 0, b: 1, distance: 1.0 },
        LinkEdge { a: 1, b: 3, distance: 1.0 },
        LinkEdge { a: 0, b: 2, distance: 1.0 },
        LinkEdge { a: 2, b: 3, distance: 1.0 },
    ];
    let g = LinkageGraph::new(4, edges).unwrap();
    let h = DensityHistory::from_matrix(vec![
        vec![10.0, 10.0],
        vec![11.0, 14.0],
        vec![13.0, 10.5],
        vec![12.0, 10.0],
    ])
    .unwrap();
    let cfg = ConnectednessConfig {
        a: 10.0,
        b: 0.0,
        lambda: 0.0,
        seeds: vec![0],
        distance_scale: 1.0,
    };
    let c = pha::degree_of_connectedness(&g, 0, 3, &h, &cfg).unwrap();
    assert_eq!(c, brute_force_degree(&g, &h, &cfg, 0, 3));
    // slot 1 through vertex 2: min(10e^{-0.5}, 10e^{-0.5})
    assert!((c - 10.0 * (-0.5f64).exp()).abs() < 1e-12);
}

#[test]
fn member_sets_nest_as_the_threshold_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..500 {
        let (g, h) = random_instance(&mut rng);
        let mut cfg = config(&mut rng, g.n());
        cfg.seeds = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(0..g.n())).collect();
        let mut lambdas: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..(cfg.a + cfg.b + 1.0))).collect();
        lambdas.sort_by(f64::total_cmp);
        let sets: Vec<Vec<usize>> = lambdas
            .iter()
            .map(|&l| {
                let c = ConnectednessConfig { lambda: l, ..cfg.clone() };
                pha::identify_pha(&g, &h, &c, None).unwrap().members
            })
            .collect();
        for w in sets.windows(2) {
            assert!(w[1].iter().all(|v| w[0].contains(v)), "{:?} ⊄ {:?}", w[1], w[0]);
        }
        for s in &cfg.seeds {
            assert!(sets.last().unwrap().contains(s));
        }
    }
}

proptest! {
    #[test]
    fn extra_slot_never_lowers_connectedness(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, h) = random_instance(&mut rng);
        let cfg = config(&mut rng, g.n());
        let mut values = h.values.clone();
        for row in &mut values {
            row.push(rng.gen_range(0.0..10.0));
        }
        let more = DensityHistory::from_matrix(values).unwrap();
        let before = pha::connectedness_from(&g, cfg.seeds[0], &h, &cfg).unwrap();
        let after = pha::connectedness_from(&g, cfg.seeds[0], &more, &cfg).unwrap();
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn potential_is_bounded_by_a_plus_b(
        ra in 0.0f64..200.0, rb in 0.0f64..200.0, d in 0.001f64..50.0,
        a in 0.01f64..20.0, b in 0.01f64..20.0,
    ) {
        let g = LinkageGraph::new(2, vec![LinkEdge { a: 0, b: 1, distance: d }]).unwrap();
        let h = DensityHistory::from_matrix(vec![vec![ra], vec![rb]]).unwrap();
        let cfg = ConnectednessConfig { a, b, lambda: 0.0, seeds: vec![0], distance_scale: 1.0 };
        let v = pha::potential(&g, 0, 1, 0, &h, &cfg).unwrap();
        prop_assert!(v > 0.0 && v <= a + b);
    }
}
