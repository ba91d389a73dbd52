//! Brute-force connectedness: every simple path, every slot.

use freeway_opt::network::{LinkEdge, LinkageGraph};
use freeway_opt::pha::{ConnectednessConfig, DensityHistory};
use rand::Rng;

fn alpha_direct(h: &DensityHistory, g: &LinkageGraph, cfg: &ConnectednessConfig, x: usize, y: usize, t: usize) -> f64 {
    let d = g.distance(x, y).unwrap();
    cfg.a * (-(h.values[x][t] - h.values[y][t]).abs()).exp() + cfg.b * (-(cfg.distance_scale * d)).exp()
}

/// max over slots and simple paths of the min potential; +∞ on x = y.
pub fn brute_force_degree(
    g: &LinkageGraph,
    h: &DensityHistory,
    cfg: &ConnectednessConfig,
    x: usize,
    y: usize,
) -> f64 {
    if x == y {
        return f64::INFINITY;
    }
    let mut best = 0.0_f64;
    for t in 0..h.n_slots() {
        let mut visited = vec![false; g.n()];
        visited[x] = true;
        dfs(g, h, cfg, t, x, y, f64::INFINITY, &mut visited, &mut best);
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    g: &LinkageGraph,
    h: &DensityHistory,
    cfg: &ConnectednessConfig,
    t: usize,
    at: usize,
    target: usize,
    bottleneck: f64,
    visited: &mut [bool],
    best: &mut f64,
) {
    for &(v, _) in g.neighbors(at) {
        if visited[v] {
            continue;
        }
        let b = bottleneck.min(alpha_direct(h, g, cfg, at, v, t));
        if v == target {
            *best = best.max(b);
            continue;
        }
        visited[v] = true;
        dfs(g, h, cfg, t, v, target, b, visited, best);
        visited[v] = false;
    }
}

/// Random undirected graph on 2..=8 vertices with 1..=3 density slots.
pub fn random_instance<R: Rng>(rng: &mut R) -> (LinkageGraph, DensityHistory) {
    let n = rng.gen_range(2..=8);
    let p = rng.gen_range(0.2..0.7);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if rng.gen_bool(p) {
                edges.push(LinkEdge {
                    a,
                    b,
                    distance: rng.gen_range(0.05..2.0),
                });
            }
        }
    }
    let slots = rng.gen_range(1..=3);
    // Coarse densities make ties and equal potentials common.
    let values = (0..n)
        .map(|_| (0..slots).map(|_| rng.gen_range(0..12) as f64 * 0.75).collect())
        .collect();
    (
        LinkageGraph::new(n, edges).unwrap(),
        DensityHistory::from_matrix(values).unwrap(),
    )
}
