//! Potential-homogeneous-area identification by spatio-temporal
//! lambda-connectedness, and the capacity constraint built on it.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{FreewayNetwork, LinkageGraph};

#[derive(Debug, Error)]
pub enum PhaError {
    #[error("seed set is empty")]
    NoSeeds,
    #[error("vertex {0} is not in the graph")]
    UnknownVertex(usize),
    #[error("cells {0} and {1} are not adjacent")]
    NotAdjacent(usize, usize),
    #[error("path is empty")]
    EmptyPath,
    #[error("slot {0} is not in the history")]
    UnknownSlot(usize),
    #[error("history: {0}")]
    History(String),
    #[error("config: {0}")]
    Config(String),
    #[error("congestion area is empty")]
    EmptyArea,
    #[error("capacity must be positive, got {0}")]
    Capacity(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Historical densities: `values[cell][slot]` in veh/km.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHistory {
    pub slots: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl DensityHistory {
    pub fn new(slots: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self, PhaError> {
        let h = DensityHistory { slots, values };
        h.validate()?;
        Ok(h)
    }

    /// Slots named `t0, t1, ...`.
    pub fn from_matrix(values: Vec<Vec<f64>>) -> Result<Self, PhaError> {
        let n_slots = values.first().map_or(0, Vec::len);
        Self::new((0..n_slots).map(|t| format!("t{t}")).collect(), values)
    }

    pub fn n_cells(&self) -> usize {
        self.values.len()
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn validate(&self) -> Result<(), PhaError> {
        if self.slots.is_empty() {
            return Err(PhaError::History("at least one time slot is required".into()));
        }
        for (c, row) in self.values.iter().enumerate() {
            if row.len() != self.slots.len() {
                return Err(PhaError::History(format!(
                    "cell {c} has {} values for {} slots",
                    row.len(),
                    self.slots.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(PhaError::History(format!("cell {c} has invalid density {v}")));
            }
        }
        Ok(())
    }

    /// Reads `cell_id,t0,t1,...` with one row per cell, ids 0..n in order.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, PhaError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("cell_id") {
            return Err(PhaError::History("first column must be cell_id".into()));
        }
        let slots: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut values = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let id: usize = record[0]
                .trim()
                .parse()
                .map_err(|_| PhaError::History(format!("row {}: bad cell id {:?}", line + 2, &record[0])))?;
            if id != values.len() {
                return Err(PhaError::History(format!(
                    "row {}: expected cell {}, found {id}",
                    line + 2,
                    values.len()
                )));
            }
            let row = record
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| PhaError::History(format!("row {}: bad density {s:?}", line + 2)))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            values.push(row);
        }
        Self::new(slots, values)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PhaError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["cell_id".to_string()];
        header.extend(self.slots.iter().cloned());
        w.write_record(&header)?;
        for (c, row) in self.values.iter().enumerate() {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Weights of the potential function, the threshold Λ and the seed cells.
///
/// Geographic distances enter the potential as `distance_scale · d` with d
/// in km, so the unit of d can be chosen per data set (1000 for meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectednessConfig {
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
    pub seeds: Vec<usize>,
    #[serde(default = "unit")]
    pub distance_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl ConnectednessConfig {
    pub fn validate(&self) -> Result<(), PhaError> {
        if !(self.a >= 0.0 && self.b >= 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(PhaError::Config("a and b must be finite and nonnegative".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(PhaError::Config("lambda must be nonnegative".into()));
        }
        if !(self.distance_scale > 0.0 && self.distance_scale.is_finite()) {
            return Err(PhaError::Config("distance_scale must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(PhaError::NoSeeds);
        }
        Ok(())
    }
}

fn check_inputs(
    graph: &LinkageGraph,
    history: &DensityHistory,
    slot: usize,
) -> Result<(), PhaError> {
    if history.n_cells() != graph.n() {
        return Err(PhaError::History(format!(
            "history has {} cells, graph has {}",
            history.n_cells(),
            graph.n()
        )));
    }
    if slot >= history.n_slots() {
        return Err(PhaError::UnknownSlot(slot));
    }
    Ok(())
}

fn alpha(da: f64, db: f64, distance: f64, config: &ConnectednessConfig) -> f64 {
    config.a / (da - db).abs().exp() + config.b / (config.distance_scale * distance).abs().exp()
}

/// Neighbor connectivity α = a/e^{|ρ_x − ρ_y|} + b/e^{|d(x, y)|} at `slot`.
pub fn potential(
    graph: &LinkageGraph,
    x: usize,
    y: usize,
    slot: usize,
    history: &DensityHistory,
    config: &ConnectednessConfig,
) -> Result<f64, PhaError> {
    check_inputs(graph, history, slot)?;
    for v in [x, y] {
        if v >= graph.n() {
            return Err(PhaError::UnknownVertex(v));
        }
    }
    let d = graph.distance(x, y).ok_or(PhaError::NotAdjacent(x, y))?;
    Ok(alpha(history.values[x][slot], history.values[y][slot], d, config))
}

/// Smallest neighbor connectivity along `path` at `slot`.
pub fn path_connectivity(
    graph: &LinkageGraph,
    path: &[usize],
    slot: usize,
    history: &DensityHistory,
    config: &ConnectednessConfig,
) -> Result<f64, PhaError> {
    if path.len() < 2 {
        return Err(PhaError::EmptyPath);
    }
    path.windows(2).try_fold(f64::INFINITY, |acc, w| {
        Ok(acc.min(potential(graph, w[0], w[1], slot, history, config)?))
    })
}

/// Best path connectivity from `source` to every vertex at one slot.
/// The source maps to +∞ and unreachable vertices to 0.
pub fn widest_paths(
    graph: &LinkageGraph,
    source: usize,
    slot: usize,
    history: &DensityHistory,
    config: &ConnectednessConfig,
) -> Result<Vec<f64>, PhaError> {
    check_inputs(graph, history, slot)?;
    let n = graph.n();
    if source >= n {
        return Err(PhaError::UnknownVertex(source));
    }
    let mut best = vec![0.0_f64; n];
    let mut done = vec![false; n];
    best[source] = f64::INFINITY;
    for _ in 0..n {
        // Unsettled vertex with the widest known path; ties to the lowest id.
        let Some(u) = (0..n)
            .filter(|&v| !done[v] && best[v] > 0.0)
            .max_by(|&a, &b| best[a].total_cmp(&best[b]).then(b.cmp(&a)))
        else {
            break;
        };
        done[u] = true;
        for &(v, e) in graph.neighbors(u) {
            if done[v] {
                continue;
            }
            let w = alpha(
                history.values[u][slot],
                history.values[v][slot],
                graph.edges[e].distance,
                config,
            );
            let cand = best[u].min(w);
            if cand > best[v] {
                best[v] = cand;
            }
        }
    }
    Ok(best)
}

/// Degree of connectedness from `source` to every vertex: the widest path
/// value maximized over all history slots.
pub fn connectedness_from(
    graph: &LinkageGraph,
    source: usize,
    history: &DensityHistory,
    config: &ConnectednessConfig,
) -> Result<Vec<f64>, PhaError> {
    let mut out = vec![0.0_f64; graph.n()];
    for slot in 0..history.n_slots() {
        let w = widest_paths(graph, source, slot, history, config)?;
        for (o, v) in out.iter_mut().zip(w) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// C_ρ(x, y); +∞ when x = y and 0 when no path joins them.
pub fn degree_of_connectedness(
    graph: &LinkageGraph,
    x: usize,
    y: usize,
    history: &DensityHistory,
    config: &ConnectednessConfig,
) -> Result<f64, PhaError> {
    if y >= graph.n() {
        return Err(PhaError::UnknownVertex(y));
    }
    Ok(connectedness_from(graph, x, history, config)?[y])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaResult {
    /// Member cells, ascending.
    pub members: Vec<usize>,
    /// Per cell, the largest C_ρ from any seed (+∞ on seeds).
    pub degree: Vec<f64>,
    /// Subnetworks containing at least one member, ascending.
    pub subnetworks: Vec<usize>,
    pub lambda: f64,
}

impl PhaResult {
    /// `{members, C_values, subnetworks, lambda}` with `null` for +∞.
    pub fn to_json(&self) -> serde_json::Value {
        let c: Vec<serde_json::Value> = self
            .degree
            .iter()
            .map(|&v| {
                if v.is_finite() {
                    serde_json::json!(v)
                } else {
                    serde_json::Value::Null
                }
            })
            .collect();
        serde_json::json!({
            "members": self.members,
            "C_values": c,
            "subnetworks": self.subnetworks,
            "lambda": self.lambda,
        })
    }

    /// Spatial extent of the member set in km.
    pub fn extent_km(&self, net: &FreewayNetwork) -> f64 {
        self.members.iter().map(|&c| net.cells[c].length).sum()
    }
}

/// Seeds plus every cell whose connectedness to some seed reaches Λ.
/// Subnetworks are filled in when `net` is given.
pub fn identify_pha(
    graph: &LinkageGraph,
    history: &DensityHistory,
    config: &ConnectednessConfig,
    net: Option<&FreewayNetwork>,
) -> Result<PhaResult, PhaError> {
    config.validate()?;
    history.validate()?;
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    if let Some(&s) = seeds.iter().find(|&&s| s >= graph.n()) {
        return Err(PhaError::UnknownVertex(s));
    }
    let mut degree = vec![0.0_f64; graph.n()];
    for &s in &seeds {
        let c = connectedness_from(graph, s, history, config)?;
        for (d, v) in degree.iter_mut().zip(c) {
            *d = d.max(v);
        }
    }
    let members: Vec<usize> = (0..graph.n())
        .filter(|&v| seeds.binary_search(&v).is_ok() || degree[v] >= config.lambda)
        .collect();
    let subnetworks = match net {
        Some(net) => {
            let mut subs: Vec<usize> = members.iter().filter_map(|&c| net.subnetwork_of(c)).collect();
            subs.dedup();
            subs
        }
        None => Vec::new(),
    };
    Ok(PhaResult {
        members,
        degree,
        subnetworks,
        lambda: config.lambda,
    })
}

/// Σ_i h_i · (components of u_i(k)) ≤ δ̄ at every step k of the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityConstraint {
    /// δ̄, veh/h.
    pub delta_bar: f64,
    /// h_i per subnetwork; zero outside the congestion area.
    pub weights: Vec<f64>,
    pub horizon: usize,
}

impl CapacityConstraint {
    /// Stacked right-hand side δ = [δ̄ … δ̄]ᵀ.
    pub fn delta(&self) -> Vec<f64> {
        vec![self.delta_bar; self.horizon]
    }

    /// H̄_i = diag(h_i, …, h_i) acting on the `n_components` entries of u_i(k).
    pub fn h_bar(&self, i: usize, n_components: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal_element(n_components, n_components, self.weights[i])
    }

    /// A constraint that never binds on `net`.
    pub fn slack(net: &FreewayNetwork, horizon: usize) -> Self {
        let total: f64 = net.cells.iter().map(|c| c.max_flow).sum::<f64>()
            + net.ramps.iter().map(|r| r.max_metering).sum::<f64>();
        CapacityConstraint {
            delta_bar: total.max(1.0),
            weights: vec![0.0; net.n_subnetworks()],
            horizon,
        }
    }
}

/// Weights `h` (one per subnetwork) are kept on subnetworks of the area
/// and zeroed elsewhere.
pub fn build_capacity_constraint(
    pha: &PhaResult,
    delta_bar: f64,
    h: &[f64],
    horizon: usize,
) -> Result<CapacityConstraint, PhaError> {
    if !(delta_bar > 0.0 && delta_bar.is_finite()) {
        return Err(PhaError::Capacity(delta_bar));
    }
    if pha.subnetworks.is_empty() {
        return Err(PhaError::EmptyArea);
    }
    if let Some(w) = h.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(PhaError::Config(format!("weight {w} must be nonnegative")));
    }
    if let Some(&s) = pha.subnetworks.iter().find(|&&s| s >= h.len()) {
        return Err(PhaError::Config(format!("no weight for subnetwork {s}")));
    }
    let weights = (0..h.len())
        .map(|i| if pha.subnetworks.contains(&i) { h[i] } else { 0.0 })
        .collect();
    Ok(CapacityConstraint {
        delta_bar,
        weights,
        horizon,
    })
}

/// δ̄ = γ · Σ φ^max over the member cells.
pub fn capacity_from_fraction(net: &FreewayNetwork, pha: &PhaResult, gamma: f64) -> f64 {
    gamma * pha.members.iter().map(|&c| net.cells[c].max_flow).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LinkEdge;

    fn cfg(a: f64, b: f64, lambda: f64) -> ConnectednessConfig {
        ConnectednessConfig {
            a,
            b,
            lambda,
            seeds: vec![0],
            distance_scale: 1.0,
        }
    }

    fn line(distances: &[f64]) -> LinkageGraph {
        let edges = distances
            .iter()
            .enumerate()
            .map(|(i, &d)| LinkEdge {
                a: i,
                b: i + 1,
                distance: d,
            })
            .collect();
        LinkageGraph::new(distances.len() + 1, edges).unwrap()
    }

    #[test]
    fn potential_examples() {
        let g = line(&[0.5]);
        let h = DensityHistory::from_matrix(vec![vec![10.0], vec![12.0]]).unwrap();
        let a = potential(&g, 0, 1, 0, &h, &cfg(10.0, 10.0, 0.0)).unwrap();
        assert!((a - (10.0 * (-2.0f64).exp() + 10.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((a - 7.419).abs() < 1e-3);

        let tiny = line(&[1e-12]);
        let same = DensityHistory::from_matrix(vec![vec![3.0], vec![3.0]]).unwrap();
        assert!((potential(&tiny, 0, 1, 0, &same, &cfg(10.0, 10.0, 0.0)).unwrap() - 20.0).abs() < 1e-9);

        let far = DensityHistory::from_matrix(vec![vec![0.0], vec![1e6]]).unwrap();
        let v = potential(&g, 0, 1, 0, &far, &cfg(10.0, 10.0, 0.0)).unwrap();
        assert_eq!(v, 10.0 * (-0.5f64).exp());
    }

    #[test]
    fn non_adjacent_pair_is_rejected() {
        let g = line(&[1.0, 1.0]);
        let h = DensityHistory::from_matrix(vec![vec![0.0]; 3]).unwrap();
        assert!(matches!(
            potential(&g, 0, 2, 0, &h, &cfg(1.0, 1.0, 0.0)),
            Err(PhaError::NotAdjacent(0, 2))
        ));
    }

    #[test]
    fn path_connectivity_is_the_weakest_link() {
        // potentials along the chain: a e^{-|Δρ|} with b = 0
        let g = line(&[1.0, 1.0, 1.0]);
        let h = DensityHistory::from_matrix(vec![vec![0.0], vec![1.0], vec![3.0], vec![3.5]]).unwrap();
        let c = cfg(1.0, 0.0, 0.0);
        let p = path_connectivity(&g, &[0, 1, 2, 3], 0, &h, &c).unwrap();
        assert_eq!(p, (-2.0f64).exp());
        assert_eq!(
            path_connectivity(&g, &[0, 1], 0, &h, &c).unwrap(),
            potential(&g, 0, 1, 0, &h, &c).unwrap()
        );
        assert!(matches!(path_connectivity(&g, &[2], 0, &h, &c), Err(PhaError::EmptyPath)));
    }

    #[test]
    fn self_and_disconnected_conventions() {
        let g = LinkageGraph::new(3, vec![LinkEdge { a: 0, b: 1, distance: 1.0 }]).unwrap();
        let h = DensityHistory::from_matrix(vec![vec![0.0, 1.0]; 3]).unwrap();
        let c = cfg(1.0, 1.0, 0.0);
        assert_eq!(degree_of_connectedness(&g, 1, 1, &h, &c).unwrap(), f64::INFINITY);
        assert_eq!(degree_of_connectedness(&g, 0, 2, &h, &c).unwrap(), 0.0);
    }

    #[test]
    fn two_vertices_take_the_best_slot() {
        let g = line(&[1.0]);
        let h = DensityHistory::from_matrix(vec![vec![0.0, 0.0], vec![4.0, 1.0]]).unwrap();
        let c = cfg(2.0, 0.0, 0.0);
        assert_eq!(degree_of_connectedness(&g, 0, 1, &h, &c).unwrap(), 2.0 * (-1.0f64).exp());
    }

    #[test]
    fn threshold_extremes() {
        let g = line(&[1.0, 1.0, 1.0]);
        let h = DensityHistory::from_matrix(vec![vec![5.0], vec![9.0], vec![40.0], vec![0.0]]).unwrap();
        let all = identify_pha(&g, &h, &cfg(10.0, 10.0, 0.0), None).unwrap();
        assert_eq!(all.members, vec![0, 1, 2, 3]);
        let none = identify_pha(&g, &h, &cfg(10.0, 10.0, 20.1), None).unwrap();
        assert_eq!(none.members, vec![0]);
        let json = none.to_json();
        assert!(json["C_values"][0].is_null());
    }

    #[test]
    fn capacity_rows_follow_the_area() {
        let pha = PhaResult {
            members: vec![2],
            degree: vec![],
            subnetworks: vec![1],
            lambda: 0.5,
        };
        let cap = build_capacity_constraint(&pha, 1000.0, &[1.0, 2.0], 2).unwrap();
        assert_eq!(cap.weights, vec![0.0, 2.0]);
        assert_eq!(cap.delta(), vec![1000.0, 1000.0]);
        let hb = cap.h_bar(1, 3);
        assert_eq!(hb, DMatrix::from_diagonal_element(3, 3, 2.0));
        assert!(build_capacity_constraint(&pha, 0.0, &[1.0, 1.0], 2).is_err());
        let empty = PhaResult {
            subnetworks: vec![],
            ..pha
        };
        assert!(matches!(
            build_capacity_constraint(&empty, 10.0, &[1.0, 1.0], 2),
            Err(PhaError::EmptyArea)
        ));
    }

    #[test]
    fn history_csv_round_trip() {
        let h = DensityHistory::from_matrix(vec![vec![1.5, 2.0], vec![0.0, 7.25]]).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("cell_id,t0,t1\n"));
        assert_eq!(DensityHistory::read_csv(buf.as_slice()).unwrap(), h);
        assert!(DensityHistory::read_csv("cell_id,t0\n1,2.0\n".as_bytes()).is_err());
    }
}
