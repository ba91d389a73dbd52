//! Freeway topology: cells, on-ramps, the subnetwork partition and the
//! linkage graph used for congestion-area identification.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network has no cells")]
    Empty,
    #[error("cell {id}: {reason}")]
    InvalidCell { id: usize, reason: String },
    #[error("cell ids must be 0..n in mainline order, found {found} at position {position}")]
    CellOrder { position: usize, found: usize },
    #[error("ramp on cell {cell}: {reason}")]
    InvalidRamp { cell: usize, reason: String },
    #[error("partition sizes sum to {got}, network has {expected} cells")]
    PartitionCover { got: usize, expected: usize },
    #[error("partition contains an empty subnetwork at index {0}")]
    EmptySubnetwork(usize),
    #[error("unknown subnetwork {0}")]
    UnknownSubnetwork(usize),
    #[error("time step {dt} h violates the CFL bound {bound} h at cell {cell}")]
    Cfl { cell: usize, dt: f64, bound: f64 },
    #[error("linkage edge ({a}, {b}): {reason}")]
    InvalidEdge { a: usize, b: usize, reason: String },
}

/// One mainline cell. Speeds in km/h, densities in veh/km, flows in veh/h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    pub length: f64,
    pub free_flow_speed: f64,
    pub wave_speed: f64,
    pub max_density: f64,
    pub max_flow: f64,
    pub split_ratio: f64,
    pub has_onramp: bool,
    /// Distance of the cell's upstream boundary from the network origin, km.
    pub position: f64,
}

impl Cell {
    /// A cell with the common highway defaults (60 km/h, 20 km/h wave
    /// speed, 120 veh/km, 3600 veh/h, no off-ramp).
    pub fn standard(id: usize, length: f64) -> Self {
        Cell {
            id,
            length,
            free_flow_speed: 60.0,
            wave_speed: 20.0,
            max_density: 120.0,
            max_flow: 3600.0,
            split_ratio: 0.0,
            has_onramp: false,
            position: 0.0,
        }
    }

    fn check(&self) -> Result<(), NetworkError> {
        let bad = |reason: &str| {
            Err(NetworkError::InvalidCell {
                id: self.id,
                reason: reason.to_string(),
            })
        };
        let positive = [
            (self.length, "length must be positive"),
            (self.free_flow_speed, "free-flow speed must be positive"),
            (self.wave_speed, "wave speed must be positive"),
            (self.max_density, "max density must be positive"),
            (self.max_flow, "max flow must be positive"),
        ];
        for (value, reason) in positive {
            if !(value.is_finite() && value > 0.0) {
                return bad(reason);
            }
        }
        if !(0.0..1.0).contains(&self.split_ratio) {
            return bad("split ratio must lie in [0, 1)");
        }
        if !self.position.is_finite() {
            return bad("position must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnRamp {
    pub cell_id: usize,
    /// Metering capacity c_i, veh/h.
    pub metering_capacity: f64,
    /// Upper bound C^max on the metered flow, veh/h.
    pub max_metering: f64,
}

/// A contiguous block of mainline cells handled by one agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subnetwork {
    pub id: usize,
    pub cells: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreewayNetwork {
    pub cells: Vec<Cell>,
    /// Sorted by cell, at most one per cell.
    pub ramps: Vec<OnRamp>,
    pub partition: Vec<Subnetwork>,
    /// Directed subnetwork adjacency (upstream, downstream).
    pub edges: Vec<(usize, usize)>,
    ramp_index: Vec<Option<usize>>,
}

impl FreewayNetwork {
    /// Validates the cells and ramps and cuts the mainline into consecutive
    /// subnetworks of the given sizes. `has_onramp` is derived from `ramps`;
    /// when every position is zero, positions become cumulative lengths.
    pub fn new(
        mut cells: Vec<Cell>,
        mut ramps: Vec<OnRamp>,
        partition_sizes: &[usize],
    ) -> Result<Self, NetworkError> {
        if cells.is_empty() {
            return Err(NetworkError::Empty);
        }
        for (position, cell) in cells.iter().enumerate() {
            if cell.id != position {
                return Err(NetworkError::CellOrder {
                    position,
                    found: cell.id,
                });
            }
            cell.check()?;
        }
        ramps.sort_by_key(|r| r.cell_id);
        let mut ramp_index = vec![None; cells.len()];
        for (idx, ramp) in ramps.iter().enumerate() {
            let bad = |reason: &str| NetworkError::InvalidRamp {
                cell: ramp.cell_id,
                reason: reason.to_string(),
            };
            if ramp.cell_id >= cells.len() {
                return Err(bad("cell does not exist"));
            }
            if ramp_index[ramp.cell_id].is_some() {
                return Err(bad("more than one ramp on the cell"));
            }
            if !(ramp.metering_capacity >= 0.0
                && ramp.metering_capacity <= ramp.max_metering
                && ramp.max_metering.is_finite())
            {
                return Err(bad("need 0 <= metering capacity <= max metering"));
            }
            ramp_index[ramp.cell_id] = Some(idx);
        }
        for (cell, slot) in cells.iter_mut().zip(&ramp_index) {
            cell.has_onramp = slot.is_some();
        }
        if cells.iter().all(|c| c.position == 0.0) {
            let mut x = 0.0;
            for cell in &mut cells {
                cell.position = x;
                x += cell.length;
            }
        }
        if let Some(w) = cells.windows(2).find(|w| w[1].position <= w[0].position) {
            return Err(NetworkError::InvalidCell {
                id: w[1].id,
                reason: "positions must increase along the mainline".to_string(),
            });
        }

        let total: usize = partition_sizes.iter().sum();
        if total != cells.len() {
            return Err(NetworkError::PartitionCover {
                got: total,
                expected: cells.len(),
            });
        }
        let mut partition = Vec::with_capacity(partition_sizes.len());
        let mut start = 0;
        for (id, &size) in partition_sizes.iter().enumerate() {
            if size == 0 {
                return Err(NetworkError::EmptySubnetwork(id));
            }
            partition.push(Subnetwork {
                id,
                cells: start..start + size,
            });
            start += size;
        }
        let edges = (1..partition.len()).map(|j| (j - 1, j)).collect();
        Ok(FreewayNetwork {
            cells,
            ramps,
            partition,
            edges,
            ramp_index,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_subnetworks(&self) -> usize {
        self.partition.len()
    }

    /// Index into `ramps` of the ramp attached to `cell`.
    pub fn ramp_of(&self, cell: usize) -> Option<usize> {
        self.ramp_index.get(cell).copied().flatten()
    }

    pub fn subnetwork_of(&self, cell: usize) -> Option<usize> {
        self.partition.iter().position(|s| s.cells.contains(&cell))
    }

    pub fn subnetwork(&self, i: usize) -> Result<&Subnetwork, NetworkError> {
        self.partition.get(i).ok_or(NetworkError::UnknownSubnetwork(i))
    }

    /// Upstream neighbor j with (j, i) ∈ ℰ.
    pub fn upstream_of(&self, i: usize) -> Option<usize> {
        self.edges.iter().find(|e| e.1 == i).map(|e| e.0)
    }

    pub fn downstream_of(&self, i: usize) -> Option<usize> {
        self.edges.iter().find(|e| e.0 == i).map(|e| e.1)
    }

    /// Undirected neighbor set N_i, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Rejects `dt` (hours) if any cell violates Δt ≤ L / max(v, ω).
    pub fn check_cfl(&self, dt: f64) -> Result<(), NetworkError> {
        for cell in &self.cells {
            let bound = cell.length / cell.free_flow_speed.max(cell.wave_speed);
            if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
                return Err(NetworkError::Cfl {
                    cell: cell.id,
                    dt,
                    bound,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkEdge {
    pub a: usize,
    pub b: usize,
    /// Geographic distance d(x̄, ȳ), km.
    pub distance: f64,
}

/// Undirected graph over cells with geographic edge lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkageGraph {
    pub vertices: Vec<usize>,
    pub edges: Vec<LinkEdge>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl LinkageGraph {
    /// Graph over vertices `0..n`. Self loops, duplicate edges and
    /// non-positive distances are rejected.
    pub fn new(n: usize, edges: Vec<LinkEdge>) -> Result<Self, NetworkError> {
        let mut adjacency = vec![Vec::new(); n];
        for (idx, e) in edges.iter().enumerate() {
            let bad = |reason: &str| NetworkError::InvalidEdge {
                a: e.a,
                b: e.b,
                reason: reason.to_string(),
            };
            if e.a >= n || e.b >= n {
                return Err(bad("vertex out of range"));
            }
            if e.a == e.b {
                return Err(bad("self loop"));
            }
            if !(e.distance.is_finite() && e.distance > 0.0) {
                return Err(bad("distance must be positive"));
            }
            if adjacency[e.a].iter().any(|&(v, _)| v == e.b) {
                return Err(bad("duplicate edge"));
            }
            adjacency[e.a].push((e.b, idx));
            adjacency[e.b].push((e.a, idx));
        }
        Ok(LinkageGraph {
            vertices: (0..n).collect(),
            edges,
            adjacency,
        })
    }

    pub fn n(&self) -> usize {
        self.vertices.len()
    }

    /// `(neighbor, edge index)` pairs of `v`.
    pub fn neighbors(&self, v: usize) -> &[(usize, usize)] {
        &self.adjacency[v]
    }

    pub fn distance(&self, a: usize, b: usize) -> Option<f64> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|&&(v, _)| v == b)
            .map(|&(_, e)| self.edges[e].distance)
    }
}

/// One vertex per cell, one edge per mainline adjacency, distance equal to
/// the difference of the cell positions.
pub fn build_linkage_graph(net: &FreewayNetwork) -> LinkageGraph {
    let edges = net
        .cells
        .windows(2)
        .map(|w| LinkEdge {
            a: w[0].id,
            b: w[1].id,
            distance: (w[1].position - w[0].position).abs(),
        })
        .collect();
    LinkageGraph::new(net.n_cells(), edges)
        .expect("validated networks have strictly increasing positions")
}

/// Per-step state-space blocks of one subnetwork.
///
/// The local state is `[ρ of each cell; q of each ramp]` and the local
/// decision is `[r of each ramp; φ of each cell]`, both in mainline order.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub b_ii: DMatrix<f64>,
    /// Upstream neighbor `j` and its block B_ij acting on u_j.
    pub b_ij: Vec<(usize, DMatrix<f64>)>,
}

/// Number of local state entries and decision entries of subnetwork `i`.
pub fn local_dims(net: &FreewayNetwork, i: usize) -> Result<(usize, usize), NetworkError> {
    let sub = net.subnetwork(i)?;
    let n_ramps = sub.cells.clone().filter(|&c| net.ramp_of(c).is_some()).count();
    let n_cells = sub.cells.len();
    Ok((n_cells + n_ramps, n_ramps + n_cells))
}

/// Blocks B_ii, B_ij with x_i(k+1) = x_i(k) + B_ii u_i(k) + Σ_j B_ij u_j(k) + ψ_i(k)
/// for a step of `dt` hours.
pub fn coupling_matrices(
    net: &FreewayNetwork,
    i: usize,
    dt: f64,
) -> Result<Coupling, NetworkError> {
    let sub = net.subnetwork(i)?.clone();
    let (nx, nu) = local_dims(net, i)?;
    let ramp_cells: Vec<usize> = sub.cells.clone().filter(|&c| net.ramp_of(c).is_some()).collect();
    let n_cells = sub.cells.len();
    let n_ramps = ramp_cells.len();
    let phi_col = |c: usize| n_ramps + (c - sub.cells.start);

    let mut b_ii = DMatrix::zeros(nx, nu);
    for c in sub.cells.clone() {
        let row = c - sub.cells.start;
        let gain = dt / net.cells[c].length;
        b_ii[(row, phi_col(c))] -= gain;
        if c > sub.cells.start {
            b_ii[(row, phi_col(c - 1))] += gain * (1.0 - net.cells[c - 1].split_ratio);
        }
    }
    for (k, &c) in ramp_cells.iter().enumerate() {
        let gain = dt / net.cells[c].length;
        b_ii[(c - sub.cells.start, k)] += gain;
        b_ii[(n_cells + k, k)] -= dt;
    }

    let mut b_ij = Vec::new();
    if let Some(j) = net.upstream_of(i) {
        let up = net.subnetwork(j)?;
        let (_, nu_j) = local_dims(net, j)?;
        let last = up.cells.end - 1;
        let mut block = DMatrix::zeros(nx, nu_j);
        block[(0, nu_j - 1)] =
            dt / net.cells[sub.cells.start].length * (1.0 - net.cells[last].split_ratio);
        b_ij.push((j, block));
    }
    Ok(Coupling { b_ii, b_ij })
}
