//! Scenario files, experiment runners and artifact emission.
//!
//! A scenario is a JSON document (see [`Scenario`]) describing the network,
//! initial state, ramp demand, density history, congestion-area settings,
//! capacity and solver parameters. Every runner writes its artifacts into
//! an output directory and returns the JSON-serializable summary it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::baselines::{Alinea, AlineaConfig, BaselineError};
use crate::central::{
    assemble, relaxation_slack, solve_centralized, CentralError, ControlPlan, HorizonProblem, PlanController,
    RelaxationSlack,
};
use crate::ctm::{self, Controller, CtmError, DemandProfile, NoControl, Simulation, TrafficState};
use crate::dcadmm::{self, AdmmConfig, AdmmError};
use crate::network::{build_linkage_graph, Cell, FreewayNetwork, NetworkError, OnRamp};
use crate::pha::{
    build_capacity_constraint, capacity_from_fraction, identify_pha, CapacityConstraint, ConnectednessConfig,
    DensityHistory, PhaError, PhaResult,
};
use crate::qp::QpSettings;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("scenario has {} problem(s): {}", .0.len(), .0.join("; "))]
    Invalid(Vec<String>),
    #[error("referenced file {0} does not exist")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Ctm(#[from] CtmError),
    #[error(transparent)]
    Pha(#[from] PhaError),
    #[error(transparent)]
    Central(#[from] CentralError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Invalid(_) => "invalid_scenario",
            CliError::MissingFile(_) => "missing_file",
            CliError::Network(NetworkError::Cfl { .. }) => "cfl",
            CliError::Network(_) => "network",
            CliError::Ctm(_) => "simulation",
            CliError::Pha(_) => "pha",
            CliError::Central(_) => "central",
            CliError::Admm(_) => "distributed",
            CliError::Baseline(_) => "baseline",
            CliError::Csv(_) => "csv",
            CliError::Json(_) => "json",
        }
    }

    /// Machine-readable form written to stderr by the binary.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::Invalid(problems) => v["problems"] = json!(problems),
            CliError::Network(NetworkError::Cfl { cell, dt, bound }) => {
                v["cell"] = json!(cell);
                v["dt_hours"] = json!(dt);
                v["bound_hours"] = json!(bound);
            }
            CliError::Parse { line, column, .. } => {
                v["line"] = json!(line);
                v["column"] = json!(column);
            }
            _ => {}
        }
        v
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Values applied to every cell unless the cell overrides them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellDefaults {
    pub length: f64,
    pub free_flow_speed: f64,
    pub max_density: f64,
    pub max_flow: f64,
    /// When absent, φ^max / (ρ^max − φ^max / v) so the fundamental diagram
    /// is triangular.
    pub wave_speed: Option<f64>,
}

impl Default for CellDefaults {
    fn default() -> Self {
        CellDefaults {
            length: 1.0,
            free_flow_speed: 60.0,
            max_density: 120.0,
            max_flow: 3600.0,
            wave_speed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellSpec {
    pub length: Option<f64>,
    pub free_flow_speed: Option<f64>,
    pub wave_speed: Option<f64>,
    pub max_density: Option<f64>,
    pub max_flow: Option<f64>,
    /// Off-ramp split ratio β.
    pub split_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSpec {
    pub cell: usize,
    pub max_metering: f64,
    /// Defaults to `max_metering`.
    #[serde(default)]
    pub metering_capacity: Option<f64>,
}

/// One value for all entries, or one per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Values {
    Uniform(f64),
    PerItem(Vec<f64>),
}

impl Default for Values {
    fn default() -> Self {
        Values::Uniform(0.0)
    }
}

impl Values {
    fn expand(&self, n: usize, what: &str, problems: &mut Vec<String>) -> Vec<f64> {
        match self {
            Values::Uniform(v) => vec![*v; n],
            Values::PerItem(v) => {
                if v.len() != n {
                    problems.push(format!("{what}: {} values for {n} entries", v.len()));
                }
                let mut v = v.clone();
                v.resize(n, 0.0);
                v
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSpec {
    pub density: Values,
    pub queue: Values,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Peak {
    /// First step of the peak.
    pub from: usize,
    /// First step after the peak.
    pub to: usize,
    pub rate: f64,
}

/// Arrivals at the ramp on `cell`: `base` outside the peaks, or an explicit
/// per-step `rates` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSpec {
    pub cell: usize,
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub peaks: Vec<Peak>,
    #[serde(default)]
    pub rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticHistory {
    pub center: usize,
    pub magnitude: f64,
    pub slots: usize,
    /// Falls back to the scenario seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistorySpec {
    /// Path relative to the scenario file.
    Csv(PathBuf),
    /// `values[cell][slot]`.
    Inline(Vec<Vec<f64>>),
    Synthetic(SyntheticHistory),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacitySpec {
    /// δ̄ in veh/h; takes precedence over `fraction`.
    pub delta_bar: Option<f64>,
    /// γ in δ̄ = γ · Σ φ^max over the area's cells.
    pub fraction: f64,
    /// h_i for every subnetwork of the area.
    pub weight: f64,
}

impl Default for CapacitySpec {
    fn default() -> Self {
        CapacitySpec {
            delta_bar: None,
            fraction: 1.0,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    #[default]
    NoControl,
    Alinea,
    Central,
    Distributed,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::NoControl => "no-control",
            ControllerKind::Alinea => "alinea",
            ControllerKind::Central => "central",
            ControllerKind::Distributed => "dc-admm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlineaSpec {
    pub gain: f64,
    /// ρ̂ as a fraction of the fed cell's critical density.
    pub setpoint_fraction: f64,
    /// Explicit ρ̂ per ramp; overrides `setpoint_fraction`.
    pub setpoints: Option<Vec<f64>>,
}

impl Default for AlineaSpec {
    fn default() -> Self {
        AlineaSpec {
            gain: AlineaConfig::DEFAULT_GAIN,
            setpoint_fraction: 1.0,
            setpoints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub dt_seconds: f64,
    pub horizon: usize,
    #[serde(default)]
    pub defaults: CellDefaults,
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub onramps: Vec<RampSpec>,
    /// Cells per subnetwork, upstream first.
    pub partition: Vec<usize>,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub demand: Vec<DemandSpec>,
    #[serde(default)]
    pub history: Option<HistorySpec>,
    #[serde(default)]
    pub pha: Option<ConnectednessConfig>,
    #[serde(default)]
    pub capacity: CapacitySpec,
    #[serde(default)]
    pub solver: AdmmConfig,
    #[serde(default)]
    pub controller: ControllerKind,
    #[serde(default)]
    pub alinea: AlineaSpec,
    #[serde(default)]
    pub seed: u64,
}

/// Command-line overrides applied on top of a scenario.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub rho1: Option<f64>,
    pub rho2: Option<f64>,
    pub max_outer: Option<usize>,
    pub threads: Option<usize>,
    pub controller: Option<ControllerKind>,
}

impl Overrides {
    pub fn apply(&self, s: &mut Scenario) {
        if let (Some(l), Some(p)) = (self.lambda, s.pha.as_mut()) {
            p.lambda = l;
        }
        if let Some(v) = self.rho1 {
            s.solver.rho1 = v;
        }
        if let Some(v) = self.rho2 {
            s.solver.rho2 = v;
        }
        if let Some(v) = self.max_outer {
            s.solver.max_outer = v;
        }
        if let Some(v) = self.threads {
            s.solver.threads = v;
        }
        if let Some(c) = self.controller {
            s.controller = c;
        }
    }
}

/// A validated scenario with its network, state, demand and history built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: Scenario,
    pub net: FreewayNetwork,
    /// Δt in hours.
    pub dt: f64,
    pub initial: TrafficState,
    pub demand: DemandProfile,
    pub history: Option<DensityHistory>,
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Experiment, CliError> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let scenario: Scenario = serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Experiment::new(scenario, base)
}

impl Experiment {
    /// Validates `scenario`; relative paths resolve against `base_dir`.
    pub fn new(scenario: Scenario, base_dir: &Path) -> Result<Self, CliError> {
        let mut problems = Vec::new();
        if scenario.schema_version != SCHEMA_VERSION {
            problems.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                scenario.schema_version
            ));
        }
        if !(scenario.dt_seconds > 0.0 && scenario.dt_seconds.is_finite()) {
            problems.push(format!("dt_seconds must be positive, got {}", scenario.dt_seconds));
        }
        if scenario.horizon == 0 {
            problems.push("horizon must be at least 1".into());
        }
        if scenario.cells.is_empty() {
            problems.push("cells: at least one cell is required".into());
        }
        let n = scenario.cells.len();
        for r in &scenario.onramps {
            if r.cell >= n {
                problems.push(format!("onramps: cell {} does not exist", r.cell));
            }
        }
        for d in &scenario.demand {
            if !scenario.onramps.iter().any(|r| r.cell == d.cell) {
                problems.push(format!("demand: cell {} has no on-ramp", d.cell));
            }
            if let Some(rates) = &d.rates {
                if rates.len() < scenario.horizon {
                    problems.push(format!(
                        "demand: cell {} lists {} rates for horizon {}",
                        d.cell,
                        rates.len(),
                        scenario.horizon
                    ));
                }
            }
            for p in &d.peaks {
                if p.from > p.to {
                    problems.push(format!("demand: cell {} has a peak ending before it starts", d.cell));
                }
            }
        }
        if let Some(p) = &scenario.pha {
            if let Err(e) = p.validate() {
                problems.push(format!("pha: {e}"));
            }
            if p.seeds.iter().any(|&s| s >= n) {
                problems.push("pha: seed cell out of range".into());
            }
        }
        if let Some(d) = scenario.capacity.delta_bar {
            if !(d > 0.0 && d.is_finite()) {
                problems.push(format!("capacity.delta_bar must be positive, got {d}"));
            }
        }
        if !(scenario.capacity.fraction > 0.0 && scenario.capacity.weight > 0.0) {
            problems.push("capacity: fraction and weight must be positive".into());
        }
        if let Err(e) = scenario.solver.validate() {
            problems.push(format!("solver: {e}"));
        }

        let d = &scenario.defaults;
        let cells: Vec<Cell> = scenario
            .cells
            .iter()
            .enumerate()
            .map(|(id, c)| {
                let free_flow_speed = c.free_flow_speed.unwrap_or(d.free_flow_speed);
                let max_density = c.max_density.unwrap_or(d.max_density);
                let max_flow = c.max_flow.unwrap_or(d.max_flow);
                let triangular = max_flow / (max_density - max_flow / free_flow_speed);
                Cell {
                    id,
                    length: c.length.unwrap_or(d.length),
                    free_flow_speed,
                    wave_speed: c.wave_speed.or(d.wave_speed).unwrap_or(triangular),
                    max_density,
                    max_flow,
                    split_ratio: c.split_ratio,
                    has_onramp: false,
                    position: 0.0,
                }
            })
            .collect();
        let initial_density = scenario.initial.density.expand(n, "initial.density", &mut problems);
        let initial_queue = scenario
            .initial
            .queue
            .expand(scenario.onramps.len(), "initial.queue", &mut problems);
        if !problems.is_empty() {
            return Err(CliError::Invalid(problems));
        }

        let ramps: Vec<OnRamp> = scenario
            .onramps
            .iter()
            .map(|r| OnRamp {
                cell_id: r.cell,
                metering_capacity: r.metering_capacity.unwrap_or(r.max_metering),
                max_metering: r.max_metering,
            })
            .collect();
        let net = FreewayNetwork::new(cells, ramps, &scenario.partition)?;
        let dt = scenario.dt_seconds / 3600.0;
        net.check_cfl(dt)?;

        // Ramps are sorted by cell inside the network; queue entries follow the file order.
        let mut queue = vec![0.0; net.ramps.len()];
        for (entry, q) in scenario.onramps.iter().zip(&initial_queue) {
            queue[net.ramp_of(entry.cell).expect("validated ramp")] = *q;
        }
        let initial = TrafficState {
            density: initial_density,
            queue,
            k: 0,
        };
        initial.validate(&net)?;

        let mut rates = vec![vec![0.0; scenario.horizon]; net.ramps.len()];
        for entry in &scenario.demand {
            let r = net.ramp_of(entry.cell).expect("validated ramp");
            rates[r] = match &entry.rates {
                Some(v) => v[..scenario.horizon].to_vec(),
                None => (0..scenario.horizon)
                    .map(|k| {
                        entry.peaks
                            .iter()
                            .find(|p| (p.from..p.to).contains(&k))
                            .map_or(entry.base, |p| p.rate)
                    })
                    .collect(),
            };
        }
        let demand = DemandProfile { dt, rates };
        demand.validate(&net)?;

        let history = match &scenario.history {
            None => None,
            Some(HistorySpec::Inline(values)) => Some(DensityHistory::from_matrix(values.clone())?),
            Some(HistorySpec::Csv(rel)) => {
                let path = base_dir.join(rel);
                if !path.exists() {
                    return Err(CliError::MissingFile(path));
                }
                let file = fs::File::open(&path).map_err(io_err(&path))?;
                Some(DensityHistory::read_csv(file)?)
            }
            Some(HistorySpec::Synthetic(s)) => Some(generate_synthetic_history(
                &net,
                s.center,
                s.magnitude,
                s.slots,
                s.seed.unwrap_or(scenario.seed),
            )),
        };
        if let Some(h) = &history {
            if h.n_cells() != net.n_cells() {
                return Err(CliError::Invalid(vec![format!(
                    "history has {} cells, network has {}",
                    h.n_cells(),
                    net.n_cells()
                )]));
            }
        }
        Ok(Experiment {
            scenario,
            net,
            dt,
            initial,
            demand,
            history,
        })
    }

    /// Area identification at threshold `lambda` (scenario value when `None`).
    pub fn pha(&self, lambda: Option<f64>) -> Result<Option<PhaResult>, CliError> {
        let (Some(config), Some(history)) = (&self.scenario.pha, &self.history) else {
            return Ok(None);
        };
        let mut config = config.clone();
        if let Some(l) = lambda {
            config.lambda = l;
        }
        let graph = build_linkage_graph(&self.net);
        Ok(Some(identify_pha(&graph, history, &config, Some(&self.net))?))
    }

    /// Capacity constraint over the identified area; slack without one.
    pub fn capacity(&self, pha: Option<&PhaResult>) -> Result<CapacityConstraint, CliError> {
        let horizon = self.scenario.horizon;
        let Some(pha) = pha else {
            return Ok(CapacityConstraint::slack(&self.net, horizon));
        };
        let settings = &self.scenario.capacity;
        let delta_bar = settings
            .delta_bar
            .unwrap_or_else(|| capacity_from_fraction(&self.net, pha, settings.fraction));
        let h = vec![settings.weight; self.net.n_subnetworks()];
        Ok(build_capacity_constraint(pha, delta_bar, &h, horizon)?)
    }

    /// The horizon problem with the scenario's area and capacity.
    pub fn problem(&self) -> Result<(HorizonProblem, Option<PhaResult>), CliError> {
        let pha = self.pha(None)?;
        let capacity = self.capacity(pha.as_ref())?;
        let problem = assemble(&self.net, &self.initial, &self.demand, &capacity, self.scenario.horizon)?;
        Ok((problem, pha))
    }

    pub fn alinea(&self) -> Result<Alinea, CliError> {
        let settings = &self.scenario.alinea;
        let mut config = AlineaConfig::critical(&self.net, settings.setpoint_fraction);
        config.gain = settings.gain;
        if let Some(s) = &settings.setpoints {
            config.setpoints = s.clone();
        }
        Ok(Alinea::new(&self.net, config)?)
    }

    pub fn simulate_with(&self, controller: &mut dyn Controller) -> Result<Simulation, CliError> {
        Ok(ctm::simulate(
            &self.net,
            &self.initial,
            &self.demand,
            controller,
            self.scenario.horizon,
        )?)
    }
}

/// Deterministic history with a congestion bell around `center`: the bell
/// grows and fades over the slots, and seeded noise of 2% of the magnitude
/// is added. Magnitude 0 gives a uniform field.
pub fn generate_synthetic_history(
    net: &FreewayNetwork,
    center: usize,
    magnitude: f64,
    slots: usize,
    seed: u64,
) -> DensityHistory {
    const WIDTH_CELLS: f64 = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = slots.max(1);
    let values = net
        .cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let base = 0.2 * cell.max_density;
            let offset = c as f64 - center as f64;
            let bell = (-offset * offset / (2.0 * WIDTH_CELLS * WIDTH_CELLS)).exp();
            (0..slots)
                .map(|t| {
                    let phase = (std::f64::consts::PI * (t as f64 + 1.0) / (slots as f64 + 1.0)).sin();
                    let noise = if magnitude > 0.0 {
                        rng.gen_range(-0.02..0.02) * magnitude
                    } else {
                        0.0
                    };
                    (base + magnitude * bell * phase + noise).clamp(0.0, cell.max_density)
                })
                .collect()
        })
        .collect();
    DensityHistory::from_matrix(values).expect("generated history is well formed")
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))
}

/// Writes through a temporary file so readers never see a partial artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), CliError>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Density matrix (cell × step) of a simulation, readable as a history.
pub fn density_matrix(sim: &Simulation) -> DensityHistory {
    let n = sim.states.first().map_or(0, |s| s.density.len());
    let values = (0..n)
        .map(|c| sim.states.iter().map(|s| s.density[c]).collect())
        .collect();
    DensityHistory {
        slots: (0..sim.states.len()).map(|k| format!("k{k}")).collect(),
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTraceRow {
    pub strategy: String,
    pub k: usize,
    /// Σ φ over the mainline, veh/h.
    pub mainline_flow: f64,
    /// Σ r over the on-ramps, veh/h.
    pub ramp_flow: f64,
    /// Off-ramp flow plus the sink outflow, veh/h.
    pub exit_flow: f64,
    pub vehicles: f64,
}

pub fn flow_trace(strategy: &str, net: &FreewayNetwork, sim: &Simulation) -> Vec<FlowTraceRow> {
    sim.flows
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let last = net.n_cells() - 1;
            let exits: f64 = net.cells[..last]
                .iter()
                .zip(&f.outflow)
                .map(|(c, phi)| c.split_ratio * phi)
                .sum::<f64>()
                + f.outflow[last];
            FlowTraceRow {
                strategy: strategy.to_string(),
                k,
                mainline_flow: f.outflow.iter().sum(),
                ramp_flow: f.ramp_flow.iter().sum(),
                exit_flow: exits,
                vehicles: sim.states[k].vehicles(net),
            }
        })
        .collect()
}

pub fn read_flow_trace<R: std::io::Read>(reader: R) -> Result<Vec<FlowTraceRow>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub strategy: String,
    pub ttt: f64,
    pub steps: usize,
    pub clips: usize,
}

/// Runs the scenario's controller and writes `trajectory.csv` and `simulate.json`.
pub fn run_simulate(exp: &Experiment, out: &Path) -> Result<SimulateReport, CliError> {
    create_dir(out)?;
    let kind = exp.scenario.controller;
    let sim = match kind {
        ControllerKind::NoControl => exp.simulate_with(&mut NoControl)?,
        ControllerKind::Alinea => exp.simulate_with(&mut exp.alinea()?)?,
        ControllerKind::Central => {
            let (problem, _) = exp.problem()?;
            let plan = solve_centralized(&problem, &QpSettings::default())?.plan;
            exp.simulate_with(&mut PlanController::new(plan))?
        }
        ControllerKind::Distributed => {
            let (problem, _) = exp.problem()?;
            let plan = dcadmm::run(&problem, &exp.scenario.solver)?.plan;
            exp.simulate_with(&mut PlanController::new(plan))?
        }
    };
    let bytes = csv_bytes(|buf| Ok(ctm::write_trajectory_csv(buf, &exp.net, &sim)?))?;
    write_atomic(&out.join("trajectory.csv"), &bytes)?;
    let report = SimulateReport {
        strategy: kind.label().to_string(),
        ttt: sim.ttt,
        steps: sim.flows.len(),
        clips: sim.clips.len(),
    };
    write_json(&out.join("simulate.json"), &report)?;
    Ok(report)
}

/// Identifies the area at each threshold (the scenario's when empty) and
/// writes `pha.json`.
pub fn run_identify_pha(exp: &Experiment, lambdas: &[f64], out: &Path) -> Result<Vec<PhaResult>, CliError> {
    create_dir(out)?;
    let mut results = Vec::new();
    let sweep: Vec<Option<f64>> = if lambdas.is_empty() {
        vec![None]
    } else {
        lambdas.iter().copied().map(Some).collect()
    };
    for l in sweep {
        match exp.pha(l)? {
            Some(r) => results.push(r),
            None => {
                return Err(CliError::Invalid(vec![
                    "identify-pha needs both `pha` and `history` in the scenario".into(),
                ]))
            }
        }
    }
    let body: Vec<serde_json::Value> = results
        .iter()
        .map(|r| {
            let mut v = r.to_json();
            v["extent_km"] = json!(r.extent_km(&exp.net));
            v
        })
        .collect();
    write_json(&out.join("pha.json"), &json!({ "results": body }))?;
    Ok(results)
}

fn write_plan(exp: &Experiment, plan: &ControlPlan, out: &Path) -> Result<(), CliError> {
    let bytes = csv_bytes(|buf| Ok(plan.write_csv(buf, &exp.net)?))?;
    write_atomic(&out.join("plan.csv"), &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralReport {
    pub objective: f64,
    pub replay_ttt: f64,
    pub replay_clips: usize,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub relaxation: RelaxationSlack,
    pub pha_subnetworks: Vec<usize>,
    pub wall_clock_s: f64,
}

/// Writes `plan.csv` and `central.json`.
pub fn run_optimize_central(exp: &Experiment, out: &Path) -> Result<CentralReport, CliError> {
    create_dir(out)?;
    let start = Instant::now();
    let (problem, pha) = exp.problem()?;
    let sol = solve_centralized(&problem, &QpSettings::default())?;
    let wall_clock_s = start.elapsed().as_secs_f64();
    let replay = exp.simulate_with(&mut PlanController::new(sol.plan.clone()))?;
    write_plan(exp, &sol.plan, out)?;
    let report = CentralReport {
        objective: sol.plan.objective,
        replay_ttt: replay.ttt,
        replay_clips: replay.clips.len(),
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        relaxation: relaxation_slack(&exp.net, &sol.plan, &exp.demand)?,
        pha_subnetworks: pha.map(|p| p.subnetworks).unwrap_or_default(),
        wall_clock_s,
    };
    write_json(&out.join("central.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributedReport {
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub objective: f64,
    pub consensus_residual: f64,
    pub capacity_violation: f64,
    pub max_theta_sum: f64,
    pub min_lambda: f64,
    pub messages: usize,
    pub replay_ttt: f64,
    pub replay_clips: usize,
    pub pha_subnetworks: Vec<usize>,
    pub wall_clock_s: f64,
}

/// Writes `plan.csv`, `report.json` and `trace.csv`.
pub fn run_optimize_distributed(exp: &Experiment, out: &Path) -> Result<DistributedReport, CliError> {
    distributed(exp, out).map(|(report, _)| report)
}

fn distributed(exp: &Experiment, out: &Path) -> Result<(DistributedReport, Simulation), CliError> {
    create_dir(out)?;
    let (problem, pha) = exp.problem()?;
    let outcome = dcadmm::run(&problem, &exp.scenario.solver)?;
    let replay = exp.simulate_with(&mut PlanController::new(outcome.plan.clone()))?;
    write_plan(exp, &outcome.plan, out)?;
    let bytes = csv_bytes(|buf| Ok(outcome.report.write_trace_csv(buf)?))?;
    write_atomic(&out.join("trace.csv"), &bytes)?;
    let r = &outcome.report;
    let report = DistributedReport {
        converged: r.converged,
        outer_iterations: r.outer_iterations,
        inner_iterations: r.inner_iterations,
        objective: r.objective,
        consensus_residual: r.consensus_residual,
        capacity_violation: r.capacity_violation,
        max_theta_sum: r.max_theta_sum,
        min_lambda: r.min_lambda,
        messages: r.messages,
        replay_ttt: replay.ttt,
        replay_clips: replay.clips.len(),
        pha_subnetworks: pha.map(|p| p.subnetworks).unwrap_or_default(),
        wall_clock_s: outcome.wall_clock_s,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok((report, replay))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub ttt: Option<f64>,
    pub wall_clock_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaSummary {
    pub lambda: f64,
    pub members: Vec<usize>,
    pub subnetworks: Vec<usize>,
    pub extent_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub strategies: BTreeMap<String, StrategySummary>,
    /// 1 − TTT(dc-admm) / TTT(no-control).
    pub reduction_vs_no_control: Option<f64>,
    pub pha: Vec<PhaSummary>,
    pub solver: Option<DistributedReport>,
}

impl CompareReport {
    pub fn ttt(&self, strategy: &str) -> Option<f64> {
        self.strategies.get(strategy).and_then(|s| s.ttt)
    }
}

/// Runs no-control, ALINEA and DC-ADMM on one scenario. Each strategy
/// writes `density_<strategy>.csv`; the flow trace of all strategies goes
/// to `flow_trace.csv` and the summary to `summary.json`. A failing
/// strategy is recorded and the others still run. `lambdas` adds an area
/// sweep to the summary.
pub fn run_compare(exp: &Experiment, lambdas: &[f64], out: &Path) -> Result<CompareReport, CliError> {
    create_dir(out)?;
    let mut strategies = BTreeMap::new();
    let mut trace = Vec::new();
    let mut solver = None;

    let mut record = |name: &str, result: Result<(Simulation, f64), CliError>| -> Result<(), CliError> {
        let summary = match result {
            Ok((sim, wall_clock_s)) => {
                let bytes = csv_bytes(|buf| Ok(density_matrix(&sim).write_csv(buf)?))?;
                write_atomic(&out.join(format!("density_{name}.csv")), &bytes)?;
                trace.extend(flow_trace(name, &exp.net, &sim));
                StrategySummary {
                    ttt: Some(sim.ttt),
                    wall_clock_s,
                    error: None,
                }
            }
            Err(e) => StrategySummary {
                ttt: None,
                wall_clock_s: 0.0,
                error: Some(e.to_string()),
            },
        };
        strategies.insert(name.to_string(), summary);
        Ok(())
    };

    let timed = |f: &mut dyn FnMut() -> Result<Simulation, CliError>| {
        let start = Instant::now();
        f().map(|sim| (sim, start.elapsed().as_secs_f64()))
    };
    record("no-control", timed(&mut || exp.simulate_with(&mut NoControl)))?;
    record("alinea", timed(&mut || exp.simulate_with(&mut exp.alinea()?)))?;
    let result = timed(&mut || {
        let (report, replay) = distributed(exp, &out.join("dc-admm"))?;
        solver = Some(report);
        Ok(replay)
    });
    record("dc-admm", result)?;

    let bytes = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        for row in &trace {
            w.serialize(row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    })?;
    write_atomic(&out.join("flow_trace.csv"), &bytes)?;

    let mut pha = Vec::new();
    let sweep: Vec<Option<f64>> = if lambdas.is_empty() {
        vec![None]
    } else {
        lambdas.iter().copied().map(Some).collect()
    };
    for l in sweep {
        if let Some(r) = exp.pha(l)? {
            pha.push(PhaSummary {
                lambda: r.lambda,
                extent_km: r.extent_km(&exp.net),
                members: r.members,
                subnetworks: r.subnetworks,
            });
        }
    }
    let reduction = match (
        strategies.get("no-control").and_then(|s| s.ttt),
        strategies.get("dc-admm").and_then(|s| s.ttt),
    ) {
        (Some(base), Some(ours)) if base > 0.0 => Some(1.0 - ours / base),
        _ => None,
    };
    let report = CompareReport {
        strategies,
        reduction_vs_no_control: reduction,
        pha,
        solver,
    };
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}

/// Writes `history.csv` from the synthetic generator.
pub fn run_gen_history(
    exp: &Experiment,
    center: usize,
    magnitude: f64,
    slots: usize,
    seed: u64,
    out: &Path,
) -> Result<DensityHistory, CliError> {
    if center >= exp.net.n_cells() {
        return Err(CliError::Invalid(vec![format!("center cell {center} does not exist")]));
    }
    create_dir(out)?;
    let history = generate_synthetic_history(&exp.net, center, magnitude, slots, seed);
    let bytes = csv_bytes(|buf| Ok(history.write_csv(buf)?))?;
    write_atomic(&out.join("history.csv"), &bytes)?;
    Ok(history)
}
