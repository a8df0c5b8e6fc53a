//! Experiment drivers, weighted norms and ensemble utilities.
//!
//! Each experiment takes a config with desk-scale defaults and returns a
//! report. Reports turn into an [`ExperimentOutput`]: CSV tables plus a JSON
//! summary holding the config echo, seeds and wall time.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fem::{BoundaryCondition, DiffusionOperator, FemError};
use crate::hybrid::{simulate_hybrid, HybridConfig, HybridError, NonNegGuard, Scheme, MacroStepper};
use crate::mesh::{build_disc, build_structured_unit_square, load_mesh, Mesh, MeshError};
use crate::model::{cell_geometry, parse_model, parse_model_with, CellGeometry, ModelError, ReactionModel, SimulationMode, SystemState};
use crate::moments::mean_evolve;
use crate::ssa::{trajectory_rng, JumpTable, Sampler, SamplerOptions, SsaError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("dimension mismatch: {values} values for {areas} cells")]
    DimensionMismatch { values: usize, areas: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ssa(#[from] SsaError),
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Area-weighted ℓ₂ norm and max norm of a cell vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct NormPair {
    pub l2: f64,
    pub linf: f64,
}

impl NormPair {
    pub fn scaled(self, f: f64) -> NormPair {
        NormPair { l2: self.l2 * f, linf: self.linf * f }
    }
}

pub fn weighted_norms(u: &[f64], areas: &[f64]) -> Result<NormPair> {
    if u.len() != areas.len() {
        return Err(HarnessError::DimensionMismatch { values: u.len(), areas: areas.len() });
    }
    let l2 = u.iter().zip(areas).map(|(v, a)| v * v * a).sum::<f64>().sqrt();
    let linf = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(NormPair { l2, linf })
}

/// Exact solution of the Neumann test problem on `[-1/2, 1/2]²` started
/// from `100 (1 - cos 2πx)`.
pub fn analytic_solution(x: f64, _y: f64, t: f64, gamma: f64) -> f64 {
    use std::f64::consts::PI;
    100.0 * (1.0 - (2.0 * PI * x).cos() * (-4.0 * gamma * PI * PI * t).exp())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Running sums and sums of squares of a vector-valued sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    n: u64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(len: usize) -> Self {
        MomentAccumulator { n: 0, sum: vec![0.0; len], sum_sq: vec![0.0; len] }
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.sum.len());
        self.n += 1;
        for ((s, q), v) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(x) {
            *s += v;
            *q += v * v;
        }
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        self.n += other.n;
        for (s, o) in self.sum.iter_mut().zip(&other.sum) {
            *s += o;
        }
        for (s, o) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *s += o;
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.sum.iter().map(|s| s / n).collect()
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.sum.len()];
        }
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| ((q - s * s / n) / (n - 1.0)).max(0.0))
            .collect()
    }

    /// Standard error of each entry of the mean.
    pub fn standard_error(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }
}

/// Trajectories handled by one work unit of [`ensemble_fold`].
pub const ENSEMBLE_CHUNK: usize = 64;

/// Folds `m` trajectories into an accumulator. Trajectories are grouped in
/// fixed chunks that are folded in index order and merged in chunk order,
/// so the result does not depend on scheduling.
pub fn ensemble_fold<A, E, I, F, G>(m: usize, parallel: bool, init: I, fold: F, merge: G) -> Result<A, E>
where
    A: Send,
    E: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, u64) -> Result<(), E> + Sync,
    G: Fn(&mut A, A),
{
    let chunks: Vec<(usize, usize)> =
        (0..m).step_by(ENSEMBLE_CHUNK).map(|s| (s, (s + ENSEMBLE_CHUNK).min(m))).collect();
    let run = |&(lo, hi): &(usize, usize)| -> Result<A, E> {
        let mut acc = init();
        for i in lo..hi {
            fold(&mut acc, i as u64)?;
        }
        Ok(acc)
    };
    let parts: Vec<Result<A, E>> =
        if parallel { chunks.par_iter().map(run).collect() } else { chunks.iter().map(run).collect() };
    let mut total = init();
    for p in parts {
        merge(&mut total, p?);
    }
    Ok(total)
}

/// How a mesh is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeshSpec {
    File { path: PathBuf },
    Square { n: usize, offset: [f64; 2] },
    Disc { radius: f64, rings: usize, vertices: Option<usize> },
}

impl MeshSpec {
    pub fn build(&self) -> Result<Mesh> {
        Ok(match self {
            MeshSpec::File { path } => load_mesh(path)?,
            MeshSpec::Square { n, offset } => {
                if *n == 0 {
                    return Err(HarnessError::Config("square mesh needs n >= 1".into()));
                }
                build_structured_unit_square(*n, *offset)
            }
            MeshSpec::Disc { radius, rings, vertices } => build_disc(*radius, *rings, *vertices)?,
        })
    }
}

/// Concentrations `x_j / vol_j`, cell-major like [`SystemState`].
pub fn concentrations(state: &SystemState, geom: &[CellGeometry]) -> Vec<f64> {
    let n = state.num_species();
    state.values().iter().enumerate().map(|(i, v)| v / geom[i / n].vol).collect()
}

/// Writes serializable rows as CSV with a header line.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Per-cell table `cell,x,y,vol,<species...>` of a state.
pub fn state_to_csv(model: &ReactionModel, geom: &[CellGeometry], state: &SystemState) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell".to_string(), "x".into(), "y".into(), "vol".into()];
    header.extend(model.species.iter().map(|s| s.name.clone()));
    w.write_record(&header)?;
    for (j, g) in geom.iter().enumerate() {
        let mut rec = vec![j.to_string(), g.cx.to_string(), g.cy.to_string(), g.vol.to_string()];
        rec.extend(state.cell(j).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Tables and summary of one run, ready to be written to a directory.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub experiment: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub results: serde_json::Value,
    pub tables: Vec<(String, String)>,
    pub wall_seconds: f64,
}

impl ExperimentOutput {
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "experiment": self.experiment,
            "seed": self.seed,
            "wall_seconds": self.wall_seconds,
            "config": self.config,
            "results": self.results,
            "tables": self.tables.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        })
    }

    /// Writes every table and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, body) in &self.tables {
            fs::write(dir.join(name), body)?;
        }
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary())?)?;
        Ok(())
    }
}

fn output<C: Serialize, R: Serialize>(
    experiment: &str,
    seed: u64,
    cfg: &C,
    results: &R,
    tables: Vec<(String, String)>,
    start: Instant,
) -> Result<ExperimentOutput> {
    Ok(ExperimentOutput {
        experiment: experiment.into(),
        seed,
        config: serde_json::to_value(cfg)?,
        results: serde_json::to_value(results)?,
        tables,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    Convergence,
    Table1,
    Bistable,
    HybridBenchmark,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 4] =
        [ExperimentId::Convergence, ExperimentId::Table1, ExperimentId::Bistable, ExperimentId::HybridBenchmark];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Convergence => "convergence",
            ExperimentId::Table1 => "table1",
            ExperimentId::Bistable => "bistable",
            ExperimentId::HybridBenchmark => "hybrid-benchmark",
        }
    }
}

impl FromStr for ExperimentId {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown experiment `{s}`")))
    }
}

/// Settings shared by every experiment driver that the CLI can override.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOverrides {
    pub seed: Option<u64>,
    /// Ensemble size. For the diffusion table it replaces the list of sizes.
    pub ensemble: Option<usize>,
}

/// Runs an experiment with its default config and the given overrides.
pub fn run_experiment(id: ExperimentId, ov: &ExperimentOverrides) -> Result<ExperimentOutput> {
    if ov.ensemble == Some(0) {
        return Err(HarnessError::Config("ensemble size must be at least 1".into()));
    }
    match id {
        ExperimentId::Convergence => {
            let cfg = ConvergenceConfig::default();
            let start = Instant::now();
            let rep = run_diffusion_convergence(&cfg)?;
            let tables = vec![("convergence.csv".into(), rows_to_csv(&rep.rows)?)];
            output(id.name(), 0, &cfg, &rep, tables, start)
        }
        ExperimentId::Table1 => {
            let mut cfg = DiffusionTableConfig::default();
            if let Some(s) = ov.seed {
                cfg.seed = s;
            }
            if let Some(m) = ov.ensemble {
                cfg.trajectories = vec![m];
            }
            let start = Instant::now();
            let rep = run_stochastic_diffusion_table(&cfg)?;
            let tables = vec![("table1.csv".into(), rows_to_csv(&rep.rows)?)];
            output(id.name(), cfg.seed, &cfg, &rep, tables, start)
        }
        ExperimentId::Bistable => {
            let mut cfg = BistableConfig::default();
            if let Some(s) = ov.seed {
                cfg.seed = s;
            }
            let start = Instant::now();
            let rep = run_bistable(&cfg)?;
            let mut tables = vec![("bistable.csv".into(), rows_to_csv(&rep.rows)?)];
            tables.extend(rep.snapshots.iter().cloned());
            output(id.name(), cfg.seed, &cfg, &rep.rows, tables, start)
        }
        ExperimentId::HybridBenchmark => {
            let mut cfg = HybridBenchmarkConfig::default();
            if let Some(s) = ov.seed {
                cfg.seed = s;
            }
            if let Some(m) = ov.ensemble {
                cfg.trajectories = m;
                cfg.runtime_trajectories = m;
                cfg.phase_trajectories = m;
            }
            let start = Instant::now();
            let rep = run_hybrid_benchmark(&cfg)?;
            let tables = vec![
                ("accuracy.csv".into(), rows_to_csv(&rep.accuracy)?),
                ("runtime.csv".into(), rows_to_csv(&rep.runtime)?),
                ("phases.csv".into(), rows_to_csv(&rep.phases)?),
            ];
            output(id.name(), cfg.seed, &cfg, &rep, tables, start)
        }
    }
}

// Deterministic convergence.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    /// Structured meshes with `n` squares per side.
    pub ns: Vec<usize>,
    /// Mesh used for the single-resolution error check.
    pub reference_n: usize,
    pub gamma: f64,
    pub t_end: f64,
    pub dt: f64,
    pub scheme: Scheme,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { ns: vec![8, 16, 32], reference_n: 6, gamma: 1e-3, t_end: 1.0, dt: 1e-2, scheme: Scheme::Trapezoidal }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub cells: usize,
    pub h_max: f64,
    pub l2_error: f64,
    pub linf_error: f64,
    /// Observed order against the previous row.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub reference: ConvergenceRow,
}

/// Relative error `‖u_d - u_a‖ / 100` of the macroscopic solution on the
/// test problem, evaluated at the vertices.
pub fn deterministic_error(mesh: &Mesh, gamma: f64, t_end: f64, dt: f64, scheme: Scheme) -> Result<NormPair> {
    let op = DiffusionOperator::from_mesh(mesh, gamma, BoundaryCondition::Neumann)?;
    let a = op.lumped_mass();
    let mut x: Vec<f64> =
        mesh.vertices().iter().zip(a).map(|(v, a)| a * analytic_solution(v[0], v[1], 0.0, gamma)).collect();
    let steps = (t_end / dt).ceil() as usize;
    if steps > 0 {
        let stepper = MacroStepper::new(&op, scheme, t_end / steps as f64, &[1.0])?;
        for _ in 0..steps {
            stepper.step_vector(1.0, &mut x);
        }
    }
    let err: Vec<f64> = mesh
        .vertices()
        .iter()
        .zip(x.iter().zip(a))
        .map(|(v, (x, a))| x / a - analytic_solution(v[0], v[1], t_end, gamma))
        .collect();
    Ok(weighted_norms(&err, a)?.scaled(0.01))
}

fn convergence_row(cfg: &ConvergenceConfig, n: usize) -> Result<ConvergenceRow> {
    let mesh = MeshSpec::Square { n, offset: [-0.5, -0.5] }.build()?;
    let e = deterministic_error(&mesh, cfg.gamma, cfg.t_end, cfg.dt, cfg.scheme)?;
    Ok(ConvergenceRow { n, cells: mesh.num_vertices(), h_max: mesh.h_max(), l2_error: e.l2, linf_error: e.linf, rate: None })
}

pub fn run_diffusion_convergence(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    if !(cfg.dt > 0.0) || cfg.t_end < 0.0 {
        return Err(HarnessError::Config("convergence needs dt > 0 and t_end >= 0".into()));
    }
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for &n in &cfg.ns {
        let mut row = convergence_row(cfg, n)?;
        if let Some(p) = rows.last() {
            row.rate = Some((p.l2_error / row.l2_error).ln() / (p.h_max / row.h_max).ln());
        }
        rows.push(row);
    }
    let reference = convergence_row(cfg, cfg.reference_n)?;
    Ok(ConvergenceReport { rows, reference })
}

// Stochastic diffusion versus analytic and FEM solutions.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Each molecule lands in cell `j` with probability ∝ `|C_j| u_j(0)`.
    Multinomial,
    /// Every trajectory starts from the same rounded expected counts.
    Rounding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTableConfig {
    pub mesh: MeshSpec,
    pub gamma: f64,
    pub t_end: f64,
    pub molecules: usize,
    /// Ensemble sizes, one table row each.
    pub trajectories: Vec<usize>,
    pub placement: Placement,
    pub seed: u64,
}

impl Default for DiffusionTableConfig {
    fn default() -> Self {
        DiffusionTableConfig {
            mesh: MeshSpec::Square { n: 3, offset: [-0.5, -0.5] },
            gamma: 1e-3,
            t_end: 1.0,
            molecules: 100,
            trajectories: vec![100, 1_000, 10_000, 100_000, 1_000_000],
            placement: Placement::Multinomial,
            seed: 2009,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionTableRow {
    pub trajectories: usize,
    pub delta_a_l2: f64,
    pub delta_a_linf: f64,
    pub delta_d_l2: f64,
    pub delta_d_linf: f64,
    /// Monte-Carlo standard error of the estimate, in the ℓ₂ norm.
    pub standard_error_l2: f64,
    pub events: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionTableReport {
    pub cells: usize,
    pub h_max: f64,
    pub rows: Vec<DiffusionTableRow>,
    /// Least-squares slope of `ln δ_d(ℓ₂)` against `ln M`.
    pub slope_delta_d: Option<f64>,
    /// `‖u_d - u_a‖₂ / 100`, the floor that δ_a approaches.
    pub discretization_error_l2: f64,
}

/// Stream offset that separates placement draws from sampler draws.
const PLACEMENT_STREAM: u64 = 1 << 63;

/// Counts `round(total w_j / Σw)` adjusted by largest remainders so that
/// they sum to `total`.
pub fn rounded_counts(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = total - counts.iter().sum::<usize>();
    for &j in order.iter().take(missing) {
        counts[j] += 1;
    }
    counts
}

pub fn run_stochastic_diffusion_table(cfg: &DiffusionTableConfig) -> Result<DiffusionTableReport> {
    if cfg.trajectories.iter().any(|&m| m == 0) || cfg.molecules == 0 {
        return Err(HarnessError::Config("ensemble sizes and molecule count must be positive".into()));
    }
    let mesh = cfg.mesh.build()?;
    let op = DiffusionOperator::from_mesh(&mesh, cfg.gamma, BoundaryCondition::Neumann)?;
    let a = op.lumped_mass().to_vec();
    let k = a.len();
    let geom = cell_geometry(&mesh, &a);
    let model = parse_model("species U")?;
    let jumps = JumpTable::new(&op);

    let u0: Vec<f64> = mesh.vertices().iter().map(|v| analytic_solution(v[0], v[1], 0.0, cfg.gamma)).collect();
    let weights: Vec<f64> = u0.iter().zip(&a).map(|(u, a)| u * a).collect();
    let picker = WeightedIndex::new(&weights).map_err(|e| HarnessError::Config(format!("initial weights: {e}")))?;
    let rounded = rounded_counts(&weights, cfg.molecules);
    let x0a: Vec<f64> = u0.iter().zip(&a).map(|(u, a)| u * a).collect();
    let u_d: Vec<f64> = mean_evolve(&op, &x0a, cfg.t_end).iter().zip(&a).map(|(x, a)| x / a).collect();
    let u_a: Vec<f64> = mesh.vertices().iter().map(|v| analytic_solution(v[0], v[1], cfg.t_end, cfg.gamma)).collect();
    let disc: Vec<f64> = u_d.iter().zip(&u_a).map(|(d, a)| d - a).collect();

    let mut rows = Vec::new();
    let mut stream_base = 0u64;
    for &m in &cfg.trajectories {
        let start = Instant::now();
        let (acc, events) = ensemble_fold(
            m,
            true,
            || (MomentAccumulator::new(k), 0u64),
            |(acc, events), i| -> Result<(), HarnessError> {
                let stream = stream_base + i;
                let mut x0 = SystemState::zeros(1, k);
                match cfg.placement {
                    Placement::Multinomial => {
                        let mut rng = trajectory_rng(cfg.seed, PLACEMENT_STREAM + stream);
                        for _ in 0..cfg.molecules {
                            x0.add(picker.sample(&mut rng), 0, 1.0);
                        }
                    }
                    Placement::Rounding => {
                        for (j, &c) in rounded.iter().enumerate() {
                            x0.set(j, 0, c as f64);
                        }
                    }
                }
                let opts = SamplerOptions { seed: cfg.seed, stream, ..Default::default() };
                let mut s = Sampler::with_jumps(&model, &op, &geom, x0, &opts, &jumps)?;
                s.simulate_until(cfg.t_end)?;
                *events += s.stats().events;
                acc.push(s.state().values());
                Ok(())
            },
            |(t, e), (p, pe)| {
                t.merge(&p);
                *e += pe;
            },
        )?;
        stream_base += m as u64;
        let u_m: Vec<f64> = acc.mean().iter().zip(&a).map(|(c, a)| c / a).collect();
        let se: Vec<f64> = acc.standard_error().iter().zip(&a).map(|(s, a)| s / a).collect();
        let da: Vec<f64> = u_m.iter().zip(&u_a).map(|(m, a)| m - a).collect();
        let dd: Vec<f64> = u_m.iter().zip(&u_d).map(|(m, d)| m - d).collect();
        let na = weighted_norms(&da, &a)?.scaled(0.01);
        let nd = weighted_norms(&dd, &a)?.scaled(0.01);
        rows.push(DiffusionTableRow {
            trajectories: m,
            delta_a_l2: na.l2,
            delta_a_linf: na.linf,
            delta_d_l2: nd.l2,
            delta_d_linf: nd.linf,
            standard_error_l2: weighted_norms(&se, &a)?.l2 * 0.01,
            events,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    let slope_delta_d = (rows.len() >= 2).then(|| {
        let m: Vec<f64> = rows.iter().map(|r| r.trajectories as f64).collect();
        let d: Vec<f64> = rows.iter().map(|r| r.delta_d_l2).collect();
        loglog_slope(&m, &d)
    });
    Ok(DiffusionTableReport {
        cells: k,
        h_max: mesh.h_max(),
        rows,
        slope_delta_d,
        discretization_error_l2: weighted_norms(&disc, &a)?.l2 * 0.01,
    })
}

// Bistable switch on a disc.

/// Two mutually repressing enzymes. Rates are per second, the binding
/// constant is converted from molar units to a membrane of thickness
/// `depth` in metres.
pub const BISTABLE_MODEL: &str = "\
species A B EA EB EAB EBA EAB2 EBA2
const k1 = 150
const kd = 10
const k4 = 6
const ka = 1.2e8 * 1e-3 / (avogadro * depth)
reaction prodA: EA -> EA + A : massaction(k1, EA)
reaction prodB: EB -> EB + B : massaction(k1, EB)
reaction bindAB: EA + B -> EAB : massaction(ka, EA, B)
reaction unbindAB: EAB -> EA + B : massaction(kd, EAB)
reaction bindBA: EB + A -> EBA : massaction(ka, EB, A)
reaction unbindBA: EBA -> EB + A : massaction(kd, EBA)
reaction bindAB2: EAB + B -> EAB2 : massaction(ka, EAB, B)
reaction unbindAB2: EAB2 -> EAB + B : massaction(kd, EAB2)
reaction bindBA2: EBA + A -> EBA2 : massaction(ka, EBA, A)
reaction unbindBA2: EBA2 -> EBA + A : massaction(kd, EBA2)
reaction degA: A -> 0 : massaction(k4, A)
reaction degB: B -> 0 : massaction(k4, B)
";

pub fn bistable_model() -> Result<ReactionModel> {
    Ok(parse_model_with(BISTABLE_MODEL, &[("avogadro", 6.022_140_76e23), ("depth", 1e-7)])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BistableConfig {
    pub radius: f64,
    pub rings: usize,
    pub gammas: Vec<f64>,
    pub t_end: f64,
    pub snapshots: Vec<f64>,
    /// Copies of each free enzyme, spread over the cells by area.
    pub enzymes: usize,
    pub seed: u64,
}

impl Default for BistableConfig {
    fn default() -> Self {
        BistableConfig {
            radius: 3e-6,
            rings: 18,
            gammas: vec![2e-13, 1e-12],
            t_end: 2.0,
            snapshots: vec![0.0, 1.0, 2.0],
            enzymes: 1000,
            seed: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BistableRow {
    pub gamma: f64,
    pub t: f64,
    pub total_a: f64,
    pub total_b: f64,
    pub mean_a: f64,
    pub variance_a: f64,
    /// Area-weighted correlation of the A and B concentration fields.
    pub separation_index: f64,
    pub events: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BistableReport {
    pub cells: usize,
    pub rows: Vec<BistableRow>,
    /// `(file name, per-cell CSV)` for every snapshot.
    pub snapshots: Vec<(String, String)>,
    pub states: Vec<SystemState>,
}

/// Area-weighted mean, variance and correlation of two cell fields.
pub fn weighted_correlation(u: &[f64], v: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let tw: f64 = w.iter().sum();
    let mu = u.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / tw;
    let mv = v.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / tw;
    let (mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0);
    for ((x, y), w) in u.iter().zip(v).zip(w) {
        suu += w * (x - mu) * (x - mu);
        svv += w * (y - mv) * (y - mv);
        suv += w * (x - mu) * (y - mv);
    }
    let corr = if suu > 0.0 && svv > 0.0 { suv / (suu * svv).sqrt() } else { 0.0 };
    (mu, suu / tw, corr)
}

pub fn run_bistable(cfg: &BistableConfig) -> Result<BistableReport> {
    let mesh = build_disc(cfg.radius, cfg.rings, None)?;
    let model = bistable_model()?;
    let (ia, ib) = (model.species_index("A").unwrap(), model.species_index("B").unwrap());
    let (iea, ieb) = (model.species_index("EA").unwrap(), model.species_index("EB").unwrap());
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    let mut states = Vec::new();
    let mut times: Vec<f64> = cfg.snapshots.iter().copied().filter(|&t| t <= cfg.t_end).collect();
    times.push(cfg.t_end);
    times.sort_by(f64::total_cmp);
    times.dedup();
    for (gi, &gamma) in cfg.gammas.iter().enumerate() {
        let op = DiffusionOperator::from_mesh(&mesh, gamma, BoundaryCondition::Neumann)?;
        let a = op.lumped_mass();
        let geom = cell_geometry(&mesh, a);
        let picker = WeightedIndex::new(a).map_err(|e| HarnessError::Config(format!("cell areas: {e}")))?;
        let mut rng = trajectory_rng(cfg.seed, PLACEMENT_STREAM + gi as u64);
        let mut x0 = SystemState::zeros(model.num_species(), a.len());
        for species in [iea, ieb] {
            for _ in 0..cfg.enzymes {
                x0.add(picker.sample(&mut rng), species, 1.0);
            }
        }
        let opts = SamplerOptions { seed: cfg.seed, stream: gi as u64, ..Default::default() };
        let mut s = Sampler::new(&model, &op, &geom, x0, &opts)?;
        let start = Instant::now();
        for &t in &times {
            s.simulate_until(t)?;
            let st = s.state();
            let ca: Vec<f64> = st.species_row(ia).iter().zip(a).map(|(x, a)| x / a).collect();
            let cb: Vec<f64> = st.species_row(ib).iter().zip(a).map(|(x, a)| x / a).collect();
            let (mean_a, variance_a, corr) = weighted_correlation(&ca, &cb, a);
            let totals = st.totals();
            rows.push(BistableRow {
                gamma,
                t,
                total_a: totals[ia],
                total_b: totals[ib],
                mean_a,
                variance_a,
                separation_index: corr,
                events: s.stats().events,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
            if cfg.snapshots.contains(&t) {
                snapshots.push((format!("bistable_gamma{gamma:e}_t{t}.csv"), state_to_csv(&model, &geom, st)?));
                states.push(st.clone());
            }
        }
    }
    Ok(BistableReport { cells: mesh.num_vertices(), rows, snapshots, states })
}

// Hybrid benchmark on the metabolite and enzyme network.

/// Metabolites A, B and the enzymes that make them. Rates are written in
/// concentrations (`a = A/vol`) and multiplied by the cell volume, with
/// constants scaled by the mean cell size `zeta`.
pub const METABOLITE_MODEL: &str = "\
species A B deterministic
species EA EB
const kA = 3*zeta
const kB = 3*zeta
const mu = 0.002*zeta
const k2 = 0.0005*zeta^2
const kEA = 0.5*zeta
const kEB = 0.5*zeta
const kI = 60/zeta
const kR = 30/zeta
let a = A/vol
let b = B/vol
let ea = EA/vol
let eb = EB/vol
gamma = 1e-4
reaction degA: A -> 0 : mu*A
reaction prodA: 0 -> A : vol*kA*ea/(1 + a/kI)
reaction degB: B -> 0 : mu*B
reaction prodB: 0 -> B : vol*kB*eb/(1 + b/kI)
reaction annihilate: A + B -> 0 : vol*k2*a*b
reaction degEA: EA -> 0 : mu*EA
reaction prodEA: 0 -> EA : vol*heaviside(0.2 - rho)*kEA/(1 + a/kR)
reaction degEB: EB -> 0 : mu*EB
reaction prodEB: 0 -> EB : vol*heaviside(rho - 0.4)*kEB/(1 + b/kR)
";

pub fn metabolite_model(zeta: f64) -> Result<ReactionModel> {
    Ok(parse_model_with(METABOLITE_MODEL, &[("zeta", zeta)])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridBenchmarkConfig {
    pub rings: usize,
    pub cells: usize,
    pub gamma: f64,
    /// Initial metabolite concentration in units of `1/zeta`.
    pub initial_concentration: f64,
    pub scheme: Scheme,
    pub guard: NonNegGuard,
    pub t_end: f64,
    pub trajectories: usize,
    pub dts: Vec<f64>,
    pub runtime_gammas: Vec<f64>,
    pub runtime_dt: f64,
    pub runtime_t_end: f64,
    pub runtime_trajectories: usize,
    pub phase_dts: Vec<f64>,
    pub phase_t_end: f64,
    pub phase_trajectories: usize,
    pub seed: u64,
}

impl Default for HybridBenchmarkConfig {
    fn default() -> Self {
        HybridBenchmarkConfig {
            rings: 4,
            cells: 80,
            gamma: 1e-4,
            initial_concentration: 30.0,
            scheme: Scheme::Trapezoidal,
            guard: NonNegGuard::Check,
            t_end: 10.0,
            trajectories: 200,
            dts: vec![0.1, 1.0, 5.0],
            runtime_gammas: vec![1e-5, 1e-4, 1e-3],
            runtime_dt: 5.0,
            runtime_t_end: 10.0,
            runtime_trajectories: 200,
            phase_dts: vec![1.0, 5.0, 10.0, 20.0],
            phase_t_end: 200.0,
            phase_trajectories: 200,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub dt: f64,
    pub delta_t: f64,
    /// Monte-Carlo noise level of the reference in the same scaling.
    pub reference_standard_error: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuntimeRow {
    pub gamma: f64,
    pub ssa_seconds: f64,
    pub hybrid_seconds: f64,
    pub ssa_events: u64,
    pub hybrid_events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseRow {
    pub dt: f64,
    pub deterministic_seconds: f64,
    pub stochastic_seconds: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HybridBenchmarkReport {
    pub cells: usize,
    pub zeta: f64,
    pub accuracy: Vec<AccuracyRow>,
    pub runtime: Vec<RuntimeRow>,
    pub phases: Vec<PhaseRow>,
    /// `max δ_t / min δ_t - 1` over the accuracy rows.
    pub delta_spread: f64,
}

/// Mesh, operator and initial state of the benchmark at one γ.
pub struct MetaboliteSetup {
    pub mesh: Mesh,
    pub op: DiffusionOperator,
    pub geom: Vec<CellGeometry>,
    pub model: ReactionModel,
    pub zeta: f64,
    pub x0: SystemState,
}

pub fn metabolite_setup(cfg: &HybridBenchmarkConfig, gamma: f64) -> Result<MetaboliteSetup> {
    let mesh = build_disc(std::f64::consts::PI.powf(-0.5), cfg.rings, Some(cfg.cells))?;
    let k = mesh.num_vertices();
    let zeta = mesh.measure() / k as f64;
    let model = metabolite_model(zeta)?;
    let op = DiffusionOperator::from_mesh(&mesh, gamma, BoundaryCondition::Neumann)?;
    let geom = cell_geometry(&mesh, op.lumped_mass());
    let mut x0 = SystemState::zeros(model.num_species(), k);
    for (j, g) in geom.iter().enumerate() {
        let c = (cfg.initial_concentration * g.vol / zeta).round();
        x0.set(j, 0, c);
        x0.set(j, 1, c);
    }
    Ok(MetaboliteSetup { mesh, op, geom, model, zeta, x0 })
}

/// `max_i ‖φ_i^ref - φ_i‖₂ / (max_j φ_ij^ref - min_j φ_ij^ref)` over the
/// species whose reference field is not constant; also returns the same
/// ratio for the reference standard errors.
pub fn relative_field_difference(
    reference: &[f64],
    reference_se: &[f64],
    other: &[f64],
    n_species: usize,
    areas: &[f64],
) -> Result<(f64, f64)> {
    let (mut delta, mut noise) = (0.0f64, 0.0f64);
    for i in 0..n_species {
        let row = |v: &[f64]| -> Vec<f64> { v.iter().skip(i).step_by(n_species).copied().collect() };
        let (r, s, o) = (row(reference), row(reference_se), row(other));
        let range = r.iter().copied().fold(f64::MIN, f64::max) - r.iter().copied().fold(f64::MAX, f64::min);
        if !(range > 0.0) {
            continue;
        }
        let d: Vec<f64> = r.iter().zip(&o).map(|(a, b)| a - b).collect();
        delta = delta.max(weighted_norms(&d, areas)?.l2 / range);
        noise = noise.max(weighted_norms(&s, areas)?.l2 / range);
    }
    Ok((delta, noise))
}

/// Ensemble of full-SSA trajectories. Returns concentration moments, event
/// count and summed per-trajectory wall time.
fn ssa_ensemble(
    setup: &MetaboliteSetup,
    t_end: f64,
    m: usize,
    seed: u64,
) -> Result<(MomentAccumulator, u64, f64)> {
    let model = setup.model.with_all_modes(SimulationMode::Stochastic);
    let jumps = JumpTable::new(&setup.op);
    let len = setup.x0.values().len();
    ensemble_fold(
        m,
        true,
        || (MomentAccumulator::new(len), 0u64, 0.0f64),
        |(acc, ev, secs), i| -> Result<(), HarnessError> {
            let start = Instant::now();
            let opts = SamplerOptions { seed, stream: i, ..Default::default() };
            let mut s = Sampler::with_jumps(&model, &setup.op, &setup.geom, setup.x0.clone(), &opts, &jumps)?;
            s.simulate_until(t_end)?;
            *secs += start.elapsed().as_secs_f64();
            *ev += s.stats().events;
            acc.push(&concentrations(s.state(), &setup.geom));
            Ok(())
        },
        |(a, e, s), (pa, pe, ps)| {
            a.merge(&pa);
            *e += pe;
            *s += ps;
        },
    )
}

struct HybridEnsemble {
    acc: MomentAccumulator,
    events: u64,
    seconds: f64,
    deterministic_seconds: f64,
    stochastic_seconds: f64,
    steps: usize,
}

fn hybrid_ensemble(
    setup: &MetaboliteSetup,
    cfg: &HybridConfig,
    t_end: f64,
    m: usize,
    seed: u64,
    parallel: bool,
) -> Result<HybridEnsemble> {
    let len = setup.x0.values().len();
    ensemble_fold(
        m,
        parallel,
        || HybridEnsemble {
            acc: MomentAccumulator::new(len),
            events: 0,
            seconds: 0.0,
            deterministic_seconds: 0.0,
            stochastic_seconds: 0.0,
            steps: 0,
        },
        |e, i| -> Result<(), HarnessError> {
            let start = Instant::now();
            let run = simulate_hybrid(&setup.model, &setup.op, &setup.geom, setup.x0.clone(), t_end, cfg, seed, i)?;
            e.seconds += start.elapsed().as_secs_f64();
            e.events += run.ssa.events;
            e.deterministic_seconds += run.timings.deterministic_seconds;
            e.stochastic_seconds += run.timings.stochastic_seconds;
            e.steps += run.steps;
            e.acc.push(&concentrations(&run.state, &setup.geom));
            Ok(())
        },
        |t, p| {
            t.acc.merge(&p.acc);
            t.events += p.events;
            t.seconds += p.seconds;
            t.deterministic_seconds += p.deterministic_seconds;
            t.stochastic_seconds += p.stochastic_seconds;
            t.steps += p.steps;
        },
    )
}

pub fn run_hybrid_benchmark(cfg: &HybridBenchmarkConfig) -> Result<HybridBenchmarkReport> {
    if cfg.trajectories == 0 || cfg.runtime_trajectories == 0 || cfg.phase_trajectories == 0 {
        return Err(HarnessError::Config("ensemble sizes must be positive".into()));
    }
    let hcfg = |dt: f64| HybridConfig { dt, scheme: cfg.scheme, guard: cfg.guard, snapshots: Vec::new() };

    let setup = metabolite_setup(cfg, cfg.gamma)?;
    let n = setup.model.num_species();
    let areas = setup.op.lumped_mass().to_vec();
    let (reference, _, _) = ssa_ensemble(&setup, cfg.t_end, cfg.trajectories, cfg.seed)?;
    let (ref_mean, ref_se) = (reference.mean(), reference.standard_error());
    let mut accuracy = Vec::new();
    for &dt in &cfg.dts {
        let start = Instant::now();
        let h = hybrid_ensemble(&setup, &hcfg(dt), cfg.t_end, cfg.trajectories, cfg.seed, true)?;
        let (delta_t, noise) = relative_field_difference(&ref_mean, &ref_se, &h.acc.mean(), n, &areas)?;
        accuracy.push(AccuracyRow { dt, delta_t, reference_standard_error: noise, wall_seconds: start.elapsed().as_secs_f64() });
    }

    let mut runtime = Vec::new();
    for &gamma in &cfg.runtime_gammas {
        let s = metabolite_setup(cfg, gamma)?;
        let (_, ssa_events, ssa_seconds) = ssa_ensemble(&s, cfg.runtime_t_end, cfg.runtime_trajectories, cfg.seed)?;
        let h = hybrid_ensemble(&s, &hcfg(cfg.runtime_dt), cfg.runtime_t_end, cfg.runtime_trajectories, cfg.seed, true)?;
        runtime.push(RuntimeRow { gamma, ssa_seconds, hybrid_seconds: h.seconds, ssa_events, hybrid_events: h.events });
    }

    // Sequential so that the per-phase timers are not inflated by contention.
    let mut phases = Vec::new();
    for &dt in &cfg.phase_dts {
        let h = hybrid_ensemble(&setup, &hcfg(dt), cfg.phase_t_end, cfg.phase_trajectories, cfg.seed, false)?;
        phases.push(PhaseRow {
            dt,
            deterministic_seconds: h.deterministic_seconds,
            stochastic_seconds: h.stochastic_seconds,
            steps: h.steps,
        });
    }

    let deltas: Vec<f64> = accuracy.iter().map(|r| r.delta_t).collect();
    let lo = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = deltas.iter().copied().fold(0.0f64, f64::max);
    Ok(HybridBenchmarkReport {
        cells: setup.mesh.num_vertices(),
        zeta: setup.zeta,
        accuracy,
        runtime,
        phases,
        delta_spread: if lo > 0.0 { hi / lo - 1.0 } else { f64::INFINITY },
    })
}
