//! Strang splitting between macroscopic diffusion of high-copy species and
//! the stochastic reduced master equation.
//!
//! One step of length `Δt` is: a macroscopic diffusion step of length
//! `Δt/2` for every deterministic species, an exact SSA run over `Δt` with
//! all reactions and only the stochastic species diffusing, and a second
//! macroscopic half step.
//!
//! The implicit systems are symmetrized with `x = A^{1/2} y`, which turns
//! `I - cQ` into `I - cγ A^{-1/2} S A^{-1/2}`, and factored once per step
//! length with an envelope Cholesky factorization.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::fem::DiffusionOperator;
use crate::linalg::{EnvelopeCholesky, LinalgError};
use crate::model::{CellGeometry, ReactionModel, SimulationMode, SystemState};
use crate::sparse::SparseMatrix;
use crate::ssa::{Sampler, SamplerOptions, SsaError, SsaStats};

#[derive(Debug, thiserror::Error)]
pub enum HybridError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Ssa(#[from] SsaError),
    #[error("species {species} became negative in cell {cell} ({value:e})")]
    Negative { species: usize, cell: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Trapezoidal,
    BackwardEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NonNegGuard {
    Off,
    /// Fail on entries below `-1e-9 · max|x|`.
    #[default]
    Check,
    /// Set negative entries to zero and count the removed mass.
    Clamp,
}

/// Tolerance of the check guard relative to the largest magnitude.
pub const GUARD_TOLERANCE: f64 = 1e-9;

struct Factored {
    scale: f64,
    chol: EnvelopeCholesky,
}

/// Implicit diffusion step of fixed length `tau`:
/// trapezoidal `(I - τ/2·Q) x⁺ = (I + τ/2·Q) x` or backward Euler
/// `(I - τQ) x⁺ = x`, with `Q` scaled per species.
pub struct MacroStepper {
    scheme: Scheme,
    tau: f64,
    gamma: f64,
    /// `A^{-1/2} S A^{-1/2}`.
    s_tilde: SparseMatrix,
    sqrt_a: Vec<f64>,
    fixed: Vec<bool>,
    /// Interior cell for each unknown.
    interior: Vec<usize>,
    systems: Vec<Factored>,
}

impl MacroStepper {
    /// Factors the systems for each distinct diffusion scale in `scales`.
    pub fn new(op: &DiffusionOperator, scheme: Scheme, tau: f64, scales: &[f64]) -> Result<Self, HybridError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(HybridError::Config(format!("step length must be positive, got {tau}")));
        }
        let a = op.lumped_mass();
        let sqrt_a: Vec<f64> = a.iter().map(|v| v.sqrt()).collect();
        let s_tilde = op.stiffness().map(|i, j, v| v / (sqrt_a[i] * sqrt_a[j]));
        let fixed = op.fixed_cells().to_vec();
        let interior: Vec<usize> = (0..a.len()).filter(|&j| !fixed[j]).collect();
        let mut local = vec![usize::MAX; a.len()];
        for (p, &j) in interior.iter().enumerate() {
            local[j] = p;
        }
        let mut st = MacroStepper { scheme, tau, gamma: op.gamma(), s_tilde, sqrt_a, fixed, interior, systems: Vec::new() };
        for &scale in scales {
            if scale <= 0.0 || st.systems.iter().any(|f| f.scale == scale) {
                continue;
            }
            let c = st.implicit_factor() * scale * st.gamma;
            let triplets = st.s_tilde.triplets().filter_map(|(i, j, v)| {
                let (li, lj) = (local[i], local[j]);
                (li != usize::MAX && lj != usize::MAX).then(|| (li, lj, if i == j { 1.0 - c * v } else { -c * v }))
            });
            let m = SparseMatrix::from_triplets(st.interior.len(), triplets);
            st.systems.push(Factored { scale, chol: EnvelopeCholesky::factor(&m)? });
        }
        Ok(st)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    fn implicit_factor(&self) -> f64 {
        match self.scheme {
            Scheme::Trapezoidal => self.tau / 2.0,
            Scheme::BackwardEuler => self.tau,
        }
    }

    /// Advances one species vector of copy numbers by `tau`. Fixed cells keep
    /// their values.
    pub fn step_vector(&self, scale: f64, x: &mut [f64]) {
        if scale <= 0.0 {
            return;
        }
        let sys = self
            .systems
            .iter()
            .find(|f| f.scale == scale)
            .unwrap_or_else(|| panic!("no factorization for diffusion scale {scale}"));
        let cg = scale * self.gamma;
        let c = self.implicit_factor() * cg;
        let y: Vec<f64> = x.iter().zip(&self.sqrt_a).map(|(v, s)| v / s).collect();
        let explicit = match self.scheme {
            Scheme::Trapezoidal => Some(self.s_tilde.mul_vec(&y)),
            Scheme::BackwardEuler => None,
        };
        let mut b: Vec<f64> = self
            .interior
            .iter()
            .map(|&j| match &explicit {
                Some(sy) => y[j] + c * sy[j],
                None => y[j],
            })
            .collect();
        if self.interior.len() < x.len() {
            for (p, &j) in self.interior.iter().enumerate() {
                for (k, v) in self.s_tilde.row(j) {
                    if self.fixed[k] {
                        b[p] += c * v * y[k];
                    }
                }
            }
        }
        sys.chol.solve_in_place(&mut b);
        for (p, &j) in self.interior.iter().enumerate() {
            x[j] = b[p] * self.sqrt_a[j];
        }
    }
}

/// Applies `stepper` to every deterministic species of `state`, then the
/// guard. Returns the mass removed by clamping.
pub fn macro_half_step(
    state: &mut SystemState,
    model: &ReactionModel,
    stepper: &MacroStepper,
    guard: NonNegGuard,
) -> Result<f64, HybridError> {
    let mut clamped = 0.0;
    for i in 0..model.num_species() {
        if !model.is_deterministic(i) {
            continue;
        }
        let mut row = state.species_row(i);
        stepper.step_vector(model.species[i].diffusion_scale, &mut row);
        clamped += apply_guard(&mut row, i, guard)?;
        state.set_species_row(i, &row);
    }
    Ok(clamped)
}

fn apply_guard(row: &mut [f64], species: usize, guard: NonNegGuard) -> Result<f64, HybridError> {
    match guard {
        NonNegGuard::Off => Ok(0.0),
        NonNegGuard::Check => {
            let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            match row.iter().enumerate().find(|(_, &v)| v < -GUARD_TOLERANCE * max) {
                Some((cell, &value)) => Err(HybridError::Negative { species, cell, value }),
                None => Ok(0.0),
            }
        }
        NonNegGuard::Clamp => {
            let mut removed = 0.0;
            for v in row.iter_mut().filter(|v| **v < 0.0) {
                removed -= *v;
                *v = 0.0;
            }
            Ok(removed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HybridConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub guard: NonNegGuard,
    /// Times at which the state is recorded. Steps are shortened to land on
    /// them exactly.
    pub snapshots: Vec<f64>,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig { dt: 1.0, scheme: Scheme::Trapezoidal, guard: NonNegGuard::Check, snapshots: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub deterministic_seconds: f64,
    pub stochastic_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HybridRun {
    pub state: SystemState,
    pub snapshots: Vec<SystemState>,
    pub timings: PhaseTimings,
    pub clamped_mass: f64,
    pub steps: usize,
    pub ssa: SsaStats,
}

/// A sampler over the reduced master equation plus the macroscopic
/// steppers for the deterministic species.
pub struct HybridSolver<'a> {
    model: &'a ReactionModel,
    op: &'a DiffusionOperator,
    sampler: Sampler<'a>,
    scheme: Scheme,
    guard: NonNegGuard,
    steppers: Vec<MacroStepper>,
    scales: Vec<f64>,
    has_deterministic: bool,
    pub timings: PhaseTimings,
    pub clamped_mass: f64,
    pub steps: usize,
}

impl<'a> HybridSolver<'a> {
    pub fn new(
        model: &'a ReactionModel,
        op: &'a DiffusionOperator,
        geom: &'a [CellGeometry],
        x0: SystemState,
        scheme: Scheme,
        guard: NonNegGuard,
        seed: u64,
        stream: u64,
    ) -> Result<Self, HybridError> {
        let diffusing: Vec<bool> = model.species.iter().map(|s| s.mode == SimulationMode::Stochastic).collect();
        let has_deterministic = diffusing.iter().any(|d| !d);
        let scales = model
            .species
            .iter()
            .filter(|s| s.mode == SimulationMode::DeterministicDiffusion)
            .map(|s| s.diffusion_scale)
            .collect();
        let opts = SamplerOptions { seed, stream, record: false, diffusing: Some(diffusing) };
        let sampler = Sampler::new(model, op, geom, x0, &opts)?;
        Ok(HybridSolver {
            model,
            op,
            sampler,
            scheme,
            guard,
            steppers: Vec::new(),
            scales,
            has_deterministic,
            timings: PhaseTimings::default(),
            clamped_mass: 0.0,
            steps: 0,
        })
    }

    /// The underlying sampler.
    pub fn sampler(&self) -> &Sampler<'a> {
        &self.sampler
    }

    pub fn sampler_mut(&mut self) -> &mut Sampler<'a> {
        &mut self.sampler
    }

    pub fn state(&self) -> &SystemState {
        self.sampler.state()
    }

    pub fn into_state(self) -> SystemState {
        self.sampler.into_state()
    }

    fn stepper(&mut self, tau: f64) -> Result<usize, HybridError> {
        // Step lengths computed from absolute times differ in the last bits;
        // reuse a factorization within that noise.
        if let Some(p) = self.steppers.iter().position(|s| (s.tau() - tau).abs() <= 1e-12 * tau) {
            return Ok(p);
        }
        self.steppers.push(MacroStepper::new(self.op, self.scheme, tau, &self.scales)?);
        Ok(self.steppers.len() - 1)
    }

    fn macro_phase(&mut self, stepper: usize) -> Result<(), HybridError> {
        if !self.has_deterministic {
            return Ok(());
        }
        let start = Instant::now();
        self.clamped_mass +=
            macro_half_step(self.sampler.state_mut(), self.model, &self.steppers[stepper], self.guard)?;
        self.timings.deterministic_seconds += start.elapsed().as_secs_f64();
        let start = Instant::now();
        self.sampler.refresh();
        self.timings.stochastic_seconds += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// One Strang step of length `dt`.
    pub fn strang_step(&mut self, dt: f64) -> Result<(), HybridError> {
        let half = if self.has_deterministic { self.stepper(dt / 2.0)? } else { 0 };
        let t_end = self.sampler.time() + dt;
        self.macro_phase(half)?;
        let start = Instant::now();
        self.sampler.simulate_until(t_end)?;
        self.timings.stochastic_seconds += start.elapsed().as_secs_f64();
        self.macro_phase(half)?;
        self.steps += 1;
        Ok(())
    }
}

/// Runs Strang steps of length `cfg.dt` up to `t_end`. The last step and
/// steps crossing a snapshot time are shortened.
pub fn simulate_hybrid(
    model: &ReactionModel,
    op: &DiffusionOperator,
    geom: &[CellGeometry],
    x0: SystemState,
    t_end: f64,
    cfg: &HybridConfig,
    seed: u64,
    stream: u64,
) -> Result<HybridRun, HybridError> {
    if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
        return Err(HybridError::Config(format!("dt must be positive, got {}", cfg.dt)));
    }
    let t0 = x0.t;
    if t_end < t0 {
        return Err(HybridError::Config(format!("t_end {t_end} lies before the start time {t0}")));
    }
    let mut stops: Vec<f64> = cfg.snapshots.iter().copied().filter(|&s| s > t0 && s < t_end).collect();
    stops.push(t_end);
    stops.sort_by(f64::total_cmp);
    stops.dedup();

    let mut solver = HybridSolver::new(model, op, geom, x0, cfg.scheme, cfg.guard, seed, stream)?;
    let mut snapshots = Vec::new();
    if cfg.snapshots.contains(&t0) {
        snapshots.push(solver.state().clone());
    }
    let mut base = t0;
    for &stop in &stops {
        // Step boundaries are computed from the segment start so that
        // rounding does not accumulate over many steps.
        let n = ((stop - base) / cfg.dt - 1e-9).ceil().max(0.0) as usize;
        for s in 0..n {
            let t = solver.sampler.time();
            let next = if s + 1 == n { stop } else { base + (s + 1) as f64 * cfg.dt };
            solver.strang_step(next - t)?;
        }
        base = stop;
        if cfg.snapshots.contains(&stop) {
            snapshots.push(solver.state().clone());
        }
    }
    let timings = solver.timings;
    let ssa = solver.sampler.stats();
    let (clamped_mass, steps) = (solver.clamped_mass, solver.steps);
    Ok(HybridRun { state: solver.into_state(), snapshots, timings, clamped_mass, steps, ssa })
}
