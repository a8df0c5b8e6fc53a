//! Next subvolume method for the reaction-diffusion master equation.
//!
//! Every cell keeps its reaction and diffusion partial rates; a binary
//! min-heap holds the next event time of each cell. Firing an event
//! recomputes the rates of the touched cells from scratch and draws fresh
//! exponential waiting times for every cell whose total rate changed.

use std::borrow::Cow;
use std::io::Write;
use std::time::Instant;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fem::DiffusionOperator;
use crate::model::{CellGeometry, ModelError, ReactionModel, SystemState};

#[derive(Debug, thiserror::Error)]
pub enum SsaError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid initial state: {0}")]
    InvalidState(String),
    #[error("sampler selected an infeasible event: {0}")]
    Infeasible(#[from] ModelError),
    #[error("t_end {t_end} lies before the current time {t}")]
    TimeReversal { t: f64, t_end: f64 },
}

/// Derives the generator for one trajectory of an ensemble.
pub fn trajectory_rng(seed: u64, trajectory: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trajectory);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EventKind {
    Reaction { reaction: usize },
    Diffusion { species: usize, target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub t: f64,
    pub cell: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SsaStats {
    pub events: u64,
    pub reaction_events: u64,
    pub diffusion_events: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SamplerOptions {
    pub seed: u64,
    pub stream: u64,
    /// Keep every executed event.
    pub record: bool,
    /// Species that take diffusion jumps. `None` means all of them.
    pub diffusing: Option<Vec<bool>>,
}

/// Binary min-heap over cells keyed by next event time, with a position
/// index for key updates. Ties are broken by cell index.
#[derive(Debug, Clone)]
struct CellHeap {
    heap: Vec<usize>,
    pos: Vec<usize>,
    key: Vec<f64>,
}

impl CellHeap {
    fn new(keys: Vec<f64>) -> Self {
        let n = keys.len();
        let mut h = CellHeap { heap: (0..n).collect(), pos: (0..n).collect(), key: keys };
        for i in (0..n / 2).rev() {
            h.sift_down(i);
        }
        h
    }

    fn less(&self, a: usize, b: usize) -> bool {
        let (ka, kb) = (self.key[a], self.key[b]);
        ka < kb || (ka == kb && a < b)
    }

    fn swap(&mut self, i: usize, j: usize) {
        self.heap.swap(i, j);
        self.pos[self.heap[i]] = i;
        self.pos[self.heap[j]] = j;
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let p = (i - 1) / 2;
            if self.less(self.heap[i], self.heap[p]) {
                self.swap(i, p);
                i = p;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        let n = self.heap.len();
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut m = i;
            if l < n && self.less(self.heap[l], self.heap[m]) {
                m = l;
            }
            if r < n && self.less(self.heap[r], self.heap[m]) {
                m = r;
            }
            if m == i {
                break;
            }
            self.swap(i, m);
            i = m;
        }
    }

    fn update(&mut self, cell: usize, key: f64) {
        let old = self.key[cell];
        self.key[cell] = key;
        let i = self.pos[cell];
        if key < old {
            self.sift_up(i);
        } else {
            self.sift_down(i);
        }
    }

    fn top(&self) -> Option<(usize, f64)> {
        self.heap.first().map(|&c| (c, self.key[c]))
    }

    #[cfg(test)]
    fn is_heap(&self) -> bool {
        (1..self.heap.len()).all(|i| !self.less(self.heap[i], self.heap[(i - 1) / 2]))
    }
}

/// Outflow neighbors of every cell, shared by all trajectories on one
/// operator. Negative rates are dropped, as are jumps between two fixed
/// cells.
#[derive(Debug, Clone)]
pub struct JumpTable {
    neighbors: Vec<Vec<(usize, f64)>>,
    out_rate: Vec<f64>,
}

impl JumpTable {
    pub fn new(op: &DiffusionOperator) -> Self {
        let fixed = op.fixed_cells();
        let qt = op.q().transpose();
        let mut neighbors = Vec::with_capacity(op.num_cells());
        let mut out_rate = Vec::with_capacity(op.num_cells());
        for c in 0..op.num_cells() {
            let nb: Vec<(usize, f64)> =
                qt.row(c).filter(|&(j, q)| j != c && q > 0.0 && !(fixed[c] && fixed[j])).collect();
            out_rate.push(nb.iter().map(|&(_, q)| q).sum());
            neighbors.push(nb);
        }
        JumpTable { neighbors, out_rate }
    }

    pub fn num_cells(&self) -> usize {
        self.out_rate.len()
    }

    /// Total per-molecule jump rate out of `cell`.
    pub fn out_rate(&self, cell: usize) -> f64 {
        self.out_rate[cell]
    }

    pub fn neighbors(&self, cell: usize) -> &[(usize, f64)] {
        &self.neighbors[cell]
    }
}

/// One trajectory of the next subvolume method.
pub struct Sampler<'a> {
    model: &'a ReactionModel,
    geom: &'a [CellGeometry],
    fixed: &'a [bool],
    state: SystemState,
    rng: ChaCha8Rng,
    jumps: Cow<'a, JumpTable>,
    /// Diffusion multiplier per species, zero for species that do not jump.
    diff_scale: Vec<f64>,
    n_reactions: usize,
    reaction_partials: Vec<f64>,
    diffusion_partials: Vec<f64>,
    reaction_total: Vec<f64>,
    total: Vec<f64>,
    heap: CellHeap,
    stats: SsaStats,
    events: Option<Vec<Event>>,
}

impl<'a> Sampler<'a> {
    pub fn new(
        model: &'a ReactionModel,
        op: &'a DiffusionOperator,
        geom: &'a [CellGeometry],
        x0: SystemState,
        opts: &SamplerOptions,
    ) -> Result<Self, SsaError> {
        Self::build(model, op, geom, x0, opts, Cow::Owned(JumpTable::new(op)))
    }

    /// Like [`Sampler::new`] with a jump table built once for `op`.
    pub fn with_jumps(
        model: &'a ReactionModel,
        op: &'a DiffusionOperator,
        geom: &'a [CellGeometry],
        x0: SystemState,
        opts: &SamplerOptions,
        jumps: &'a JumpTable,
    ) -> Result<Self, SsaError> {
        if jumps.num_cells() != op.num_cells() {
            return Err(SsaError::DimensionMismatch("jump table does not match operator".into()));
        }
        Self::build(model, op, geom, x0, opts, Cow::Borrowed(jumps))
    }

    fn build(
        model: &'a ReactionModel,
        op: &'a DiffusionOperator,
        geom: &'a [CellGeometry],
        x0: SystemState,
        opts: &SamplerOptions,
        jumps: Cow<'a, JumpTable>,
    ) -> Result<Self, SsaError> {
        let k = op.num_cells();
        let n = model.num_species();
        if x0.num_cells() != k || geom.len() != k {
            return Err(SsaError::DimensionMismatch(format!(
                "operator has {k} cells, state {}, geometry {}",
                x0.num_cells(),
                geom.len()
            )));
        }
        if x0.num_species() != n {
            return Err(SsaError::DimensionMismatch(format!(
                "model has {n} species, state has {}",
                x0.num_species()
            )));
        }
        let diffusing = opts.diffusing.clone().unwrap_or_else(|| vec![true; n]);
        if diffusing.len() != n {
            return Err(SsaError::DimensionMismatch("diffusing mask length".into()));
        }
        for j in 0..k {
            for (i, &v) in x0.cell(j).iter().enumerate() {
                let ok = if diffusing[i] { v >= 0.0 && v.fract() == 0.0 } else { v >= 0.0 && v.is_finite() };
                if !ok {
                    return Err(SsaError::InvalidState(format!(
                        "species {} in cell {j} has value {v}",
                        model.species[i].name
                    )));
                }
            }
        }

        let diff_scale = (0..n)
            .map(|i| if diffusing[i] { model.species[i].diffusion_scale } else { 0.0 })
            .collect();

        let r = model.num_reactions();
        let mut s = Sampler {
            model,
            geom,
            fixed: op.fixed_cells(),
            state: x0,
            rng: trajectory_rng(opts.seed, opts.stream),
            jumps,
            diff_scale,
            n_reactions: r,
            reaction_partials: vec![0.0; k * r],
            diffusion_partials: vec![0.0; k * n],
            reaction_total: vec![0.0; k],
            total: vec![0.0; k],
            heap: CellHeap::new(vec![f64::INFINITY; k]),
            stats: SsaStats::default(),
            events: opts.record.then(Vec::new),
        };
        let t0 = s.state.t;
        let mut keys = Vec::with_capacity(k);
        for c in 0..k {
            s.recompute(c);
            keys.push(s.next_time(t0, s.total[c]));
        }
        s.heap = CellHeap::new(keys);
        Ok(s)
    }

    pub fn time(&self) -> f64 {
        self.state.t
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    /// Mutable access for external updates (the macroscopic steps of the
    /// hybrid solver). Call [`Sampler::refresh`] afterwards.
    pub fn state_mut(&mut self) -> &mut SystemState {
        &mut self.state
    }

    pub fn into_state(self) -> SystemState {
        self.state
    }

    pub fn stats(&self) -> SsaStats {
        self.stats
    }

    pub fn events(&self) -> Option<&[Event]> {
        self.events.as_deref()
    }

    /// Starts or stops keeping executed events.
    pub fn set_recording(&mut self, on: bool) {
        match (on, self.events.is_some()) {
            (true, false) => self.events = Some(Vec::new()),
            (false, true) => self.events = None,
            _ => {}
        }
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        self.events.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Total event rate of `cell`.
    pub fn cell_rate(&self, cell: usize) -> f64 {
        self.total[cell]
    }

    /// Time of the next scheduled event, `+∞` if none.
    pub fn next_event_time(&self) -> f64 {
        self.heap.top().map_or(f64::INFINITY, |(_, t)| t)
    }

    fn next_time(&mut self, now: f64, rate: f64) -> f64 {
        if rate > 0.0 {
            let u: f64 = self.rng.sample(Open01);
            now - u.ln() / rate
        } else {
            f64::INFINITY
        }
    }

    fn recompute(&mut self, c: usize) {
        let n = self.diff_scale.len();
        let r = self.n_reactions;
        let x = self.state.cell(c);
        let mut rt = 0.0;
        for k in 0..r {
            let w = if self.fixed[c] || !self.model.is_feasible(k, x) {
                0.0
            } else {
                self.model.propensity(k, x, &self.geom[c])
            };
            self.reaction_partials[c * r + k] = w;
            rt += w;
        }
        let mut dt = 0.0;
        for i in 0..n {
            let w = x[i] * self.diff_scale[i] * self.jumps.out_rate[c];
            self.diffusion_partials[c * n + i] = w;
            dt += w;
        }
        self.reaction_total[c] = rt;
        self.total[c] = rt + dt;
    }

    /// Recomputes every cell's rates at the current time after an external
    /// state change and redraws the waiting time of each cell whose rate
    /// changed.
    pub fn refresh(&mut self) {
        let now = self.state.t;
        for c in 0..self.total.len() {
            let old = self.total[c];
            self.recompute(c);
            if self.total[c] != old {
                let t = self.next_time(now, self.total[c]);
                self.heap.update(c, t);
            }
        }
    }

    /// Executes the next event, or returns `None` if no cell has a positive
    /// rate.
    pub fn step(&mut self) -> Result<Option<Event>, SsaError> {
        let Some((c, t)) = self.heap.top() else { return Ok(None) };
        if !t.is_finite() {
            return Ok(None);
        }
        self.state.t = t;
        let u: f64 = self.rng.random();
        let target = u * self.total[c];
        let kind = if target < self.reaction_total[c] {
            let r = pick(&self.reaction_partials[c * self.n_reactions..(c + 1) * self.n_reactions], target);
            self.model.apply_reaction(&mut self.state, r, c)?;
            self.stats.reaction_events += 1;
            EventKind::Reaction { reaction: r }
        } else {
            let n = self.diff_scale.len();
            let rest = target - self.reaction_total[c];
            let i = pick(&self.diffusion_partials[c * n..(c + 1) * n], rest);
            let before: f64 = self.diffusion_partials[c * n..c * n + i].iter().sum();
            // Rescale the remainder to a uniform draw over the neighbor rates.
            let w = self.diffusion_partials[c * n + i];
            let frac = ((rest - before) / w).clamp(0.0, 1.0);
            let nb = &self.jumps.neighbors[c];
            let j = nb[pick_by(nb.iter().map(|&(_, q)| q), frac * self.jumps.out_rate[c])].0;
            if !self.fixed[c] {
                self.state.add(c, i, -1.0);
            }
            if !self.fixed[j] {
                self.state.add(j, i, 1.0);
            }
            self.stats.diffusion_events += 1;
            EventKind::Diffusion { species: i, target: j }
        };
        self.stats.events += 1;

        self.recompute(c);
        let next = self.next_time(t, self.total[c]);
        self.heap.update(c, next);
        if let EventKind::Diffusion { target: j, .. } = kind {
            let old = self.total[j];
            self.recompute(j);
            if self.total[j] != old {
                let next = self.next_time(t, self.total[j]);
                self.heap.update(j, next);
            }
        }
        let ev = Event { t, cell: c, kind };
        if let Some(log) = &mut self.events {
            log.push(ev);
        }
        Ok(Some(ev))
    }

    /// Runs all events before `t_end` and sets the clock to `t_end`.
    pub fn simulate_until(&mut self, t_end: f64) -> Result<&SystemState, SsaError> {
        if t_end < self.state.t {
            return Err(SsaError::TimeReversal { t: self.state.t, t_end });
        }
        let start = Instant::now();
        while self.next_event_time() < t_end {
            self.step()?;
        }
        self.state.t = t_end;
        self.stats.wall_seconds += start.elapsed().as_secs_f64();
        Ok(&self.state)
    }
}

/// Index of the first partial whose running sum exceeds `target`. Falls back
/// to the last positive entry if rounding leaves `target` past the end.
fn pick(partials: &[f64], target: f64) -> usize {
    pick_by(partials.iter().copied(), target)
}

fn pick_by(partials: impl Iterator<Item = f64>, target: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (k, w) in partials.enumerate() {
        if w > 0.0 {
            acc += w;
            last = k;
            if target < acc {
                return k;
            }
        }
    }
    last
}

/// Writes `t,kind,cell,species_or_reaction,target_cell` rows.
pub fn write_event_log(model: &ReactionModel, events: &[Event], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "t,kind,cell,species_or_reaction,target_cell")?;
    for e in events {
        match e.kind {
            EventKind::Reaction { reaction } => {
                writeln!(w, "{:?},reaction,{},{},", e.t, e.cell, model.reactions[reaction].name)?
            }
            EventKind::Diffusion { species, target } => writeln!(
                w,
                "{:?},diffusion,{},{},{}",
                e.t, e.cell, model.species[species].name, target
            )?,
        }
    }
    Ok(())
}
