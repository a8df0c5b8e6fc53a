//! Command-line driver: operator export, mesh quality, SSA and hybrid runs,
//! moment oracles and the bundled experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rdme::fem::{sign_report, BoundaryCondition, DiffusionOperator, NegativeWeightPolicy};
use rdme::harness::{
    concentrations, rounded_counts, rows_to_csv, run_experiment, state_to_csv, ExperimentId, ExperimentOverrides,
    MeshSpec, MomentAccumulator,
};
use rdme::hybrid::{simulate_hybrid, HybridConfig, NonNegGuard, Scheme};
use rdme::mesh::{quality_report, Mesh};
use rdme::model::{cell_geometry, parse_model, CellGeometry, ReactionModel, SystemState};
use rdme::moments::covariance_evolve;
use rdme::ssa::{write_event_log, JumpTable, Sampler, SamplerOptions};
use rdme::SparseMatrix;

#[derive(Parser, Debug)]
#[command(name = "rdme", version, about = "Stochastic reaction-diffusion on unstructured meshes")]
struct Cli {
    /// Base seed; trajectory `i` uses stream `i` of this seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Number of trajectories.
    #[arg(long, global = true)]
    ensemble: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Export S, A, D and Q as `row,col,value` triplets.
    Assemble {
        #[command(flatten)]
        op: OperatorArgs,
        /// Move negative off-diagonal stiffness weights onto the diagonal.
        #[arg(long)]
        clamp_negative: bool,
    },
    /// Angle condition and edge-length report.
    Quality {
        #[command(flatten)]
        mesh: MeshArgs,
    },
    /// Exact SSA trajectories; writes the ensemble mean and standard error.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Write the event log of trajectory 0.
        #[arg(long)]
        events: bool,
    },
    /// Strang-split hybrid runs.
    Hybrid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1.0)]
        dt: f64,
        #[arg(long, value_enum, default_value_t = SchemeArg::Trap)]
        scheme: SchemeArg,
        #[arg(long, value_enum, default_value_t = GuardArg::Check)]
        guard: GuardArg,
        /// Comma-separated snapshot times.
        #[arg(long, value_delimiter = ',')]
        snapshots: Vec<f64>,
    },
    /// Exact mean and covariance of pure diffusion of one species.
    Moments {
        #[command(flatten)]
        op: OperatorArgs,
        /// Initial mean copy numbers, `N` spread by area or `N@CELL`.
        #[arg(long, required = true)]
        init: Vec<String>,
        /// Comma-separated output times.
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
    },
    /// Run a bundled experiment.
    Experiment {
        #[arg(value_parser = parse_experiment)]
        id: ExperimentId,
    },
}

#[derive(Args, Debug, Clone, Serialize)]
struct MeshArgs {
    /// Mesh file, `square:N`, or `disc:RADIUS:RINGS[:VERTICES]`.
    #[arg(long)]
    mesh: String,
}

#[derive(Args, Debug, Clone, Serialize)]
struct OperatorArgs {
    #[command(flatten)]
    mesh: MeshArgs,
    /// Diffusion constant; defaults to the model's `gamma`, else 1.
    #[arg(long)]
    gamma: Option<f64>,
    /// Hold the boundary vertices at their initial values.
    #[arg(long)]
    dirichlet: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
struct RunArgs {
    #[command(flatten)]
    op: OperatorArgs,
    /// Reaction model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    t_end: f64,
    /// Initial copies as `SPECIES=N` (spread by area) or `SPECIES=N@CELL`.
    #[arg(long)]
    init: Vec<String>,
    /// Initial state CSV with a `cell` column and one column per species.
    #[arg(long)]
    initial: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
enum SchemeArg {
    Trap,
    Be,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
enum GuardArg {
    Check,
    Clamp,
    Off,
}

fn parse_experiment(s: &str) -> Result<ExperimentId, String> {
    s.parse().map_err(|e: rdme::harness::HarnessError| e.to_string())
}

fn mesh_spec(s: &str) -> Result<MeshSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    Ok(match parts.as_slice() {
        ["square", n] => MeshSpec::Square { n: n.parse().context("square size")?, offset: [0.0, 0.0] },
        ["disc", r, rings] => MeshSpec::Disc { radius: r.parse()?, rings: rings.parse()?, vertices: None },
        ["disc", r, rings, v] => MeshSpec::Disc { radius: r.parse()?, rings: rings.parse()?, vertices: Some(v.parse()?) },
        _ => MeshSpec::File { path: PathBuf::from(s) },
    })
}

fn load(args: &MeshArgs) -> Result<Mesh> {
    Ok(mesh_spec(&args.mesh)?.build().with_context(|| format!("building mesh `{}`", args.mesh))?)
}

fn operator(args: &OperatorArgs, mesh: &Mesh, model_gamma: Option<f64>) -> Result<DiffusionOperator> {
    let gamma = args.gamma.or(model_gamma).unwrap_or(1.0);
    let bc = if args.dirichlet {
        BoundaryCondition::Dirichlet(mesh.boundary().iter().copied().collect())
    } else {
        BoundaryCondition::Neumann
    };
    Ok(DiffusionOperator::from_mesh(mesh, gamma, bc)?)
}

/// `N` or `N@CELL` for one species row.
fn place(spec: &str, row: &mut [f64], areas: &[f64]) -> Result<()> {
    match spec.split_once('@') {
        Some((n, cell)) => {
            let cell: usize = cell.parse().context("cell index")?;
            if cell >= row.len() {
                bail!("cell {cell} out of range ({} cells)", row.len());
            }
            row[cell] += n.parse::<f64>().context("copy number")?;
        }
        None => {
            let n: usize = spec.parse().context("copy number")?;
            for (r, c) in row.iter_mut().zip(rounded_counts(areas, n)) {
                *r += c as f64;
            }
        }
    }
    Ok(())
}

fn initial_state(run: &RunArgs, model: &ReactionModel, areas: &[f64]) -> Result<SystemState> {
    let k = areas.len();
    let mut x = SystemState::zeros(model.num_species(), k);
    if let Some(path) = &run.initial {
        let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header = rd.headers()?.clone();
        let cell_col = header.iter().position(|h| h == "cell").context("initial state needs a `cell` column")?;
        let cols: Vec<(usize, usize)> =
            header.iter().enumerate().filter_map(|(c, h)| model.species_index(h).map(|i| (c, i))).collect();
        for rec in rd.records() {
            let rec = rec?;
            let cell: usize = rec[cell_col].parse()?;
            if cell >= k {
                bail!("cell {cell} out of range ({k} cells)");
            }
            for &(c, i) in &cols {
                x.set(cell, i, rec[c].parse()?);
            }
        }
    }
    for item in &run.init {
        let (name, spec) = item.split_once('=').context("--init expects SPECIES=N or SPECIES=N@CELL")?;
        let i = model.species_index(name).with_context(|| format!("unknown species `{name}`"))?;
        let mut row = x.species_row(i);
        place(spec, &mut row, areas)?;
        x.set_species_row(i, &row);
    }
    x.validate(model)?;
    Ok(x)
}

fn write_triplets(path: &Path, m: &SparseMatrix) -> Result<()> {
    #[derive(Serialize)]
    struct Triplet {
        row: usize,
        col: usize,
        value: f64,
    }
    let rows: Vec<Triplet> = m.triplets().into_iter().map(|(row, col, value)| Triplet { row, col, value }).collect();
    fs::write(path, rows_to_csv(&rows)?)?;
    Ok(())
}

fn write_summary(out: &Path, value: serde_json::Value) -> Result<()> {
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

/// Per-cell mean and standard error of every species.
fn moments_csv(model: &ReactionModel, geom: &[CellGeometry], acc: &MomentAccumulator) -> Result<String> {
    let n = model.num_species();
    let (mean, se) = (acc.mean(), acc.standard_error());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell".to_string(), "x".into(), "y".into(), "vol".into()];
    for s in &model.species {
        header.push(format!("{}_mean", s.name));
        header.push(format!("{}_se", s.name));
    }
    w.write_record(&header)?;
    for (j, g) in geom.iter().enumerate() {
        let mut rec = vec![j.to_string(), g.cx.to_string(), g.cy.to_string(), g.vol.to_string()];
        for i in 0..n {
            rec.push(mean[j * n + i].to_string());
            rec.push(se[j * n + i].to_string());
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn main() -> Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    let ensemble = cli.ensemble.unwrap_or(1);
    if ensemble == 0 {
        bail!("--ensemble must be at least 1");
    }
    let out = cli.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let start = Instant::now();

    match &cli.command {
        Command::Assemble { op, clamp_negative } => {
            let mesh = load(&op.mesh)?;
            let mut operator = operator(op, &mesh, None)?;
            let report = if *clamp_negative {
                let (o, r) = operator.with_policy(NegativeWeightPolicy::Clamp);
                operator = o;
                r
            } else {
                sign_report(&operator)
            };
            let a = SparseMatrix::from_triplets(
                operator.num_cells(),
                operator.lumped_mass().iter().enumerate().map(|(j, &v)| (j, j, v)),
            );
            write_triplets(&out.join("S.csv"), operator.stiffness())?;
            write_triplets(&out.join("A.csv"), &a)?;
            write_triplets(&out.join("D.csv"), operator.d())?;
            write_triplets(&out.join("Q.csv"), operator.q())?;
            write_summary(
                &out,
                serde_json::json!({
                    "command": "assemble",
                    "config": { "operator": op, "clamp_negative": clamp_negative },
                    "cells": operator.num_cells(),
                    "gamma": operator.gamma(),
                    "sign_report": report,
                    "wall_seconds": start.elapsed().as_secs_f64(),
                }),
            )?;
            println!("{} cells, {} sign violations", operator.num_cells(), report.violations.len());
        }
        Command::Quality { mesh } => {
            let m = load(mesh)?;
            let q = quality_report(&m)?;
            write_summary(
                &out,
                serde_json::json!({
                    "command": "quality",
                    "config": mesh,
                    "vertices": m.num_vertices(),
                    "elements": m.num_elements(),
                    "report": q,
                    "wall_seconds": start.elapsed().as_secs_f64(),
                }),
            )?;
            println!(
                "{} vertices, angles [{:.4}, {:.4}] rad, h in [{:.4e}, {:.4e}], {} violations",
                m.num_vertices(),
                q.min_angle,
                q.max_angle,
                q.h_min,
                q.h_max,
                q.violations.len()
            );
        }
        Command::Simulate { run, events } => {
            let model = parse_model(&fs::read_to_string(&run.model).context("reading model")?)?;
            let mesh = load(&run.op.mesh)?;
            let op = operator(&run.op, &mesh, model.gamma)?;
            let geom = cell_geometry(&mesh, op.lumped_mass());
            let x0 = initial_state(run, &model, op.lumped_mass())?;
            let jumps = JumpTable::new(&op);
            let mut acc = MomentAccumulator::new(x0.values().len());
            let mut total_events = 0u64;
            for i in 0..ensemble as u64 {
                let opts = SamplerOptions { seed: cli.seed, stream: i, record: *events && i == 0, diffusing: None };
                let mut s = Sampler::with_jumps(&model, &op, &geom, x0.clone(), &opts, &jumps)?;
                s.simulate_until(run.t_end)?;
                total_events += s.stats().events;
                if i == 0 {
                    fs::write(out.join("final_0.csv"), state_to_csv(&model, &geom, s.state())?)?;
                    if *events {
                        let f = fs::File::create(out.join("events.csv"))?;
                        write_event_log(&model, &s.take_events(), std::io::BufWriter::new(f))?;
                    }
                }
                acc.push(s.state().values());
            }
            fs::write(out.join("mean.csv"), moments_csv(&model, &geom, &acc)?)?;
            write_summary(
                &out,
                serde_json::json!({
                    "command": "simulate",
                    "config": run,
                    "seed": cli.seed,
                    "ensemble": ensemble,
                    "events": total_events,
                    "wall_seconds": start.elapsed().as_secs_f64(),
                }),
            )?;
            println!("{ensemble} trajectories, {total_events} events");
        }
        Command::Hybrid { run, dt, scheme, guard, snapshots } => {
            let model = parse_model(&fs::read_to_string(&run.model).context("reading model")?)?;
            let mesh = load(&run.op.mesh)?;
            let op = operator(&run.op, &mesh, model.gamma)?;
            let geom = cell_geometry(&mesh, op.lumped_mass());
            let x0 = initial_state(run, &model, op.lumped_mass())?;
            let cfg = HybridConfig {
                dt: *dt,
                scheme: match scheme {
                    SchemeArg::Trap => Scheme::Trapezoidal,
                    SchemeArg::Be => Scheme::BackwardEuler,
                },
                guard: match guard {
                    GuardArg::Check => NonNegGuard::Check,
                    GuardArg::Clamp => NonNegGuard::Clamp,
                    GuardArg::Off => NonNegGuard::Off,
                },
                snapshots: snapshots.clone(),
            };
            let mut acc = MomentAccumulator::new(x0.values().len());
            let (mut det, mut sto, mut clamped) = (0.0, 0.0, 0.0);
            for i in 0..ensemble as u64 {
                let r = simulate_hybrid(&model, &op, &geom, x0.clone(), run.t_end, &cfg, cli.seed, i)?;
                det += r.timings.deterministic_seconds;
                sto += r.timings.stochastic_seconds;
                clamped += r.clamped_mass;
                if i == 0 {
                    for s in &r.snapshots {
                        fs::write(out.join(format!("snapshot_t{}.csv", s.t)), state_to_csv(&model, &geom, s)?)?;
                    }
                }
                acc.push(&concentrations(&r.state, &geom));
            }
            fs::write(out.join("mean_concentration.csv"), moments_csv(&model, &geom, &acc)?)?;
            write_summary(
                &out,
                serde_json::json!({
                    "command": "hybrid",
                    "config": { "run": run, "hybrid": cfg },
                    "seed": cli.seed,
                    "ensemble": ensemble,
                    "timings": { "deterministic_seconds": det, "stochastic_seconds": sto },
                    "clamped_mass": clamped,
                    "wall_seconds": start.elapsed().as_secs_f64(),
                }),
            )?;
            println!("{ensemble} trajectories, deterministic {det:.3e} s, stochastic {sto:.3e} s");
        }
        Command::Moments { op: args, init, times } => {
            let mesh = load(&args.mesh)?;
            let op = operator(args, &mesh, None)?;
            let k = op.num_cells();
            let mut x0 = vec![0.0; k];
            for spec in init {
                place(spec, &mut x0, op.lumped_mass())?;
            }
            let c0 = nalgebra::DMatrix::zeros(k, k);
            let mut mean = csv::Writer::from_writer(Vec::new());
            mean.write_record(["t", "cell", "mean"])?;
            let mut cov = csv::Writer::from_writer(Vec::new());
            cov.write_record(["t", "i", "j", "covariance"])?;
            for &t in times {
                let m = covariance_evolve(&op, &x0, &c0, t);
                for (j, v) in m.xbar.iter().enumerate() {
                    mean.write_record([t.to_string(), j.to_string(), v.to_string()])?;
                }
                for i in 0..k {
                    for j in 0..k {
                        cov.write_record([t.to_string(), i.to_string(), j.to_string(), m.c[(i, j)].to_string()])?;
                    }
                }
            }
            fs::write(out.join("mean.csv"), mean.into_inner()?)?;
            fs::write(out.join("covariance.csv"), cov.into_inner()?)?;
            write_summary(
                &out,
                serde_json::json!({
                    "command": "moments",
                    "config": { "operator": args, "init": init, "times": times },
                    "cells": k,
                    "wall_seconds": start.elapsed().as_secs_f64(),
                }),
            )?;
            println!("moments of {k} cells at {} times", times.len());
        }
        Command::Experiment { id } => {
            let ov = ExperimentOverrides { seed: Some(cli.seed), ensemble: cli.ensemble };
            let res = run_experiment(*id, &ov)?;
            res.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&res.results)?);
        }
    }
    Ok(())
}
