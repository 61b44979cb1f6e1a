//! Configuration-driven commands tying the pipeline together: data
//! generation, fitting, subset selection, deficiency maps, simulation, and
//! the method-comparison benchmark.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{estimate_lipschitz, select_tau, BoxDomain, LipschitzEstimates, UniformBoundParams};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gp::{Dataset, MultiOutputGp};
use crate::measure::{theta_sq, RhoGapContext, VectorMap};
use crate::select::{greedy_select, mi_greedy_select, SelectionProblem, TimeInterval};
use crate::sim::{
    evaluate_experiment, generate_training_data, latent_prior_for, prepare_controller, rollout,
    write_summary_csv, write_trace_csv, BenchmarkSystem, EvaluationPlan, MeanSource,
    ReferenceTrajectory, RolloutConfig, SelectionMethod, TrackingController, REFERENCE_PERIOD,
};

#[derive(Parser)]
#[command(
    name = "rhogap",
    version,
    about = "Task-aware training-data selection for GP-based tracking control"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the prior-only closed loop and record a training dataset.
    GenData(CommonArgs),
    /// Fit the multi-output GP and derive the bound constants.
    Fit(CommonArgs),
    /// Select per-interval subsets with the configured method.
    Select(CommonArgs),
    /// Map the data-deficiency measure over a state grid at a fixed time.
    RhoMap(CommonArgs),
    /// Run one closed-loop rollout with the configured method.
    Simulate(CommonArgs),
    /// Compare all subset-selection methods over seeded rollouts.
    Evaluate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. --set sim.dt=0.0005 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Cap the worker-thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (defaults to the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses std::env::args, runs, and maps errors to exit codes.
pub fn run_from_args() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(&workspace(args)?),
        Command::Fit(args) => cmd_fit(&workspace(args)?),
        Command::Select(args) => cmd_select(&workspace(args)?),
        Command::RhoMap(args) => cmd_rho_map(&workspace(args)?),
        Command::Simulate(args) => cmd_simulate(&workspace(args)?),
        Command::Evaluate(args) => cmd_evaluate(&workspace(args)?),
    }
}

struct Workspace {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn workspace(args: &CommonArgs) -> Result<Workspace> {
    if let Some(n) = args.threads {
        // A second initialization (tests running several commands in one
        // process) is harmless; the first pool wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = ExperimentConfig::load(&args.config, &args.set)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    std::fs::create_dir_all(&out)?;
    Ok(Workspace { cfg, out })
}

#[derive(Serialize)]
struct DerivedConstants {
    tau: f64,
    r0: f64,
    beta: f64,
    gamma: Vec<f64>,
    theta_sq: Vec<f64>,
    lipschitz_mu: Vec<f64>,
    lipschitz_var: Vec<f64>,
    jitter: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    config_hash: String,
    seed: u64,
    config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    derived: Option<DerivedConstants>,
}

fn write_manifest(ws: &Workspace, command: &'static str, derived: Option<DerivedConstants>) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: ws.cfg.hash(),
        seed: ws.cfg.sim.seed,
        config: &ws.cfg,
        derived,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(ws.out.join(format!("manifest-{command}.json")), text)?;
    Ok(())
}

fn load_dataset(ws: &Workspace) -> Result<Dataset> {
    let path = ws.out.join("dataset.csv");
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found — run gen-data first",
            path.display()
        )));
    }
    Dataset::read_csv(&path)
}

fn fit_model(ws: &Workspace, data: Dataset) -> Result<Arc<MultiOutputGp>> {
    let kernel = ws.cfg.kernel()?;
    let prior = latent_prior_for(kernel.a())?;
    Ok(Arc::new(MultiOutputGp::fit(
        data,
        kernel,
        ws.cfg.noise_matrix(),
        prior,
    )?))
}

/// Resolves τ (fixed or via the candidate ladder against grid validation
/// points) and assembles the uniform-bound constants.
///
/// τ = auto screens the candidates against a budget-sized strided refit
/// rather than the full model: the precondition √β·σᵢ > γᵢ is consumed at
/// runtime under subset posteriors, and the full posterior's σ is already
/// noise-limited wherever the training trajectory passed.
fn resolve_bounds(
    ws: &Workspace,
    model: &MultiOutputGp,
) -> Result<(UniformBoundParams, LipschitzEstimates)> {
    let domain = ws.cfg.z_domain()?;
    let est = estimate_lipschitz(model, &domain, ws.cfg.bound.grid_per_dim)?;
    let r0 = domain.diameter();
    let bounds = match ws.cfg.bound.tau.fixed()? {
        Some(tau) => UniformBoundParams::derive(
            ws.cfg.bound.delta,
            tau,
            r0,
            2,
            ws.cfg.bound.lipschitz_f.clone(),
            est.mu.clone(),
            est.var.clone(),
        )?,
        None => {
            let n = model.data().len();
            let budget = ws.cfg.selection.budget.min(n).max(1);
            let strided: Vec<usize> = (0..budget).map(|k| k * n / budget).collect();
            let probe = model.refit(model.data().subset(&strided)?)?;
            let validation = domain.grid(ws.cfg.bound.validation_per_dim)?;
            select_tau(
                &probe,
                ws.cfg.bound.delta,
                r0,
                &ws.cfg.bound.lipschitz_f,
                &est.mu,
                &est.var,
                &validation,
            )?
        }
    };
    Ok((bounds, est))
}

fn derived_constants(
    ws: &Workspace,
    model: &MultiOutputGp,
    bounds: &UniformBoundParams,
    est: &LipschitzEstimates,
) -> Result<DerivedConstants> {
    let theta = (0..model.component_dim())
        .map(|i| theta_sq(model.kernel(), model.noise(), ws.cfg.measure.m, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(DerivedConstants {
        tau: bounds.tau,
        r0: bounds.r0,
        beta: bounds.beta,
        gamma: bounds.gamma.clone(),
        theta_sq: theta,
        lipschitz_mu: est.mu.clone(),
        lipschitz_var: est.var.clone(),
        jitter: model.jitter(),
    })
}

/// The ρ-gap scoring context: full-data model, tracking Lyapunov function
/// for the given amplitudes, and the full-model control law.
fn scoring_context(
    ws: &Workspace,
    model: Arc<MultiOutputGp>,
    bounds: UniformBoundParams,
    reference: ReferenceTrajectory,
) -> Result<RhoGapContext> {
    let policy_controller = TrackingController {
        gain: ws.cfg.sim.gain,
        reference,
        mean_source: MeanSource::Gp(model.clone()),
    };
    let policy: VectorMap = Arc::new(move |x: &[f64], t: f64| {
        policy_controller
            .control(x, t)
            .expect("full-model control is total")
    });
    RhoGapContext::new(
        model,
        reference.tracking_lyapunov(),
        policy,
        bounds,
        ws.cfg.measure.m,
        ws.cfg.measure.nu,
        ws.cfg.mode()?,
    )
}

fn build_plan(
    ws: &Workspace,
    data: Dataset,
    model: Arc<MultiOutputGp>,
    bounds: UniformBoundParams,
    methods: Vec<SelectionMethod>,
) -> Result<EvaluationPlan> {
    let cfg = &ws.cfg;
    Ok(EvaluationPlan {
        data,
        model,
        bounds,
        m_fill: cfg.measure.m,
        nu: cfg.measure.nu,
        mode: cfg.mode()?,
        budget: cfg.selection.budget,
        segments: cfg.selection.segments,
        t_grid: cfg.selection.t_grid,
        n_train: cfg.sim.n_train,
        rollouts: cfg.sim.rollouts,
        seed: cfg.sim.seed,
        t_end: cfg.sim.t_end,
        dt: cfg.sim.dt,
        gain: cfg.sim.gain,
        timing_reps: cfg.sim.timing_reps,
        methods,
        mi_grid_per_dim: cfg.sim.mi_grid_per_dim,
        mi_grid_halfwidth: cfg.sim.mi_grid_halfwidth,
    })
}

fn cmd_gen_data(ws: &Workspace) -> Result<()> {
    let cfg = &ws.cfg;
    let data = generate_training_data(
        cfg.sim.seed,
        cfg.sim.n_train,
        cfg.sim.t_end,
        cfg.sim.dt,
        &cfg.noise_matrix(),
        ReferenceTrajectory {
            c1: cfg.selection.c1,
            c2: cfg.selection.c2,
        },
    )?;
    data.write_csv(&ws.out.join("dataset.csv"))?;
    write_manifest(ws, "gen-data", None)?;
    println!("wrote {} samples to {}", data.len(), ws.out.join("dataset.csv").display());
    Ok(())
}

fn cmd_fit(ws: &Workspace) -> Result<()> {
    let data = load_dataset(ws)?;
    let n = data.len();
    let model = fit_model(ws, data)?;
    let (bounds, est) = resolve_bounds(ws, &model)?;
    let derived = derived_constants(ws, &model, &bounds, &est)?;
    write_manifest(ws, "fit", Some(derived))?;
    println!(
        "fitted {} samples: tau = {:.6}, beta = {:.6}, jitter = {:.3e}",
        n, bounds.tau, bounds.beta, model.jitter()
    );
    Ok(())
}

#[derive(Serialize)]
struct SelectionEntry {
    start: f64,
    end: f64,
    indices: Vec<usize>,
    objective_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_objective: Option<f64>,
}

#[derive(Serialize)]
struct SelectionFile {
    method: String,
    config_hash: String,
    period: f64,
    intervals: Vec<SelectionEntry>,
    wall_clock_s: f64,
}

fn cmd_select(ws: &Workspace) -> Result<()> {
    let cfg = &ws.cfg;
    let data = load_dataset(ws)?;
    let model = fit_model(ws, data.clone())?;
    let (bounds, est) = resolve_bounds(ws, &model)?;
    let derived = derived_constants(ws, &model, &bounds, &est)?;
    let method = cfg.method()?;
    let reference = ReferenceTrajectory {
        c1: cfg.selection.c1,
        c2: cfg.selection.c2,
    };
    let intervals = TimeInterval::uniform_partition(0.0, REFERENCE_PERIOD, cfg.selection.segments);
    let started = std::time::Instant::now();

    let entries: Vec<SelectionEntry> = match method {
        SelectionMethod::FullSet => {
            return Err(Error::Config(
                "'full' keeps every sample; pick rho-gap, mi-grid, or mi-reference".into(),
            ))
        }
        SelectionMethod::RhoGap => {
            let context = scoring_context(ws, model.clone(), bounds.clone(), reference)?;
            let problem = SelectionProblem::new(
                data.clone(),
                cfg.selection.budget,
                intervals.clone(),
                cfg.selection.t_grid,
                context,
            )?;
            let result = greedy_select(&problem)?;
            intervals
                .iter()
                .zip(result.intervals)
                .map(|(iv, sel)| SelectionEntry {
                    start: iv.start,
                    end: iv.end,
                    indices: sel.indices,
                    objective_trace: sel.objective_trace,
                    final_objective: Some(sel.final_objective),
                })
                .collect()
        }
        SelectionMethod::MiGrid => {
            let g = cfg.sim.mi_grid_per_dim;
            let h = cfg.sim.mi_grid_halfwidth;
            let refs: Vec<DVector<f64>> = BoxDomain::new(vec![-h, -h], vec![h, h])?
                .grid(g)?
                .into_iter()
                .map(|x| DVector::from_vec(vec![x[0], x[1], 0.0, 0.0]))
                .collect();
            let idx =
                mi_greedy_select(&data, &refs, cfg.selection.budget, model.kernel(), model.noise())?;
            intervals
                .iter()
                .map(|iv| SelectionEntry {
                    start: iv.start,
                    end: iv.end,
                    indices: idx.clone(),
                    objective_trace: Vec::new(),
                    final_objective: None,
                })
                .collect()
        }
        SelectionMethod::MiReference => intervals
            .iter()
            .map(|iv| {
                let refs: Vec<DVector<f64>> = iv
                    .grid(cfg.selection.t_grid)
                    .iter()
                    .map(|&t| {
                        let xr = reference.x_ref(t);
                        DVector::from_vec(vec![xr[0], xr[1], 0.0, 0.0])
                    })
                    .collect();
                let idx = mi_greedy_select(
                    &data,
                    &refs,
                    cfg.selection.budget,
                    model.kernel(),
                    model.noise(),
                )?;
                Ok(SelectionEntry {
                    start: iv.start,
                    end: iv.end,
                    indices: idx,
                    objective_trace: Vec::new(),
                    final_objective: None,
                })
            })
            .collect::<Result<_>>()?,
    };

    let file = SelectionFile {
        method: method.label().to_string(),
        config_hash: cfg.hash(),
        period: REFERENCE_PERIOD,
        intervals: entries,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Config(format!("selection serialization: {e}")))?;
    std::fs::write(ws.out.join("selection.json"), text)?;
    write_manifest(ws, "select", Some(derived))?;
    println!(
        "selected {} × {} samples with {}",
        cfg.selection.segments, cfg.selection.budget, method
    );
    Ok(())
}

fn cmd_rho_map(ws: &Workspace) -> Result<()> {
    let cfg = &ws.cfg;
    let data = load_dataset(ws)?;
    let model = fit_model(ws, data.clone())?;
    let (bounds, est) = resolve_bounds(ws, &model)?;
    let derived = derived_constants(ws, &model, &bounds, &est)?;
    let reference = ReferenceTrajectory {
        c1: cfg.rho_map.c1,
        c2: cfg.rho_map.c2,
    };
    let context = scoring_context(ws, model.clone(), bounds, reference)?;
    let states = BoxDomain::new(cfg.domain.x_lower.clone(), cfg.domain.x_upper.clone())?
        .grid(cfg.rho_map.grid_per_dim)?;
    let t = cfg.rho_map.t;

    let rows: Vec<Vec<String>> = states
        .par_iter()
        .map(|x| {
            let b = context.rho_gap_detailed(x.as_slice(), t, &data)?;
            let mut row = vec![
                format!("{:.9}", x[0]),
                format!("{:.9}", x[1]),
                format!("{t:.9}"),
                format!("{:.9}", b.rho),
            ];
            for out in &b.outputs {
                row.push(format!("{:.9}", out.phi));
                row.push(format!("{:.9}", out.phibar));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let path = ws.out.join("rho_map.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec![
        "x1".to_string(),
        "x2".to_string(),
        "t".to_string(),
        "rho".to_string(),
    ];
    for i in 1..=model.component_dim() {
        header.push(format!("phi_{i}"));
        header.push(format!("phibar_{i}"));
    }
    w.write_record(&header)?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;
    write_manifest(ws, "rho-map", Some(derived))?;
    println!("wrote {} map rows to {}", rows.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct RolloutReport {
    method: String,
    c1: f64,
    c2: f64,
    divergent: bool,
    mse_ss: f64,
    pred_time_us: Option<f64>,
}

fn cmd_simulate(ws: &Workspace) -> Result<()> {
    let cfg = &ws.cfg;
    let data = load_dataset(ws)?;
    let model = fit_model(ws, data.clone())?;
    let (bounds, est) = resolve_bounds(ws, &model)?;
    let derived = derived_constants(ws, &model, &bounds, &est)?;
    let method = cfg.method()?;
    let plan = build_plan(ws, data, model, bounds.clone(), vec![method])?;
    let amplitudes = (cfg.selection.c1, cfg.selection.c2);
    let controller = prepare_controller(&plan, method, amplitudes)?;
    let mut rcfg = RolloutConfig::new(controller.reference.x_ref(0.0), cfg.sim.t_end, cfg.sim.dt);
    rcfg.bounds = Some(bounds);
    rcfg.timing_reps = cfg.sim.timing_reps;
    let result = rollout(&BenchmarkSystem, &controller, &rcfg)?;
    write_trace_csv(&result, &ws.out.join("trace.csv"))?;
    let report = RolloutReport {
        method: method.label().to_string(),
        c1: amplitudes.0,
        c2: amplitudes.1,
        divergent: result.divergent,
        mse_ss: result.mse_ss,
        pred_time_us: result.pred_time_us,
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    std::fs::write(ws.out.join("rollout.json"), text)?;
    write_manifest(ws, "simulate", Some(derived))?;
    println!(
        "{}: mse_ss = {:.6e}, divergent = {}",
        method, result.mse_ss, result.divergent
    );
    Ok(())
}

fn cmd_evaluate(ws: &Workspace) -> Result<()> {
    let data = load_dataset(ws)?;
    let model = fit_model(ws, data.clone())?;
    let (bounds, est) = resolve_bounds(ws, &model)?;
    let derived = derived_constants(ws, &model, &bounds, &est)?;
    let plan = build_plan(ws, data, model, bounds, SelectionMethod::all())?;
    let trace_dir = ws.out.join("traces");
    std::fs::create_dir_all(&trace_dir)?;
    let summaries = evaluate_experiment(&plan, Some(&trace_dir))?;
    write_summary_csv(&summaries, &ws.out.join("summary.csv"))?;
    write_manifest(ws, "evaluate", Some(derived))?;
    for s in &summaries {
        println!(
            "{:<13} mse_ss = {:.6e} ± {:.6e}, pred = {:.1} µs",
            s.method.label(),
            s.mse_ss_mean,
            s.mse_ss_std,
            s.pred_time_us_mean
        );
    }
    Ok(())
}
