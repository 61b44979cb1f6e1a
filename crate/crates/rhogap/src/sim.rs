//! Closed-loop tracking benchmark: the planar test dynamics, their
//! coregionalized prior model, the reference-tracking controller, fixed-step
//! integration, training-data generation, and the subset-method comparison
//! harness.

use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{dmatrix, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::bounds::UniformBoundParams;
use crate::error::{Error, Result};
use crate::gp::{Dataset, MultiOutputGp, PriorMean};
use crate::kernel::{CoregKernel, SeKernelParams};
use crate::measure::{vdot_uncertain, LyapunovSpec, RhoGapContext, StabilityMode, VectorMap};
use crate::select::{greedy_select, mi_greedy_select, SelectionProblem, TimeInterval};

/// ẋ = x + logistic(2x₁)·(1, −1)ᵀ + 0.5·(sin πx₂, cos πx₁)ᵀ + u, modeled with
/// prior mean x + u and the mixing matrix below.
#[derive(Debug, Clone, Copy, Default)]
pub struct BenchmarkSystem;

impl BenchmarkSystem {
    pub fn dynamics(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        let sig = 1.0 / (1.0 + (-2.0 * x[0]).exp());
        DVector::from_vec(vec![
            x[0] + sig + 0.5 * (PI * x[1]).sin() + u[0],
            x[1] - sig + 0.5 * (PI * x[0]).cos() + u[1],
        ])
    }

    /// g(z) minus the modeled part x + u: the logistic and trigonometric
    /// terms. Independent of u.
    pub fn residual(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        self.dynamics(x, u) - DVector::from_vec(vec![x[0] + u[0], x[1] + u[1]])
    }

    /// Mixing matrix tying the two outputs through the shared logistic term.
    pub fn mixing(&self) -> DMatrix<f64> {
        dmatrix![1.0, 0.0; -1.0, 1.0]
    }

    /// Prior mean of g is x + u; in latent coordinates that is A⁻¹·(x + u).
    pub fn latent_prior(&self) -> PriorMean {
        Arc::new(|z: &[f64]| {
            let g1 = z[0] + z[2];
            let g2 = z[1] + z[3];
            DVector::from_vec(vec![g1, g1 + g2])
        })
    }

    /// SE kernels for the two latent components: the first over both state
    /// dimensions, the second over x₁ alone (the logistic term's argument).
    pub fn default_kernel(&self, length_scale: f64, signal_variance: f64) -> Result<CoregKernel> {
        CoregKernel::new(
            self.mixing(),
            vec![
                SeKernelParams::new(signal_variance, vec![length_scale; 2], vec![0, 1])?,
                SeKernelParams::new(signal_variance, vec![length_scale], vec![0])?,
            ],
        )
    }
}

/// The x + u prior on g, expressed in latent coordinates for an arbitrary
/// invertible mixing matrix: A⁻¹·(x + u).
pub fn latent_prior_for(a: &DMatrix<f64>) -> Result<PriorMean> {
    let inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Config("kernel.a must be invertible for the x+u prior".into()))?;
    Ok(Arc::new(move |z: &[f64]| {
        &inv * DVector::from_vec(vec![z[0] + z[2], z[1] + z[3]])
    }))
}

/// x_ref(t) = (c₁ sin t, c₂ cos t).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceTrajectory {
    pub c1: f64,
    pub c2: f64,
}

impl ReferenceTrajectory {
    pub fn x_ref(&self, t: f64) -> DVector<f64> {
        DVector::from_vec(vec![self.c1 * t.sin(), self.c2 * t.cos()])
    }

    pub fn x_ref_dot(&self, t: f64) -> DVector<f64> {
        DVector::from_vec(vec![self.c1 * t.cos(), -self.c2 * t.sin()])
    }

    /// V(x, t) = ‖x − x_ref(t)‖² for this reference.
    pub fn tracking_lyapunov(&self) -> LyapunovSpec {
        let r = *self;
        LyapunovSpec {
            value: Arc::new(move |x, t| {
                let xr = r.x_ref(t);
                (x[0] - xr[0]).powi(2) + (x[1] - xr[1]).powi(2)
            }),
            gradient: Arc::new(move |x, t| {
                let xr = r.x_ref(t);
                DVector::from_vec(vec![2.0 * (x[0] - xr[0]), 2.0 * (x[1] - xr[1])])
            }),
            time_derivative: Arc::new(move |x, t| {
                let xr = r.x_ref(t);
                let xd = r.x_ref_dot(t);
                -2.0 * ((x[0] - xr[0]) * xd[0] + (x[1] - xr[1]) * xd[1])
            }),
        }
    }
}

/// Where the controller's μ(x) comes from.
#[derive(Clone)]
pub enum MeanSource {
    /// μ(x) = x — the prior model's g-mean at (x, 0).
    PriorOnly,
    /// μ(x) = true g(x, 0); diagnostic oracle.
    TrueSystem,
    Gp(Arc<MultiOutputGp>),
    /// Per-interval models cycling with the given period; model s is active
    /// while (t mod period) lies in the s-th of `models.len()` equal slots.
    Scheduled {
        models: Vec<Arc<MultiOutputGp>>,
        period: f64,
    },
}

/// u = −(μ(x) + K·(x − x_ref(t)) − ẋ_ref(t)).
#[derive(Clone)]
pub struct TrackingController {
    pub gain: f64,
    pub reference: ReferenceTrajectory,
    pub mean_source: MeanSource,
}

impl TrackingController {
    /// Index of the active per-interval model, if scheduled.
    pub fn active_index(&self, t: f64) -> Option<usize> {
        match &self.mean_source {
            MeanSource::Scheduled { models, period } => {
                let frac = t.rem_euclid(*period) / period;
                Some(((models.len() as f64 * frac).floor() as usize).min(models.len() - 1))
            }
            _ => None,
        }
    }

    pub fn active_model(&self, t: f64) -> Option<&Arc<MultiOutputGp>> {
        match &self.mean_source {
            MeanSource::Gp(m) => Some(m),
            MeanSource::Scheduled { models, .. } => {
                Some(&models[self.active_index(t).expect("scheduled source")])
            }
            _ => None,
        }
    }

    /// μ(x): the source's mean of g at (x, u = 0).
    pub fn mean(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        self.model_mean_g(x, &[0.0, 0.0], t)
    }

    /// The source's mean of ẋ = g(x, u) at an arbitrary input.
    pub fn model_mean_g(&self, x: &[f64], u: &[f64], t: f64) -> Result<DVector<f64>> {
        match &self.mean_source {
            MeanSource::PriorOnly => Ok(DVector::from_vec(vec![x[0] + u[0], x[1] + u[1]])),
            MeanSource::TrueSystem => Ok(BenchmarkSystem.dynamics(x, u)),
            _ => {
                let model = self.active_model(t).expect("GP-backed source");
                model.posterior_mean_g(&[x[0], x[1], u[0], u[1]])
            }
        }
    }

    pub fn control(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        let mu = self.mean(x, t)?;
        let xr = self.reference.x_ref(t);
        let xd = self.reference.x_ref_dot(t);
        Ok(DVector::from_vec(vec![
            -(mu[0] + self.gain * (x[0] - xr[0]) - xd[0]),
            -(mu[1] + self.gain * (x[1] - xr[1]) - xd[1]),
        ]))
    }
}

#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_ref: DVector<f64>,
    pub v: f64,
    pub vdot_nom: f64,
    pub vdot_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub steps: Vec<RolloutStep>,
    pub divergent: bool,
    /// Mean squared tracking error over t ∈ [T/2, T]; +∞ if divergent.
    pub mse_ss: f64,
    /// Mean per-query latency of the controller's model in microseconds,
    /// when GP-backed and timing was requested.
    pub pred_time_us: Option<f64>,
}

pub struct RolloutConfig {
    pub x0: DVector<f64>,
    pub t_end: f64,
    pub dt: f64,
    /// When set and the controller is GP-backed, V̇_σ is logged (0 otherwise).
    pub bounds: Option<UniformBoundParams>,
    /// Timing repetitions per probe state: 0 disables, otherwise ≥ 10.
    pub timing_reps: usize,
}

impl RolloutConfig {
    pub fn new(x0: DVector<f64>, t_end: f64, dt: f64) -> Self {
        RolloutConfig {
            x0,
            t_end,
            dt,
            bounds: None,
            timing_reps: 0,
        }
    }
}

pub const DIVERGENCE_NORM: f64 = 1e6;

fn rk4_step(
    system: &BenchmarkSystem,
    controller: &TrackingController,
    x: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>> {
    let f = |x: &DVector<f64>, t: f64| -> Result<DVector<f64>> {
        let u = controller.control(x.as_slice(), t)?;
        Ok(system.dynamics(x.as_slice(), u.as_slice()))
    };
    let k1 = f(x, t)?;
    let k2 = f(&(x + &k1 * (dt / 2.0)), t + dt / 2.0)?;
    let k3 = f(&(x + &k2 * (dt / 2.0)), t + dt / 2.0)?;
    let k4 = f(&(x + &k3 * dt), t + dt)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Integrates the closed loop with the classical 4th-order fixed-step scheme,
/// logging V, V̇_nom, and V̇_σ at every step. A state leaving the
/// ‖x‖ ≤ [`DIVERGENCE_NORM`] ball aborts the rollout with `divergent` set.
pub fn rollout(
    system: &BenchmarkSystem,
    controller: &TrackingController,
    cfg: &RolloutConfig,
) -> Result<RolloutResult> {
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive, got {}", cfg.dt)));
    }
    if cfg.t_end < cfg.dt {
        return Err(Error::invalid("horizon is shorter than one step"));
    }
    if cfg.x0.len() != 2 {
        return Err(Error::invalid("benchmark state is two-dimensional"));
    }
    if cfg.timing_reps > 0 && cfg.timing_reps < 10 {
        return Err(Error::invalid("timing needs at least 10 repetitions"));
    }
    let lyap = controller.reference.tracking_lyapunov();
    let total = (cfg.t_end / cfg.dt).round() as usize;
    let mut steps = Vec::with_capacity(total + 1);
    let mut x = cfg.x0.clone();
    let mut divergent = false;

    for k in 0..=total {
        let t = k as f64 * cfg.dt;
        if !(x.iter().all(|v| v.is_finite()) && x.norm() <= DIVERGENCE_NORM) {
            divergent = true;
            break;
        }
        let u = controller.control(x.as_slice(), t)?;
        let v = (lyap.value)(x.as_slice(), t);
        let grad = (lyap.gradient)(x.as_slice(), t);
        let mean = controller.model_mean_g(x.as_slice(), u.as_slice(), t)?;
        let vdot_nom = grad.dot(&mean) + (lyap.time_derivative)(x.as_slice(), t);
        let vdot_sigma = match (&cfg.bounds, controller.active_model(t)) {
            (Some(b), Some(model)) => {
                vdot_uncertain(x.as_slice(), u.as_slice(), t, &lyap, model, b)?
            }
            _ => 0.0,
        };
        steps.push(RolloutStep {
            t,
            x: x.clone(),
            u,
            x_ref: controller.reference.x_ref(t),
            v,
            vdot_nom,
            vdot_sigma,
        });
        if k < total {
            x = rk4_step(system, controller, &x, t, cfg.dt)?;
        }
    }

    let mse_ss = if divergent {
        f64::INFINITY
    } else {
        let window = cfg.t_end / 2.0 - 1e-12;
        let (mut acc, mut cnt) = (0.0, 0usize);
        for s in &steps {
            if s.t >= window {
                acc += (&s.x - &s.x_ref).norm_squared();
                cnt += 1;
            }
        }
        acc / cnt as f64
    };
    let pred_time_us = measure_latency(controller, &steps, cfg.timing_reps)?;
    Ok(RolloutResult {
        steps,
        divergent,
        mse_ss,
        pred_time_us,
    })
}

/// Mean model-query latency at four states spread along the trajectory.
/// Single-threaded by construction; call it outside any parallel section.
fn measure_latency(
    controller: &TrackingController,
    steps: &[RolloutStep],
    reps: usize,
) -> Result<Option<f64>> {
    if reps == 0 || steps.is_empty() || controller.active_model(0.0).is_none() {
        return Ok(None);
    }
    let n = steps.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for j in 0..4usize {
        let s = &steps[((2 * j + 1) * n / 8).min(n - 1)];
        let model = controller.active_model(s.t).expect("GP-backed source");
        let z = DVector::from_vec(vec![s.x[0], s.x[1], 0.0, 0.0]);
        total += model.predict_timing(&[z], reps)?.mean_us;
        count += 1;
    }
    Ok(Some(total / count as f64))
}

/// Symmetric PSD square root via the eigendecomposition; tolerates singular
/// noise matrices (eigenvalues are floored at zero).
fn psd_root(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("noise entries must be finite"));
    }
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Simulates the closed loop with the prior-only controller (gain 15, unit
/// reference amplitudes) and records n observations y = g(z) + ε,
/// ε ∼ N(0, Σ_on), at states sampled at uniformly spaced times in [0, T].
/// Deterministic per seed.
pub fn generate_training_data(
    seed: u64,
    n: usize,
    t_end: f64,
    dt: f64,
    noise: &DMatrix<f64>,
    reference: ReferenceTrajectory,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("need at least one training sample"));
    }
    if noise.nrows() != 2 || noise.ncols() != 2 {
        return Err(Error::invalid("benchmark noise must be 2×2"));
    }
    let system = BenchmarkSystem;
    let controller = TrackingController {
        gain: 15.0,
        reference,
        mean_source: MeanSource::PriorOnly,
    };
    let run = rollout(
        &system,
        &controller,
        &RolloutConfig::new(reference.x_ref(0.0), t_end, dt),
    )?;
    if run.divergent {
        return Err(Error::Domain("training rollout diverged".into()));
    }
    let root = psd_root(noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Dataset::new(2, 2);
    for j in 0..n {
        // Midpoint times keep samples clear of both endpoints.
        let t_j = (j as f64 + 0.5) * t_end / n as f64;
        let s = &run.steps[((t_j / dt).round() as usize).min(run.steps.len() - 1)];
        let z = DVector::from_vec(vec![s.x[0], s.x[1], s.u[0], s.u[1]]);
        let eta = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
        let y = system.dynamics(s.x.as_slice(), s.u.as_slice()) + &root * eta;
        data.push(z, y)?;
    }
    Ok(data)
}

/// One cycle of x_ref — the horizon the per-interval subset schedule repeats
/// over.
pub const REFERENCE_PERIOD: f64 = TAU;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectionMethod {
    FullSet,
    MiGrid,
    MiReference,
    RhoGap,
}

impl SelectionMethod {
    pub fn label(&self) -> &'static str {
        match self {
            SelectionMethod::FullSet => "full",
            SelectionMethod::MiGrid => "mi-grid",
            SelectionMethod::MiReference => "mi-reference",
            SelectionMethod::RhoGap => "rho-gap",
        }
    }

    pub fn all() -> Vec<SelectionMethod> {
        vec![
            SelectionMethod::FullSet,
            SelectionMethod::MiGrid,
            SelectionMethod::MiReference,
            SelectionMethod::RhoGap,
        ]
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SelectionMethod::FullSet),
            "mi-grid" => Ok(SelectionMethod::MiGrid),
            "mi-reference" => Ok(SelectionMethod::MiReference),
            "rho-gap" => Ok(SelectionMethod::RhoGap),
            other => Err(Error::Config(format!(
                "unknown selection method '{other}' (full|mi-grid|mi-reference|rho-gap)"
            ))),
        }
    }
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Everything the method-comparison harness needs, already assembled:
/// training data, the full-data model, and the bound constants.
pub struct EvaluationPlan {
    pub data: Dataset,
    pub model: Arc<MultiOutputGp>,
    pub bounds: UniformBoundParams,
    pub m_fill: usize,
    pub nu: f64,
    pub mode: StabilityMode,
    /// Subset size N̄ per interval.
    pub budget: usize,
    /// Number of equal intervals the reference period splits into.
    pub segments: usize,
    /// Selection/evaluation times per interval.
    pub t_grid: usize,
    /// Training samples gathered per experiment instance.
    pub n_train: usize,
    pub rollouts: usize,
    pub seed: u64,
    pub t_end: f64,
    pub dt: f64,
    pub gain: f64,
    /// Latency repetitions (0 skips timing).
    pub timing_reps: usize,
    pub methods: Vec<SelectionMethod>,
    /// MI-grid baseline: points per axis over the centered square below.
    pub mi_grid_per_dim: usize,
    pub mi_grid_halfwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: SelectionMethod,
    pub mse_ss_mean: f64,
    pub mse_ss_std: f64,
    /// NaN when timing was disabled.
    pub pred_time_us_mean: f64,
    pub divergent: usize,
}

fn subset_model(
    model: &MultiOutputGp,
    data: &Dataset,
    indices: &[usize],
) -> Result<Arc<MultiOutputGp>> {
    Ok(Arc::new(model.refit(data.subset(indices)?)?))
}

/// π(x, t) built on the full-data posterior mean — the control law the
/// importance measure scores candidate subsets under.
fn full_model_policy(
    plan: &EvaluationPlan,
    model: &Arc<MultiOutputGp>,
    reference: ReferenceTrajectory,
) -> VectorMap {
    let controller = TrackingController {
        gain: plan.gain,
        reference,
        mean_source: MeanSource::Gp(model.clone()),
    };
    Arc::new(move |x: &[f64], t: f64| {
        controller
            .control(x, t)
            .expect("full-model control is total")
    })
}

fn rho_gap_schedule(
    plan: &EvaluationPlan,
    data: &Dataset,
    model: &Arc<MultiOutputGp>,
    reference: ReferenceTrajectory,
) -> Result<Vec<Arc<MultiOutputGp>>> {
    let context = RhoGapContext::new(
        model.clone(),
        reference.tracking_lyapunov(),
        full_model_policy(plan, model, reference),
        plan.bounds.clone(),
        plan.m_fill,
        plan.nu,
        plan.mode,
    )?;
    let problem = SelectionProblem::new(
        data.clone(),
        plan.budget,
        TimeInterval::uniform_partition(0.0, REFERENCE_PERIOD, plan.segments),
        plan.t_grid,
        context,
    )?;
    greedy_select(&problem)?
        .intervals
        .iter()
        .map(|iv| subset_model(model, data, &iv.indices))
        .collect()
}

fn mi_reference_schedule(
    plan: &EvaluationPlan,
    data: &Dataset,
    model: &Arc<MultiOutputGp>,
    reference: ReferenceTrajectory,
) -> Result<Vec<Arc<MultiOutputGp>>> {
    TimeInterval::uniform_partition(0.0, REFERENCE_PERIOD, plan.segments)
        .iter()
        .map(|iv| {
            let refs: Vec<DVector<f64>> = iv
                .grid(plan.t_grid)
                .iter()
                .map(|&t| {
                    let xr = reference.x_ref(t);
                    DVector::from_vec(vec![xr[0], xr[1], 0.0, 0.0])
                })
                .collect();
            let idx = mi_greedy_select(data, &refs, plan.budget, model.kernel(), model.noise())?;
            subset_model(model, data, &idx)
        })
        .collect()
}

fn mi_grid_subset(
    plan: &EvaluationPlan,
    data: &Dataset,
    model: &MultiOutputGp,
) -> Result<Arc<MultiOutputGp>> {
    let g = plan.mi_grid_per_dim;
    let h = plan.mi_grid_halfwidth;
    if g < 2 {
        return Err(Error::invalid("MI grid needs at least 2 points per axis"));
    }
    let mut refs = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            let x1 = -h + 2.0 * h * i as f64 / (g - 1) as f64;
            let x2 = -h + 2.0 * h * j as f64 / (g - 1) as f64;
            refs.push(DVector::from_vec(vec![x1, x2, 0.0, 0.0]));
        }
    }
    let idx = mi_greedy_select(data, &refs, plan.budget, model.kernel(), model.noise())?;
    subset_model(model, data, &idx)
}

fn method_controller(
    plan: &EvaluationPlan,
    method: SelectionMethod,
    amplitudes: (f64, f64),
    data: &Dataset,
    model: &Arc<MultiOutputGp>,
    mi_grid_model: Option<&Arc<MultiOutputGp>>,
) -> Result<TrackingController> {
    let reference = ReferenceTrajectory {
        c1: amplitudes.0,
        c2: amplitudes.1,
    };
    let mean_source = match method {
        SelectionMethod::FullSet => MeanSource::Gp(model.clone()),
        SelectionMethod::MiGrid => MeanSource::Gp(
            mi_grid_model
                .expect("MI-grid subset prepared upfront")
                .clone(),
        ),
        SelectionMethod::MiReference => MeanSource::Scheduled {
            models: mi_reference_schedule(plan, data, model, reference)?,
            period: REFERENCE_PERIOD,
        },
        SelectionMethod::RhoGap => MeanSource::Scheduled {
            models: rho_gap_schedule(plan, data, model, reference)?,
            period: REFERENCE_PERIOD,
        },
    };
    Ok(TrackingController {
        gain: plan.gain,
        reference,
        mean_source,
    })
}

/// Builds the tracking controller one method uses on the plan's shared
/// dataset; the MI-grid subset is computed on demand.
pub fn prepare_controller(
    plan: &EvaluationPlan,
    method: SelectionMethod,
    amplitudes: (f64, f64),
) -> Result<TrackingController> {
    let mi_grid = if method == SelectionMethod::MiGrid {
        Some(mi_grid_subset(plan, &plan.data, &plan.model)?)
    } else {
        None
    };
    method_controller(
        plan,
        method,
        amplitudes,
        &plan.data,
        &plan.model,
        mi_grid.as_ref(),
    )
}

/// One rollout's self-contained experiment instance: training data gathered
/// along the rollout's own reference, plus the full-set refit.
fn instance_models(
    plan: &EvaluationPlan,
    amplitudes: (f64, f64),
    data_seed: u64,
) -> Result<(Dataset, Arc<MultiOutputGp>)> {
    let reference = ReferenceTrajectory {
        c1: amplitudes.0,
        c2: amplitudes.1,
    };
    let data = generate_training_data(
        data_seed,
        plan.n_train,
        plan.t_end,
        plan.dt,
        plan.model.noise(),
        reference,
    )?;
    let model = Arc::new(plan.model.refit(data.clone())?);
    Ok((data, model))
}

/// Runs R seeded experiment instances. Each instance draws reference
/// amplitudes c ∼ N(0, 1)², gathers its own training set along that
/// reference, and runs every method's controller on the shared instance —
/// a paired comparison of the selection strategies. Instances run in
/// parallel; latency is measured single-threaded on the first instance
/// afterwards.
pub fn evaluate_experiment(
    plan: &EvaluationPlan,
    trace_dir: Option<&Path>,
) -> Result<Vec<MethodSummary>> {
    if plan.rollouts == 0 {
        return Ok(Vec::new());
    }
    if plan.methods.is_empty() {
        return Err(Error::invalid("no selection methods requested"));
    }
    let system = BenchmarkSystem;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let instances: Vec<((f64, f64), u64)> = (0..plan.rollouts)
        .map(|_| {
            let c1 = StandardNormal.sample(&mut rng);
            let c2 = StandardNormal.sample(&mut rng);
            ((c1, c2), rng.random())
        })
        .collect();
    let want_mi_grid = plan.methods.contains(&SelectionMethod::MiGrid);

    let per_rollout: Vec<Vec<RolloutResult>> = instances
        .par_iter()
        .map(|&(amps, data_seed)| {
            let (data, model) = instance_models(plan, amps, data_seed)?;
            let mi_grid = if want_mi_grid {
                Some(mi_grid_subset(plan, &data, &model)?)
            } else {
                None
            };
            plan.methods
                .iter()
                .map(|&method| {
                    let controller =
                        method_controller(plan, method, amps, &data, &model, mi_grid.as_ref())?;
                    let mut cfg = RolloutConfig::new(
                        controller.reference.x_ref(0.0),
                        plan.t_end,
                        plan.dt,
                    );
                    cfg.bounds = Some(plan.bounds.clone());
                    rollout(&system, &controller, &cfg)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let timings: Vec<f64> = if plan.timing_reps >= 10 {
        let (amps, data_seed) = instances[0];
        let (data, model) = instance_models(plan, amps, data_seed)?;
        let mi_grid = if want_mi_grid {
            Some(mi_grid_subset(plan, &data, &model)?)
        } else {
            None
        };
        plan.methods
            .iter()
            .enumerate()
            .map(|(mi, &method)| {
                let controller =
                    method_controller(plan, method, amps, &data, &model, mi_grid.as_ref())?;
                Ok(
                    measure_latency(&controller, &per_rollout[0][mi].steps, plan.timing_reps)?
                        .unwrap_or(f64::NAN),
                )
            })
            .collect::<Result<_>>()?
    } else {
        vec![f64::NAN; plan.methods.len()]
    };

    let mut summaries = Vec::with_capacity(plan.methods.len());
    for (mi, &method) in plan.methods.iter().enumerate() {
        let outcomes: Vec<&RolloutResult> = per_rollout.iter().map(|r| &r[mi]).collect();
        if let Some(dir) = trace_dir {
            for (r, res) in outcomes.iter().enumerate() {
                write_trace_csv(res, &dir.join(format!("trace_{}_{r:03}.csv", method.label())))?;
            }
        }
        let divergent = outcomes.iter().filter(|o| o.divergent).count();
        let mses: Vec<f64> = outcomes.iter().map(|o| o.mse_ss).collect();
        let mean = mses.iter().sum::<f64>() / mses.len() as f64;
        let std = if mses.len() > 1 {
            (mses.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (mses.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        summaries.push(MethodSummary {
            method,
            mse_ss_mean: mean,
            mse_ss_std: std,
            pred_time_us_mean: timings[mi],
            divergent,
        });
    }
    Ok(summaries)
}

pub fn write_trace_csv(result: &RolloutResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "t",
        "x1",
        "x2",
        "u1",
        "u2",
        "xref1",
        "xref2",
        "V",
        "Vdot_nom",
        "Vdot_sigma",
    ])?;
    for s in &result.steps {
        w.write_record([
            format!("{:.9}", s.t),
            format!("{:.9}", s.x[0]),
            format!("{:.9}", s.x[1]),
            format!("{:.9}", s.u[0]),
            format!("{:.9}", s.u[1]),
            format!("{:.9}", s.x_ref[0]),
            format!("{:.9}", s.x_ref[1]),
            format!("{:.9}", s.v),
            format!("{:.9}", s.vdot_nom),
            format!("{:.9}", s.vdot_sigma),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(summaries: &[MethodSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "mse_ss_mean", "mse_ss_std", "pred_time_us_mean"])?;
    for s in summaries {
        w.write_record([
            s.method.label().to_string(),
            format!("{:.9}", s.mse_ss_mean),
            format!("{:.9}", s.mse_ss_std),
            format!("{:.3}", s.pred_time_us_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::compute_beta;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn unit_reference() -> ReferenceTrajectory {
        ReferenceTrajectory { c1: 1.0, c2: 1.0 }
    }

    #[test]
    fn dynamics_hand_value_at_origin() {
        let d = BenchmarkSystem.dynamics(&[0.0, 0.0], &[0.0, 0.0]);
        assert_relative_eq!(d[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(d[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn input_cancels_drift_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let drift = BenchmarkSystem.dynamics(&x, &[0.0, 0.0]);
            let d = BenchmarkSystem.dynamics(&x, &[-drift[0], -drift[1]]);
            assert_relative_eq!(d.norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn residual_is_input_independent_and_explicit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let u1 = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let u2 = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let r1 = BenchmarkSystem.residual(&x, &u1);
            let r2 = BenchmarkSystem.residual(&x, &u2);
            assert_relative_eq!((r1.clone() - r2).norm(), 0.0, epsilon = 1e-13);
            let sig = 1.0 / (1.0 + (-2.0 * x[0]).exp());
            assert_relative_eq!(r1[0], sig + 0.5 * (PI * x[1]).sin(), epsilon = 1e-13);
            assert_relative_eq!(r1[1], -sig + 0.5 * (PI * x[0]).cos(), epsilon = 1e-13);
        }
    }

    #[test]
    fn latent_prior_mixes_back_to_x_plus_u() {
        let system = BenchmarkSystem;
        let prior = system.latent_prior();
        let a = system.mixing();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = &a * prior(&z);
            assert_relative_eq!(g[0], z[0] + z[2], epsilon = 1e-14);
            assert_relative_eq!(g[1], z[1] + z[3], epsilon = 1e-14);
        }
        // The unfitted model's posterior mean is exactly the prior model.
        let gp = MultiOutputGp::fit(
            Dataset::new(2, 2),
            system.default_kernel(0.5, 1.0).unwrap(),
            DMatrix::identity(2, 2) * 1e-2,
            system.latent_prior(),
        )
        .unwrap();
        let mean = gp.posterior_mean_g(&[0.3, -0.4, 0.1, 0.2]).unwrap();
        assert_relative_eq!(mean[0], 0.4, epsilon = 1e-14);
        assert_relative_eq!(mean[1], -0.2, epsilon = 1e-14);
    }

    #[test]
    fn reference_velocity_matches_finite_differences() {
        let r = ReferenceTrajectory { c1: 0.8, c2: -1.3 };
        let h = 1e-6;
        for k in 0..20 {
            let t = 0.37 * k as f64;
            let fd = (r.x_ref(t + h) - r.x_ref(t - h)) / (2.0 * h);
            assert!((fd - r.x_ref_dot(t)).norm() < 1e-6);
        }
    }

    #[test]
    fn prior_only_control_on_reference_is_velocity_minus_position() {
        let r = unit_reference();
        let c = TrackingController {
            gain: 15.0,
            reference: r,
            mean_source: MeanSource::PriorOnly,
        };
        for k in 0..10 {
            let t = 0.6 * k as f64;
            let xr = r.x_ref(t);
            let u = c.control(xr.as_slice(), t).unwrap();
            let expect = r.x_ref_dot(t) - &xr;
            assert_relative_eq!((u - expect).norm(), 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn exact_mean_with_zero_gain_follows_reference_velocity() {
        let r = ReferenceTrajectory { c1: -0.7, c2: 0.4 };
        let c = TrackingController {
            gain: 0.0,
            reference: r,
            mean_source: MeanSource::TrueSystem,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let t = rng.random_range(0.0..6.0);
            let u = c.control(&x, t).unwrap();
            let xdot = BenchmarkSystem.dynamics(&x, u.as_slice());
            assert_relative_eq!((xdot - r.x_ref_dot(t)).norm(), 0.0, epsilon = 1e-12);
        }
    }

    fn tiny_model(points: &[(f64, f64)]) -> Arc<MultiOutputGp> {
        let system = BenchmarkSystem;
        let mut data = Dataset::new(2, 2);
        for &(a, b) in points {
            let x = [a, b];
            let u = [0.0, 0.0];
            data.push(
                DVector::from_vec(vec![x[0], x[1], u[0], u[1]]),
                system.dynamics(&x, &u),
            )
            .unwrap();
        }
        Arc::new(
            MultiOutputGp::fit(
                data,
                system.default_kernel(0.5, 1.0).unwrap(),
                DMatrix::identity(2, 2) * 1e-2,
                system.latent_prior(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn schedule_switches_exactly_at_interval_boundaries() {
        let m0 = tiny_model(&[(0.0, 0.5)]);
        let m1 = tiny_model(&[(0.5, 0.0), (-0.5, 0.1)]);
        let c = TrackingController {
            gain: 15.0,
            reference: unit_reference(),
            mean_source: MeanSource::Scheduled {
                models: vec![m0, m1],
                period: REFERENCE_PERIOD,
            },
        };
        assert_eq!(c.active_index(0.0), Some(0));
        assert_eq!(c.active_index(PI - 1e-9), Some(0));
        assert_eq!(c.active_index(PI), Some(1));
        assert_eq!(c.active_index(PI + 1e-9), Some(1));
        assert_eq!(c.active_index(TAU), Some(0), "schedule wraps with the period");
        assert_eq!(c.active_index(TAU + PI), Some(1));
        // The two models really answer differently.
        let a = c.mean(&[0.2, 0.2], 0.1).unwrap();
        let b = c.mean(&[0.2, 0.2], PI + 0.1).unwrap();
        assert!((a - b).norm() > 1e-6);
    }

    #[test]
    fn exact_model_rollout_tracks_to_integrator_precision() {
        let r = unit_reference();
        let c = TrackingController {
            gain: 15.0,
            reference: r,
            mean_source: MeanSource::TrueSystem,
        };
        let res = rollout(
            &BenchmarkSystem,
            &c,
            &RolloutConfig::new(r.x_ref(0.0), 2.0, 1e-3),
        )
        .unwrap();
        assert!(!res.divergent);
        assert!(res.mse_ss <= 1e-10, "mse = {}", res.mse_ss);
    }

    #[test]
    fn step_halving_shows_fourth_order_convergence() {
        let r = unit_reference();
        let c = TrackingController {
            gain: 15.0,
            reference: r,
            mean_source: MeanSource::PriorOnly,
        };
        let end_state = |dt: f64| {
            let res = rollout(
                &BenchmarkSystem,
                &c,
                &RolloutConfig::new(DVector::from_vec(vec![0.4, 0.6]), 1.0, dt),
            )
            .unwrap();
            res.steps.last().unwrap().x.clone()
        };
        let coarse = (end_state(2e-3) - end_state(1e-3)).norm();
        let fine = (end_state(1e-3) - end_state(5e-4)).norm();
        assert!(fine > 1e-16, "refinement differences vanished: {fine}");
        let ratio = coarse / fine;
        assert!(
            (8.0..=40.0).contains(&ratio),
            "step-halving ratio {ratio} is incompatible with 4th order"
        );
    }

    #[test]
    fn rollout_logs_are_consistent() {
        let r = ReferenceTrajectory { c1: 0.9, c2: 1.1 };
        let c = TrackingController {
            gain: 15.0,
            reference: r,
            mean_source: MeanSource::PriorOnly,
        };
        let res = rollout(
            &BenchmarkSystem,
            &c,
            &RolloutConfig::new(DVector::from_vec(vec![0.3, -0.2]), 1.0, 1e-3),
        )
        .unwrap();
        assert_eq!(res.steps.len(), 1001);
        for w in res.steps.windows(2) {
            assert_relative_eq!(w[1].t - w[0].t, 1e-3, epsilon = 1e-12);
        }
        for s in &res.steps {
            assert!(s.v >= 0.0);
            assert_eq!(s.vdot_sigma, 0.0, "no GP, no uncertainty term");
        }
        assert!(res.pred_time_us.is_none());
    }

    #[test]
    fn unstable_gain_flags_divergence() {
        let c = TrackingController {
            gain: -50.0,
            reference: unit_reference(),
            mean_source: MeanSource::PriorOnly,
        };
        let res = rollout(
            &BenchmarkSystem,
            &c,
            &RolloutConfig::new(DVector::from_vec(vec![2.0, 2.0]), 5.0, 1e-3),
        )
        .unwrap();
        assert!(res.divergent);
        assert!(res.mse_ss.is_infinite());
        assert!(res.steps.len() < 5001);
    }

    #[test]
    fn training_data_is_seeded_and_noise_free_when_asked() {
        let zero = DMatrix::zeros(2, 2);
        let a = generate_training_data(42, 100, 10.0, 1e-2, &zero, ReferenceTrajectory { c1: 1.0, c2: 1.0 }).unwrap();
        assert_eq!(a.len(), 100);
        let system = BenchmarkSystem;
        for s in a.samples() {
            let g = system.dynamics(&[s.z[0], s.z[1]], &[s.z[2], s.z[3]]);
            assert_eq!(s.y, g, "zero noise must reproduce g exactly");
        }
        let noise = DMatrix::identity(2, 2) * 1e-2;
        let b1 = generate_training_data(7, 40, 10.0, 1e-2, &noise, ReferenceTrajectory { c1: 1.0, c2: 1.0 }).unwrap();
        let b2 = generate_training_data(7, 40, 10.0, 1e-2, &noise, ReferenceTrajectory { c1: 1.0, c2: 1.0 }).unwrap();
        for (s1, s2) in b1.samples().iter().zip(b2.samples()) {
            assert_eq!(s1.z, s2.z);
            assert_eq!(s1.y, s2.y);
        }
        let b3 = generate_training_data(8, 40, 10.0, 1e-2, &noise, ReferenceTrajectory { c1: 1.0, c2: 1.0 }).unwrap();
        assert!(b1.samples().iter().zip(b3.samples()).any(|(p, q)| p.y != q.y));
    }

    #[test]
    fn fitted_model_shrinks_uncertainty_over_visited_region() {
        let noise = DMatrix::identity(2, 2) * 1e-2;
        let data = generate_training_data(3, 60, 10.0, 1e-2, &noise, ReferenceTrajectory { c1: 1.0, c2: 1.0 }).unwrap();
        let system = BenchmarkSystem;
        let gp = MultiOutputGp::fit(
            data.clone(),
            system.default_kernel(0.5, 1.0).unwrap(),
            noise,
            system.latent_prior(),
        )
        .unwrap();
        let mut max_sigma = 0.0f64;
        for s in data.samples() {
            for i in 0..2 {
                let sd = gp.posterior_component(s.z.as_slice(), i).unwrap().std_dev();
                max_sigma = max_sigma.max(sd);
            }
        }
        assert!(
            max_sigma < 0.5,
            "posterior σ {max_sigma} did not drop below the prior scale 1"
        );
    }

    fn mini_plan(methods: Vec<SelectionMethod>, rollouts: usize) -> EvaluationPlan {
        let noise = DMatrix::identity(2, 2) * 1e-2;
        let data = generate_training_data(9, 24, 10.0, 1e-2, &noise, ReferenceTrajectory { c1: 1.0, c2: 1.0 }).unwrap();
        let system = BenchmarkSystem;
        let model = Arc::new(
            MultiOutputGp::fit(
                data.clone(),
                system.default_kernel(0.5, 1.0).unwrap(),
                noise,
                system.latent_prior(),
            )
            .unwrap(),
        );
        let bounds = UniformBoundParams {
            delta: 0.05,
            tau: 0.04,
            r0: 4.0,
            lipschitz_f: vec![0.0; 2],
            lipschitz_mu: vec![0.0; 2],
            lipschitz_var: vec![0.0; 2],
            beta: compute_beta(0.05, 0.04, 4.0, 2).unwrap(),
            gamma: vec![0.0; 2],
        };
        EvaluationPlan {
            data,
            model,
            bounds,
            m_fill: 1,
            nu: 1e-3,
            mode: StabilityMode::Stability,
            budget: 6,
            segments: 2,
            t_grid: 5,
            n_train: 24,
            rollouts,
            seed: 123,
            t_end: 2.0,
            dt: 5e-3,
            gain: 15.0,
            timing_reps: 0,
            methods,
            mi_grid_per_dim: 5,
            mi_grid_halfwidth: 1.5,
        }
    }

    #[test]
    fn experiment_summary_covers_each_method() {
        let plan = mini_plan(SelectionMethod::all(), 2);
        let summaries = evaluate_experiment(&plan, None).unwrap();
        assert_eq!(summaries.len(), 4);
        for s in &summaries {
            assert_eq!(s.divergent, 0, "{} diverged", s.method);
            assert!(s.mse_ss_mean.is_finite() && s.mse_ss_mean >= 0.0);
            assert!(s.pred_time_us_mean.is_nan(), "timing was disabled");
        }
        let labels: Vec<&str> = summaries.iter().map(|s| s.method.label()).collect();
        assert_eq!(labels, ["full", "mi-grid", "mi-reference", "rho-gap"]);
    }

    #[test]
    fn zero_rollouts_yield_an_empty_summary() {
        let plan = mini_plan(SelectionMethod::all(), 0);
        assert!(evaluate_experiment(&plan, None).unwrap().is_empty());
    }

    #[test]
    fn trace_csv_round_trips() {
        let c = TrackingController {
            gain: 15.0,
            reference: unit_reference(),
            mean_source: MeanSource::PriorOnly,
        };
        let res = rollout(
            &BenchmarkSystem,
            &c,
            &RolloutConfig::new(DVector::from_vec(vec![0.1, 0.2]), 0.1, 1e-2),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&res, &path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        assert_eq!(
            rdr.headers().unwrap(),
            &csv::StringRecord::from(vec![
                "t", "x1", "x2", "u1", "u2", "xref1", "xref2", "V", "Vdot_nom", "Vdot_sigma"
            ])
        );
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), res.steps.len());
        let x1: f64 = rows[0][1].parse().unwrap();
        assert_relative_eq!(x1, 0.1, epsilon = 1e-9);
    }
}
