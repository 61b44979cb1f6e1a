//! Stability-oriented data requirements: weighted M-fill distances, the
//! Lyapunov-derivative split into nominal and uncertain parts, the ξ
//! uncertainty budget, the φ̄²/θ² thresholds, and the ρ-gap that scores how
//! far a dataset is from certifying a point.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::bounds::{gershgorin_denominator, UniformBoundParams};
use crate::error::{Error, Result};
use crate::gp::{Dataset, MultiOutputGp};
use crate::kernel::{CoregKernel, SeKernelParams};

/// Scalar field over state and time, e.g. V(x,t).
pub type ScalarMap = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
/// Vector field over state and time, e.g. ∇V(x,t) or a control law π(x,t).
pub type VectorMap = Arc<dyn Fn(&[f64], f64) -> DVector<f64> + Send + Sync>;

/// A Lyapunov function with its spatial gradient and explicit time
/// derivative, all supplied as closures.
#[derive(Clone)]
pub struct LyapunovSpec {
    pub value: ScalarMap,
    pub gradient: VectorMap,
    pub time_derivative: ScalarMap,
}

impl LyapunovSpec {
    /// Checks ∇V against central finite differences of V at the probes.
    pub fn check_gradient(&self, probes: &[(Vec<f64>, f64)], h: f64, tol: f64) -> Result<()> {
        for (x, t) in probes {
            let grad = (self.gradient)(x, *t);
            for j in 0..x.len() {
                let mut hi = x.clone();
                let mut lo = x.clone();
                hi[j] += h;
                lo[j] -= h;
                let fd = ((self.value)(&hi, *t) - (self.value)(&lo, *t)) / (2.0 * h);
                if (fd - grad[j]).abs() > tol * (1.0 + grad[j].abs()) {
                    return Err(Error::Domain(format!(
                        "gradient component {j} at x={x:?}, t={t} is {}, finite difference gives {fd}",
                        grad[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The M-th smallest weighted distance from (x, u) to the dataset, in the
/// metric of one component kernel (inactive dimensions contribute nothing).
pub fn fill_distance(
    data: &Dataset,
    x: &[f64],
    u: &[f64],
    kernel: &SeKernelParams,
    m: usize,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("fill count M must be at least 1"));
    }
    if m > data.len() {
        return Err(Error::InsufficientData {
            available: data.len(),
            required: m,
        });
    }
    if x.len() != data.x_dim() || u.len() != data.u_dim() {
        return Err(Error::invalid(format!(
            "query ({}, {}) does not match dataset dims ({}, {})",
            x.len(),
            u.len(),
            data.x_dim(),
            data.u_dim()
        )));
    }
    let z: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
    let mut d2: Vec<f64> = data
        .samples()
        .iter()
        .map(|s| kernel.sq_weighted_dist(s.z.as_slice(), &z))
        .collect::<Result<_>>()?;
    let (_, mth, _) = d2.select_nth_unstable_by(m - 1, |a, b| a.partial_cmp(b).unwrap());
    Ok(mth.sqrt())
}

/// θᵢ² = log(s_{f_i}²·‖aᵢ‖² / (max_m Σ_n Σ_j |a_{m,n} a_{j,n}|·s_{f_n}²
/// + λ_max(Σ_on)/M)). Measures how well component i can be told apart from
/// the others; may be negative.
pub fn theta_sq(kernel: &CoregKernel, noise: &DMatrix<f64>, m: usize, i: usize) -> Result<f64> {
    if i >= kernel.component_dim() {
        return Err(Error::invalid(format!("component index {i} out of range")));
    }
    let denom = gershgorin_denominator(kernel, noise, m)?;
    let s2 = kernel.kernels()[i].signal_variance();
    Ok((s2 * kernel.a().column(i).norm_squared() / denom).ln())
}

/// V̇_nom = ∇V(x,t)ᵀ·A·μ̃(x,u) + ∂V/∂t with u the applied control input.
pub fn vdot_nominal(
    x: &[f64],
    u: &[f64],
    t: f64,
    lyapunov: &LyapunovSpec,
    model: &MultiOutputGp,
) -> Result<f64> {
    let z: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
    let gdot = model.posterior_mean_g(&z)?;
    let grad = (lyapunov.gradient)(x, t);
    if grad.len() != x.len() {
        return Err(Error::invalid("gradient dimension does not match state"));
    }
    Ok(grad.dot(&gdot) + (lyapunov.time_derivative)(x, t))
}

/// V̇_σ = Σⱼ (Σᵢ |a_{i,j}·∂V/∂xᵢ|)·(√β·σ̃ⱼ(x,u) + γⱼ) ≥ 0 — the worst-case
/// Lyapunov-derivative contribution of the model error.
pub fn vdot_uncertain(
    x: &[f64],
    u: &[f64],
    t: f64,
    lyapunov: &LyapunovSpec,
    model: &MultiOutputGp,
    bounds: &UniformBoundParams,
) -> Result<f64> {
    if bounds.component_count() != model.component_dim() {
        return Err(Error::invalid("bound parameters do not match the model"));
    }
    let z: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
    let comps = model.posterior_components(&z)?;
    let grad = (lyapunov.gradient)(x, t);
    if grad.len() != x.len() {
        return Err(Error::invalid("gradient dimension does not match state"));
    }
    let a = model.kernel().a();
    let sqrt_beta = bounds.beta.sqrt();
    let mut total = 0.0;
    for (j, c) in comps.iter().enumerate() {
        let weight: f64 = (0..x.len()).map(|i| (a[(i, j)] * grad[i]).abs()).sum();
        total += weight * (sqrt_beta * c.std_dev() + bounds.gamma[j]);
    }
    Ok(total)
}

/// The per-component uncertainty budget. `flagged` marks points whose nominal
/// derivative already fails (no data can certify them); the value is then 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XiValue {
    pub value: f64,
    pub flagged: bool,
}

/// φ̄² = −log(1 − ξ²/(4β·s²·w²)) with w = Σⱼ|a_{j,i}·∂V/∂xⱼ|. Values ≥ 10³
/// are reported as +∞ (such points impose no data requirement).
pub fn phibar_sq_value(xi: f64, beta: f64, signal_variance: f64, weight: f64) -> Result<f64> {
    if !(xi >= 0.0) {
        return Err(Error::invalid(format!("xi must be nonnegative, got {xi}")));
    }
    let denom = 4.0 * beta * signal_variance * weight * weight;
    if !(weight > 0.0) || xi * xi >= denom {
        return Err(Error::Domain(format!(
            "xi² = {} must lie strictly below 4βs²w² = {denom}",
            xi * xi
        )));
    }
    let ratio = xi * xi / denom;
    let v = -(-ratio).ln_1p();
    Ok(if v >= 1e3 { f64::INFINITY } else { v })
}

/// Whether the closed loop must shrink V (stability) or shrink it at the rate
/// of V itself (exponential); the latter charges V̇_nom + V against the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabilityMode {
    Stability,
    Exponential,
}

/// Data requirement of one latent component at a point: the subset must reach
/// φ̃ᵢ² ≤ φ̄ᵢ² + θᵢ².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputRequirement {
    pub xi: XiValue,
    /// 0 when ξ is flagged (maximal demand), +∞ when no data is needed.
    pub phibar_sq: f64,
    pub theta_sq: f64,
}

impl OutputRequirement {
    /// Largest admissible squared fill distance.
    pub fn requirement(&self) -> f64 {
        self.phibar_sq + self.theta_sq
    }
}

/// Requirements of all components at one (x, t), with the control input they
/// were computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRequirements {
    pub u: DVector<f64>,
    pub outputs: Vec<OutputRequirement>,
}

/// Per-component diagnostics of one ρ evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGap {
    pub phi: f64,
    pub phibar: f64,
    pub theta_sq: f64,
    pub contribution: f64,
    pub xi_flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoBreakdown {
    pub rho: f64,
    pub outputs: Vec<OutputGap>,
}

/// Everything needed to score datasets against the stability task: the
/// (full-data) model that drives the controller and V̇_nom, the Lyapunov
/// function, the error-bound constants, and the ρ-gap parameters.
#[derive(Clone)]
pub struct RhoGapContext {
    model: Arc<MultiOutputGp>,
    lyapunov: LyapunovSpec,
    controller: VectorMap,
    bounds: UniformBoundParams,
    m_fill: usize,
    nu: f64,
    theta_sq: Vec<f64>,
    mode: StabilityMode,
}

impl RhoGapContext {
    /// θᵢ² is derived here from the model's kernel and noise so it cannot go
    /// stale against them.
    pub fn new(
        model: Arc<MultiOutputGp>,
        lyapunov: LyapunovSpec,
        controller: VectorMap,
        bounds: UniformBoundParams,
        m_fill: usize,
        nu: f64,
        mode: StabilityMode,
    ) -> Result<Self> {
        if m_fill == 0 {
            return Err(Error::invalid("fill count M must be at least 1"));
        }
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::invalid(format!("nu must be positive, got {nu}")));
        }
        if bounds.component_count() != model.component_dim() {
            return Err(Error::invalid("bound parameters do not match the model"));
        }
        let theta = (0..model.component_dim())
            .map(|i| theta_sq(model.kernel(), model.noise(), m_fill, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(RhoGapContext {
            model,
            lyapunov,
            controller,
            bounds,
            m_fill,
            nu,
            theta_sq: theta,
            mode,
        })
    }

    pub fn model(&self) -> &MultiOutputGp {
        &self.model
    }

    pub fn bounds(&self) -> &UniformBoundParams {
        &self.bounds
    }

    pub fn lyapunov(&self) -> &LyapunovSpec {
        &self.lyapunov
    }

    pub fn m_fill(&self) -> usize {
        self.m_fill
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn mode(&self) -> StabilityMode {
        self.mode
    }

    pub fn theta_sq_values(&self) -> &[f64] {
        &self.theta_sq
    }

    pub fn controller_output(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        let u = (self.controller)(x, t);
        if u.len() != self.model.data().u_dim() {
            return Err(Error::invalid(format!(
                "controller produced {} inputs, model expects {}",
                u.len(),
                self.model.data().u_dim()
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "controller output not finite at x={x:?}, t={t}"
            )));
        }
        Ok(u)
    }

    pub fn vdot_nominal(&self, x: &[f64], t: f64) -> Result<f64> {
        let u = self.controller_output(x, t)?;
        vdot_nominal(x, u.as_slice(), t, &self.lyapunov, &self.model)
    }

    pub fn vdot_uncertain(&self, x: &[f64], t: f64) -> Result<f64> {
        let u = self.controller_output(x, t)?;
        vdot_uncertain(x, u.as_slice(), t, &self.lyapunov, &self.model, &self.bounds)
    }

    /// ξᵢ = min(−V̇_eff·Σⱼ|a_{j,i}| / ΣⱼΣₙ|a_{j,n}|,
    ///          2√β·s_{f_i}·|Σⱼ a_{j,i}·∂V/∂xⱼ| − ν),
    /// flagged to zero when nonpositive. V̇_eff charges V on top of V̇_nom in
    /// exponential mode.
    pub fn xi(&self, x: &[f64], t: f64, i: usize) -> Result<XiValue> {
        let vdot = self.vdot_nominal(x, t)?;
        self.xi_inner(x, t, i, vdot)
    }

    fn effective_vdot(&self, x: &[f64], t: f64, vdot_nom: f64) -> f64 {
        match self.mode {
            StabilityMode::Stability => vdot_nom,
            StabilityMode::Exponential => vdot_nom + (self.lyapunov.value)(x, t),
        }
    }

    fn xi_inner(&self, x: &[f64], t: f64, i: usize, vdot_nom: f64) -> Result<XiValue> {
        let df = self.model.component_dim();
        if i >= df {
            return Err(Error::invalid(format!("component index {i} out of range")));
        }
        let a = self.model.kernel().a();
        let veff = self.effective_vdot(x, t, vdot_nom);
        let col_abs: f64 = a.column(i).iter().map(|v| v.abs()).sum();
        let total_abs: f64 = a.iter().map(|v| v.abs()).sum();
        let arm1 = -veff * col_abs / total_abs;

        let grad = (self.lyapunov.gradient)(x, t);
        let signed: f64 = (0..x.len()).map(|j| a[(j, i)] * grad[j]).sum();
        let s = self.model.kernel().kernels()[i].signal_variance().sqrt();
        let arm2 = 2.0 * self.bounds.beta.sqrt() * s * signed.abs() - self.nu;

        let v = arm1.min(arm2);
        if v <= 0.0 {
            Ok(XiValue {
                value: 0.0,
                flagged: true,
            })
        } else {
            Ok(XiValue {
                value: v,
                flagged: false,
            })
        }
    }

    /// φ̄ᵢ² for an explicit ξ value; errors when the strict admissibility
    /// condition ξ² < 4β·s²·w² fails at this point.
    pub fn phibar_sq(&self, x: &[f64], t: f64, i: usize, xi: f64) -> Result<f64> {
        let df = self.model.component_dim();
        if i >= df {
            return Err(Error::invalid(format!("component index {i} out of range")));
        }
        let a = self.model.kernel().a();
        let grad = (self.lyapunov.gradient)(x, t);
        let weight: f64 = (0..x.len()).map(|j| (a[(j, i)] * grad[j]).abs()).sum();
        let s2 = self.model.kernel().kernels()[i].signal_variance();
        phibar_sq_value(xi, self.bounds.beta, s2, weight).map_err(|e| match e {
            Error::Domain(msg) => {
                Error::Domain(format!("output {i} at x={x:?}, t={t}: {msg}"))
            }
            other => other,
        })
    }

    /// Per-component requirements at (x,t). Subset-independent, so callers
    /// scoring many candidate subsets at the same point can compute this once.
    pub fn output_requirements(&self, x: &[f64], t: f64) -> Result<PointRequirements> {
        let u = self.controller_output(x, t)?;
        let vdot = vdot_nominal(x, u.as_slice(), t, &self.lyapunov, &self.model)?;
        let outputs = (0..self.model.component_dim())
            .map(|i| {
                let xi = self.xi_inner(x, t, i, vdot)?;
                let phibar_sq = if xi.flagged {
                    0.0
                } else {
                    self.phibar_sq(x, t, i, xi.value)?
                };
                Ok(OutputRequirement {
                    xi,
                    phibar_sq,
                    theta_sq: self.theta_sq[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PointRequirements { u, outputs })
    }

    /// ρ(x,t,subset) = Σᵢ max{0, φ̃ᵢ² − φ̄ᵢ² − θᵢ²}.
    pub fn rho_gap(&self, x: &[f64], t: f64, subset: &Dataset) -> Result<f64> {
        Ok(self.rho_gap_detailed(x, t, subset)?.rho)
    }

    pub fn rho_gap_detailed(&self, x: &[f64], t: f64, subset: &Dataset) -> Result<RhoBreakdown> {
        let req = self.output_requirements(x, t)?;
        let mut rho = 0.0;
        let mut outputs = Vec::with_capacity(req.outputs.len());
        for (i, out) in req.outputs.iter().enumerate() {
            let phi = fill_distance(
                subset,
                x,
                req.u.as_slice(),
                &self.model.kernel().kernels()[i],
                self.m_fill,
            )?;
            let contribution = (phi * phi - out.requirement()).max(0.0);
            rho += contribution;
            outputs.push(OutputGap {
                phi,
                phibar: out.phibar_sq.sqrt(),
                theta_sq: out.theta_sq,
                contribution,
                xi_flagged: out.xi.flagged,
            });
        }
        Ok(RhoBreakdown { rho, outputs })
    }

    /// True iff the subset meets the fill-distance requirement of component i
    /// at (x,t). Errors if the τ precondition √β·σ̃ᵢ > γᵢ fails under the
    /// subset-trained posterior instead of silently certifying.
    pub fn certify_uncertainty_budget(
        &self,
        x: &[f64],
        t: f64,
        i: usize,
        subset: &Dataset,
    ) -> Result<bool> {
        let req = self.output_requirements(x, t)?;
        let out = req.outputs.get(i).ok_or_else(|| {
            Error::invalid(format!("component index {i} out of range"))
        })?;
        let phi = fill_distance(
            subset,
            x,
            req.u.as_slice(),
            &self.model.kernel().kernels()[i],
            self.m_fill,
        )?;
        let sub_model = self.model.refit(subset.clone())?;
        let z: Vec<f64> = x.iter().chain(req.u.iter()).copied().collect();
        let sigma = sub_model.posterior_component(&z, i)?.std_dev();
        let sqrt_beta = self.bounds.beta.sqrt();
        if !(sqrt_beta * sigma > self.bounds.gamma[i]) {
            return Err(Error::Domain(format!(
                "tau precondition fails at x={x:?}, output {i}: sqrt(beta)·sigma = {} ≤ gamma = {}",
                sqrt_beta * sigma,
                self.bounds.gamma[i]
            )));
        }
        Ok(phi * phi <= out.requirement())
    }
}
