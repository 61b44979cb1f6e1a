//! Uniform GP error-bound constants (β, γᵢ) and the fill-distance-based
//! upper bound on the component posterior variance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp::MultiOutputGp;
use crate::kernel::CoregKernel;

/// Axis-aligned box over the stacked input space 𝕏×𝕌.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid("box bounds must be nonempty and congruent"));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(Error::invalid(format!("bad box axis [{l}, {u}]")));
            }
        }
        Ok(BoxDomain { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Euclidean diagonal — the maximal pairwise distance r₀ within the box.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Full mesh with `points_per_dim` per axis (last axis fastest). A single
    /// point per axis yields the box center.
    pub fn grid(&self, points_per_dim: usize) -> Result<Vec<DVector<f64>>> {
        if points_per_dim == 0 {
            return Err(Error::invalid("grid needs at least one point per axis"));
        }
        let d = self.dim();
        let total = (points_per_dim as f64).powi(d as i32);
        if total > 2e7 {
            return Err(Error::invalid(format!(
                "grid of {points_per_dim}^{d} points is too large"
            )));
        }
        let total = points_per_dim.pow(d as u32);
        let axis_value = |j: usize, k: usize| {
            if points_per_dim == 1 {
                0.5 * (self.lower[j] + self.upper[j])
            } else {
                self.lower[j]
                    + (self.upper[j] - self.lower[j]) * k as f64 / (points_per_dim - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        loop {
            out.push(DVector::from_iterator(
                d,
                idx.iter().enumerate().map(|(j, &k)| axis_value(j, k)),
            ));
            // odometer increment, last axis fastest
            let mut j = d;
            loop {
                if j == 0 {
                    return Ok(out);
                }
                j -= 1;
                idx[j] += 1;
                if idx[j] < points_per_dim {
                    break;
                }
                idx[j] = 0;
            }
        }
    }
}

/// Constants of the high-probability uniform error bound
/// |fᵢ(z) − μᵢ(z)| ≤ √β·σᵢ(z) + γᵢ.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformBoundParams {
    pub delta: f64,
    pub tau: f64,
    pub r0: f64,
    /// User-supplied Lipschitz constants of the latent components fᵢ.
    pub lipschitz_f: Vec<f64>,
    /// Estimated Lipschitz constants of the posterior means μᵢ.
    pub lipschitz_mu: Vec<f64>,
    /// Estimated Lipschitz constants of the posterior variances σᵢ².
    pub lipschitz_var: Vec<f64>,
    pub beta: f64,
    pub gamma: Vec<f64>,
}

impl UniformBoundParams {
    /// Validates the raw inputs and fills in β and γᵢ.
    pub fn derive(
        delta: f64,
        tau: f64,
        r0: f64,
        state_dim: usize,
        lipschitz_f: Vec<f64>,
        lipschitz_mu: Vec<f64>,
        lipschitz_var: Vec<f64>,
    ) -> Result<Self> {
        let df = lipschitz_f.len();
        if lipschitz_mu.len() != df || lipschitz_var.len() != df || df == 0 {
            return Err(Error::invalid(
                "Lipschitz constant lists must be nonempty and congruent",
            ));
        }
        let beta = compute_beta(delta, tau, r0, state_dim)?;
        let gamma = (0..df)
            .map(|i| compute_gamma(lipschitz_mu[i], lipschitz_f[i], lipschitz_var[i], beta, tau))
            .collect::<Result<Vec<_>>>()?;
        Ok(UniformBoundParams {
            delta,
            tau,
            r0,
            lipschitz_f,
            lipschitz_mu,
            lipschitz_var,
            beta,
            gamma,
        })
    }

    pub fn component_count(&self) -> usize {
        self.gamma.len()
    }
}

/// β(τ) = 2·d_x·log(1 + r₀/τ) − log(δ).
pub fn compute_beta(delta: f64, tau: f64, r0: f64, state_dim: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    if !(r0 > 0.0) || !r0.is_finite() {
        return Err(Error::invalid(format!("r0 must be positive, got {r0}")));
    }
    if state_dim == 0 {
        return Err(Error::invalid("state dimension must be positive"));
    }
    Ok(2.0 * state_dim as f64 * (1.0 + r0 / tau).ln() - delta.ln())
}

/// γᵢ(τ) = (L_μᵢ + L_fᵢ)·τ + √(β·L_σᵢ²·τ). Defined for τ ≥ 0 (γᵢ(0) = 0).
pub fn compute_gamma(l_mu: f64, l_f: f64, l_var: f64, beta: f64, tau: f64) -> Result<f64> {
    for (name, v) in [("L_mu", l_mu), ("L_f", l_f), ("L_var", l_var)] {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::invalid(format!(
                "{name} must be nonnegative and finite, got {v}"
            )));
        }
    }
    if !(tau >= 0.0) || beta < 0.0 {
        return Err(Error::invalid("gamma needs tau ≥ 0 and beta ≥ 0"));
    }
    Ok((l_mu + l_f) * tau + (beta * l_var * tau).sqrt())
}

/// Finite-difference estimates of the Lipschitz constants of μᵢ and σᵢ²,
/// per latent component, over a box grid. Estimates, not certificates: the
/// supremum of central-difference gradient norms, inflated by 1.1.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimates {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn estimate_lipschitz(
    model: &MultiOutputGp,
    domain: &BoxDomain,
    grid_per_dim: usize,
) -> Result<LipschitzEstimates> {
    if grid_per_dim < 3 {
        return Err(Error::invalid("Lipschitz grid needs at least 3 points per axis"));
    }
    if domain.dim() != model.data().z_dim() {
        return Err(Error::invalid(format!(
            "domain has dimension {}, model inputs have {}",
            domain.dim(),
            model.data().z_dim()
        )));
    }
    for (j, (l, u)) in domain.lower().iter().zip(domain.upper()).enumerate() {
        if l >= u {
            return Err(Error::invalid(format!("degenerate box axis {j}: [{l}, {u}]")));
        }
    }

    let d = domain.dim();
    let g = grid_per_dim;
    let df = model.component_dim();
    let nodes = domain.grid(g)?;
    let mut mu_vals = Vec::with_capacity(nodes.len());
    let mut var_vals = Vec::with_capacity(nodes.len());
    for z in &nodes {
        let comps = model.posterior_components(z.as_slice())?;
        mu_vals.push(comps.iter().map(|c| c.mean).collect::<Vec<_>>());
        var_vals.push(comps.iter().map(|c| c.variance).collect::<Vec<_>>());
    }

    // Strides for the row-major (last axis fastest) grid layout.
    let mut stride = vec![1usize; d];
    for j in (0..d.saturating_sub(1)).rev() {
        stride[j] = stride[j + 1] * g;
    }
    let step: Vec<f64> = (0..d)
        .map(|j| (domain.upper()[j] - domain.lower()[j]) / (g - 1) as f64)
        .collect();

    let mut l_mu = vec![0.0f64; df];
    let mut l_var = vec![0.0f64; df];
    let mut idx = vec![0usize; d];
    for flat in 0..nodes.len() {
        if idx.iter().all(|&k| k >= 1 && k <= g - 2) {
            for i in 0..df {
                let mut gm = 0.0;
                let mut gv = 0.0;
                for j in 0..d {
                    let hi = flat + stride[j];
                    let lo = flat - stride[j];
                    let dm = (mu_vals[hi][i] - mu_vals[lo][i]) / (2.0 * step[j]);
                    let dv = (var_vals[hi][i] - var_vals[lo][i]) / (2.0 * step[j]);
                    gm += dm * dm;
                    gv += dv * dv;
                }
                l_mu[i] = l_mu[i].max(gm.sqrt());
                l_var[i] = l_var[i].max(gv.sqrt());
            }
        }
        // odometer increment matching the grid enumeration order
        let mut j = d;
        while j > 0 {
            j -= 1;
            idx[j] += 1;
            if idx[j] < g {
                break;
            }
            idx[j] = 0;
        }
    }
    for v in l_mu.iter_mut().chain(l_var.iter_mut()) {
        *v *= 1.1;
    }
    Ok(LipschitzEstimates { mu: l_mu, var: l_var })
}

/// √β·σᵢ(z) + γᵢ — the radius of the high-probability error tube around μᵢ.
pub fn uniform_error_bound(
    model: &MultiOutputGp,
    params: &UniformBoundParams,
    z: &[f64],
    i: usize,
) -> Result<f64> {
    if params.component_count() != model.component_dim() {
        return Err(Error::invalid(format!(
            "bound parameters cover {} components, model has {}",
            params.component_count(),
            model.component_dim()
        )));
    }
    let gamma = *params
        .gamma
        .get(i)
        .ok_or_else(|| Error::invalid(format!("component index {i} out of range")))?;
    let sigma = model.posterior_component(z, i)?.std_dev();
    Ok(params.beta.sqrt() * sigma + gamma)
}

/// Shared denominator of the variance bound and of θᵢ²:
/// max_m Σ_n Σ_j |a_{m,n} a_{j,n}|·s_{f_n}² + λ_max(Σ_on)/M.
/// Uses absolute values throughout — the conservative variant.
pub(crate) fn gershgorin_denominator(
    kernel: &CoregKernel,
    noise: &DMatrix<f64>,
    m_fill: usize,
) -> Result<f64> {
    if m_fill == 0 {
        return Err(Error::invalid("fill count M must be at least 1"));
    }
    let dx = kernel.output_dim();
    if noise.nrows() != dx || noise.ncols() != dx {
        return Err(Error::invalid("noise covariance has wrong shape"));
    }
    let a = kernel.a();
    let col_abs: Vec<f64> = (0..kernel.component_dim())
        .map(|n| a.column(n).iter().map(|v| v.abs()).sum())
        .collect();
    let s2: Vec<f64> = kernel.kernels().iter().map(|k| k.signal_variance()).collect();
    let max_row = (0..dx)
        .map(|m| {
            (0..kernel.component_dim())
                .map(|n| a[(m, n)].abs() * col_abs[n] * s2[n])
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let sym = 0.5 * (noise + noise.transpose());
    let lambda_max = sym.symmetric_eigen().eigenvalues.max();
    Ok(max_row + lambda_max / m_fill as f64)
}

/// Upper bound on the posterior variance of component j given its weighted
/// M-fill distance: s² − s⁴·e^{−φ̃²}·Σᵢ a_{i,j}² / denominator.
pub fn variance_upper_bound(
    kernel: &CoregKernel,
    noise: &DMatrix<f64>,
    m_fill: usize,
    phi_sq: f64,
    j: usize,
) -> Result<f64> {
    if j >= kernel.component_dim() {
        return Err(Error::invalid(format!("component index {j} out of range")));
    }
    if !(phi_sq >= 0.0) {
        return Err(Error::invalid(format!(
            "squared fill distance must be nonnegative, got {phi_sq}"
        )));
    }
    let denom = gershgorin_denominator(kernel, noise, m_fill)?;
    let s2 = kernel.kernels()[j].signal_variance();
    let col_sq = kernel.a().column(j).norm_squared();
    Ok(s2 - s2 * s2 * (-phi_sq).exp() * col_sq / denom)
}

/// Picks the smallest τ from {10⁻³, 10⁻², 10⁻¹, 1}·r₀ such that
/// √β(τ)·σᵢ(z) > γᵢ(τ) for every component at every validation point —
/// the precondition under which data can shrink the uncertainty budget.
pub fn select_tau(
    model: &MultiOutputGp,
    delta: f64,
    r0: f64,
    lipschitz_f: &[f64],
    lipschitz_mu: &[f64],
    lipschitz_var: &[f64],
    validation: &[DVector<f64>],
) -> Result<UniformBoundParams> {
    if validation.is_empty() {
        return Err(Error::invalid("tau selection needs validation points"));
    }
    let sigmas: Vec<Vec<f64>> = validation
        .iter()
        .map(|z| {
            Ok(model
                .posterior_components(z.as_slice())?
                .iter()
                .map(|c| c.std_dev())
                .collect())
        })
        .collect::<Result<_>>()?;
    for scale in [1e-3, 1e-2, 1e-1, 1.0] {
        let params = UniformBoundParams::derive(
            delta,
            scale * r0,
            r0,
            model.output_dim(),
            lipschitz_f.to_vec(),
            lipschitz_mu.to_vec(),
            lipschitz_var.to_vec(),
        )?;
        let sqrt_beta = params.beta.sqrt();
        let ok = sigmas
            .iter()
            .all(|s| s.iter().zip(&params.gamma).all(|(sig, g)| sqrt_beta * sig > *g));
        if ok {
            return Ok(params);
        }
    }
    Err(Error::Domain(
        "no tau in {1e-3..1}·r0 makes sqrt(beta)·sigma exceed gamma on the validation grid"
            .into(),
    ))
}
