//! Experiment configuration: a single JSON file with dotted-path command-line
//! overrides. Unknown keys are rejected, and every default is echoed back out
//! through the run manifest so a run can be reproduced from the manifest
//! alone.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::BoxDomain;
use crate::error::{Error, Result};
use crate::kernel::{CoregKernel, SeKernelParams};
use crate::measure::StabilityMode;
use crate::sim::SelectionMethod;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: DomainConfig,
    pub kernel: KernelConfig,
    pub noise: NoiseConfig,
    pub bound: BoundConfig,
    pub measure: MeasureConfig,
    pub selection: SelectionConfig,
    pub sim: SimConfig,
    pub rho_map: RhoMapConfig,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            domain: DomainConfig::default(),
            kernel: KernelConfig::default(),
            noise: NoiseConfig::default(),
            bound: BoundConfig::default(),
            measure: MeasureConfig::default(),
            selection: SelectionConfig::default(),
            sim: SimConfig::default(),
            rho_map: RhoMapConfig::default(),
            output_dir: "out".into(),
        }
    }
}

/// Box for the joint input z = (x, u).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            x_lower: vec![-1.5, -1.5],
            x_upper: vec![1.5, 1.5],
            u_lower: vec![-3.0, -3.0],
            u_upper: vec![3.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentKernelConfig {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub active_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Mixing matrix rows.
    pub a: Vec<Vec<f64>>,
    pub components: Vec<ComponentKernelConfig>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        // Benchmark structure: the first latent component acts on both state
        // dimensions, the second on x₁ alone.
        KernelConfig {
            a: vec![vec![1.0, 0.0], vec![-1.0, 1.0]],
            components: vec![
                ComponentKernelConfig {
                    signal_variance: 1.0,
                    length_scales: vec![0.5, 0.5],
                    active_dims: vec![0, 1],
                },
                ComponentKernelConfig {
                    signal_variance: 1.0,
                    length_scales: vec![0.5],
                    active_dims: vec![0],
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Observation noise covariance Σ_on, row by row.
    pub sigma_on: Vec<Vec<f64>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_on: vec![vec![1e-2, 0.0], vec![0.0, 1e-2]],
        }
    }
}

/// τ is either fixed or chosen automatically from the candidate ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSetting {
    Fixed(f64),
    Named(String),
}

impl TauSetting {
    pub fn fixed(&self) -> Result<Option<f64>> {
        match self {
            TauSetting::Fixed(v) => {
                if !(*v > 0.0) || !v.is_finite() {
                    return Err(Error::Config(format!("tau must be positive, got {v}")));
                }
                Ok(Some(*v))
            }
            TauSetting::Named(s) if s == "auto" => Ok(None),
            TauSetting::Named(s) => Err(Error::Config(format!(
                "tau must be a positive number or \"auto\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub delta: f64,
    pub tau: TauSetting,
    /// Lipschitz constants of the true latent components (supplied, not
    /// estimable from data); defaults are coarse overestimates for the
    /// benchmark residual.
    pub lipschitz_f: Vec<f64>,
    /// Grid resolution per axis for the μ/σ² Lipschitz estimation.
    pub grid_per_dim: usize,
    /// Grid resolution per axis for the τ-selection validation points.
    pub validation_per_dim: usize,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            delta: 0.05,
            tau: TauSetting::Named("auto".into()),
            lipschitz_f: vec![3.0, 4.0],
            grid_per_dim: 5,
            validation_per_dim: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    /// Fill-distance sample count M.
    pub m: usize,
    pub nu: f64,
    /// "stability" or "exponential".
    pub mode: String,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            m: 1,
            nu: 1e-3,
            mode: "stability".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Subset size N̄ per interval.
    pub budget: usize,
    /// Number of equal intervals over one reference period.
    pub segments: usize,
    /// Evaluation times per interval.
    pub t_grid: usize,
    /// Method for the `select` and `simulate` commands.
    pub method: String,
    /// Reference amplitudes used by `select` (rollout amplitudes are drawn
    /// per seed instead).
    pub c1: f64,
    pub c2: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            budget: 10,
            segments: 10,
            t_grid: 20,
            method: "rho-gap".into(),
            c1: 1.0,
            c2: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_train: usize,
    pub t_end: f64,
    pub dt: f64,
    pub rollouts: usize,
    pub seed: u64,
    pub gain: f64,
    pub timing_reps: usize,
    pub mi_grid_per_dim: usize,
    pub mi_grid_halfwidth: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_train: 100,
            t_end: 10.0,
            dt: 1e-3,
            rollouts: 100,
            seed: 0,
            gain: 15.0,
            timing_reps: 64,
            mi_grid_per_dim: 10,
            mi_grid_halfwidth: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RhoMapConfig {
    /// State-grid resolution per axis.
    pub grid_per_dim: usize,
    /// Fixed evaluation time.
    pub t: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for RhoMapConfig {
    fn default() -> Self {
        RhoMapConfig {
            grid_per_dim: 50,
            t: 0.0,
            c1: 1.0,
            c2: 1.0,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file and applies `key.path=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text, overrides)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad JSON: {e}")))?;
        for spec in overrides {
            apply_override(&mut value, spec)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.domain;
        if d.x_lower.len() != d.x_upper.len() || d.u_lower.len() != d.u_upper.len() {
            return Err(Error::Config("domain bounds have mismatched lengths".into()));
        }
        if d.x_lower.len() != 2 || d.u_lower.len() != 2 {
            return Err(Error::Config(
                "the command line drives the planar benchmark: 2 state and 2 input dims".into(),
            ));
        }
        let rows = self.kernel.a.len();
        if rows == 0 || self.kernel.a.iter().any(|r| r.len() != self.kernel.components.len()) {
            return Err(Error::Config(
                "kernel.a must be a d_x × d_f matrix matching kernel.components".into(),
            ));
        }
        if self.noise.sigma_on.len() != rows
            || self.noise.sigma_on.iter().any(|r| r.len() != rows)
        {
            return Err(Error::Config("noise.sigma_on must be d_x × d_x".into()));
        }
        if self.bound.lipschitz_f.len() != self.kernel.components.len() {
            return Err(Error::Config(
                "bound.lipschitz_f needs one entry per kernel component".into(),
            ));
        }
        self.bound.tau.fixed()?;
        self.mode()?;
        self.method()?;
        if !(self.bound.delta > 0.0 && self.bound.delta < 1.0) {
            return Err(Error::Config(format!(
                "bound.delta must lie in (0,1), got {}",
                self.bound.delta
            )));
        }
        if self.selection.budget > self.sim.n_train {
            return Err(Error::Config(format!(
                "selection.budget {} exceeds sim.n_train {}",
                self.selection.budget, self.sim.n_train
            )));
        }
        if self.selection.segments == 0 || self.selection.t_grid == 0 {
            return Err(Error::Config("selection needs segments ≥ 1 and t_grid ≥ 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the effective config serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn kernel(&self) -> Result<CoregKernel> {
        let rows = self.kernel.a.len();
        let cols = self.kernel.components.len();
        let a = DMatrix::from_fn(rows, cols, |i, j| self.kernel.a[i][j]);
        let kernels = self
            .kernel
            .components
            .iter()
            .map(|c| {
                SeKernelParams::new(
                    c.signal_variance,
                    c.length_scales.clone(),
                    c.active_dims.clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        CoregKernel::new(a, kernels)
    }

    pub fn noise_matrix(&self) -> DMatrix<f64> {
        let n = self.noise.sigma_on.len();
        DMatrix::from_fn(n, n, |i, j| self.noise.sigma_on[i][j])
    }

    /// The joint (x, u) box.
    pub fn z_domain(&self) -> Result<BoxDomain> {
        let lower: Vec<f64> = self
            .domain
            .x_lower
            .iter()
            .chain(&self.domain.u_lower)
            .copied()
            .collect();
        let upper: Vec<f64> = self
            .domain
            .x_upper
            .iter()
            .chain(&self.domain.u_upper)
            .copied()
            .collect();
        BoxDomain::new(lower, upper)
    }

    pub fn mode(&self) -> Result<StabilityMode> {
        match self.measure.mode.as_str() {
            "stability" => Ok(StabilityMode::Stability),
            "exponential" => Ok(StabilityMode::Exponential),
            other => Err(Error::Config(format!(
                "unknown measure.mode '{other}' (stability|exponential)"
            ))),
        }
    }

    pub fn method(&self) -> Result<SelectionMethod> {
        self.selection.method.parse()
    }
}

/// Applies one `a.b.c=value` override; the path must already exist in the
/// document or name a field of the typed config (unknown keys fail parsing).
fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form key=value")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = value;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override path '{path}' is malformed")));
    }
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!(
                "override path '{path}' does not lead through objects"
            )));
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override path '{path}' does not end in an object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_match_the_benchmark() {
        let cfg = ExperimentConfig::from_json("{}", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.sim.n_train, 100);
        assert_eq!(cfg.selection.budget, 10);
        assert_eq!(cfg.selection.segments, 10);
        assert_eq!(cfg.measure.m, 1);
        assert_eq!(cfg.bound.tau, TauSetting::Named("auto".into()));
        assert!(cfg.bound.tau.fixed().unwrap().is_none());
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text, &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"simm": {}}"#, &[]);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = ExperimentConfig::from_json(r#"{"sim": {"dtt": 0.1}}"#, &[]);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = ExperimentConfig::from_json("{}", &["sim.dtt=0.1".into()]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = ExperimentConfig::from_json(
            "{}",
            &[
                "sim.dt=0.0005".into(),
                "bound.tau=0.05".into(),
                "selection.method=mi-grid".into(),
                "sim.dt=0.002".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.sim.dt, 0.002);
        assert_eq!(cfg.bound.tau, TauSetting::Fixed(0.05));
        assert_eq!(cfg.method().unwrap(), SelectionMethod::MiGrid);
    }

    #[test]
    fn tau_accepts_auto_and_numbers_only() {
        let cfg = ExperimentConfig::from_json("{}", &["bound.tau=auto".into()]).unwrap();
        assert!(cfg.bound.tau.fixed().unwrap().is_none());
        let err = ExperimentConfig::from_json("{}", &["bound.tau=sometimes".into()]);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = ExperimentConfig::from_json("{}", &["bound.tau=-0.1".into()]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_json("{}", &[]).unwrap();
        let b = ExperimentConfig::from_json("{}", &["sim.seed=1".into()]).unwrap();
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn builders_produce_consistent_objects() {
        let cfg = ExperimentConfig::default();
        let kernel = cfg.kernel().unwrap();
        assert_eq!(kernel.output_dim(), 2);
        assert_eq!(kernel.component_dim(), 2);
        let noise = cfg.noise_matrix();
        assert_eq!(noise[(0, 0)], 1e-2);
        let z = cfg.z_domain().unwrap();
        assert_eq!(z.dim(), 4);
        assert_eq!(z.lower(), &[-1.5, -1.5, -3.0, -3.0]);
        assert_eq!(cfg.mode().unwrap(), StabilityMode::Stability);
        assert_eq!(cfg.method().unwrap(), SelectionMethod::RhoGap);
    }

    #[test]
    fn invalid_structures_are_reported() {
        let err = ExperimentConfig::from_json("{}", &["selection.budget=500".into()]);
        assert!(matches!(err, Err(Error::Config(_))));
        let err =
            ExperimentConfig::from_json(r#"{"noise": {"sigma_on": [[0.01]]}}"#, &[]);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = ExperimentConfig::from_json("{}", &["measure.mode=wobbly".into()]);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
