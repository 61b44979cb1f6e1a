//! Multi-output GP regression for g = A·f with the coregionalized kernel,
//! including the decoupled per-component posteriors used by the error bounds.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::CoregKernel;

/// Prior mean of the latent component functions, z ↦ f̂(z) ∈ ℝ^{d_f}.
pub type PriorMean = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;

/// Prior mean that is identically zero for `dim` components.
pub fn zero_prior(dim: usize) -> PriorMean {
    Arc::new(move |_| DVector::zeros(dim))
}

/// One training pair: stacked input z = (x, u) and noisy observation y of g(z).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

/// Ordered collection of samples with fixed state and input dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x_dim: usize,
    u_dim: usize,
    samples: Vec<LabeledSample>,
    pub provenance: Option<String>,
}

impl Dataset {
    pub fn new(x_dim: usize, u_dim: usize) -> Self {
        Dataset {
            x_dim,
            u_dim,
            samples: Vec::new(),
            provenance: None,
        }
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn u_dim(&self) -> usize {
        self.u_dim
    }

    /// Dimension of the stacked input z = (x, u).
    pub fn z_dim(&self) -> usize {
        self.x_dim + self.u_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn push(&mut self, z: DVector<f64>, y: DVector<f64>) -> Result<()> {
        if z.len() != self.z_dim() {
            return Err(Error::invalid(format!(
                "sample input has dimension {}, expected {}",
                z.len(),
                self.z_dim()
            )));
        }
        if y.len() != self.x_dim {
            return Err(Error::invalid(format!(
                "sample observation has dimension {}, expected {}",
                y.len(),
                self.x_dim
            )));
        }
        if z.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("samples must be finite"));
        }
        self.samples.push(LabeledSample { z, y });
        Ok(())
    }

    /// New dataset containing the listed sample indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut out = Dataset::new(self.x_dim, self.u_dim);
        out.provenance = self.provenance.clone();
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| {
                Error::invalid(format!("sample index {i} out of range (N = {})", self.len()))
            })?;
            out.samples.push(s.clone());
        }
        Ok(out)
    }

    /// Writes `x1..x{d_x},u1..u{d_u},y1..y{d_x}` rows in full precision.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = Vec::new();
        for i in 1..=self.x_dim {
            header.push(format!("x{i}"));
        }
        for i in 1..=self.u_dim {
            header.push(format!("u{i}"));
        }
        for i in 1..=self.x_dim {
            header.push(format!("y{i}"));
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let fields: Vec<String> = s.z.iter().chain(s.y.iter()).map(|v| v.to_string()).collect();
            w.write_record(&fields)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let names: Vec<&str> = header.iter().collect();
        let count_prefix = |p: char, from: usize| {
            let mut n = 0;
            while from + n < names.len() && names[from + n] == format!("{p}{}", n + 1) {
                n += 1;
            }
            n
        };
        let x_dim = count_prefix('x', 0);
        let u_dim = count_prefix('u', x_dim);
        let y_dim = count_prefix('y', x_dim + u_dim);
        if x_dim == 0 || y_dim != x_dim || x_dim + u_dim + y_dim != names.len() {
            return Err(Error::invalid(format!(
                "bad dataset header {:?}; expected x1..,u1..,y1.. with matching x/y counts",
                names
            )));
        }
        let mut data = Dataset::new(x_dim, u_dim);
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let mut vals = Vec::with_capacity(rec.len());
            for field in rec.iter() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::invalid(format!("row {}: unparsable float {field:?}", row + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::invalid(format!(
                        "row {}: non-finite value {field:?}",
                        row + 1
                    )));
                }
                vals.push(v);
            }
            if vals.len() != x_dim + u_dim + y_dim {
                return Err(Error::invalid(format!(
                    "row {}: {} fields, expected {}",
                    row + 1,
                    vals.len(),
                    x_dim + u_dim + y_dim
                )));
            }
            let z = DVector::from_row_slice(&vals[..x_dim + u_dim]);
            let y = DVector::from_row_slice(&vals[x_dim + u_dim..]);
            data.push(z, y)?;
        }
        Ok(data)
    }
}

/// Marginal posterior of one latent component at a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentPosterior {
    pub mean: f64,
    /// Clamped to be nonnegative.
    pub variance: f64,
}

impl ComponentPosterior {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

struct FitCache {
    chol: nalgebra::Cholesky<f64, Dyn>,
    /// Per component i: ᾱᵢ[n] = Σ_m A_{m,i}·α[m·N+n] with α = G⁻¹·(t − prior),
    /// so that posterior means cost O(N) kernel evaluations per component.
    abar: Vec<DVector<f64>>,
    jitter: f64,
}

/// Fitted multi-output GP. Immutable; queries are pure.
pub struct MultiOutputGp {
    kernel: CoregKernel,
    noise: DMatrix<f64>,
    prior_mean: PriorMean,
    data: Dataset,
    cache: Option<FitCache>,
}

impl Clone for MultiOutputGp {
    fn clone(&self) -> Self {
        // Refitting reproduces the identical cache; cheaper to redo the
        // factorization than to make FitCache Clone-able across nalgebra
        // versions, and N is small at this scale.
        MultiOutputGp::fit(
            self.data.clone(),
            self.kernel.clone(),
            self.noise.clone(),
            self.prior_mean.clone(),
        )
        .expect("refitting a previously fitted model cannot fail")
    }
}

impl MultiOutputGp {
    /// Conditions the joint prior on the dataset. An empty dataset is allowed
    /// and yields the prior. Cost O((d_x·N)³) in the factorization.
    pub fn fit(
        data: Dataset,
        kernel: CoregKernel,
        noise: DMatrix<f64>,
        prior_mean: PriorMean,
    ) -> Result<Self> {
        if kernel.output_dim() != data.x_dim() {
            return Err(Error::invalid(format!(
                "kernel produces {} outputs but dataset observes {}",
                kernel.output_dim(),
                data.x_dim()
            )));
        }
        if kernel.required_dim() > data.z_dim() {
            return Err(Error::invalid(format!(
                "kernel uses input dimension {} but samples have dimension {}",
                kernel.required_dim() - 1,
                data.z_dim()
            )));
        }
        if noise.nrows() != data.x_dim() || noise.ncols() != data.x_dim() {
            return Err(Error::invalid("noise covariance has wrong shape"));
        }
        if data.is_empty() {
            return Ok(MultiOutputGp {
                kernel,
                noise,
                prior_mean,
                data,
                cache: None,
            });
        }

        let zs: Vec<DVector<f64>> = data.samples().iter().map(|s| s.z.clone()).collect();
        let g = kernel.gram(&zs, &noise)?;
        let n = data.len();
        let dx = data.x_dim();
        let df = kernel.component_dim();

        // Residual t − Â·f̂(Z) in output-major stacking.
        let mut resid = DVector::zeros(dx * n);
        for (ni, s) in data.samples().iter().enumerate() {
            let fhat = eval_prior(&prior_mean, s.z.as_slice(), df)?;
            let gprior = kernel.a() * fhat;
            for m in 0..dx {
                resid[m * n + ni] = s.y[m] - gprior[m];
            }
        }

        // Jitter ladder: 10⁻¹⁰·mean(diag) escalating ×10 up to 10⁻⁴·mean(diag).
        let base = g.trace() / g.nrows() as f64;
        let mut chol = None;
        let mut jitter = 0.0;
        for e in 0..=6 {
            jitter = base * 1e-10 * 10f64.powi(e);
            let mut gj = g.clone();
            for d in 0..gj.nrows() {
                gj[(d, d)] += jitter;
            }
            if let Some(c) = gj.cholesky() {
                chol = Some(c);
                break;
            }
        }
        let chol = chol.ok_or(Error::NumericalConditioning {
            message: format!("Gram factorization failed for N = {n}, d_x = {dx}"),
            final_jitter: jitter,
        })?;

        let alpha = chol.solve(&resid);
        let a = kernel.a();
        let abar = (0..df)
            .map(|i| {
                DVector::from_fn(n, |nn, _| (0..dx).map(|m| a[(m, i)] * alpha[m * n + nn]).sum())
            })
            .collect();

        Ok(MultiOutputGp {
            kernel,
            noise,
            prior_mean,
            data,
            cache: Some(FitCache { chol, abar, jitter }),
        })
    }

    /// Fits a model with the same hyperparameters on different data.
    pub fn refit(&self, data: Dataset) -> Result<MultiOutputGp> {
        MultiOutputGp::fit(
            data,
            self.kernel.clone(),
            self.noise.clone(),
            self.prior_mean.clone(),
        )
    }

    pub fn kernel(&self) -> &CoregKernel {
        &self.kernel
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn prior_mean(&self) -> PriorMean {
        self.prior_mean.clone()
    }

    /// Diagonal jitter added to make the factorization succeed (0 for N = 0).
    pub fn jitter(&self) -> f64 {
        self.cache.as_ref().map_or(0.0, |c| c.jitter)
    }

    pub fn output_dim(&self) -> usize {
        self.kernel.output_dim()
    }

    pub fn component_dim(&self) -> usize {
        self.kernel.component_dim()
    }

    fn check_query(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.data.z_dim() {
            return Err(Error::invalid(format!(
                "query has dimension {}, expected {}",
                z.len(),
                self.data.z_dim()
            )));
        }
        Ok(())
    }

    fn prior_f(&self, z: &[f64]) -> Result<DVector<f64>> {
        eval_prior(&self.prior_mean, z, self.component_dim())
    }

    /// Component posterior means f̂(z) + c(z), where cᵢ(z) = kᵢ(Z,z)ᵀ·ᾱᵢ.
    /// O(d_f·N) kernel evaluations; this is the hot path for control loops.
    pub fn posterior_mean_components(&self, z: &[f64]) -> Result<DVector<f64>> {
        self.check_query(z)?;
        let mut mean = self.prior_f(z)?;
        if let Some(c) = &self.cache {
            for (i, ki) in self.kernel.kernels().iter().enumerate() {
                let mut acc = 0.0;
                for (s, ab) in self.data.samples().iter().zip(c.abar[i].iter()) {
                    acc += ki.eval_unchecked(s.z.as_slice(), z) * ab;
                }
                mean[i] += acc;
            }
        }
        Ok(mean)
    }

    /// Posterior mean of the observed map g = A·f. Same cached weights as the
    /// component path, so A·(component means) is bit-identical to this.
    pub fn posterior_mean_g(&self, z: &[f64]) -> Result<DVector<f64>> {
        Ok(self.kernel.a() * self.posterior_mean_components(z)?)
    }

    /// Joint posterior of g(z): mean and d_x × d_x covariance.
    pub fn posterior_g(&self, z: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mean = self.posterior_mean_g(z)?;
        let prior_cov = self.kernel.eval(z, z)?;
        let Some(cache) = &self.cache else {
            return Ok((mean, prior_cov));
        };

        let n = self.data.len();
        let dx = self.output_dim();
        let a = self.kernel.a();
        let kvecs: Vec<Vec<f64>> = self
            .kernel
            .kernels()
            .iter()
            .map(|k| {
                self.data
                    .samples()
                    .iter()
                    .map(|s| k.eval_unchecked(s.z.as_slice(), z))
                    .collect()
            })
            .collect();
        // Cross-covariance K(Z,z): row m·N+n ↔ output m at sample n.
        let mut kstar = DMatrix::zeros(dx * n, dx);
        for mp in 0..dx {
            for m in 0..dx {
                for nn in 0..n {
                    let mut s = 0.0;
                    for (i, kv) in kvecs.iter().enumerate() {
                        s += a[(m, i)] * a[(mp, i)] * kv[nn];
                    }
                    kstar[(m * n + nn, mp)] = s;
                }
            }
        }
        let v = cache.chol.solve(&kstar);
        let mut cov = &prior_cov - kstar.transpose() * v;
        // Exact symmetrization plus variance clamping against round-off.
        for p in 0..dx {
            for q in 0..p {
                let avg = 0.5 * (cov[(p, q)] + cov[(q, p)]);
                cov[(p, q)] = avg;
                cov[(q, p)] = avg;
            }
            if cov[(p, p)] < 0.0 {
                debug_assert!(cov[(p, p)] > -1e-8 * (1.0 + prior_cov[(p, p)]));
                cov[(p, p)] = 0.0;
            }
        }
        Ok((mean, cov))
    }

    /// Posterior of latent component `i` (zero-based): mean
    /// f̂ᵢ(z) + (aᵢᵀ ⊗ kᵢ(Z,z)ᵀ)·G⁻¹·(t − f̂-stack) and variance
    /// kᵢ(z,z) − wᵢᵀG⁻¹wᵢ with w in the output-major stacking.
    pub fn posterior_component(&self, z: &[f64], i: usize) -> Result<ComponentPosterior> {
        self.check_query(z)?;
        let fhat = self.prior_f(z)?;
        self.component_inner(z, i, &fhat)
    }

    /// All component posteriors at once.
    pub fn posterior_components(&self, z: &[f64]) -> Result<Vec<ComponentPosterior>> {
        self.check_query(z)?;
        let fhat = self.prior_f(z)?;
        (0..self.component_dim())
            .map(|i| self.component_inner(z, i, &fhat))
            .collect()
    }

    fn component_inner(&self, z: &[f64], i: usize, fhat: &DVector<f64>) -> Result<ComponentPosterior> {
        let df = self.component_dim();
        if i >= df {
            return Err(Error::invalid(format!(
                "component index {i} out of range (d_f = {df})"
            )));
        }
        let ki = &self.kernel.kernels()[i];
        let kzz = ki.eval_unchecked(z, z);
        let Some(cache) = &self.cache else {
            return Ok(ComponentPosterior {
                mean: fhat[i],
                variance: kzz,
            });
        };

        let n = self.data.len();
        let dx = self.output_dim();
        let a = self.kernel.a();
        let kvec: Vec<f64> = self
            .data
            .samples()
            .iter()
            .map(|s| ki.eval_unchecked(s.z.as_slice(), z))
            .collect();

        let mean = fhat[i]
            + kvec
                .iter()
                .zip(cache.abar[i].iter())
                .map(|(k, ab)| k * ab)
                .sum::<f64>();

        let mut w = DVector::zeros(dx * n);
        for m in 0..dx {
            let ami = a[(m, i)];
            if ami != 0.0 {
                for (nn, k) in kvec.iter().enumerate() {
                    w[m * n + nn] = ami * k;
                }
            }
        }
        let v = cache.chol.solve(&w);
        let mut variance = kzz - w.dot(&v);
        if variance < 0.0 {
            debug_assert!(variance > -1e-8 * (1.0 + kzz));
            variance = 0.0;
        }
        Ok(ComponentPosterior { mean, variance })
    }

    /// Wall-clock stats per posterior-mean evaluation, microseconds. Each
    /// repetition sweeps all queries through the O(d_x·N) cached-mean path.
    pub fn predict_timing(&self, queries: &[DVector<f64>], repetitions: usize) -> Result<TimingStats> {
        if repetitions < 10 {
            return Err(Error::invalid(format!(
                "timing needs at least 10 repetitions, got {repetitions}"
            )));
        }
        if queries.is_empty() {
            return Err(Error::invalid("timing needs at least one query"));
        }
        for q in queries {
            self.check_query(q.as_slice())?;
        }
        let mut per_query_us = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t0 = Instant::now();
            for q in queries {
                std::hint::black_box(self.posterior_mean_g(q.as_slice())?);
            }
            per_query_us.push(t0.elapsed().as_secs_f64() * 1e6 / queries.len() as f64);
        }
        let n = per_query_us.len() as f64;
        let mean = per_query_us.iter().sum::<f64>() / n;
        let var = per_query_us.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(TimingStats {
            mean_us: mean,
            std_us: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub mean_us: f64,
    pub std_us: f64,
}

fn eval_prior(prior: &PriorMean, z: &[f64], df: usize) -> Result<DVector<f64>> {
    let fhat = (prior)(z);
    if fhat.len() != df {
        return Err(Error::invalid(format!(
            "prior mean returned {} components, expected {df}",
            fhat.len()
        )));
    }
    if fhat.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("prior mean must be finite"));
    }
    Ok(fhat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::SeKernelParams;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_kernels(dz: usize) -> Vec<SeKernelParams> {
        vec![
            SeKernelParams::isotropic(1.0, 0.8, dz).unwrap(),
            SeKernelParams::isotropic(1.5, 1.2, dz).unwrap(),
        ]
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, x_dim: usize, u_dim: usize) -> Dataset {
        let mut d = Dataset::new(x_dim, u_dim);
        for _ in 0..n {
            let z = DVector::from_fn(x_dim + u_dim, |_, _| rng.random_range(-1.5..1.5));
            let y = DVector::from_fn(x_dim, |_, _| rng.random_range(-1.0..1.0));
            d.push(z, y).unwrap();
        }
        d
    }

    fn fit_random(
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> MultiOutputGp {
        let data = random_dataset(rng, n, 2, 0);
        let a = dmatrix![1.0, 0.0; -1.0, 1.0];
        let kernel = CoregKernel::new(a, two_kernels(2)).unwrap();
        let noise = DMatrix::identity(2, 2) * 1e-2;
        MultiOutputGp::fit(data, kernel, noise, zero_prior(2)).unwrap()
    }

    #[test]
    fn empty_dataset_recovers_prior() {
        let kernel = CoregKernel::new(dmatrix![1.0, 0.0; -1.0, 1.0], two_kernels(2)).unwrap();
        let prior: PriorMean = Arc::new(|z: &[f64]| DVector::from_vec(vec![z[0], z[0] + z[1]]));
        let gp = MultiOutputGp::fit(
            Dataset::new(2, 0),
            kernel.clone(),
            DMatrix::identity(2, 2) * 1e-2,
            prior.clone(),
        )
        .unwrap();
        let z = [0.4, -0.9];
        let (mean, cov) = gp.posterior_g(&z).unwrap();
        assert_relative_eq!(mean, kernel.a() * prior(&z), max_relative = 1e-15);
        assert_relative_eq!(cov, kernel.eval(&z, &z).unwrap(), max_relative = 1e-15);
        let comp = gp.posterior_component(&z, 1).unwrap();
        assert_eq!(comp.mean, prior(&z)[1]);
        assert_eq!(comp.variance, kernel.kernels()[1].eval(&z, &z).unwrap());
    }

    #[test]
    fn refit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gp = fit_random(&mut rng, 12);
        let gp2 = gp.refit(gp.data().clone()).unwrap();
        let z = [0.3, 0.7];
        assert_eq!(
            gp.posterior_mean_g(&z).unwrap(),
            gp2.posterior_mean_g(&z).unwrap()
        );
        let (c1, c2) = (
            gp.posterior_component(&z, 0).unwrap(),
            gp2.posterior_component(&z, 0).unwrap(),
        );
        assert_eq!(c1, c2);
    }

    #[test]
    fn scalar_single_point_closed_form() {
        // d_x = d_f = 1, s² = 1, σ² = 0.1, one observation y = 1 at z₀:
        // μ(z₀) = 1/1.1, σ²(z₀) = 1 − 1/1.1.
        let kernel = CoregKernel::new(
            DMatrix::from_element(1, 1, 1.0),
            vec![SeKernelParams::isotropic(1.0, 1.0, 1).unwrap()],
        )
        .unwrap();
        let mut data = Dataset::new(1, 0);
        data.push(DVector::from_vec(vec![0.5]), DVector::from_vec(vec![1.0]))
            .unwrap();
        let gp = MultiOutputGp::fit(
            data,
            kernel,
            DMatrix::from_element(1, 1, 0.1),
            zero_prior(1),
        )
        .unwrap();
        let c = gp.posterior_component(&[0.5], 0).unwrap();
        assert_relative_eq!(c.mean, 1.0 / 1.1, max_relative = 1e-9);
        assert_relative_eq!(c.variance, 1.0 - 1.0 / 1.1, max_relative = 1e-8);
        assert_relative_eq!(c.mean, 0.909091, max_relative = 1e-6);
        assert_relative_eq!(c.variance, 0.090909, max_relative = 1e-5);
    }

    #[test]
    fn near_interpolation_with_vanishing_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_dataset(&mut rng, 6, 2, 0);
        let kernel = CoregKernel::new(dmatrix![1.0, 0.0; -1.0, 1.0], two_kernels(2)).unwrap();
        let gp = MultiOutputGp::fit(
            data.clone(),
            kernel,
            DMatrix::identity(2, 2) * 1e-10,
            zero_prior(2),
        )
        .unwrap();
        for s in data.samples() {
            let mean = gp.posterior_mean_g(s.z.as_slice()).unwrap();
            assert_relative_eq!(mean, s.y.clone(), epsilon = 1e-3);
        }
    }

    #[test]
    fn component_means_mix_to_joint_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let gp = fit_random(&mut rng, 15);
            let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let comp = DVector::from_iterator(
                2,
                (0..2).map(|i| gp.posterior_component(&z, i).unwrap().mean),
            );
            let joint = gp.posterior_g(&z).unwrap().0;
            assert_relative_eq!(gp.kernel().a() * comp, joint, max_relative = 1e-8);
        }
    }

    /// Brute-force joint posterior over the latent components f at the query,
    /// assembled from the stacked cross-covariance blocks and an explicit
    /// matrix inverse.
    fn joint_f_oracle(gp: &MultiOutputGp, z: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let data = gp.data();
        let n = data.len();
        let dx = gp.output_dim();
        let df = gp.component_dim();
        let a = gp.kernel().a();
        let zs: Vec<DVector<f64>> = data.samples().iter().map(|s| s.z.clone()).collect();
        let g = gp.kernel().gram(&zs, gp.noise()).unwrap();
        let mut gj = g;
        for d in 0..gj.nrows() {
            gj[(d, d)] += gp.jitter();
        }
        let ginv = gj.try_inverse().unwrap();

        let prior = gp.prior_mean();
        let mut resid = DVector::zeros(dx * n);
        for (nn, s) in data.samples().iter().enumerate() {
            let gp_mean = a * prior(s.z.as_slice());
            for m in 0..dx {
                resid[m * n + nn] = s.y[m] - gp_mean[m];
            }
        }
        // Cross-covariance between f_i(z) and stacked observations:
        // cov(f_i(z), y_m(z⁽ⁿ⁾)) = a_{m,i}·k_i(z⁽ⁿ⁾, z).
        let mut omega = DMatrix::zeros(df, dx * n);
        for i in 0..df {
            let ki = &gp.kernel().kernels()[i];
            for m in 0..dx {
                for nn in 0..n {
                    omega[(i, m * n + nn)] =
                        a[(m, i)] * ki.eval(zs[nn].as_slice(), z).unwrap();
                }
            }
        }
        let kdiag = DMatrix::from_diagonal(&DVector::from_iterator(
            df,
            gp.kernel().kernels().iter().map(|k| k.eval(z, z).unwrap()),
        ));
        let mean = prior(z) + &omega * &ginv * &resid;
        let cov = kdiag - &omega * &ginv * omega.transpose();
        (mean, cov)
    }

    #[test]
    fn component_posterior_matches_joint_block_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..4 {
            let gp = fit_random(&mut rng, 10);
            for _ in 0..3 {
                let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let (om, oc) = joint_f_oracle(&gp, &z);
                for i in 0..2 {
                    let c = gp.posterior_component(&z, i).unwrap();
                    assert_relative_eq!(c.mean, om[i], epsilon = 1e-8, max_relative = 1e-8);
                    assert_relative_eq!(c.variance, oc[(i, i)], epsilon = 1e-8, max_relative = 1e-8);
                }
            }
        }
    }

    #[test]
    fn single_output_reduction_matches_scalar_formula() {
        // One sample at the query itself with A = I reduces component 0 to the
        // single-output posterior.
        let kernel = CoregKernel::new(DMatrix::identity(2, 2), two_kernels(2)).unwrap();
        let mut data = Dataset::new(2, 0);
        let z0 = DVector::from_vec(vec![0.2, -0.4]);
        data.push(z0.clone(), DVector::from_vec(vec![1.0, 0.0]))
            .unwrap();
        let gp = MultiOutputGp::fit(
            data,
            kernel,
            DMatrix::identity(2, 2) * 0.1,
            zero_prior(2),
        )
        .unwrap();
        let c = gp.posterior_component(z0.as_slice(), 0).unwrap();
        assert_relative_eq!(c.mean, 1.0 / 1.1, max_relative = 1e-8);
        assert_relative_eq!(c.variance, 1.0 - 1.0 / 1.1, max_relative = 1e-7);
    }

    #[test]
    fn variance_shrinks_with_more_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data = random_dataset(&mut rng, 20, 2, 0);
        let small = data.subset(&(0..10).collect::<Vec<_>>()).unwrap();
        let kernel = CoregKernel::new(dmatrix![1.0, 0.0; -1.0, 1.0], two_kernels(2)).unwrap();
        let noise = DMatrix::identity(2, 2) * 1e-2;
        let gp_small =
            MultiOutputGp::fit(small, kernel.clone(), noise.clone(), zero_prior(2)).unwrap();
        let gp_big = MultiOutputGp::fit(data, kernel, noise, zero_prior(2)).unwrap();
        for _ in 0..25 {
            let z = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            for i in 0..2 {
                let vs = gp_small.posterior_component(&z, i).unwrap().variance;
                let vb = gp_big.posterior_component(&z, i).unwrap().variance;
                assert!(vb <= vs + 1e-8, "variance grew: {vb} > {vs}");
            }
        }
    }

    #[test]
    fn duplicated_points_still_fit() {
        let kernel = CoregKernel::new(dmatrix![1.0, 0.0; -1.0, 1.0], two_kernels(2)).unwrap();
        let mut data = Dataset::new(2, 0);
        for _ in 0..8 {
            data.push(
                DVector::from_vec(vec![0.1, 0.1]),
                DVector::from_vec(vec![0.5, -0.5]),
            )
            .unwrap();
        }
        let gp = MultiOutputGp::fit(data, kernel, DMatrix::zeros(2, 2), zero_prior(2)).unwrap();
        assert!(gp.jitter() > 0.0);
        let c = gp.posterior_component(&[0.1, 0.1], 0).unwrap();
        assert!(c.variance >= 0.0 && c.variance < 1.0);
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_dataset(&mut rng, 9, 2, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        data.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(back.x_dim(), 2);
        assert_eq!(back.u_dim(), 2);
        assert_eq!(back.samples(), data.samples());
    }

    #[test]
    fn dataset_csv_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let nan = dir.path().join("nan.csv");
        std::fs::write(&nan, "x1,u1,y1\n0.0,NaN,1.0\n").unwrap();
        assert!(Dataset::read_csv(&nan).is_err());
        let header = dir.path().join("hdr.csv");
        std::fs::write(&header, "x1,x2,y1\n0.0,0.0,1.0\n").unwrap();
        assert!(Dataset::read_csv(&header).is_err());
        let text = dir.path().join("txt.csv");
        std::fs::write(&text, "x1,u1,y1\n0.0,abc,1.0\n").unwrap();
        assert!(Dataset::read_csv(&text).is_err());
    }

    #[test]
    fn timing_requires_enough_repetitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gp = fit_random(&mut rng, 5);
        let q = vec![DVector::from_vec(vec![0.0, 0.0])];
        assert!(matches!(
            gp.predict_timing(&q, 0),
            Err(Error::InvalidArgument(_))
        ));
        let stats = gp.predict_timing(&q, 10).unwrap();
        assert!(stats.mean_us > 0.0);
    }

    #[test]
    fn timing_scales_roughly_linearly_in_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let gp10 = fit_random(&mut rng, 10);
        let gp100 = fit_random(&mut rng, 100);
        let queries: Vec<DVector<f64>> = (0..200)
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        // Warm-up to stabilize caches before measuring.
        gp100.predict_timing(&queries, 10).unwrap();
        let t10 = gp10.predict_timing(&queries, 20).unwrap();
        let t100 = gp100.predict_timing(&queries, 20).unwrap();
        let ratio = t100.mean_us / t10.mean_us;
        assert!(
            (3.0..30.0).contains(&ratio),
            "latency ratio {ratio} outside [3, 30] (t10 = {}, t100 = {})",
            t10.mean_us,
            t100.mean_us
        );
        // Stability: a second measurement agrees within 50%.
        let t100b = gp100.predict_timing(&queries, 20).unwrap();
        let r = t100.mean_us / t100b.mean_us;
        assert!((0.5..2.0).contains(&r), "unstable timings: {r}");
    }
}
