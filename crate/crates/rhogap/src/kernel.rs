//! Squared-exponential kernels and the coregionalized matrix kernel
//! K(z,z′) = A·diag(k₁,…,k_df)·Aᵀ, plus Gram-matrix assembly with
//! observation noise.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Squared-exponential kernel over a subset of the input dimensions.
///
/// Dimensions not listed in `active_dims` behave as if they had infinite
/// length scale: they contribute nothing to the kernel value, and nothing to
/// the weighted distances derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SeKernelParams {
    signal_variance: f64,
    length_scales: Vec<f64>,
    active_dims: Vec<usize>,
}

impl SeKernelParams {
    /// `active_dims` are zero-based input indices, strictly increasing, with
    /// one positive length scale each.
    pub fn new(
        signal_variance: f64,
        length_scales: Vec<f64>,
        active_dims: Vec<usize>,
    ) -> Result<Self> {
        if !(signal_variance > 0.0) || !signal_variance.is_finite() {
            return Err(Error::invalid(format!(
                "signal variance must be positive and finite, got {signal_variance}"
            )));
        }
        if length_scales.len() != active_dims.len() {
            return Err(Error::invalid(format!(
                "got {} length scales for {} active dimensions",
                length_scales.len(),
                active_dims.len()
            )));
        }
        if active_dims.is_empty() {
            return Err(Error::invalid("kernel needs at least one active dimension"));
        }
        if !active_dims.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid(
                "active dimensions must be strictly increasing",
            ));
        }
        if let Some(l) = length_scales.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid(format!(
                "length scales must be positive and finite, got {l}"
            )));
        }
        Ok(SeKernelParams {
            signal_variance,
            length_scales,
            active_dims,
        })
    }

    /// Kernel active on all of the first `dim` input dimensions with a shared
    /// length scale.
    pub fn isotropic(signal_variance: f64, length_scale: f64, dim: usize) -> Result<Self> {
        SeKernelParams::new(
            signal_variance,
            vec![length_scale; dim],
            (0..dim).collect(),
        )
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn length_scales(&self) -> &[f64] {
        &self.length_scales
    }

    pub fn active_dims(&self) -> &[usize] {
        &self.active_dims
    }

    /// Smallest point dimension this kernel can be evaluated on.
    pub fn required_dim(&self) -> usize {
        self.active_dims.last().map_or(0, |d| d + 1)
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() < self.required_dim() {
            return Err(Error::invalid(format!(
                "point has dimension {} but the kernel uses dimension {}",
                z.len(),
                self.required_dim() - 1
            )));
        }
        Ok(())
    }

    /// Squared distance Σ_j ((z_j−z′_j)/l_j)² over the active dimensions.
    /// This is the metric used both inside the kernel and for weighted fill
    /// distances.
    pub fn sq_weighted_dist(&self, z: &[f64], zp: &[f64]) -> Result<f64> {
        self.check_point(z)?;
        self.check_point(zp)?;
        Ok(self.sq_weighted_dist_unchecked(z, zp))
    }

    pub(crate) fn sq_weighted_dist_unchecked(&self, z: &[f64], zp: &[f64]) -> f64 {
        self.active_dims
            .iter()
            .zip(&self.length_scales)
            .map(|(&j, &l)| {
                let d = (z[j] - zp[j]) / l;
                d * d
            })
            .sum()
    }

    pub fn eval(&self, z: &[f64], zp: &[f64]) -> Result<f64> {
        self.check_point(z)?;
        self.check_point(zp)?;
        Ok(self.eval_unchecked(z, zp))
    }

    pub(crate) fn eval_unchecked(&self, z: &[f64], zp: &[f64]) -> f64 {
        self.signal_variance * (-0.5 * self.sq_weighted_dist_unchecked(z, zp)).exp()
    }
}

/// Matrix kernel K(z,z′) = A·diag(k₁(z,z′),…,k_df(z,z′))·Aᵀ built from a
/// mixing matrix A (one column per latent component) and scalar SE kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct CoregKernel {
    a: DMatrix<f64>,
    kernels: Vec<SeKernelParams>,
}

impl CoregKernel {
    pub fn new(a: DMatrix<f64>, kernels: Vec<SeKernelParams>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::invalid("coregionalized kernel needs components"));
        }
        if a.ncols() != kernels.len() {
            return Err(Error::invalid(format!(
                "mixing matrix has {} columns for {} component kernels",
                a.ncols(),
                kernels.len()
            )));
        }
        if a.nrows() == 0 {
            return Err(Error::invalid("mixing matrix needs at least one row"));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mixing matrix entries must be finite"));
        }
        for i in 0..a.ncols() {
            if a.column(i).iter().all(|v| *v == 0.0) {
                return Err(Error::invalid(format!(
                    "mixing matrix column {i} is all zero; component {i} would be unobservable"
                )));
            }
        }
        Ok(CoregKernel { a, kernels })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn kernels(&self) -> &[SeKernelParams] {
        &self.kernels
    }

    /// Number of observed outputs (rows of A).
    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Number of latent components (columns of A).
    pub fn component_dim(&self) -> usize {
        self.kernels.len()
    }

    pub fn required_dim(&self) -> usize {
        self.kernels.iter().map(|k| k.required_dim()).max().unwrap_or(0)
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() < self.required_dim() {
            return Err(Error::invalid(format!(
                "point has dimension {} but the kernel uses dimension {}",
                z.len(),
                self.required_dim() - 1
            )));
        }
        Ok(())
    }

    /// d_x × d_x covariance block between outputs at a pair of inputs.
    pub fn eval(&self, z: &[f64], zp: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(z)?;
        self.check_point(zp)?;
        let kv: Vec<f64> = self.kernels.iter().map(|k| k.eval_unchecked(z, zp)).collect();
        Ok(self.mix(&kv))
    }

    /// A·diag(kv)·Aᵀ, assembled entrywise on the lower triangle and mirrored
    /// so the result is exactly symmetric.
    fn mix(&self, kv: &[f64]) -> DMatrix<f64> {
        let dx = self.output_dim();
        let mut m = DMatrix::zeros(dx, dx);
        for p in 0..dx {
            for q in 0..=p {
                let mut s = 0.0;
                for (i, &ki) in kv.iter().enumerate() {
                    s += self.a[(p, i)] * self.a[(q, i)] * ki;
                }
                m[(p, q)] = s;
                m[(q, p)] = s;
            }
        }
        m
    }

    /// Per-component N × N kernel matrices k_i(Z,Z), exactly symmetric.
    pub(crate) fn component_grams(&self, inputs: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
        let n = inputs.len();
        self.kernels
            .iter()
            .map(|k| {
                let mut km = DMatrix::zeros(n, n);
                for r in 0..n {
                    for c in 0..=r {
                        let v = k.eval_unchecked(inputs[r].as_slice(), inputs[c].as_slice());
                        km[(r, c)] = v;
                        km[(c, r)] = v;
                    }
                }
                km
            })
            .collect()
    }

    /// Full (d_x·N) × (d_x·N) Gram matrix K(Z,Z) + Σ_on ⊗ I_N in output-major
    /// layout: row m·N + n corresponds to output m at sample n, matching the
    /// stacked-target ordering t = [y₁⁽¹⁾…y₁⁽ᴺ⁾, y₂⁽¹⁾…].
    pub fn gram(&self, inputs: &[DVector<f64>], noise: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.is_empty() {
            return Err(Error::invalid("gram matrix needs at least one input point"));
        }
        let dz = inputs[0].len();
        if inputs.iter().any(|z| z.len() != dz) {
            return Err(Error::invalid("input points must share one dimension"));
        }
        self.check_point(inputs[0].as_slice())?;
        let noise = validated_noise(noise, self.output_dim())?;

        let n = inputs.len();
        let dx = self.output_dim();
        let kmats = self.component_grams(inputs);
        let mut g = DMatrix::zeros(dx * n, dx * n);
        for m in 0..dx {
            for m2 in 0..dx {
                for r in 0..n {
                    for c in 0..n {
                        let mut s = 0.0;
                        for (i, km) in kmats.iter().enumerate() {
                            s += self.a[(m, i)] * self.a[(m2, i)] * km[(r, c)];
                        }
                        if r == c {
                            s += noise[(m, m2)];
                        }
                        g[(m * n + r, m2 * n + c)] = s;
                    }
                }
            }
        }
        Ok(g)
    }
}

/// Checks that the observation-noise covariance is square, symmetric, PSD;
/// returns an exactly symmetric copy.
fn validated_noise(noise: &DMatrix<f64>, dx: usize) -> Result<DMatrix<f64>> {
    if noise.nrows() != dx || noise.ncols() != dx {
        return Err(Error::invalid(format!(
            "noise covariance is {}×{}, expected {dx}×{dx}",
            noise.nrows(),
            noise.ncols()
        )));
    }
    if noise.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("noise covariance entries must be finite"));
    }
    let scale = noise.amax().max(1.0);
    let mut sym = noise.clone();
    for p in 0..dx {
        for q in 0..p {
            if (noise[(p, q)] - noise[(q, p)]).abs() > 1e-10 * scale {
                return Err(Error::invalid("noise covariance must be symmetric"));
            }
            sym[(q, p)] = sym[(p, q)];
        }
    }
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.min() < -1e-10 * (1.0 + sym.trace().abs()) {
        return Err(Error::invalid(
            "noise covariance must be positive semidefinite",
        ));
    }
    Ok(sym)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_point(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_distance_gives_signal_variance() {
        let k = SeKernelParams::isotropic(2.5, 0.7, 3).unwrap();
        let z = [0.3, -1.2, 4.0];
        assert_eq!(k.eval(&z, &z).unwrap(), 2.5);
    }

    #[test]
    fn unit_case_matches_hand_value() {
        let k = SeKernelParams::isotropic(1.0, 1.0, 2).unwrap();
        let v = k.eval(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_relative_eq!(v, 0.367879, max_relative = 1e-5);
        assert_relative_eq!(v, (-1.0f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn inactive_dimensions_are_ignored() {
        let k = SeKernelParams::new(1.0, vec![1.0], vec![0]).unwrap();
        let v = k.eval(&[1.0, 5.0], &[1.0, -400.0]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn symmetric_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = SeKernelParams::new(1.7, vec![0.4, 1.1, 2.0], vec![0, 2, 3]).unwrap();
        for _ in 0..100 {
            let z = rand_point(&mut rng, 4);
            let zp = rand_point(&mut rng, 4);
            assert_eq!(k.eval(&z, &zp).unwrap(), k.eval(&zp, &z).unwrap());
        }
    }

    proptest! {
        #[test]
        // Range kept narrow enough that exp(−d²/2) cannot underflow to 0.
        fn bounded_by_signal_variance(
            z in prop::collection::vec(-3.0f64..3.0, 3),
            zp in prop::collection::vec(-3.0f64..3.0, 3),
            s in 0.1f64..5.0,
        ) {
            let k = SeKernelParams::isotropic(s, 0.5, 3).unwrap();
            let v = k.eval(&z, &zp).unwrap();
            prop_assert!(v > 0.0 && v <= s);
            prop_assert_eq!(k.eval(&zp, &z).unwrap(), v);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let k = SeKernelParams::new(1.0, vec![1.0], vec![3]).unwrap();
        assert!(matches!(
            k.eval(&[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(SeKernelParams::new(0.0, vec![1.0], vec![0]).is_err());
        assert!(SeKernelParams::new(1.0, vec![-1.0], vec![0]).is_err());
        assert!(SeKernelParams::new(1.0, vec![1.0, 1.0], vec![0]).is_err());
        assert!(SeKernelParams::new(1.0, vec![1.0, 1.0], vec![1, 1]).is_err());
        assert!(SeKernelParams::new(1.0, vec![], vec![]).is_err());
        assert!(SeKernelParams::new(f64::NAN, vec![1.0], vec![0]).is_err());
    }

    fn two_kernels() -> Vec<SeKernelParams> {
        vec![
            SeKernelParams::isotropic(1.0, 0.5, 2).unwrap(),
            SeKernelParams::isotropic(2.0, 1.5, 2).unwrap(),
        ]
    }

    #[test]
    fn identity_mixing_gives_diagonal() {
        let k = CoregKernel::new(DMatrix::identity(2, 2), two_kernels()).unwrap();
        let z = [0.1, 0.4];
        let zp = [-0.3, 1.0];
        let m = k.eval(&z, &zp).unwrap();
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(1, 0)], 0.0);
        assert_eq!(m[(0, 0)], k.kernels()[0].eval(&z, &zp).unwrap());
        assert_eq!(m[(1, 1)], k.kernels()[1].eval(&z, &zp).unwrap());
    }

    #[test]
    fn triangular_mixing_expands_symbolically() {
        // A = [[1,0],[−1,1]] ⇒ K = [[k₁, −k₁],[−k₁, k₁+k₂]].
        let a = dmatrix![1.0, 0.0; -1.0, 1.0];
        let k = CoregKernel::new(a, two_kernels()).unwrap();
        let z = [0.2, -0.7];
        let zp = [1.1, 0.3];
        let k1 = k.kernels()[0].eval(&z, &zp).unwrap();
        let k2 = k.kernels()[1].eval(&z, &zp).unwrap();
        let m = k.eval(&z, &zp).unwrap();
        assert_relative_eq!(m[(0, 0)], k1, max_relative = 1e-14);
        assert_relative_eq!(m[(0, 1)], -k1, max_relative = 1e-14);
        assert_relative_eq!(m[(1, 0)], -k1, max_relative = 1e-14);
        assert_relative_eq!(m[(1, 1)], k1 + k2, max_relative = 1e-14);
    }

    #[test]
    fn matches_rank_one_sum_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0f64));
        let kernels = vec![
            SeKernelParams::isotropic(0.8, 0.6, 3).unwrap(),
            SeKernelParams::new(1.3, vec![0.9, 1.4], vec![0, 2]).unwrap(),
        ];
        let k = CoregKernel::new(a.clone(), kernels).unwrap();
        for _ in 0..20 {
            let z = rand_point(&mut rng, 3);
            let zp = rand_point(&mut rng, 3);
            let mut sum = DMatrix::zeros(3, 3);
            for i in 0..2 {
                let ai = a.column(i);
                sum += &ai * ai.transpose() * k.kernels()[i].eval(&z, &zp).unwrap();
            }
            let m = k.eval(&z, &zp).unwrap();
            assert_relative_eq!(m, sum, max_relative = 1e-12);
        }
    }

    #[test]
    fn stacked_kernel_matrix_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = dmatrix![1.0, 0.0; -1.0, 1.0];
        let k = CoregKernel::new(a, two_kernels()).unwrap();
        for _ in 0..5 {
            let pts: Vec<_> = (0..10)
                .map(|_| DVector::from_vec(rand_point(&mut rng, 2)))
                .collect();
            let g = k.gram(&pts, &DMatrix::zeros(2, 2)).unwrap();
            let eig = g.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() >= -1e-10 * g.trace());
        }
    }

    #[test]
    fn single_point_gram_with_independent_outputs() {
        let k = CoregKernel::new(DMatrix::identity(2, 2), two_kernels()).unwrap();
        let z = DVector::from_vec(vec![0.5, -0.5]);
        let noise = DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.04]));
        let g = k.gram(&[z.clone()], &noise).unwrap();
        assert_eq!(g.nrows(), 2);
        let k1 = k.kernels()[0].eval(z.as_slice(), z.as_slice()).unwrap();
        let k2 = k.kernels()[1].eval(z.as_slice(), z.as_slice()).unwrap();
        assert_relative_eq!(g[(0, 0)], k1 + 0.01, max_relative = 1e-14);
        assert_relative_eq!(g[(1, 1)], k2 + 0.04, max_relative = 1e-14);
        assert_eq!(g[(0, 1)], 0.0);
        assert_eq!(g[(1, 0)], 0.0);
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0f64));
        let k = CoregKernel::new(a, two_kernels()).unwrap();
        let pts: Vec<_> = (0..7)
            .map(|_| DVector::from_vec(rand_point(&mut rng, 2)))
            .collect();
        let noise = dmatrix![0.02, 0.005; 0.005, 0.03];
        let g = k.gram(&pts, &noise).unwrap();
        assert_eq!((&g - g.transpose()).amax(), 0.0);
    }

    #[test]
    fn gram_matches_naive_blockwise_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0f64));
        let k = CoregKernel::new(a, two_kernels()).unwrap();
        let pts: Vec<_> = (0..3)
            .map(|_| DVector::from_vec(rand_point(&mut rng, 2)))
            .collect();
        let noise = dmatrix![0.1, 0.02; 0.02, 0.2];
        let g = k.gram(&pts, &noise).unwrap();

        let n = pts.len();
        let mut oracle = DMatrix::zeros(2 * n, 2 * n);
        for m in 0..2 {
            for m2 in 0..2 {
                for r in 0..n {
                    for c in 0..n {
                        let block = k.eval(pts[r].as_slice(), pts[c].as_slice()).unwrap();
                        oracle[(m * n + r, m2 * n + c)] =
                            block[(m, m2)] + if r == c { noise[(m, m2)] } else { 0.0 };
                    }
                }
            }
        }
        assert_relative_eq!(g, oracle, max_relative = 1e-13);
    }

    #[test]
    fn indefinite_noise_is_rejected() {
        let k = CoregKernel::new(DMatrix::identity(2, 2), two_kernels()).unwrap();
        let z = DVector::from_vec(vec![0.0, 0.0]);
        let bad = dmatrix![1.0, 2.0; 2.0, 1.0];
        assert!(matches!(
            k.gram(&[z.clone()], &bad),
            Err(Error::InvalidArgument(_))
        ));
        let asym = dmatrix![1.0, 0.5; 0.1, 1.0];
        assert!(k.gram(&[z], &asym).is_err());
    }

    #[test]
    fn noisy_gram_admits_cholesky() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = dmatrix![1.0, 0.0; -1.0, 1.0];
        let k = CoregKernel::new(a, two_kernels()).unwrap();
        let pts: Vec<_> = (0..30)
            .map(|_| DVector::from_vec(rand_point(&mut rng, 2)))
            .collect();
        let noise = DMatrix::identity(2, 2) * 1e-2;
        let g = k.gram(&pts, &noise).unwrap();
        assert!(g.cholesky().is_some());
    }

    #[test]
    fn zero_column_is_rejected() {
        let a = dmatrix![1.0, 0.0; 1.0, 0.0];
        assert!(CoregKernel::new(a, two_kernels()).is_err());
    }
}
