//! Linear forward models and Gaussian likelihoods for the inverse problems:
//! denoising (identity operator), low-frequency-DFT deblurring, and sparse
//! spatial-frequency measurements.
//!
//! Complex measurements are stored as interleaved `(re, im)` real pairs.
//! Under the default magnitude convention, complex noise of "standard
//! deviation sigma" means each real component has std `sigma / sqrt(2)` so
//! the complex magnitude has std `sigma`; the per-component convention is
//! available as a flag since either reading is defensible.
//!
//! DFT coefficients are unnormalized (`X_k = sum_x x exp(-2 pi i k.r / side)`)
//! and only one representative per Hermitian-conjugate pair is measured —
//! the input is real, so the partner coefficient carries no information and
//! keeping it would double-count the likelihood.

use ndarray::Array2;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// How a scalar `noise_sigma` translates to per-real-component noise on
/// complex measurements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseConvention {
    /// `noise_sigma` is the std of the complex magnitude; each of (re, im)
    /// gets `noise_sigma / sqrt(2)`.
    Magnitude,
    /// `noise_sigma` applies to every real component directly.
    PerComponent,
}

/// A selected 2D spatial frequency, wrap-around indexed in
/// `(-side/2, side/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Freq {
    pub ky: i64,
    pub kx: i64,
}

impl Freq {
    fn radius2(self) -> i64 {
        self.ky * self.ky + self.kx * self.kx
    }

    /// Row-major grid position of this frequency.
    fn grid_index(self, side: usize) -> usize {
        let s = side as i64;
        let r = self.ky.rem_euclid(s) as usize;
        let c = self.kx.rem_euclid(s) as usize;
        r * side + c
    }

    /// Hermitian conjugate `-k` (same wrap-around range).
    fn conjugate(self, side: usize) -> Freq {
        let s = side as i64;
        let wrap = |v: i64| {
            let m = (-v).rem_euclid(s);
            if m <= s / 2 {
                m
            } else {
                m - s
            }
        };
        Freq {
            ky: wrap(self.ky),
            kx: wrap(self.kx),
        }
    }

    /// Canonical representative of the `{k, -k}` pair: the one with the
    /// smaller row-major grid index.
    fn canonical(self, side: usize) -> Freq {
        let conj = self.conjugate(side);
        if conj.grid_index(side) < self.grid_index(side) {
            conj
        } else {
            self
        }
    }
}

/// Linear measurement operator on flattened images.
#[derive(Clone, Debug)]
pub enum Operator {
    /// Identity (denoising).
    Identity { dim: usize },
    /// Subsampled unnormalized 2D DFT of a `side x side` image; each
    /// frequency contributes an interleaved (re, im) pair of real rows.
    Dft { side: usize, freqs: Vec<Freq> },
    /// Arbitrary dense real matrix.
    Dense { a: Array2<f64> },
}

impl Operator {
    pub fn in_dim(&self) -> usize {
        match self {
            Operator::Identity { dim } => *dim,
            Operator::Dft { side, .. } => side * side,
            Operator::Dense { a } => a.ncols(),
        }
    }

    /// Number of real measurement components.
    pub fn out_dim(&self) -> usize {
        match self {
            Operator::Identity { dim } => *dim,
            Operator::Dft { freqs, .. } => 2 * freqs.len(),
            Operator::Dense { a } => a.nrows(),
        }
    }

    /// True when measurements are complex pairs (affects the noise
    /// convention).
    pub fn is_complex(&self) -> bool {
        matches!(self, Operator::Dft { .. })
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim());
        match self {
            Operator::Identity { .. } => x.to_vec(),
            Operator::Dft { side, freqs } => {
                let mut out = Vec::with_capacity(2 * freqs.len());
                for f in freqs {
                    let (mut re, mut im) = (0.0, 0.0);
                    for r in 0..*side {
                        for c in 0..*side {
                            let theta = 2.0 * std::f64::consts::PI
                                * (f.ky * r as i64 + f.kx * c as i64) as f64
                                / *side as f64;
                            let v = x[r * side + c];
                            re += v * theta.cos();
                            im -= v * theta.sin();
                        }
                    }
                    out.push(re);
                    out.push(im);
                }
                out
            }
            Operator::Dense { a } => a
                .rows()
                .into_iter()
                .map(|row| row.iter().zip(x.iter()).map(|(w, v)| w * v).sum())
                .collect(),
        }
    }

    /// `A^T r` for a real-expanded residual `r` (the adjoint of the real
    /// form; equals the complex `A^H` after expansion).
    pub fn adjoint(&self, r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.out_dim());
        match self {
            Operator::Identity { .. } => r.to_vec(),
            Operator::Dft { side, freqs } => {
                let mut out = vec![0.0; side * side];
                for (i, f) in freqs.iter().enumerate() {
                    let (re, im) = (r[2 * i], r[2 * i + 1]);
                    for row in 0..*side {
                        for c in 0..*side {
                            let theta = 2.0 * std::f64::consts::PI
                                * (f.ky * row as i64 + f.kx * c as i64) as f64
                                / *side as f64;
                            out[row * side + c] += re * theta.cos() - im * theta.sin();
                        }
                    }
                }
                out
            }
            Operator::Dense { a } => {
                let mut out = vec![0.0; a.ncols()];
                for (row, ri) in a.rows().into_iter().zip(r.iter()) {
                    for (o, w) in out.iter_mut().zip(row.iter()) {
                        *o += w * ri;
                    }
                }
                out
            }
        }
    }

    /// Materializes the real-expanded matrix (used by the conjugate
    /// posterior oracle and the projection sampler).
    pub fn dense_matrix(&self) -> Array2<f64> {
        let (m, d) = (self.out_dim(), self.in_dim());
        let mut a = Array2::zeros((m, d));
        let mut basis = vec![0.0; d];
        for j in 0..d {
            basis[j] = 1.0;
            let col = self.apply(&basis);
            basis[j] = 0.0;
            for i in 0..m {
                a[(i, j)] = col[i];
            }
        }
        a
    }
}

/// A linear-Gaussian measurement model `y = A x + noise`.
#[derive(Clone, Debug)]
pub struct LinearForwardModel {
    pub op: Operator,
    /// Noise scale as given by the caller (see [`NoiseConvention`]).
    pub noise_sigma: f64,
    pub convention: NoiseConvention,
    /// Real-expanded measurement vector (zeros until data is attached).
    pub y: Vec<f64>,
}

impl LinearForwardModel {
    fn new(op: Operator, noise_sigma: f64, convention: NoiseConvention) -> Result<Self> {
        if !(noise_sigma > 0.0) {
            return Err(Error::config(format!(
                "forward model: noise_sigma must be positive, got {noise_sigma}"
            )));
        }
        let m = op.out_dim();
        Ok(LinearForwardModel {
            op,
            noise_sigma,
            convention,
            y: vec![0.0; m],
        })
    }

    /// Noise std of each real measurement component.
    pub fn component_sigma(&self) -> f64 {
        match (self.op.is_complex(), self.convention) {
            (true, NoiseConvention::Magnitude) => self.noise_sigma / std::f64::consts::SQRT_2,
            _ => self.noise_sigma,
        }
    }

    /// Attaches observed data (length must match the operator output).
    pub fn with_data(mut self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.op.out_dim() {
            return Err(Error::config(format!(
                "forward model: data length {} does not match operator output {}",
                y.len(),
                self.op.out_dim()
            )));
        }
        self.y = y;
        Ok(self)
    }

    pub fn with_convention(mut self, convention: NoiseConvention) -> Self {
        self.convention = convention;
        self
    }
}

/// Identity operator with i.i.d. noise (image denoising). The paper-typical
/// noise level is 0.2 of the dynamic range.
pub fn denoise_model(dim: usize, sigma: f64) -> Result<LinearForwardModel> {
    LinearForwardModel::new(Operator::Identity { dim }, sigma, NoiseConvention::PerComponent)
}

/// Enumerates one canonical representative per Hermitian pair, ordered by
/// squared radius with row-major grid index breaking ties.
fn hermitian_representatives(side: usize) -> Vec<Freq> {
    let s = side as i64;
    let wrap = |v: usize| {
        let v = v as i64;
        if v <= s / 2 {
            v
        } else {
            v - s
        }
    };
    let mut reps = Vec::new();
    for r in 0..side {
        for c in 0..side {
            let f = Freq {
                ky: wrap(r),
                kx: wrap(c),
            };
            if f.canonical(side) == f {
                reps.push(f);
            }
        }
    }
    reps.sort_by_key(|f| (f.radius2(), f.grid_index(side)));
    reps
}

/// Keeps the `ceil(fraction * side^2)` lowest-radial-frequency DFT
/// coefficients (one per Hermitian pair). With the default magnitude
/// convention, `sigma_complex` is the complex noise magnitude std.
pub fn lowfreq_dft_model(side: usize, fraction: f64, sigma_complex: f64) -> Result<LinearForwardModel> {
    if side < 2 {
        return Err(Error::config(format!("lowfreq model: side must be >= 2, got {side}")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "lowfreq model: fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let count = (fraction * (side * side) as f64).ceil() as usize;
    let reps = hermitian_representatives(side);
    if count == 0 {
        return Err(Error::config("lowfreq model: fraction selects zero coefficients"));
    }
    let count = count.min(reps.len());
    let freqs = reps[..count].to_vec();
    LinearForwardModel::new(Operator::Dft { side, freqs }, sigma_complex, NoiseConvention::Magnitude)
}

/// Measures an arbitrary caller-supplied frequency set (telescope-pair
/// style coverage). Frequencies are canonicalized to one per Hermitian
/// pair; duplicates after canonicalization are rejected.
pub fn sparsefreq_model(side: usize, freq_list: &[(i64, i64)], sigma_complex: f64) -> Result<LinearForwardModel> {
    if side < 2 {
        return Err(Error::config(format!("sparsefreq model: side must be >= 2, got {side}")));
    }
    if freq_list.is_empty() {
        return Err(Error::config("sparsefreq model: frequency list is empty"));
    }
    let s = side as i64;
    let half = s / 2;
    let mut freqs = Vec::with_capacity(freq_list.len());
    let mut seen = std::collections::HashSet::new();
    for &(ky, kx) in freq_list {
        if ky <= -(s - half) || ky > half || kx <= -(s - half) || kx > half {
            return Err(Error::config(format!(
                "sparsefreq model: frequency ({ky}, {kx}) outside (-{}, {half}]",
                s - half
            )));
        }
        let f = Freq { ky, kx }.canonical(side);
        if !seen.insert(f) {
            return Err(Error::config(format!(
                "sparsefreq model: duplicate frequency ({ky}, {kx}) after Hermitian canonicalization"
            )));
        }
        freqs.push(f);
    }
    LinearForwardModel::new(Operator::Dft { side, freqs }, sigma_complex, NoiseConvention::Magnitude)
}

/// Arbitrary dense real operator (testing and oracle plumbing).
pub fn dense_model(a: Array2<f64>, sigma: f64) -> Result<LinearForwardModel> {
    LinearForwardModel::new(Operator::Dense { a }, sigma, NoiseConvention::PerComponent)
}

/// Gaussian log-likelihood up to its additive constant:
/// `-||y - A x||^2 / (2 sigma_c^2)`, maximal (zero) when the model fits the
/// data exactly.
pub fn log_likelihood(model: &LinearForwardModel, x: &[f64]) -> f64 {
    let sigma_c = model.component_sigma();
    let ax = model.op.apply(x);
    let ss: f64 = model
        .y
        .iter()
        .zip(ax.iter())
        .map(|(yi, ai)| (yi - ai) * (yi - ai))
        .sum();
    -ss / (2.0 * sigma_c * sigma_c)
}

/// The constant dropped by [`log_likelihood`]:
/// `-(M/2) ln(2 pi sigma_c^2)`. Adding it back turns the likelihood into a
/// proper density, which evidence comparisons need.
pub fn log_likelihood_const(model: &LinearForwardModel) -> f64 {
    let sigma_c = model.component_sigma();
    let m = model.op.out_dim() as f64;
    -0.5 * m * (2.0 * std::f64::consts::PI * sigma_c * sigma_c).ln()
}

/// `A^T (y - A x) / sigma_c^2`.
pub fn grad_log_likelihood(model: &LinearForwardModel, x: &[f64]) -> Vec<f64> {
    let sigma_c = model.component_sigma();
    let ax = model.op.apply(x);
    let r: Vec<f64> = model.y.iter().zip(ax.iter()).map(|(yi, ai)| yi - ai).collect();
    let mut g = model.op.adjoint(&r);
    for gi in g.iter_mut() {
        *gi /= sigma_c * sigma_c;
    }
    g
}

/// `y = A x_true + noise`, deterministic per seed.
pub fn simulate_measurement(model: &LinearForwardModel, x_true: &[f64], seed: u64) -> Vec<f64> {
    let sigma_c = model.component_sigma();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    model
        .op
        .apply(x_true)
        .into_iter()
        .map(|v| v + sigma_c * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn identity_applies_exactly() {
        let m = denoise_model(3, 0.2).unwrap();
        assert_eq!(m.op.apply(&[1.0, -2.0, 0.5]), vec![1.0, -2.0, 0.5]);
        assert_eq!(m.component_sigma(), 0.2);
    }

    #[test]
    fn zero_sigma_rejected() {
        assert!(denoise_model(4, 0.0).is_err());
        assert!(lowfreq_dft_model(4, 0.25, -1.0).is_err());
    }

    #[test]
    fn residual_std_matches_sigma() {
        let dim = 10;
        let m = denoise_model(dim, 0.2).unwrap();
        let x = vec![0.7; dim];
        let mut resid = Vec::with_capacity(100_000);
        for seed in 0..10_000u64 {
            let y = simulate_measurement(&m, &x, seed);
            for (yi, xi) in y.iter().zip(x.iter()) {
                resid.push(yi - xi);
            }
        }
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let std = (resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.2).abs() / 0.2 < 0.01, "std {std}");
    }

    #[test]
    fn lowfreq_16x16_selects_16_coefficients() {
        let m = lowfreq_dft_model(16, 0.0625, 1.0).unwrap();
        match &m.op {
            Operator::Dft { freqs, .. } => assert_eq!(freqs.len(), 16),
            _ => unreachable!(),
        }
        assert_eq!(m.op.out_dim(), 32);
        // magnitude convention: per-component std is sigma/sqrt(2)
        assert_abs_diff_eq!(m.component_sigma(), 1.0 / 2.0f64.sqrt(), epsilon = 1e-15);
        assert_eq!(
            m.with_convention(NoiseConvention::PerComponent).component_sigma(),
            1.0
        );
    }

    #[test]
    fn constant_image_hits_only_dc() {
        let side = 8;
        let m = lowfreq_dft_model(side, 0.1, 1.0).unwrap();
        let c = 0.37;
        let x = vec![c; side * side];
        let y = m.op.apply(&x);
        // DC is the lowest radius, so it is the first pair
        assert_abs_diff_eq!(y[0], c * (side * side) as f64, epsilon = 1e-9);
        for v in &y[1..] {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn adjoint_identity_all_operators() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dense = Array2::from_shape_fn((5, 9), |_| rng.random_range(-1.0..1.0));
        let ops = vec![
            Operator::Identity { dim: 9 },
            lowfreq_dft_model(3, 0.5, 1.0).unwrap().op,
            sparsefreq_model(3, &[(0, 0), (1, 1)], 1.0).unwrap().op,
            Operator::Dense { a: dense },
        ];
        for op in ops {
            for _ in 0..5 {
                let x: Vec<f64> = (0..op.in_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..op.out_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let ax = op.apply(&x);
                let aty = op.adjoint(&y);
                let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn lowfreq_mask_is_radially_monotone() {
        let side = 16;
        let m = lowfreq_dft_model(side, 0.0625, 1.0).unwrap();
        let selected = match &m.op {
            Operator::Dft { freqs, .. } => freqs.clone(),
            _ => unreachable!(),
        };
        let all = hermitian_representatives(side);
        let max_sel = selected.iter().map(|f| f.radius2()).max().unwrap();
        let excluded_min = all
            .iter()
            .filter(|f| !selected.contains(f))
            .map(|f| f.radius2())
            .min()
            .unwrap();
        assert!(max_sel <= excluded_min);
    }

    #[test]
    fn full_frequency_set_round_trips() {
        let side = 4;
        let all: Vec<(i64, i64)> = hermitian_representatives(side)
            .iter()
            .map(|f| (f.ky, f.kx))
            .collect();
        let m = sparsefreq_model(side, &all, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = m.op.apply(&x);
        // overdetermined but consistent: solve the normal equations
        let a = m.op.dense_matrix();
        let mut ata = Array2::zeros((x.len(), x.len()));
        for i in 0..x.len() {
            for j in 0..x.len() {
                ata[(i, j)] = a.column(i).iter().zip(a.column(j).iter()).map(|(p, q)| p * q).sum();
            }
        }
        let aty = m.op.adjoint(&y);
        let chol = crate::linalg::cholesky(&ata).unwrap();
        let rec = crate::linalg::cho_solve(&chol, &aty);
        for (r, t) in rec.iter().zip(x.iter()) {
            assert_abs_diff_eq!(r, t, epsilon = 1e-8);
        }
    }

    #[test]
    fn duplicate_frequencies_rejected() {
        assert!(sparsefreq_model(4, &[(1, 1), (1, 1)], 1.0).is_err());
        // Hermitian duplicate: (1, 0) and (-1, 0) are the same measurement
        assert!(sparsefreq_model(4, &[(1, 0), (-1, 0)], 1.0).is_err());
        assert!(sparsefreq_model(4, &[(5, 0)], 1.0).is_err());
        assert!(sparsefreq_model(4, &[], 1.0).is_err());
    }

    #[test]
    fn loglik_zero_at_exact_fit_and_quadratic_in_sigma() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = denoise_model(16, 0.3).unwrap();
        let y = m.op.apply(&x);
        let m = m.with_data(y).unwrap();
        assert_abs_diff_eq!(log_likelihood(&m, &x), 0.0, epsilon = 1e-12);
        // off the optimum, doubling sigma divides the value by 4
        let x2: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        let l1 = log_likelihood(&m, &x2);
        let mut m2 = m.clone();
        m2.noise_sigma = 0.6;
        let l2 = log_likelihood(&m2, &x2);
        assert_abs_diff_eq!(l1 / l2, 4.0, epsilon = 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let side = 4;
        let d = side * side;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for m in [
            denoise_model(d, 0.25).unwrap(),
            lowfreq_dft_model(side, 0.3, 0.8).unwrap(),
        ] {
            let x_true: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
            let y = simulate_measurement(&m, &x_true, 42);
            let m = m.with_data(y).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
            let g = grad_log_likelihood(&m, &x);
            let h = 1e-6;
            for i in 0..d {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (log_likelihood(&m, &xp) - log_likelihood(&m, &xm)) / (2.0 * h);
                assert_abs_diff_eq!(g[i], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn loglik_const_is_gaussian_normalizer() {
        let m = denoise_model(3, 0.5).unwrap();
        let want = -1.5 * (2.0 * std::f64::consts::PI * 0.25).ln();
        assert_abs_diff_eq!(log_likelihood_const(&m), want, epsilon = 1e-12);
    }

    #[test]
    fn simulate_is_deterministic_and_centered() {
        let m = denoise_model(6, 1e-8).unwrap();
        let x = vec![0.5; 6];
        let y1 = simulate_measurement(&m, &x, 9);
        let y2 = simulate_measurement(&m, &x, 9);
        let y3 = simulate_measurement(&m, &x, 10);
        assert_eq!(y1, y2);
        assert_ne!(y1, y3);
        for (yi, xi) in y1.iter().zip(x.iter()) {
            assert!((yi - xi).abs() < 6.0 * 1e-8);
        }
    }

    #[test]
    fn noise_covariance_is_isotropic() {
        let dim = 4;
        let sigma = 0.3;
        let m = denoise_model(dim, sigma).unwrap();
        let x = vec![0.0; dim];
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|s| simulate_measurement(&m, &x, s as u64)).collect();
        let mut cov = Array2::<f64>::zeros((dim, dim));
        for d in &draws {
            for i in 0..dim {
                for j in 0..dim {
                    cov[(i, j)] += d[i] * d[j] / n as f64;
                }
            }
        }
        let target = Array2::<f64>::eye(dim) * sigma * sigma;
        let diff = (&cov - &target).iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 0.05, "relative Frobenius error {}", diff / norm);
    }

    #[test]
    fn dense_matrix_matches_apply() {
        let m = lowfreq_dft_model(4, 0.2, 1.0).unwrap();
        let a = m.op.dense_matrix();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let direct = m.op.apply(&x);
        for (i, row) in a.rows().into_iter().enumerate() {
            let v: f64 = row.iter().zip(x.iter()).map(|(w, xi)| w * xi).sum();
            assert_abs_diff_eq!(v, direct[i], epsilon = 1e-12);
        }
    }
}
