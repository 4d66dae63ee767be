//! Closed-form Gaussian ground truth: moment fitting, diffused
//! scores/log-densities, conjugate linear-Gaussian posteriors, Gaussian KL,
//! and synthetic smooth-image priors used by the validation suites.
//!
//! Everything here is exact (up to linear algebra roundoff), which is what
//! makes it usable as an oracle for the ODE-based density engine: the
//! diffused density of `N(mu, Sigma)` under the VE kernel is
//! `N(mu, Sigma + (sigma(t)^2 - sigma(0)^2) I)`, so scores and log-densities
//! at any diffusion time have closed forms through the eigendecomposition
//! of `Sigma`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::inverse::LinearForwardModel;
use crate::{io, linalg};

pub const PRIOR_MAGIC: &[u8; 5] = b"SPGP1";

/// Default diagonal preconditioning for moment fits (paper convention).
pub const DEFAULT_PRECOND: f64 = 0.01;

/// A multivariate Gaussian with cached Cholesky and eigendecomposition.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mu: Vec<f64>,
    sigma: Array2<f64>,
    chol: Array2<f64>,
    eigvals: Array1<f64>,
    eigvecs: Array2<f64>,
    logdet: f64,
}

impl GaussianPrior {
    /// Builds the prior from explicit moments; fails unless `sigma` is
    /// symmetric positive definite.
    pub fn from_moments(mu: Vec<f64>, sigma: Array2<f64>) -> Result<GaussianPrior> {
        if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
            return Err(Error::config(format!(
                "gaussian prior: mean dim {} vs covariance {}x{}",
                mu.len(),
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let chol = linalg::cholesky(&sigma)?;
        let (eigvals, eigvecs) = linalg::sym_eigen(&sigma)?;
        let logdet = linalg::logdet_from_cholesky(&chol);
        Ok(GaussianPrior {
            mu,
            sigma,
            chol,
            eigvals,
            eigvecs,
            logdet,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    /// Eigenvalues of the covariance, ascending.
    pub fn eigvals(&self) -> &Array1<f64> {
        &self.eigvals
    }

    /// Orthonormal eigenvectors (columns, matching [`Self::eigvals`]).
    pub fn eigvecs(&self) -> &Array2<f64> {
        &self.eigvecs
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let w = self.whiten(x);
        let quad: f64 = w.iter().map(|v| v * v).sum();
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.logdet + quad)
    }

    /// `-Sigma^{-1} (x - mu)`.
    pub fn grad_logpdf(&self, x: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = x.iter().zip(self.mu.iter()).map(|(a, b)| a - b).collect();
        let mut g = linalg::cho_solve(&self.chol, &r);
        for v in g.iter_mut() {
            *v = -*v;
        }
        g
    }

    /// `L^{-1}(x - mu)` (forward substitution only).
    fn whiten(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut acc = x[i] - self.mu[i];
            for j in 0..i {
                acc -= self.chol[(i, j)] * w[j];
            }
            w[i] = acc / self.chol[(i, i)];
        }
        w
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.dim();
        let z: Vec<f64> = (0..n)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let mut x = self.mu.clone();
        for i in 0..n {
            for j in 0..=i {
                x[i] += self.chol[(i, j)] * z[j];
            }
        }
        x
    }

    /// `n` rows, one ChaCha stream per row so subsets are reproducible.
    pub fn sample_n(&self, n: usize, seed: u64) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let x = self.sample(&mut rng);
            for j in 0..d {
                out[(i, j)] = x[j];
            }
        }
        out
    }

    /// Differential entropy `0.5 ln det(2 pi e Sigma)`.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        0.5 * (d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + self.logdet)
    }

    /// Perturbation variance added by the schedule at time `t`.
    fn bar_var(&self, spec: &DiffusionSpec, t: f64) -> Result<f64> {
        spec.perturbation_var(t)
    }

    /// Score of the diffused density: `-(Sigma + var(t) I)^{-1} (x - mu)`.
    pub fn diffused_score(&self, spec: &DiffusionSpec, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let v = self.bar_var(spec, t)?;
        let n = self.dim();
        // project onto eigenbasis, scale by -1/(lambda + v), project back
        let mut y = vec![0.0; n];
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.eigvecs[(i, j)] * (x[i] - self.mu[i]);
            }
            y[j] = -acc / (self.eigvals[j] + v);
        }
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.eigvecs[(i, j)] * y[j];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Log-density of `N(mu, Sigma + var(t) I)` at `x`.
    pub fn diffused_logpdf(&self, spec: &DiffusionSpec, x: &[f64], t: f64) -> Result<f64> {
        let v = self.bar_var(spec, t)?;
        let n = self.dim();
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.eigvecs[(i, j)] * (x[i] - self.mu[i]);
            }
            let lam = self.eigvals[j] + v;
            quad += acc * acc / lam;
            logdet += lam.ln();
        }
        Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
    }

    /// Writes the `SPGP1` checkpoint: dim, mean, packed lower-triangular
    /// covariance.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        io::write_magic(&mut f, PRIOR_MAGIC)?;
        io::write_u64(&mut f, self.dim() as u64)?;
        io::write_f64_slice(&mut f, &self.mu)?;
        let n = self.dim();
        let mut packed = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                packed.push(self.sigma[(i, j)]);
            }
        }
        io::write_f64_slice(&mut f, &packed)?;
        use std::io::Write;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GaussianPrior> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        io::expect_magic(&mut f, PRIOR_MAGIC, "gaussian prior")?;
        let n = io::read_u64(&mut f)? as usize;
        let mu = io::read_f64_vec(&mut f, n)?;
        let packed = io::read_f64_vec(&mut f, n * (n + 1) / 2)?;
        let mut sigma = Array2::zeros((n, n));
        let mut k = 0;
        for i in 0..n {
            for j in 0..=i {
                sigma[(i, j)] = packed[k];
                sigma[(j, i)] = packed[k];
                k += 1;
            }
        }
        GaussianPrior::from_moments(mu, sigma)
    }
}

/// Sample mean and (maximum-likelihood) covariance with `precond` added to
/// the diagonal. A single-component EM fit reduces to exactly this.
pub fn fit_gaussian(samples: &Array2<f64>, precond: f64) -> Result<GaussianPrior> {
    let (n, d) = (samples.nrows(), samples.ncols());
    if n < d + 1 {
        return Err(Error::config(format!(
            "fit_gaussian: need at least dim+1 = {} samples, got {n}",
            d + 1
        )));
    }
    let mut mu = vec![0.0; d];
    for row in samples.rows() {
        for (m, v) in mu.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut sigma = Array2::zeros((d, d));
    for row in samples.rows() {
        for i in 0..d {
            let ri = row[i] - mu[i];
            for j in 0..=i {
                sigma[(i, j)] += ri * (row[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            sigma[(i, j)] /= n as f64;
            sigma[(j, i)] = sigma[(i, j)];
        }
        sigma[(i, i)] += precond;
    }
    GaussianPrior::from_moments(mu, sigma)
}

/// Closed-form `KL(p || q)` between Gaussians of equal dimension.
pub fn gaussian_kl(p: &GaussianPrior, q: &GaussianPrior) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d {
        return Err(Error::config(format!(
            "gaussian_kl: dimension mismatch {d} vs {}",
            q.dim()
        )));
    }
    // tr(Sigma_q^{-1} Sigma_p)
    let mut trace = 0.0;
    let mut col = vec![0.0; d];
    for j in 0..d {
        for i in 0..d {
            col[i] = p.sigma[(i, j)];
        }
        let x = linalg::cho_solve(&q.chol, &col);
        trace += x[j];
    }
    let dm: Vec<f64> = q.mu.iter().zip(p.mu.iter()).map(|(a, b)| a - b).collect();
    let w = linalg::cho_solve(&q.chol, &dm);
    let quad: f64 = dm.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
    Ok(0.5 * (trace + quad - d as f64 + q.logdet - p.logdet))
}

/// Conjugate posterior for a linear-Gaussian measurement:
/// `Sigma_post = (Sigma^{-1} + A^T A / sigma_c^2)^{-1}`,
/// `mu_post = Sigma_post (Sigma^{-1} mu + A^T y / sigma_c^2)`,
/// with complex operators expanded to real rows.
pub fn linear_gaussian_posterior(
    prior: &GaussianPrior,
    model: &LinearForwardModel,
) -> Result<GaussianPrior> {
    let d = prior.dim();
    if model.op.in_dim() != d {
        return Err(Error::config(format!(
            "posterior: operator input dim {} vs prior dim {d}",
            model.op.in_dim()
        )));
    }
    let sigma_c = model.component_sigma();
    let a = model.op.dense_matrix();
    // precision = Sigma^{-1} + A^T A / sigma_c^2
    let mut precision = Array2::zeros((d, d));
    let mut col = vec![0.0; d];
    for j in 0..d {
        col.fill(0.0);
        col[j] = 1.0;
        let sj = linalg::cho_solve(&prior.chol, &col);
        for i in 0..d {
            precision[(i, j)] = sj[i];
        }
    }
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for r in 0..a.nrows() {
                acc += a[(r, i)] * a[(r, j)];
            }
            precision[(i, j)] += acc / (sigma_c * sigma_c);
        }
    }
    // symmetrize against roundoff before factorizing
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (precision[(i, j)] + precision[(j, i)]);
            precision[(i, j)] = v;
            precision[(j, i)] = v;
        }
    }
    let lam_chol = linalg::cholesky(&precision)
        .map_err(|_| Error::config("posterior: singular precision matrix"))?;
    // rhs = Sigma^{-1} mu + A^T y / sigma_c^2
    let mut rhs = linalg::cho_solve(&prior.chol, &prior.mu);
    let aty = model.op.adjoint(&model.y);
    for (r, v) in rhs.iter_mut().zip(aty.iter()) {
        *r += v / (sigma_c * sigma_c);
    }
    let mu_post = linalg::cho_solve(&lam_chol, &rhs);
    // Sigma_post = precision^{-1}, column by column
    let mut sigma_post = Array2::zeros((d, d));
    for j in 0..d {
        col.fill(0.0);
        col[j] = 1.0;
        let sj = linalg::cho_solve(&lam_chol, &col);
        for i in 0..d {
            sigma_post[(i, j)] = sj[i];
        }
    }
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (sigma_post[(i, j)] + sigma_post[(j, i)]);
            sigma_post[(i, j)] = v;
            sigma_post[(j, i)] = v;
        }
    }
    GaussianPrior::from_moments(mu_post, sigma_post)
}

/// RBF-kernel prior over a `side x side` pixel grid:
/// `K[(i,j),(k,l)] = amplitude^2 exp(-d^2 / (2 lengthscale^2)) + jitter I`,
/// constant mean. Stands in for a natural-image covariance at desk scale.
pub fn smooth_image_prior(
    side: usize,
    mean: f64,
    amplitude: f64,
    lengthscale: f64,
    jitter: f64,
) -> Result<GaussianPrior> {
    if side == 0 || amplitude <= 0.0 || lengthscale <= 0.0 || jitter < 0.0 {
        return Err(Error::config("smooth_image_prior: bad parameters"));
    }
    let d = side * side;
    let mut k = Array2::zeros((d, d));
    for p in 0..d {
        let (pr, pc) = (p / side, p % side);
        for q in 0..=p {
            let (qr, qc) = (q / side, q % side);
            let dist2 = ((pr as f64 - qr as f64).powi(2) + (pc as f64 - qc as f64).powi(2))
                / (2.0 * lengthscale * lengthscale);
            let v = amplitude * amplitude * (-dist2).exp();
            k[(p, q)] = v;
            k[(q, p)] = v;
        }
        k[(p, p)] += jitter;
    }
    GaussianPrior::from_moments(vec![mean; d], k)
}
