//! Variance-exploding diffusion schedule and the probability-flow vector
//! field.
//!
//! The forward SDE is `dx = g(t) dw` (zero drift) with the geometric noise
//! schedule `sigma(t) = sigma_min * (sigma_max/sigma_min)^t`, so the
//! perturbation kernel at time `t` is `N(x0, (sigma(t)^2 - sigma(0)^2) I)`
//! and the marginal at `t = T` is approximately `N(0, sigma_max^2 I)`.
//! The probability flow ODE shares those marginals and has drift
//!
//! ```text
//!   f~(x,t) = f(x,t) - 1/2 g(t)^2 s(x,t) = -1/2 g(t)^2 s(x,t)
//! ```
//!
//! which is what the density engine integrates.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::score::ScoreField;

/// Slack for floating-point drift when adaptive steps land on an endpoint.
const T_SLACK: f64 = 1e-9;

/// Parameters of the variance-exploding diffusion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionSpec {
    /// Noise scale at `t = 0`.
    pub sigma_min: f64,
    /// Noise scale at `t = T`; chosen per dataset (see [`sigma_max_heuristic`]).
    pub sigma_max: f64,
    /// Final diffusion time, fixed to 1.0 by convention.
    pub t_horizon: f64,
    /// Lower integration limit; densities are evaluated at `t_eps`, not 0,
    /// for numerical stability.
    pub t_eps: f64,
}

impl DiffusionSpec {
    /// Standard spec with the given `sigma_max` and the conventional
    /// defaults `sigma_min = 0.01`, `T = 1`, `t_eps = 1e-3`.
    pub fn new(sigma_max: f64) -> Result<Self> {
        let spec = DiffusionSpec {
            sigma_min: 0.01,
            sigma_max,
            t_horizon: 1.0,
            t_eps: 1e-3,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return Err(Error::config(format!(
                "diffusion: need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.t_eps > 0.0 && self.t_eps < self.t_horizon) {
            return Err(Error::config(format!(
                "diffusion: need 0 < t_eps < t_horizon, got {} and {}",
                self.t_eps, self.t_horizon
            )));
        }
        Ok(())
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if t < -T_SLACK || t > self.t_horizon + T_SLACK {
            return Err(Error::config(format!(
                "diffusion: t = {t} outside [0, {}]",
                self.t_horizon
            )));
        }
        Ok(())
    }

    /// Noise scale `sigma(t) = sigma_min * (sigma_max/sigma_min)^t`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.sigma_min * (self.sigma_max / self.sigma_min).powf(t))
    }

    /// Drift and diffusion coefficient `(f(x,t), g(t))`. The VE drift is
    /// identically zero; `g(t) = sigma(t) * sqrt(2 ln(sigma_max/sigma_min))`
    /// so that `d sigma(t)^2 / dt = g(t)^2`.
    pub fn drift_diffusion(&self, dim: usize, t: f64) -> Result<(Vec<f64>, f64)> {
        Ok((vec![0.0; dim], self.g(t)?))
    }

    /// Diffusion coefficient `g(t)` alone.
    pub fn g(&self, t: f64) -> Result<f64> {
        let s = self.sigma(t)?;
        Ok(s * (2.0 * (self.sigma_max / self.sigma_min).ln()).sqrt())
    }

    /// Perturbation-kernel variance `sigma(t)^2 - sigma(0)^2` (per
    /// coordinate). Zero at `t = 0` by construction.
    pub fn perturbation_var(&self, t: f64) -> Result<f64> {
        let s = self.sigma(t)?;
        Ok(s * s - self.sigma_min * self.sigma_min)
    }

    /// Perturbation kernel `p(x_t | x_0) = N(x0, var I)`: returns the mean
    /// (a copy of `x0`) and the per-coordinate variance.
    pub fn perturbation_kernel(&self, x0: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        Ok((x0.to_vec(), self.perturbation_var(t)?))
    }

    /// Log-density of the terminal reference `N(0, sigma_max^2 I)`.
    pub fn terminal_logpdf(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let var = self.sigma_max * self.sigma_max;
        let quad: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * quad / var
    }

    /// Draws from the terminal reference `N(0, sigma_max^2 I)`.
    pub fn sample_terminal<R: rand::Rng>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        (0..dim)
            .map(|_| self.sigma_max * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect()
    }
}

/// Maximum pairwise Euclidean distance between dataset rows — the
/// conventional basis for choosing `sigma_max`.
pub fn max_pairwise_distance(samples: &Array2<f64>) -> f64 {
    let n = samples.nrows();
    let mut best = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = samples
                .row(i)
                .iter()
                .zip(samples.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.max(d2);
        }
    }
    best.sqrt()
}

/// Default `sigma_max`: max pairwise distance in the training set, rounded
/// up to the next integer (and at least 1).
pub fn sigma_max_heuristic(samples: &Array2<f64>) -> f64 {
    max_pairwise_distance(samples).ceil().max(1.0)
}

/// The probability-flow drift `f~(x,t) = -1/2 g(t)^2 s(x,t)` for a given
/// score field.
#[derive(Clone, Copy)]
pub struct PfField<'a> {
    pub spec: DiffusionSpec,
    pub score: &'a ScoreField,
}

impl<'a> PfField<'a> {
    pub fn new(score: &'a ScoreField) -> Self {
        PfField {
            spec: *score.diffusion(),
            score,
        }
    }

    pub fn dim(&self) -> usize {
        self.score.dim()
    }

    /// `-1/2 g(t)^2`, the scalar multiplying the score (and all of its
    /// derivatives) in the flow drift.
    pub fn score_coeff(&self, t: f64) -> Result<f64> {
        let g = self.spec.g(t)?;
        Ok(-0.5 * g * g)
    }

    /// Evaluates `f~(x, t)` into `out`.
    pub fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let c = self.score_coeff(t)?;
        self.score.eval(x, t, out)?;
        for (o, xi) in out.iter_mut().zip(x.iter()) {
            *o *= c;
            if !o.is_finite() || !xi.is_finite() {
                return Err(Error::NonFinite {
                    context: "probability-flow field",
                    t,
                });
            }
        }
        Ok(())
    }
}

/// Free-function form of the flow drift (allocating variant of
/// [`PfField::eval`]).
pub fn pf_vector_field(field: &PfField, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    field.eval(x, t, &mut out)?;
    Ok(out)
}
