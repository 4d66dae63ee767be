//! Score fields `s(x, t) ~ grad_x log p_t(x)` over the VE diffusion.
//!
//! Two backends share one interface: a closed-form field derived from a
//! Gaussian prior (used for validation, where every downstream quantity has
//! an oracle), and an MLP trained by denoising score matching. Besides plain
//! evaluation, both expose the first- and second-order directional
//! derivatives the density and posterior machinery needs: JVPs for
//! divergence estimates, VJPs for adjoint/guidance terms, and
//! Hessian-vector products for gradients of divergence estimates.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{Dual, Gradients, Mlp, OptimizerConfig, Scalar};
use crate::oracle::GaussianPrior;

pub const SCORE_MAGIC: &[u8; 5] = b"SPSF1";

/// Architecture of a trained score network. The input is the state vector
/// concatenated with `2 * freqs` sinusoidal features of the normalized
/// log-noise level; the output has the state dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub freqs: usize,
}

impl Default for MlpSpec {
    fn default() -> MlpSpec {
        MlpSpec {
            hidden: vec![128, 128],
            freqs: 4,
        }
    }
}

impl MlpSpec {
    fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("score mlp: hidden widths must be nonzero"));
        }
        if self.freqs == 0 {
            return Err(Error::config("score mlp: need at least one feature frequency"));
        }
        Ok(())
    }

    fn layer_dims(&self, dim: usize) -> Vec<usize> {
        let mut dims = vec![dim + 2 * self.freqs];
        dims.extend_from_slice(&self.hidden);
        dims.push(dim);
        dims
    }
}

/// Trained score network plus everything needed to evaluate it.
#[derive(Clone, Debug)]
pub struct MlpScore {
    pub(crate) spec: MlpSpec,
    pub(crate) diffusion: DiffusionSpec,
    pub(crate) dim: usize,
    pub(crate) net: Mlp,
}

/// Sinusoidal embedding of the noise level: with
/// `u = (ln sigma(t) - ln sigma_min) / (ln sigma_max - ln sigma_min)`,
/// the features are `sin(2^i pi u), cos(2^i pi u)` for `i < freqs`.
fn time_features(spec: &DiffusionSpec, t: f64, freqs: usize) -> Result<Vec<f64>> {
    let u = (spec.sigma(t)?.ln() - spec.sigma_min.ln())
        / (spec.sigma_max.ln() - spec.sigma_min.ln());
    let mut out = Vec::with_capacity(2 * freqs);
    for i in 0..freqs {
        let w = (1u64 << i) as f64 * std::f64::consts::PI * u;
        out.push(w.sin());
        out.push(w.cos());
    }
    Ok(out)
}

fn assemble_input<S: Scalar>(x: &[S], feats: &[f64]) -> Vec<S> {
    let mut input = Vec::with_capacity(x.len() + feats.len());
    input.extend_from_slice(x);
    input.extend(feats.iter().map(|&f| S::from_f64(f)));
    input
}

impl MlpScore {
    pub(crate) fn init(
        spec: MlpSpec,
        diffusion: DiffusionSpec,
        dim: usize,
        seed: u64,
    ) -> Result<MlpScore> {
        spec.validate()?;
        if dim == 0 {
            return Err(Error::config("score mlp: dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::init(&spec.layer_dims(dim), true, &mut rng);
        Ok(MlpScore {
            spec,
            diffusion,
            dim,
            net,
        })
    }

    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let feats = time_features(&self.diffusion, t, self.spec.freqs)?;
        let y = self.net.forward(&assemble_input(x, &feats));
        for (o, v) in out.iter_mut().zip(y.iter()) {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "score network output",
                    t,
                });
            }
            *o = *v;
        }
        Ok(())
    }
}

/// A score field: the gradient of the log of the diffused density, with
/// exact directional derivatives.
#[derive(Clone, Debug)]
pub enum ScoreField {
    /// Closed form for `N(mu, Sigma)` diffused by the VE kernel.
    AnalyticGaussian {
        prior: GaussianPrior,
        spec: DiffusionSpec,
    },
    /// Denoising-score-matching-trained network.
    Mlp(MlpScore),
}

impl ScoreField {
    pub fn analytic_gaussian(prior: GaussianPrior, spec: DiffusionSpec) -> Result<ScoreField> {
        if prior.dim() == 0 {
            return Err(Error::config("score field: empty prior"));
        }
        Ok(ScoreField::AnalyticGaussian { prior, spec })
    }

    pub fn dim(&self) -> usize {
        match self {
            ScoreField::AnalyticGaussian { prior, .. } => prior.dim(),
            ScoreField::Mlp(m) => m.dim,
        }
    }

    pub fn diffusion(&self) -> &DiffusionSpec {
        match self {
            ScoreField::AnalyticGaussian { spec, .. } => spec,
            ScoreField::Mlp(m) => &m.diffusion,
        }
    }

    /// Evaluates the score into `out` (length `dim`).
    pub fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        assert_eq!(x.len(), self.dim());
        assert_eq!(out.len(), self.dim());
        match self {
            ScoreField::AnalyticGaussian { prior, spec } => {
                let s = prior.diffused_score(spec, x, t)?;
                out.copy_from_slice(&s);
                Ok(())
            }
            ScoreField::Mlp(m) => m.eval(x, t, out),
        }
    }

    /// Convenience allocating wrapper around [`Self::eval`].
    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval(x, t, &mut out)?;
        Ok(out)
    }

    /// `(d s / d x) v`: directional derivative of the score along `v`.
    pub fn jvp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            ScoreField::AnalyticGaussian { prior, spec } => {
                // the Jacobian is the constant matrix -(Sigma + var I)^{-1}
                let var = spec.perturbation_var(t)?;
                Ok(neg_inv_cov_apply(prior, var, v))
            }
            ScoreField::Mlp(m) => {
                let feats = time_features(&m.diffusion, t, m.spec.freqs)?;
                let mut input = Vec::with_capacity(x.len() + feats.len());
                for (xi, vi) in x.iter().zip(v.iter()) {
                    input.push(Dual::with_tangent(*xi, *vi));
                }
                input.extend(feats.iter().map(|&f| Dual::constant(f)));
                Ok(m.net.forward(&input).iter().map(|d| d.d).collect())
            }
        }
    }

    /// `(d s / d x)^T w`: adjoint product with the score Jacobian. For the
    /// analytic field the Jacobian is symmetric, so this equals the JVP.
    pub fn vjp(&self, x: &[f64], t: f64, w: &[f64]) -> Result<Vec<f64>> {
        match self {
            ScoreField::AnalyticGaussian { .. } => self.jvp(x, t, w),
            ScoreField::Mlp(m) => {
                let feats = time_features(&m.diffusion, t, m.spec.freqs)?;
                let input = assemble_input(x, &feats);
                let g = m.net.vjp(&input, w);
                Ok(g[..m.dim].to_vec())
            }
        }
    }

    /// Gradient of the quadratic form `w^T (d s / d x) v` with respect to
    /// `x` — the second-order term the adjoint needs to differentiate
    /// divergence estimates. Zero for the analytic field (its score is
    /// linear in `x`).
    pub fn quadform_grad(&self, x: &[f64], t: f64, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        match self {
            ScoreField::AnalyticGaussian { .. } => Ok(vec![0.0; self.dim()]),
            ScoreField::Mlp(m) => {
                let feats = time_features(&m.diffusion, t, m.spec.freqs)?;
                let input = assemble_input(x, &feats);
                let mut tangent = vec![0.0; input.len()];
                tangent[..m.dim].copy_from_slice(v);
                let g = m.net.hvp(&input, w, &tangent);
                Ok(g[..m.dim].to_vec())
            }
        }
    }

    /// Closed-form divergence `tr(d s / d x)` when the field has one;
    /// `None` means the caller must estimate it from JVPs.
    pub fn exact_div(&self, _x: &[f64], t: f64) -> Result<Option<f64>> {
        match self {
            ScoreField::AnalyticGaussian { prior, spec } => {
                let var = spec.perturbation_var(t)?;
                Ok(Some(
                    -prior.eigvals().iter().map(|l| 1.0 / (l + var)).sum::<f64>(),
                ))
            }
            ScoreField::Mlp(_) => Ok(None),
        }
    }

    /// Writes the trained-network checkpoint. Analytic fields are rebuilt
    /// from their prior instead of serialized.
    pub fn save(&self, path: &Path) -> Result<()> {
        let m = match self {
            ScoreField::Mlp(m) => m,
            ScoreField::AnalyticGaussian { .. } => {
                return Err(Error::config(
                    "analytic score fields are reconstructed from the prior; save that instead",
                ))
            }
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        io::write_magic(&mut f, SCORE_MAGIC)?;
        io::write_u64(&mut f, m.dim as u64)?;
        io::write_u64(&mut f, m.spec.freqs as u64)?;
        io::write_u64(&mut f, m.spec.hidden.len() as u64)?;
        for &h in &m.spec.hidden {
            io::write_u64(&mut f, h as u64)?;
        }
        let d = &m.diffusion;
        io::write_f64_slice(&mut f, &[d.sigma_min, d.sigma_max, d.t_horizon, d.t_eps])?;
        let params = m.net.flat_params();
        io::write_u64(&mut f, params.len() as u64)?;
        io::write_f64_slice(&mut f, &params)?;
        use std::io::Write;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ScoreField> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        io::expect_magic(&mut f, SCORE_MAGIC, "score network")?;
        let dim = io::read_u64(&mut f)? as usize;
        let freqs = io::read_u64(&mut f)? as usize;
        let n_hidden = io::read_u64(&mut f)? as usize;
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden.push(io::read_u64(&mut f)? as usize);
        }
        let sched = io::read_f64_vec(&mut f, 4)?;
        let diffusion = DiffusionSpec {
            sigma_min: sched[0],
            sigma_max: sched[1],
            t_horizon: sched[2],
            t_eps: sched[3],
        };
        diffusion.validate()?;
        let spec = MlpSpec { hidden, freqs };
        let mut m = MlpScore::init(spec, diffusion, dim, 0)?;
        let n_params = io::read_u64(&mut f)? as usize;
        if n_params != m.net.num_params() {
            return Err(Error::Format(format!(
                "score network: checkpoint has {n_params} params, architecture wants {}",
                m.net.num_params()
            )));
        }
        let params = io::read_f64_vec(&mut f, n_params)?;
        m.net.set_flat_params(&params);
        Ok(ScoreField::Mlp(m))
    }
}

/// `-(Sigma + var I)^{-1} v` through the cached eigendecomposition.
fn neg_inv_cov_apply(prior: &GaussianPrior, var: f64, v: &[f64]) -> Vec<f64> {
    let n = prior.dim();
    let (vals, vecs) = (prior.eigvals(), prior.eigvecs());
    let mut y = vec![0.0; n];
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += vecs[(i, j)] * v[i];
        }
        y[j] = -acc / (vals[j] + var);
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += vecs[(i, j)] * y[j];
        }
        out[i] = acc;
    }
    out
}

/// A trained field together with its per-step training loss.
pub struct TrainedScore {
    pub field: ScoreField,
    pub loss_trace: Vec<f64>,
}

/// Denoising score matching on `data` (rows are samples): each step draws a
/// batch of `(row, t, noise)` triples, perturbs `x0` with the VE kernel at
/// `t ~ U[t_eps, T]`, and regresses the network onto `-eps / sigma_bar`
/// with weight `sigma(t)^2`:
///
/// ```text
/// loss = sigma(t)^2 * || s(x0 + sigma_bar * eps, t) + eps / sigma_bar ||^2
/// ```
///
/// Every random draw comes from a per-sample ChaCha stream indexed by
/// `step * batch_size + i` and the batch is reduced sequentially, so a given
/// `(data, config, seed)` always produces bit-identical parameters.
pub fn train_dsm(
    spec: &MlpSpec,
    data: &Array2<f64>,
    diffusion: DiffusionSpec,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainedScore> {
    opt.validate()?;
    let (n, dim) = (data.nrows(), data.ncols());
    if n == 0 || dim == 0 {
        return Err(Error::config("train_dsm: empty dataset"));
    }
    let mut m = MlpScore::init(spec.clone(), diffusion, dim, seed)?;
    let mut adam = crate::nn::Adam::from_config(opt, m.net.num_params());
    let mut params = m.net.flat_params();
    let mut loss_trace = Vec::with_capacity(opt.n_steps);
    let (t_lo, t_hi) = (diffusion.t_eps, diffusion.t_horizon);
    let var0 = diffusion.sigma(0.0)?.powi(2);

    let mut x = vec![0.0; dim];
    for step in 0..opt.n_steps {
        let mut grad = Gradients::zeros_like(&m.net);
        let mut loss_acc = 0.0;
        for i in 0..opt.batch_size {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((step * opt.batch_size + i) as u64);
            let row = rng.random_range(0..n);
            let t = rng.random_range(t_lo..t_hi);
            let sigma_t2 = m.diffusion.sigma(t)?.powi(2);
            let bar = (sigma_t2 - var0).sqrt();
            let mut target = vec![0.0; dim];
            for j in 0..dim {
                let eps: f64 = StandardNormal.sample(&mut rng);
                x[j] = data[(row, j)] + bar * eps;
                target[j] = eps / bar;
            }
            let feats = time_features(&m.diffusion, t, m.spec.freqs)?;
            let trace = m.net.forward_trace(&assemble_input(&x, &feats));
            // residual r = s + eps / sigma_bar; loss = sigma(t)^2 |r|^2
            let mut cot = vec![0.0; dim];
            let mut sample_loss = 0.0;
            for j in 0..dim {
                let r = trace.output[j] + target[j];
                sample_loss += sigma_t2 * r * r;
                cot[j] = 2.0 * sigma_t2 * r;
            }
            loss_acc += sample_loss;
            let (_, g) = m.net.backward_full(&trace, &cot);
            grad.add_scaled(&g, 1.0 / opt.batch_size as f64);
        }
        let mean_loss = loss_acc / opt.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite {
                context: "score-matching loss",
                t: step as f64,
            });
        }
        loss_trace.push(mean_loss);
        let mut flat = grad.to_flat();
        if let Some(c) = opt.clip_norm {
            crate::nn::clip_global_norm(&mut flat, c);
        }
        adam.step(&mut params, &flat);
        m.net.set_flat_params(&params);
    }
    Ok(TrainedScore {
        field: ScoreField::Mlp(m),
        loss_trace,
    })
}
