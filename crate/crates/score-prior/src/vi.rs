//! Variational posterior fitting: minimizes the hyperparameter-free
//! objective `E_q[-log p(y|x) - log p(x) + log q(x)]` over a coupling flow.
//!
//! The objective is the evidence lower bound up to sign; it carries no
//! likelihood/prior weights, so the only tunables are optimizer settings.
//! Gradients reach the prior term through the flow samples
//! (reparameterization); the entropy term uses the flow's analytic
//! log-density rather than an estimator.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::{self, DivEstimator, GradEngine};
use crate::error::{Error, Result};
use crate::flow::{FlowGradients, FlowModel};
use crate::inverse::{self, LinearForwardModel};
use crate::nn::{clip_global_norm, Adam};
use crate::odeint::SolverConfig;
use crate::oracle::GaussianPrior;
use crate::score::ScoreField;

/// Plateau detector: stop when the mean loss over the latest window moves by
/// less than this relative amount versus the previous window.
const PLATEAU_WINDOW: usize = 2000;
const PLATEAU_RTOL: f64 = 1e-4;

/// Consecutive non-finite losses tolerated before aborting.
const DIVERGENCE_STREAK: usize = 10;

/// Which density model supplies the prior term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    /// Diffusion-model log-probability via the probability-flow transport.
    Score,
    /// A separately trained coupling flow.
    Flow,
    /// Closed-form Gaussian (oracle runs).
    Gaussian,
    /// Total-variation regularizer (the entropy term stays in the objective).
    TvEntropy,
}

impl PriorKind {
    pub fn from_name(name: &str) -> Result<PriorKind> {
        match name {
            "score" => Ok(PriorKind::Score),
            "flow" => Ok(PriorKind::Flow),
            "gaussian" => Ok(PriorKind::Gaussian),
            "tv" | "tv+entropy" => Ok(PriorKind::TvEntropy),
            other => Err(Error::config(format!("unknown prior kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PriorKind::Score => "score",
            PriorKind::Flow => "flow",
            PriorKind::Gaussian => "gaussian",
            PriorKind::TvEntropy => "tv+entropy",
        }
    }
}

/// Posterior-fitting settings. Optimizer defaults follow the restoration
/// protocol: Adam at 2e-4, batch 64, gradients clipped to norm 1.
#[derive(Clone, Debug)]
pub struct DpiConfig {
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub seed: u64,
    pub prior: PriorKind,
    /// Divergence estimator for the score-prior term (probe count and
    /// distribution; the seed is refreshed every step).
    pub elbo_probes: DivEstimator,
    /// Transport solver for the score-prior term.
    pub solver: SolverConfig,
}

impl Default for DpiConfig {
    fn default() -> DpiConfig {
        DpiConfig {
            batch: 64,
            lr: 2e-4,
            clip_norm: 1.0,
            steps: 20_000,
            seed: 0,
            prior: PriorKind::Score,
            elbo_probes: DivEstimator::hutchinson(0),
            solver: SolverConfig::default(),
        }
    }
}

impl DpiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("dpi: batch must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("dpi: lr must be positive and finite"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("dpi: clip_norm must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("dpi: steps must be at least 1"));
        }
        Ok(())
    }
}

/// Log-prior with gradient; `seed` keys any stochastic estimate inside so a
/// whole batch can share one probe draw.
pub trait PriorModel {
    fn dim(&self) -> usize;
    fn logp(&self, x: &[f64], seed: u64) -> Result<f64>;
    fn logp_grad(&self, x: &[f64], seed: u64) -> Result<(f64, Vec<f64>)>;
}

/// Log-likelihood with gradient (deterministic in `x`).
pub trait LikelihoodModel {
    fn dim(&self) -> usize;
    fn logp(&self, x: &[f64]) -> Result<f64>;
    fn logp_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Score-based prior: log-probability by probability-flow transport,
/// gradients by the adjoint sweep.
pub struct ScorePrior<'a> {
    field: &'a ScoreField,
    solver: SolverConfig,
    probes: DivEstimator,
}

impl<'a> ScorePrior<'a> {
    pub fn new(field: &'a ScoreField, solver: SolverConfig, probes: DivEstimator) -> ScorePrior<'a> {
        ScorePrior { field, solver, probes }
    }

    /// The configured estimator re-keyed to `seed`.
    fn estimator(&self, seed: u64) -> DivEstimator {
        match self.probes {
            DivEstimator::Exact => DivEstimator::Exact,
            DivEstimator::Hutchinson { probes, dist, .. } => {
                DivEstimator::Hutchinson { probes, dist, seed }
            }
        }
    }
}

impl PriorModel for ScorePrior<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn logp(&self, x: &[f64], seed: u64) -> Result<f64> {
        Ok(density::logprob(self.field, x, &self.solver, &self.estimator(seed))?.logp)
    }

    fn logp_grad(&self, x: &[f64], seed: u64) -> Result<(f64, Vec<f64>)> {
        let r = density::grad_logprob(
            self.field,
            x,
            &self.solver,
            &self.estimator(seed),
            GradEngine::Adjoint,
        )?;
        Ok((r.logp, r.grad))
    }
}

/// A separately trained flow as the prior density.
pub struct FlowPrior<'a> {
    flow: &'a FlowModel,
}

impl<'a> FlowPrior<'a> {
    pub fn new(flow: &'a FlowModel) -> FlowPrior<'a> {
        FlowPrior { flow }
    }
}

impl PriorModel for FlowPrior<'_> {
    fn dim(&self) -> usize {
        self.flow.dim()
    }

    fn logp(&self, x: &[f64], _seed: u64) -> Result<f64> {
        self.flow.logq_of(x)
    }

    fn logp_grad(&self, x: &[f64], _seed: u64) -> Result<(f64, Vec<f64>)> {
        self.flow.logq_grad(x)
    }
}

/// Closed-form Gaussian prior (oracle validation runs).
pub struct GaussianPriorModel<'a> {
    prior: &'a GaussianPrior,
}

impl<'a> GaussianPriorModel<'a> {
    pub fn new(prior: &'a GaussianPrior) -> GaussianPriorModel<'a> {
        GaussianPriorModel { prior }
    }
}

impl PriorModel for GaussianPriorModel<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn logp(&self, x: &[f64], _seed: u64) -> Result<f64> {
        Ok(self.prior.logpdf(x))
    }

    fn logp_grad(&self, x: &[f64], _seed: u64) -> Result<(f64, Vec<f64>)> {
        Ok((self.prior.logpdf(x), self.prior.grad_logpdf(x)))
    }
}

/// Smoothed isotropic total variation as an (unnormalized) log-prior:
/// `log p(x) = -weight * TV(x)`. The flow's entropy term remains in the
/// objective, which is what separates this from plain TV-regularized MAP.
pub struct TvPrior {
    side: usize,
    weight: f64,
    /// Smoothing floor inside the square root, keeping the gradient defined
    /// on flat regions.
    beta: f64,
}

impl TvPrior {
    pub fn new(side: usize, weight: f64) -> Result<TvPrior> {
        if side == 0 {
            return Err(Error::config("tv prior: side must be positive"));
        }
        if !(weight > 0.0) {
            return Err(Error::config("tv prior: weight must be positive"));
        }
        Ok(TvPrior { side, weight, beta: 1e-6 })
    }

    /// TV value and gradient on the flattened `side x side` image.
    fn tv_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let n = self.side;
        let at = |r: usize, c: usize| x[r * n + c];
        let mut tv = 0.0;
        let mut grad = vec![0.0; x.len()];
        for r in 0..n {
            for c in 0..n {
                let dh = if c + 1 < n { at(r, c + 1) - at(r, c) } else { 0.0 };
                let dv = if r + 1 < n { at(r + 1, c) - at(r, c) } else { 0.0 };
                let root = (dh * dh + dv * dv + self.beta * self.beta).sqrt();
                tv += root;
                if c + 1 < n {
                    grad[r * n + c + 1] += dh / root;
                    grad[r * n + c] -= dh / root;
                }
                if r + 1 < n {
                    grad[(r + 1) * n + c] += dv / root;
                    grad[r * n + c] -= dv / root;
                }
            }
        }
        (tv, grad)
    }
}

impl PriorModel for TvPrior {
    fn dim(&self) -> usize {
        self.side * self.side
    }

    fn logp(&self, x: &[f64], _seed: u64) -> Result<f64> {
        check_dim(x.len(), self.dim(), "tv prior")?;
        Ok(-self.weight * self.tv_grad(x).0)
    }

    fn logp_grad(&self, x: &[f64], _seed: u64) -> Result<(f64, Vec<f64>)> {
        check_dim(x.len(), self.dim(), "tv prior")?;
        let (tv, mut g) = self.tv_grad(x);
        for gi in g.iter_mut() {
            *gi *= -self.weight;
        }
        Ok((-self.weight * tv, g))
    }
}

/// Gaussian measurement likelihood, including its normalizing constant so
/// converged losses are comparable to log-evidences.
pub struct GaussianLikelihood<'a> {
    model: &'a LinearForwardModel,
    norm_const: f64,
}

impl<'a> GaussianLikelihood<'a> {
    pub fn new(model: &'a LinearForwardModel) -> GaussianLikelihood<'a> {
        GaussianLikelihood {
            model,
            norm_const: inverse::log_likelihood_const(model),
        }
    }
}

impl LikelihoodModel for GaussianLikelihood<'_> {
    fn dim(&self) -> usize {
        self.model.op.in_dim()
    }

    fn logp(&self, x: &[f64]) -> Result<f64> {
        check_dim(x.len(), self.dim(), "likelihood")?;
        Ok(inverse::log_likelihood(self.model, x) + self.norm_const)
    }

    fn logp_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(x.len(), self.dim(), "likelihood")?;
        Ok((
            inverse::log_likelihood(self.model, x) + self.norm_const,
            inverse::grad_log_likelihood(self.model, x),
        ))
    }
}

/// Constant-zero likelihood: fitting against it drives the flow to the prior.
pub struct ZeroLikelihood {
    pub dim: usize,
}

impl LikelihoodModel for ZeroLikelihood {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logp(&self, _x: &[f64]) -> Result<f64> {
        Ok(0.0)
    }

    fn logp_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((0.0, vec![0.0; x.len()]))
    }
}

fn check_dim(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::config(format!(
            "{what}: input has dimension {got}, expected {want}"
        )));
    }
    Ok(())
}

/// Batch means of the objective and its three terms
/// (`loss = neg_loglik + neg_logprior + logq`).
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub loss: f64,
    pub neg_loglik: f64,
    pub neg_logprior: f64,
    pub logq: f64,
}

/// Probe seed for one optimizer step: fresh every step, shared by the batch.
fn step_probe_seed(seed: u64, step: usize) -> u64 {
    (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed
}

/// Base-draw seed for one optimizer step's batch.
fn step_sample_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_add(step as u64).wrapping_add(1)
}

fn require_finite(value: f64, context: &'static str, sample: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { context, t: sample as f64 })
    }
}

/// Monte Carlo estimate of the objective over `batch_n` fresh flow samples.
///
/// Each sample's prior term shares the probe seed `seed`, mirroring one
/// training step. A non-finite term aborts with an error naming the term.
pub fn elbo_loss(
    flow: &FlowModel,
    prior: &dyn PriorModel,
    likelihood: &dyn LikelihoodModel,
    batch_n: usize,
    seed: u64,
) -> Result<ElboTerms> {
    if batch_n == 0 {
        return Err(Error::config("elbo: batch_n must be at least 1"));
    }
    let (samples, logq) = flow.sample_and_logq(batch_n, seed)?;
    let mut sum_ll = 0.0;
    let mut sum_lp = 0.0;
    let mut sum_lq = 0.0;
    for i in 0..batch_n {
        let x: Vec<f64> = samples.row(i).to_vec();
        sum_ll += require_finite(likelihood.logp(&x)?, "elbo likelihood term", i)?;
        sum_lp += require_finite(prior.logp(&x, seed)?, "elbo prior term", i)?;
        sum_lq += require_finite(logq[i], "elbo entropy term", i)?;
    }
    let n = batch_n as f64;
    let terms = ElboTerms {
        loss: (-sum_ll - sum_lp + sum_lq) / n,
        neg_loglik: -sum_ll / n,
        neg_logprior: -sum_lp / n,
        logq: sum_lq / n,
    };
    Ok(terms)
}

/// A fitted posterior with its per-step loss trace.
pub struct FitResult {
    pub flow: FlowModel,
    pub trace: Vec<(usize, ElboTerms)>,
    /// Steps actually run (may undershoot the budget on plateau stop).
    pub steps_run: usize,
}

/// Runs Adam on the Monte Carlo objective and returns the fitted flow.
///
/// Per step: draw a batch of base points, push them through the flow with
/// traces, accumulate parameter gradients of all three terms (the prior and
/// likelihood terms enter through the sample cotangent, the entropy term
/// through the log-determinant cotangent), clip the global norm, and update.
/// Stops early once the loss plateaus (relative change of consecutive
/// 2000-step window means below 1e-4). Ten consecutive non-finite losses
/// abort with a divergence error; isolated ones skip the update.
pub fn fit(
    flow: FlowModel,
    prior: &dyn PriorModel,
    likelihood: &dyn LikelihoodModel,
    cfg: &DpiConfig,
    mut callback: Option<&mut dyn FnMut(usize, &ElboTerms)>,
) -> Result<FitResult> {
    cfg.validate()?;
    let mut flow = flow;
    let dim = flow.dim();
    if prior.dim() != dim || likelihood.dim() != dim {
        return Err(Error::config(format!(
            "dpi: dimensions disagree (flow {dim}, prior {}, likelihood {})",
            prior.dim(),
            likelihood.dim()
        )));
    }
    let mut params = flow.flat_params();
    let mut adam = Adam::new(cfg.lr, params.len());
    let mut trace: Vec<(usize, ElboTerms)> = Vec::with_capacity(cfg.steps.min(65_536));
    let mut streak = 0usize;
    let mut steps_run = 0usize;

    for step in 0..cfg.steps {
        steps_run = step + 1;
        let probe_seed = step_probe_seed(cfg.seed, step);
        let sample_seed = step_sample_seed(cfg.seed, step);
        let mut grads = FlowGradients::zeros_like(&flow);
        let mut sum_ll = 0.0;
        let mut sum_lp = 0.0;
        let mut sum_lq = 0.0;
        let mut finite = true;
        for i in 0..cfg.batch {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            rng.set_stream(i as u64);
            let z: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let tr = flow.forward_traced(&z)?;
            let logq_i = -0.5
                * (dim as f64 * (2.0 * std::f64::consts::PI).ln()
                    + z.iter().map(|v| v * v).sum::<f64>())
                - tr.logdet;
            let prior_term = prior.logp_grad(&tr.x, probe_seed);
            let lik_term = likelihood.logp_grad(&tr.x);
            let (lp, glp, ll, gll) = match (prior_term, lik_term) {
                (Ok((lp, glp)), Ok((ll, gll))) => (lp, glp, ll, gll),
                // Numerical failures inside a term count toward the
                // divergence streak rather than aborting outright.
                (Err(e), _) | (_, Err(e)) if e.is_numerical() => {
                    finite = false;
                    break;
                }
                (Err(e), _) => return Err(e),
                (_, Err(e)) => return Err(e),
            };
            sum_ll += ll;
            sum_lp += lp;
            sum_lq += logq_i;
            if !(ll.is_finite() && lp.is_finite() && logq_i.is_finite()) {
                finite = false;
                break;
            }
            // d loss_i / dx and d loss_i / d logdet.
            let w: Vec<f64> = gll.iter().zip(glp.iter()).map(|(a, b)| -(a + b)).collect();
            let (_, g) = flow.backward(&tr, &w, -1.0);
            grads.add_scaled(&g, 1.0 / cfg.batch as f64);
        }
        let n = cfg.batch as f64;
        let terms = ElboTerms {
            loss: (-sum_ll - sum_lp + sum_lq) / n,
            neg_loglik: -sum_ll / n,
            neg_logprior: -sum_lp / n,
            logq: sum_lq / n,
        };
        if !finite || !terms.loss.is_finite() {
            streak += 1;
            if streak >= DIVERGENCE_STREAK {
                return Err(Error::TrainingDiverged { step, streak });
            }
            continue;
        }
        streak = 0;
        trace.push((step, terms));
        if let Some(cb) = callback.as_mut() {
            cb(step, &terms);
        }
        let mut flat = grads.to_flat();
        clip_global_norm(&mut flat, cfg.clip_norm);
        adam.step(&mut params, &flat);
        flow.set_flat_params(&params)?;

        if plateaued(&trace, step) {
            break;
        }
    }
    Ok(FitResult { flow, trace, steps_run })
}

/// Consecutive-window plateau test on the recorded losses.
fn plateaued(trace: &[(usize, ElboTerms)], step: usize) -> bool {
    if (step + 1) % PLATEAU_WINDOW != 0 || trace.len() < 2 * PLATEAU_WINDOW {
        return false;
    }
    let n = trace.len();
    let mean = |rows: &[(usize, ElboTerms)]| {
        rows.iter().map(|(_, t)| t.loss).sum::<f64>() / rows.len() as f64
    };
    let recent = mean(&trace[n - PLATEAU_WINDOW..]);
    let previous = mean(&trace[n - 2 * PLATEAU_WINDOW..n - PLATEAU_WINDOW]);
    (recent - previous).abs() / previous.abs().max(1e-9) < PLATEAU_RTOL
}

/// Drops rows containing any entry with magnitude above `threshold`
/// (restoration protocol default: 2). Removing every row is reported as a
/// warning, not an error — downstream metrics handle empty sets themselves.
pub fn postprocess_samples(samples: &Array2<f64>, threshold: f64) -> Result<Array2<f64>> {
    if !(threshold > 0.0) {
        return Err(Error::config("postprocess: threshold must be positive"));
    }
    let keep: Vec<usize> = (0..samples.nrows())
        .filter(|&i| samples.row(i).iter().all(|v| v.abs() <= threshold))
        .collect();
    if keep.is_empty() {
        eprintln!(
            "warning: postprocess removed all {} samples (threshold {})",
            samples.nrows(),
            threshold
        );
    }
    let mut out = Array2::zeros((keep.len(), samples.ncols()));
    for (row, &i) in keep.iter().enumerate() {
        out.row_mut(row).assign(&samples.row(i));
    }
    Ok(out)
}

/// Loss-trace CSV rows in the emitted column order
/// (step, loss, neg_loglik, neg_logprior, logq).
pub fn trace_rows(trace: &[(usize, ElboTerms)]) -> Vec<Vec<f64>> {
    trace
        .iter()
        .map(|(step, t)| vec![*step as f64, t.loss, t.neg_loglik, t.neg_logprior, t.logq])
        .collect()
}

pub const TRACE_HEADER: [&str; 5] = ["step", "loss", "neg_loglik", "neg_logprior", "logq"];
