//! Evaluation toolkit: kernel density estimates, sample-based KL, image
//! restoration metrics, correlation/cosine diagnostics, the solver benchmark
//! driver, and the 2-D bimodal benchmark target.

use std::f64::consts::PI;
use std::fs::File;
use std::io::Write as IoWrite;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::density::{self, DivEstimator};
use crate::error::{Error, Result};
use crate::inverse::{dense_model, LinearForwardModel};
use crate::linalg::{cho_solve, cholesky, logdet_from_cholesky};
use crate::odeint::{Method, SolverConfig};
use crate::oracle::{linear_gaussian_posterior, GaussianPrior};
use crate::score::ScoreField;

/// KDE bandwidth used by the 2-D benchmark protocol.
pub const BENCH_2D_BANDWIDTH: f64 = 0.03;

/// Noise std of the 2-D benchmark measurement `y = x0 + x1 + noise`.
pub const BENCH_2D_SIGMA: f64 = 0.35;

/// Default data value for the 2-D benchmark: keeps the posterior bimodal
/// while putting most of the mass on the lower-left mode.
pub const BENCH_2D_DATA: f64 = -0.1;

/// The 2-D benchmark forward model: a single noisy coordinate sum.
pub fn bimodal_measurement(sigma: f64, y: f64) -> Result<LinearForwardModel> {
    dense_model(ndarray::arr2(&[[1.0, 1.0]]), sigma)?.with_data(vec![y])
}

/// Log-density of an isotropic-Gaussian-kernel mixture centered on
/// `samples`, evaluated at each query row (log-sum-exp stabilized).
pub fn kde_logpdf(samples: &Array2<f64>, bandwidth: f64, queries: &Array2<f64>) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0) {
        return Err(Error::config("kde: bandwidth must be positive"));
    }
    if samples.nrows() == 0 {
        return Err(Error::config("kde: need at least one sample"));
    }
    if samples.ncols() != queries.ncols() {
        return Err(Error::config(format!(
            "kde: samples have dimension {}, queries {}",
            samples.ncols(),
            queries.ncols()
        )));
    }
    let d = samples.ncols() as f64;
    let n = samples.nrows();
    let norm = -(n as f64).ln() - 0.5 * d * (2.0 * PI * bandwidth * bandwidth).ln();
    let inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    // the one O(n_samples * n_queries) kernel in the toolkit; queries are
    // independent, so fan them out over the rayon pool
    let out = (0..queries.nrows())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let mut max_e = f64::NEG_INFINITY;
            let mut exponents = Vec::with_capacity(n);
            for s in samples.rows() {
                let d2: f64 = q.iter().zip(s.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                let e = -d2 * inv2h2;
                max_e = max_e.max(e);
                exponents.push(e);
            }
            let sum: f64 = exponents.iter().map(|e| (e - max_e).exp()).sum();
            norm + max_e + sum.ln()
        })
        .collect();
    Ok(out)
}

/// A Monte Carlo KL estimate with its bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct KlEstimate {
    pub kl: f64,
    pub n_used: usize,
    /// Samples whose terms were non-finite (or failed to evaluate).
    pub n_dropped: usize,
}

/// `KL(q || p) ~= mean over q-samples of logq - logp`.
///
/// Non-finite (or erroring) terms are dropped and counted; losing more than
/// 10% of the batch prints a warning. Every term dropped is an error.
pub fn sample_kl<Q, P>(samples: &Array2<f64>, mut logq: Q, mut logp: P) -> Result<KlEstimate>
where
    Q: FnMut(&[f64]) -> Result<f64>,
    P: FnMut(&[f64]) -> Result<f64>,
{
    if samples.nrows() == 0 {
        return Err(Error::config("sample_kl: need at least one sample"));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for row in samples.rows() {
        let x: Vec<f64> = row.to_vec();
        let term = match (logq(&x), logp(&x)) {
            (Ok(a), Ok(b)) => a - b,
            _ => f64::NAN,
        };
        if term.is_finite() {
            sum += term;
            used += 1;
        }
    }
    let dropped = samples.nrows() - used;
    if used == 0 {
        return Err(Error::config("sample_kl: every term was non-finite"));
    }
    if dropped * 10 > samples.nrows() {
        eprintln!(
            "warning: sample_kl dropped {dropped} of {} terms",
            samples.nrows()
        );
    }
    Ok(KlEstimate { kl: sum / used as f64, n_used: used, n_dropped: dropped })
}

/// KDE-based KL of a sample set against a known log-density: the KDE built
/// on the samples serves as logq at the samples themselves.
pub fn kde_kl<P>(samples: &Array2<f64>, bandwidth: f64, mut logp: P) -> Result<KlEstimate>
where
    P: FnMut(&[f64]) -> Result<f64>,
{
    let logq = kde_logpdf(samples, bandwidth, samples)?;
    let mut i = 0usize;
    sample_kl(
        samples,
        |_| {
            let v = logq[i];
            i += 1;
            Ok(v)
        },
        &mut logp,
    )
}

/// Standard image restoration metrics.
#[derive(Clone, Copy, Debug)]
pub struct RestorationMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// MSE, PSNR, and single-scale grayscale SSIM over a `rows x cols` image.
///
/// SSIM uses a uniform sliding window (7x7, shrunk to fit small images) with
/// the standard stabilizers `C1 = (0.01 range)^2`, `C2 = (0.03 range)^2`.
/// A zero-MSE pair reports PSNR as +infinity.
pub fn restoration_metrics(
    estimate: &[f64],
    truth: &[f64],
    rows: usize,
    cols: usize,
    data_range: f64,
) -> Result<RestorationMetrics> {
    if estimate.len() != truth.len() || estimate.len() != rows * cols {
        return Err(Error::config(format!(
            "metrics: shapes disagree ({} and {} entries for {rows}x{cols})",
            estimate.len(),
            truth.len()
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::config("metrics: data_range must be positive"));
    }
    let n = estimate.len() as f64;
    let mse = estimate
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    };

    let w = 7usize.min(rows).min(cols);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let wn = (w * w) as f64;
    let mut ssim_sum = 0.0;
    let mut windows = 0usize;
    for r0 in 0..=(rows - w) {
        for c0 in 0..=(cols - w) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    ma += estimate[r * cols + c];
                    mb += truth[r * cols + c];
                }
            }
            ma /= wn;
            mb /= wn;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    let da = estimate[r * cols + c] - ma;
                    let db = truth[r * cols + c] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            va /= wn;
            vb /= wn;
            cov /= wn;
            ssim_sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    Ok(RestorationMetrics { mse, psnr, ssim: ssim_sum / windows as f64 })
}

/// Coefficient of determination of `pred` against `truth`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::config("r_squared: need equal-length nonempty vectors"));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    if ss_tot == 0.0 {
        return Err(Error::config("r_squared: truth has zero variance"));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// `1 - cos(a, b)`; zero for aligned vectors, 2 for opposite ones.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::config("cosine_distance: need equal-length nonempty vectors"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::config("cosine_distance: zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// One solver's row in the benchmark table.
#[derive(Clone, Debug)]
pub struct SolverBenchRow {
    pub name: String,
    /// Mean `logq - logp` over the draw set; `None` when the solver failed.
    pub kl: Option<f64>,
    /// Accepted+rejected steps times the method order, averaged per sample —
    /// the conventional lower bound on function evaluations.
    pub nfe_lower_bound: f64,
    /// Stage-exact evaluation count, averaged per sample.
    pub nfe_exact: f64,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

/// Benchmarks log-probability fidelity per solver.
///
/// Draws `n_samples` points once with a tight reference transport, then
/// evaluates each listed solver's log-probability on the same points and
/// reports the sample KL against `oracle_logp`. Per-solver failures are
/// recorded in the table rather than aborting the run.
pub fn bench_solvers<P>(
    field: &ScoreField,
    mut oracle_logp: P,
    solvers: &[SolverConfig],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SolverBenchRow>>
where
    P: FnMut(&[f64]) -> Result<f64>,
{
    if solvers.is_empty() {
        return Err(Error::config("bench_solvers: need at least one solver"));
    }
    let mut reference = SolverConfig::new(Method::Dopri5);
    reference.rtol = 1e-8;
    reference.atol = 1e-8;
    let samples = density::sample_prior_ode(field, n_samples, &reference, seed)?;
    let oracle_vals: Result<Vec<f64>> = samples
        .rows()
        .into_iter()
        .map(|r| oracle_logp(&r.to_vec()))
        .collect();
    let oracle_vals = oracle_vals?;

    let mut rows = Vec::with_capacity(solvers.len());
    for cfg in solvers {
        let start = Instant::now();
        let mut sum = 0.0;
        let mut nfe_exact = 0usize;
        let mut nfe_bound = 0usize;
        let mut failure: Option<String> = None;
        for (i, row) in samples.rows().into_iter().enumerate() {
            let x: Vec<f64> = row.to_vec();
            match density::logprob(field, &x, cfg, &DivEstimator::Exact) {
                Ok(r) => {
                    sum += r.logp - oracle_vals[i];
                    nfe_exact += r.nfe;
                    nfe_bound += (r.steps_accepted + r.steps_rejected)
                        * cfg.method.order() as usize;
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        let wall = start.elapsed().as_secs_f64();
        let n = n_samples as f64;
        rows.push(match failure {
            None => SolverBenchRow {
                name: solver_label(cfg),
                kl: Some(sum / n),
                nfe_lower_bound: nfe_bound as f64 / n,
                nfe_exact: nfe_exact as f64 / n,
                wall_time_s: wall,
                error: None,
            },
            Some(msg) => SolverBenchRow {
                name: solver_label(cfg),
                kl: None,
                nfe_lower_bound: 0.0,
                nfe_exact: 0.0,
                wall_time_s: wall,
                error: Some(msg),
            },
        });
    }
    Ok(rows)
}

fn solver_label(cfg: &SolverConfig) -> String {
    match cfg.fixed_dt {
        Some(dt) => format!("{} (fixed dt {dt:.3e})", cfg.method.name()),
        None => format!("{} (rtol {:.0e})", cfg.method.name(), cfg.rtol),
    }
}

/// Renders rows as an aligned markdown table.
pub fn format_markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(ncol) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths.iter())
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let header_cells: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    out.push_str(&fmt_row(&header_cells, &widths));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&fmt_row(&rule, &widths));
    for row in rows {
        out.push_str(&fmt_row(row, &widths));
    }
    out
}

/// Writes a table of string cells as CSV.
pub fn write_string_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

/// Benchmark-table rows rendered as strings (shared by CSV and markdown).
pub fn solver_table_strings(rows: &[SolverBenchRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.kl.map_or_else(|| "failed".into(), |v| format!("{v:.5}")),
                format!("{:.0}", r.nfe_lower_bound),
                format!("{:.0}", r.nfe_exact),
                format!("{:.2}", r.wall_time_s),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect()
}

pub const SOLVER_TABLE_HEADER: [&str; 6] =
    ["solver", "kl", "nfe_lower_bound", "nfe_exact", "wall_s", "error"];

/// Two-component Gaussian mixture: the 2-D bimodal benchmark target and its
/// conjugate posterior under a linear-Gaussian measurement.
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianPrior>) -> Result<GaussianMixture> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(Error::config("mixture: need matching nonempty weights/components"));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::config("mixture: weights must be positive"));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::config("mixture: component dimensions disagree"));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(GaussianMixture { weights, components })
    }

    /// The benchmark target: two well-separated anisotropic modes.
    pub fn bimodal_2d() -> GaussianMixture {
        let c1 = GaussianPrior::from_moments(
            vec![-0.5, -0.5],
            ndarray::arr2(&[[0.050, 0.020], [0.020, 0.040]]),
        )
        .expect("benchmark component 1 is positive definite");
        let c2 = GaussianPrior::from_moments(
            vec![0.5, 0.5],
            ndarray::arr2(&[[0.040, -0.015], [-0.015, 0.050]]),
        )
        .expect("benchmark component 2 is positive definite");
        GaussianMixture::new(vec![0.5, 0.5], vec![c1, c2]).expect("valid benchmark mixture")
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.weights.len());
        for (w, c) in self.weights.iter().zip(self.components.iter()) {
            terms.push(w.ln() + c.logpdf(x));
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln())
    }

    /// Mixture draws; per-sample RNG streams as elsewhere.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::config("mixture: sample count must be at least 1"));
        }
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut pick = self.weights.len() - 1;
            for (k, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let x = self.components[pick].sample(&mut rng);
            out.row_mut(i).iter_mut().zip(x.iter()).for_each(|(o, &v)| *o = v);
        }
        Ok(out)
    }

    /// Conjugate posterior under a linear-Gaussian measurement: each
    /// component's posterior, reweighted by its evidence.
    pub fn posterior(&self, model: &LinearForwardModel) -> Result<GaussianMixture> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut comps = Vec::with_capacity(self.weights.len());
        let mut log_weights = Vec::with_capacity(self.weights.len());
        for (w, c) in self.weights.iter().zip(self.components.iter()) {
            comps.push(linear_gaussian_posterior(c, model)?);
            log_weights.push(w.ln() + log_evidence(c, model)?);
        }
        let m = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for lw in &log_weights {
            weights.push((lw - m).exp());
        }
        GaussianMixture::new(weights, comps)
    }
}

/// Log-evidence `log N(y; A mu, sigma_c^2 I + A Sigma A^T)` of one Gaussian
/// component under the model's (real-expanded) measurement.
fn log_evidence(prior: &GaussianPrior, model: &LinearForwardModel) -> Result<f64> {
    let m = model.op.out_dim();
    let d = model.op.in_dim();
    if d != prior.dim() {
        return Err(Error::config("evidence: operator/prior dimensions disagree"));
    }
    let sigma_c = model.component_sigma();
    // S = sigma_c^2 I + A Sigma A^T, built column by column.
    let mut s = Array2::zeros((m, m));
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        let at_e = model.op.adjoint(&e);
        let mut sig_at_e = vec![0.0; d];
        for r in 0..d {
            let mut acc = 0.0;
            for c in 0..d {
                acc += prior.sigma()[(r, c)] * at_e[c];
            }
            sig_at_e[r] = acc;
        }
        let col = model.op.apply(&sig_at_e);
        for i in 0..m {
            s[(i, j)] = col[i];
        }
        s[(j, j)] += sigma_c * sigma_c;
    }
    // Symmetrize away accumulation asymmetry before factorizing.
    for i in 0..m {
        for j in 0..i {
            let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = avg;
            s[(j, i)] = avg;
        }
    }
    let chol = cholesky(&s)?;
    let mean = model.op.apply(prior.mu());
    let r: Vec<f64> = model.y.iter().zip(mean.iter()).map(|(y, m)| y - m).collect();
    let u = cho_solve(&chol, &r);
    let quad: f64 = r.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
    Ok(-0.5 * (m as f64 * (2.0 * PI).ln() + logdet_from_cholesky(&chol) + quad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionSpec;
    use crate::inverse;
    use crate::oracle::{fit_gaussian, gaussian_kl};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn kde_single_sample_at_itself() {
        let s = arr2(&[[0.3, -0.2, 0.5]]);
        let v = kde_logpdf(&s, 0.1, &s).unwrap();
        assert_abs_diff_eq!(v[0], -1.5 * (2.0 * PI * 0.01).ln(), epsilon = 1e-12);
    }

    #[test]
    fn kde_matches_normal_density_1d() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Array2::zeros((n, 1));
        for i in 0..n {
            s[(i, 0)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let q = arr2(&[[0.0]]);
        let v = kde_logpdf(&s, 0.05, &q).unwrap();
        // MC std of the log-density at the mode is ~0.012 here; allow 3 sigma
        assert!((v[0] - (-0.5 * (2.0 * PI).ln())).abs() < 0.04, "kde {v:?}");
    }

    #[test]
    fn kde_integrates_to_one_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Array2::zeros((200, 2));
        for i in 0..200 {
            s[(i, 0)] = rng.random_range(-1.0..1.0);
            s[(i, 1)] = rng.random_range(-1.0..1.0);
        }
        let h = 0.25;
        let step = 0.05;
        let half = (3.0 / step) as i64;
        let mut rows = Vec::new();
        for i in -half..half {
            for j in -half..half {
                rows.push([(i as f64 + 0.5) * step, (j as f64 + 0.5) * step]);
            }
        }
        let queries = Array2::from_shape_vec(
            (rows.len(), 2),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap();
        let v = kde_logpdf(&s, h, &queries).unwrap();
        let mass: f64 = v.iter().map(|lv| lv.exp()).sum::<f64>() * step * step;
        assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
    }

    #[test]
    fn sample_kl_identical_densities_vanish() {
        let s = arr2(&[[0.1, 0.2], [0.4, -0.3], [0.0, 0.9]]);
        let f = |x: &[f64]| Ok(-x.iter().map(|v| v * v).sum::<f64>());
        let est = sample_kl(&s, f, f).unwrap();
        assert_eq!(est.kl, 0.0);
        assert_eq!(est.n_used, 3);
        assert_eq!(est.n_dropped, 0);
    }

    #[test]
    fn sample_kl_matches_closed_form_gaussians() {
        let p = GaussianPrior::from_moments(vec![0.0, 0.0], arr2(&[[1.0, 0.2], [0.2, 0.8]]))
            .unwrap();
        let q = GaussianPrior::from_moments(vec![0.4, -0.1], arr2(&[[1.3, 0.0], [0.0, 1.1]]))
            .unwrap();
        let samples = p.sample_n(20_000, 9);
        let est = sample_kl(&samples, |x| Ok(p.logpdf(x)), |x| Ok(q.logpdf(x))).unwrap();
        let truth = gaussian_kl(&p, &q).unwrap();
        assert!(
            (est.kl - truth).abs() / truth < 0.05,
            "estimate {} vs {truth}",
            est.kl
        );
    }

    #[test]
    fn kde_kl_self_consistency() {
        // KDE(q) against a matched analytic density: |KL| small. The
        // estimator's self-kernel bias scales like 1/(n h^2), so run at the
        // benchmark scale (n h^2 = 9) where it sits near +0.01 nats.
        let p = GaussianPrior::from_moments(vec![0.0, 0.0], arr2(&[[0.04, 0.0], [0.0, 0.04]]))
            .unwrap();
        let samples = p.sample_n(10_000, 21);
        let est = kde_kl(&samples, 0.03, |x| Ok(p.logpdf(x))).unwrap();
        assert!(est.kl.abs() < 0.05, "kl {}", est.kl);
    }

    #[test]
    fn sample_kl_drops_and_warns() {
        let s = arr2(&[[0.0], [1.0], [2.0], [3.0]]);
        let est = sample_kl(
            &s,
            |x| Ok(if x[0] > 1.5 { f64::NAN } else { 0.0 }),
            |_| Ok(0.0),
        )
        .unwrap();
        assert_eq!(est.n_used, 2);
        assert_eq!(est.n_dropped, 2);
        let err = sample_kl(&s, |_| Ok(f64::NAN), |_| Ok(0.0));
        assert!(err.is_err());
    }

    #[test]
    fn restoration_metrics_closed_forms() {
        let truth: Vec<f64> = (0..64).map(|i| (i as f64) / 63.0).collect();
        let m = restoration_metrics(&truth, &truth, 8, 8, 1.0).unwrap();
        assert_eq!(m.mse, 0.0);
        assert!(m.psnr.is_infinite());
        assert_abs_diff_eq!(m.ssim, 1.0, epsilon = 1e-12);

        let shifted: Vec<f64> = truth.iter().map(|v| v + 0.1).collect();
        let m = restoration_metrics(&shifted, &truth, 8, 8, 1.0).unwrap();
        assert_abs_diff_eq!(m.mse, 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(m.psnr, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a: Vec<f64> = (0..81).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..81).map(|_| rng.random_range(0.0..1.0)).collect();
            let ab = restoration_metrics(&a, &b, 9, 9, 1.0).unwrap().ssim;
            let ba = restoration_metrics(&b, &a, 9, 9, 1.0).unwrap().ssim;
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
        }
    }

    #[test]
    fn r_squared_and_cosine_basics() {
        let truth = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(r_squared(&truth, &truth).unwrap(), 1.0, epsilon = 1e-15);
        let constant = [2.5; 4];
        assert_abs_diff_eq!(r_squared(&constant, &truth).unwrap(), 0.0, epsilon = 1e-15);

        let a = [0.3, -0.7, 0.2];
        assert_abs_diff_eq!(cosine_distance(&a, &a).unwrap(), 0.0, epsilon = 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(cosine_distance(&a, &neg).unwrap(), 2.0, epsilon = 1e-15);
        assert!(cosine_distance(&a, &[0.0, 0.0, 0.0]).is_err());
    }

    fn analytic_field_2d() -> (ScoreField, GaussianPrior) {
        let prior = GaussianPrior::from_moments(
            vec![0.2, -0.1],
            arr2(&[[0.8, 0.1], [0.1, 0.6]]),
        )
        .unwrap();
        let clone = GaussianPrior::from_moments(
            vec![0.2, -0.1],
            arr2(&[[0.8, 0.1], [0.1, 0.6]]),
        )
        .unwrap();
        let spec = DiffusionSpec::new(4.0).unwrap();
        (ScoreField::analytic_gaussian(prior, spec).unwrap(), clone)
    }

    #[test]
    fn bench_solvers_analytic_field_has_no_model_error() {
        let (field, oracle) = analytic_field_2d();
        let mut euler = SolverConfig::new(Method::Euler);
        euler.fixed_dt = Some((1.0 - 1e-3) / 1024.0);
        let dopri5 = SolverConfig::default();
        let bosh3 = SolverConfig::new(Method::Bosh3);
        let rows = bench_solvers(
            &field,
            |x| Ok(oracle.logpdf(x)),
            &[euler, bosh3, dopri5],
            64,
            5,
        )
        .unwrap();
        for row in &rows {
            let kl = row.kl.expect("no solver should fail on the analytic field");
            assert!(kl.abs() < 0.05, "{}: kl {kl}", row.name);
            assert!(row.nfe_exact > 0.0);
        }
        // Adaptive third-order should need far fewer evaluations than the
        // fixed-grid first-order reference.
        assert!(rows[1].nfe_exact < rows[0].nfe_exact);
    }

    #[test]
    fn bench_solvers_kl_improves_with_tolerance() {
        let (field, oracle) = analytic_field_2d();
        let mut loose = SolverConfig::default();
        loose.rtol = 1e-3;
        loose.atol = 1e-3;
        let mut tight = SolverConfig::default();
        tight.rtol = 1e-7;
        tight.atol = 1e-7;
        let rows =
            bench_solvers(&field, |x| Ok(oracle.logpdf(x)), &[loose, tight], 64, 11).unwrap();
        let kl_loose = rows[0].kl.unwrap().abs();
        let kl_tight = rows[1].kl.unwrap().abs();
        assert!(kl_tight <= kl_loose + 0.01, "loose {kl_loose} tight {kl_tight}");
    }

    #[test]
    fn markdown_table_is_aligned() {
        let header = ["solver", "kl"];
        let rows = vec![
            vec!["euler".to_string(), "0.1".to_string()],
            vec!["dopri5".to_string(), "0.00001".to_string()],
        ];
        let md = format_markdown_table(&header, &rows);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 4);
        let width = lines[0].len();
        assert!(lines.iter().all(|l| l.len() == width));
    }

    #[test]
    fn bimodal_mixture_density_and_sampling() {
        let mix = GaussianMixture::bimodal_2d();
        // Density is a proper mixture: grid mass 1.
        let step = 0.05;
        let half = (4.0 / step) as i64;
        let mut mass = 0.0;
        for i in -half..half {
            for j in -half..half {
                let x = [(i as f64 + 0.5) * step, (j as f64 + 0.5) * step];
                mass += mix.logpdf(&x).unwrap().exp();
            }
        }
        mass *= step * step;
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");

        // Sample moments match the mixture mean (0, 0 by symmetry of
        // weights and means) within Monte Carlo error.
        let s = mix.sample(20_000, 3).unwrap();
        let fitted = fit_gaussian(&s, 0.0).unwrap();
        assert!(fitted.mu()[0].abs() < 0.02);
        assert!(fitted.mu()[1].abs() < 0.02);
        // Mixture covariance: E[Sigma_k] + Var of means = 0.045 + 0.25.
        assert!((fitted.sigma()[(0, 0)] - 0.295).abs() < 0.01);
    }

    #[test]
    fn mixture_posterior_matches_grid_quadrature() {
        let mix = GaussianMixture::bimodal_2d();
        // Observe only the first coordinate through a 1x2 operator.
        let a = arr2(&[[1.0, 0.0]]);
        let model = inverse::dense_model(a, 0.15)
            .unwrap()
            .with_data(vec![0.35])
            .unwrap();
        let post = mix.posterior(&model).unwrap();

        // Brute-force normalization of prior * likelihood on a grid.
        let step = 0.02;
        let half = (3.0 / step) as i64;
        let mut log_terms = Vec::new();
        let mut points = Vec::new();
        for i in -half..half {
            for j in -half..half {
                let x = [(i as f64 + 0.5) * step, (j as f64 + 0.5) * step];
                let lt = mix.logpdf(&x).unwrap() + inverse::log_likelihood(&model, &x);
                log_terms.push(lt);
                points.push(x);
            }
        }
        let m = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = log_terms.iter().map(|t| (t - m).exp()).sum::<f64>() * step * step;
        let log_z = m + z.ln();
        for (idx, x) in points.iter().enumerate().step_by(7919) {
            // Likelihood constants cancel between numerator and normalizer.
            let brute = log_terms[idx] - log_z;
            let exact = post.logpdf(x).unwrap();
            if exact > -12.0 {
                assert_abs_diff_eq!(exact, brute, epsilon = 1e-3);
            }
        }

        // Posterior weights shift toward the mode nearer the measurement.
        assert!(post.weights()[1] > post.weights()[0]);
        assert_abs_diff_eq!(post.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mixture_validation() {
        let c = GaussianPrior::from_moments(vec![0.0], arr2(&[[1.0]])).unwrap();
        assert!(GaussianMixture::new(vec![1.0, 1.0], vec![c]).is_err());
        let c = GaussianPrior::from_moments(vec![0.0], arr2(&[[1.0]])).unwrap();
        assert!(GaussianMixture::new(vec![-1.0], vec![c]).is_err());
    }
}
