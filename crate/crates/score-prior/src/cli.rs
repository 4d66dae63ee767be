//! Command-line driver: every experiment ships as a subcommand whose outputs
//! land in a fresh run directory (named command + seed + timestamp) together
//! with a manifest of the fully resolved configuration.
//!
//! Conventions shared by all subcommands:
//!
//! - arrays travel as SPARR1 files (magic, rank, dims, little-endian f64),
//!   images optionally as 8-bit PGM;
//! - method hyperparameters may come from a `key = value` config file, with
//!   explicit flags taking precedence; unrecognized keys are errors;
//! - all randomness is keyed by `--seed`, so reruns are bit-identical;
//! - `--threads` caps the worker pool (KDE evaluation fans out).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::baselines::{self, BaselineConfig, BaselineMethod, GammaSchedule};
use crate::density::{self, DivEstimator, GradEngine, ProbeDist};
use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::eval;
use crate::flow::FlowModel;
use crate::inverse;
use crate::io;
use crate::nn::OptimizerConfig;
use crate::odeint::{Method, SolverConfig};
use crate::oracle::{fit_gaussian, gaussian_kl, GaussianPrior};
use crate::score::{train_dsm, MlpSpec, ScoreField};
use crate::vi::{self, DpiConfig, GaussianLikelihood, PriorKind, ScorePrior};

#[derive(Parser, Debug)]
#[command(
    name = "score-prior",
    version,
    about = "Score-based diffusion priors for Bayesian inverse imaging"
)]
pub struct Cli {
    /// Cap the worker thread pool (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving per-run output directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a Gaussian prior to a sample matrix.
    FitGaussian(FitGaussianArgs),
    /// Train a score network by denoising score matching.
    TrainScore(TrainScoreArgs),
    /// Log-probability of points under a score field's flow ODE.
    Logprob(LogprobArgs),
    /// Gradient of the log-probability, optionally checked against an oracle.
    GradCheck(GradCheckArgs),
    /// Per-solver log-probability fidelity and cost table.
    BenchSolvers(BenchSolversArgs),
    /// Spread of the stochastic divergence estimate across probe seeds.
    TraceStudy(TraceStudyArgs),
    /// Simulate a linear-Gaussian measurement of a ground-truth image.
    Simulate(SimulateArgs),
    /// Draw posterior samples by DPI or one of the guided baselines.
    SamplePosterior(SamplePosteriorArgs),
    /// Restoration metrics and moment maps for a posterior sample set.
    Eval(EvalArgs),
    /// Grid-searched baselines vs DPI on the 2-D bimodal target.
    #[command(name = "bench-2d")]
    Bench2d(Bench2dArgs),
}

/// Parses `args` (including the binary name) and runs the command;
/// the in-process entry point the CLI tests drive.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // a second initialization in the same process is harmless: the pool
        // is already sized, so the cap simply stays as it was
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let root = cli.out_root.as_path();
    match &cli.command {
        Command::FitGaussian(a) => cmd_fit_gaussian(a, root),
        Command::TrainScore(a) => cmd_train_score(a, root),
        Command::Logprob(a) => cmd_logprob(a, root),
        Command::GradCheck(a) => cmd_grad_check(a, root),
        Command::BenchSolvers(a) => cmd_bench_solvers(a, root),
        Command::TraceStudy(a) => cmd_trace_study(a, root),
        Command::Simulate(a) => cmd_simulate(a, root),
        Command::SamplePosterior(a) => cmd_sample_posterior(a, root),
        Command::Eval(a) => cmd_eval(a, root),
        Command::Bench2d(a) => cmd_bench_2d(a, root),
    }
}

// ---------------------------------------------------------------------------
// Shared argument bundles.

/// Score-field source: a trained checkpoint, or a Gaussian prior file turned
/// into the closed-form field (which then doubles as the comparison oracle).
#[derive(Args, Debug)]
pub struct FieldArgs {
    /// Trained score checkpoint (from train-score).
    #[arg(long)]
    pub score: Option<PathBuf>,
    /// Gaussian prior file; builds the closed-form score field and serves
    /// as the oracle where the command compares against one.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Terminal noise scale when building a field from --prior.
    #[arg(long, default_value_t = 10.0)]
    pub sigma_max: f64,
}

impl FieldArgs {
    fn load(&self) -> Result<(ScoreField, Option<GaussianPrior>)> {
        let oracle = self.prior.as_ref().map(|p| GaussianPrior::load(p)).transpose()?;
        let field = match (&self.score, &oracle) {
            (Some(path), _) => ScoreField::load(path)?,
            (None, Some(prior)) => ScoreField::analytic_gaussian(
                prior.clone(),
                DiffusionSpec::new(self.sigma_max)?,
            )?,
            (None, None) => {
                return Err(Error::config("need --score or --prior to build a score field"))
            }
        };
        Ok((field, oracle))
    }
}

#[derive(Args, Debug)]
pub struct SolverArgs {
    /// ODE method: euler|heun|bosh3|tsit5|dopri5|dopri8.
    #[arg(long, default_value = "dopri5")]
    pub solver: String,
    #[arg(long, default_value_t = 1e-5)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub atol: f64,
    /// Fixed step size (accepts fractions like 1/1024); switches off
    /// adaptive step control.
    #[arg(long)]
    pub fixed_dt: Option<String>,
}

impl SolverArgs {
    fn build(&self) -> Result<SolverConfig> {
        let mut cfg =
            SolverConfig::new(Method::from_name(&self.solver)?).with_tol(self.rtol, self.atol);
        if let Some(s) = &self.fixed_dt {
            cfg.fixed_dt = Some(parse_ratio(s)?);
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Hutchinson probe count; 0 selects the exact basis-sweep divergence.
    #[arg(long, default_value_t = 0)]
    pub probes: usize,
    /// Probe distribution: rademacher|gaussian.
    #[arg(long, default_value = "rademacher")]
    pub probe_dist: String,
}

impl ProbeArgs {
    fn estimator(&self, seed: u64) -> Result<DivEstimator> {
        if self.probes == 0 {
            Ok(DivEstimator::Exact)
        } else {
            Ok(DivEstimator::Hutchinson {
                probes: self.probes,
                dist: ProbeDist::from_name(&self.probe_dist)?,
                seed,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Run directories and config resolution.

struct Run {
    dir: PathBuf,
    manifest: BTreeMap<String, String>,
}

impl Run {
    fn create(root: &Path, command: &str, seed: u64) -> Result<Run> {
        let dir = io::create_run_dir(root, command, seed)?;
        let mut manifest = BTreeMap::new();
        manifest.insert("command".to_string(), command.to_string());
        manifest.insert("seed".to_string(), seed.to_string());
        Ok(Run { dir, manifest })
    }

    fn record(&mut self, key: &str, value: impl std::fmt::Display) {
        self.manifest.insert(key.to_string(), value.to_string());
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn finish(self) -> Result<PathBuf> {
        io::write_manifest(&self.dir, &self.manifest)?;
        println!("run dir: {}", self.dir.display());
        Ok(self.dir)
    }
}

/// Key=value config file merged with explicit flags (flags win). Every key
/// the command reads lands in the manifest with its resolved value; keys the
/// command never asked for are reported as typos.
struct Cfg {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

impl Cfg {
    fn load(path: Option<&PathBuf>) -> Result<Cfg> {
        let file = match path {
            Some(p) => io::read_config(p)?,
            None => BTreeMap::new(),
        };
        Ok(Cfg { file, used: BTreeSet::new(), resolved: BTreeMap::new() })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.file.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn f64(&mut self, key: &str, flag: Option<f64>, default: f64) -> Result<f64> {
        let v = match (flag, self.raw(key)) {
            (Some(f), _) => f,
            (None, Some(s)) => s.trim().parse().map_err(|_| {
                Error::config(format!("config {key}: cannot parse '{s}' as a number"))
            })?,
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), format!("{v}"));
        Ok(v)
    }

    fn usize(&mut self, key: &str, flag: Option<usize>, default: usize) -> Result<usize> {
        let v = match (flag, self.raw(key)) {
            (Some(f), _) => f,
            (None, Some(s)) => s.trim().parse().map_err(|_| {
                Error::config(format!("config {key}: cannot parse '{s}' as an integer"))
            })?,
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), format!("{v}"));
        Ok(v)
    }

    fn string(&mut self, key: &str, flag: Option<&str>, default: &str) -> Result<String> {
        let v = match (flag, self.raw(key)) {
            (Some(f), _) => f.to_string(),
            (None, Some(s)) => s,
            (None, None) => default.to_string(),
        };
        self.resolved.insert(key.to_string(), v.clone());
        Ok(v)
    }

    fn finish(self, run: &mut Run) -> Result<()> {
        let unused: Vec<String> =
            self.file.keys().filter(|k| !self.used.contains(*k)).cloned().collect();
        if !unused.is_empty() {
            return Err(Error::config(format!(
                "config file: unrecognized keys: {}",
                unused.join(", ")
            )));
        }
        run.manifest.extend(self.resolved);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Small parsers.

/// `0.25` or `1/4092`.
fn parse_ratio(s: &str) -> Result<f64> {
    let t = s.trim();
    let bad = || Error::config(format!("cannot parse '{t}' as a step size"));
    if let Some((num, den)) = t.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|_| bad())?;
        let d: f64 = den.trim().parse().map_err(|_| bad())?;
        if d == 0.0 {
            return Err(bad());
        }
        Ok(n / d)
    } else {
        t.parse().map_err(|_| bad())
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("cannot parse '{v}' as an integer")))
        })
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("cannot parse '{v}' as a number")))
        })
        .collect()
}

/// `ky,kx;ky,kx;...`
fn parse_freq_list(s: &str) -> Result<Vec<(i64, i64)>> {
    s.split(';')
        .map(|pair| {
            let (a, b) = pair
                .split_once(',')
                .ok_or_else(|| Error::config(format!("bad frequency pair '{pair}'")))?;
            let ky = a
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad frequency '{a}'")))?;
            let kx = b
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad frequency '{b}'")))?;
            Ok((ky, kx))
        })
        .collect()
}

/// `name` or `name:dt` entries, comma-separated.
fn parse_solver_list(s: &str, rtol: f64, atol: f64) -> Result<Vec<SolverConfig>> {
    s.split(',')
        .map(|item| {
            let item = item.trim();
            let (name, dt) = match item.split_once(':') {
                Some((n, d)) => (n.trim(), Some(d)),
                None => (item, None),
            };
            let mut cfg = SolverConfig::new(Method::from_name(name)?).with_tol(rtol, atol);
            if let Some(d) = dt {
                cfg.fixed_dt = Some(parse_ratio(d)?);
            }
            Ok(cfg)
        })
        .collect()
}

/// Rank-1 files become a single row; rank-2 files one point per row.
fn read_points(path: &Path) -> Result<Array2<f64>> {
    let (dims, data) = io::read_array(path)?;
    let shape = match dims.len() {
        1 => (1, dims[0]),
        2 => (dims[0], dims[1]),
        r => {
            return Err(Error::config(format!(
                "{}: expected a rank-1 or rank-2 array, got rank {r}",
                path.display()
            )))
        }
    };
    Array2::from_shape_vec(shape, data).map_err(|e| Error::config(e.to_string()))
}

/// Any rank, flattened row-major (images stay in their stored order).
fn read_flat(path: &Path) -> Result<Vec<f64>> {
    Ok(io::read_array(path)?.1)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

// ---------------------------------------------------------------------------
// fit-gaussian

#[derive(Args, Debug)]
pub struct FitGaussianArgs {
    /// Sample matrix (SPARR1 rank-2, rows are samples).
    #[arg(long)]
    pub samples: PathBuf,
    /// Diagonal regularization added to the fitted covariance.
    #[arg(long, default_value_t = 0.0)]
    pub precond: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file name inside the run directory.
    #[arg(long, default_value = "prior.bin")]
    pub out: String,
}

fn cmd_fit_gaussian(a: &FitGaussianArgs, root: &Path) -> Result<()> {
    let mut run = Run::create(root, "fit-gaussian", a.seed)?;
    let samples = io::read_matrix(&a.samples)?;
    let prior = fit_gaussian(&samples, a.precond)?;
    let out = run.path(&a.out);
    prior.save(&out)?;
    run.record("samples", a.samples.display());
    run.record("precond", a.precond);
    run.record("n_samples", samples.nrows());
    run.record("dim", prior.dim());
    run.record("out", out.display());
    println!(
        "fitted a {}-dim Gaussian prior from {} samples -> {}",
        prior.dim(),
        samples.nrows(),
        out.display()
    );
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train-score

#[derive(Args, Debug)]
pub struct TrainScoreArgs {
    /// Training matrix (rows are samples).
    #[arg(long)]
    pub data: PathBuf,
    /// Expected data dimension; checked against the file when given.
    #[arg(long)]
    pub dim: Option<usize>,
    /// key=value config: hidden, freqs, sigma_max, lr, batch, steps, clip.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hidden widths, comma-separated.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Sinusoidal time-feature frequencies.
    #[arg(long)]
    pub freqs: Option<usize>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Gradient-clipping norm; 0 disables clipping.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "score.bin")]
    pub out: String,
}

fn cmd_train_score(a: &TrainScoreArgs, root: &Path) -> Result<()> {
    let mut run = Run::create(root, "train-score", a.seed)?;
    let mut cfg = Cfg::load(a.config.as_ref())?;
    let data = io::read_matrix(&a.data)?;
    if let Some(d) = a.dim {
        if data.ncols() != d {
            return Err(Error::config(format!(
                "--dim {d} but data has {} columns",
                data.ncols()
            )));
        }
    }
    let hidden = parse_usize_list(&cfg.string("hidden", a.hidden.as_deref(), "128,128")?)?;
    let freqs = cfg.usize("freqs", a.freqs, 4)?;
    let sigma_max = cfg.f64("sigma_max", a.sigma_max, 10.0)?;
    let lr = cfg.f64("lr", a.lr, 1e-3)?;
    let batch = cfg.usize("batch", a.batch, 128)?;
    let steps = cfg.usize("steps", a.steps, 2000)?;
    let clip = cfg.f64("clip", a.clip, 0.0)?;
    cfg.finish(&mut run)?;

    let spec = MlpSpec { hidden, freqs };
    let mut opt = OptimizerConfig::new(lr, batch, steps);
    if clip > 0.0 {
        opt.clip_norm = Some(clip);
    }
    let trained = train_dsm(&spec, &data, DiffusionSpec::new(sigma_max)?, &opt, a.seed)?;
    let out = run.path(&a.out);
    trained.field.save(&out)?;
    let loss_rows: Vec<Vec<f64>> = trained
        .loss_trace
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i as f64, *l])
        .collect();
    io::write_csv(&run.path("loss.csv"), &["step", "loss"], &loss_rows)?;
    run.record("data", a.data.display());
    run.record("n_samples", data.nrows());
    run.record("dim", data.ncols());
    run.record("out", out.display());
    println!(
        "trained a {}-dim score network for {steps} steps (final loss {:.4}) -> {}",
        data.ncols(),
        trained.loss_trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// logprob

#[derive(Args, Debug)]
pub struct LogprobArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    /// Evaluation points: rank-1 (one point) or rank-2 (one per row).
    #[arg(long)]
    pub images: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub probes: ProbeArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "logprob.csv")]
    pub out: String,
}

fn cmd_logprob(a: &LogprobArgs, root: &Path) -> Result<()> {
    let mut run = Run::create(root, "logprob", a.seed)?;
    let (field, _) = a.field.load()?;
    let pts = read_points(&a.images)?;
    if pts.ncols() != field.dim() {
        return Err(Error::config(format!(
            "points have dim {}, field has {}",
            pts.ncols(),
            field.dim()
        )));
    }
    let solver = a.solver.build()?;
    let est = a.probes.estimator(a.seed)?;
    let mut rows = Vec::with_capacity(pts.nrows());
    for (i, row) in pts.rows().into_iter().enumerate() {
        let x: Vec<f64> = row.to_vec();
        let r = density::logprob(&field, &x, &solver, &est)?;
        rows.push(vec![
            i as f64,
            r.logp,
            r.nfe as f64,
            r.steps_accepted as f64,
            r.steps_rejected as f64,
        ]);
    }
    let out = run.path(&a.out);
    io::write_csv(&out, &["index", "logp", "nfe", "steps_accepted", "steps_rejected"], &rows)?;
    let mean_logp = rows.iter().map(|r| r[1]).sum::<f64>() / rows.len() as f64;
    let mean_nfe = rows.iter().map(|r| r[2]).sum::<f64>() / rows.len() as f64;
    run.record("images", a.images.display());
    run.record("n_points", pts.nrows());
    run.record("solver", &a.solver.solver);
    run.record("probes", a.probes.probes);
    run.record("out", out.display());
    println!(
        "log-probability of {} points: mean {mean_logp:.4} ({mean_nfe:.0} field evals each) -> {}",
        pts.nrows(),
        out.display()
    );
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// grad-check

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    #[arg(long)]
    pub images: PathBuf,
    /// adjoint|backprop (backprop needs --fixed-dt).
    #[arg(long, default_value = "adjoint")]
    pub engine: String,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub probes: ProbeArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "grad.csv")]
    pub out: String,
}

fn cmd_grad_check(a: &GradCheckArgs, root: &Path) -> Result<()> {
    let mut run = Run::create(root, "grad-check", a.seed)?;
    let (field, oracle) = a.field.load()?;
    let pts = read_points(&a.images)?;
    if pts.ncols() != field.dim() {
        return Err(Error::config(format!(
            "points have dim {}, field has {}",
            pts.ncols(),
            field.dim()
        )));
    }
    let engine = GradEngine::from_name(&a.engine)?;
    let solver = a.solver.build()?;
    let est = a.probes.estimator(a.seed)?;
    let mut rows = Vec::with_capacity(pts.nrows());
    let mut cosines = Vec::new();
    for (i, row) in pts.rows().into_iter().enumerate() {
        let x: Vec<f64> = row.to_vec();
        let r = density::grad_logprob(&field, &x, &solver, &est, engine)?;
        let mut out_row = vec![i as f64, r.logp, r.nfe as f64, l2_norm(&r.grad)];
        if let Some(prior) = &oracle {
            let cd = eval::cosine_distance(&r.grad, &prior.grad_logpdf(&x))?;
            cosines.push(cd);
            out_row.push(cd);
        }
        rows.push(out_row);
    }
    let header: Vec<&str> = if oracle.is_some() {
        vec!["index", "logp", "nfe", "grad_norm", "cosine_vs_oracle"]
    } else {
        vec!["index", "logp", "nfe", "grad_norm"]
    };
    let out = run.path(&a.out);
    io::write_csv(&out, &header, &rows)?;
    run.record("images", a.images.display());
    run.record("engine", &a.engine);
    run.record("out", out.display());
    if !cosines.is_empty() {
        let med = median(cosines);
        run.record("median_cosine_vs_oracle", med);
        println!("median cosine distance vs oracle: {med:.3e}");
    }
    println!("gradients of {} points -> {}", pts.nrows(), out.display());
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-solvers

#[derive(Args, Debug)]
pub struct BenchSolversArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    /// ODE-sampler draws scored by every solver.
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    /// Solver list: `name` or `name:dt` entries, comma-separated.
    #[arg(long, default_value = "euler:1/4092,heun,bosh3,tsit5,dopri5,dopri8")]
    pub solvers: String,
    /// Tolerances for the adaptive entries.
    #[arg(long, default_value_t = 1e-5)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub atol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Basename for the emitted .csv/.md table.
    #[arg(long, default_value = "solvers")]
    pub out: String,
}

fn cmd_bench_solvers(a: &BenchSolversArgs, root: &Path) -> Result<()> {
    let mut run = Run::create(root, "bench-solvers", a.seed)?;
    let (field, oracle) = a.field.load()?;
    let oracle = oracle
        .ok_or_else(|| Error::config("bench-solvers needs --prior as the log-density oracle"))?;
    let solvers = parse_solver_list(&a.solvers, a.rtol, a.atol)?;
    let rows = eval::bench_solvers(&field, |x| Ok(oracle.logpdf(x)), &solvers, a.n, a.seed)?;
    let cells = eval::solver_table_strings(&rows);
    let csv = run.path(&format!("{}.csv", a.out));
    eval::write_string_csv(&csv, &eval::SOLVER_TABLE_HEADER, &cells)?;
    let md = eval::format_markdown_table(&eval::SOLVER_TABLE_HEADER, &cells);
    std::fs::write(run.path(&format!("{}.md", a.out)), &md)?;
    run.record("n", a.n);
    run.record("solvers", &a.solvers);
    run.record("out", csv.display());
    print!("{md}");
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// trace-study

#[derive(Args, Debug)]
pub struct TraceStudyArgs {
    #[command(flatten)]
    pub field: FieldArgs,
    /// Evaluation point (rank-1 array file).
    #[arg(long)]
    pub image: PathBuf,
    /// Probe counts, comma-separated.
    #[arg(long = "K", default_value = "1,2,4,8,16,32,64,128")]
    pub k: String,
    /// Independent probe seeds per count.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// rademacher|gaussian.
    #[arg(long, default_value = "rademacher")]
    pub probe_dist: String,
    /// Also measure the adjoint gradient's spread (slower).
    #[arg(long)]
    pub grad: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "trace.csv")]
    pub out: String,
}

fn cmd_trace_study(a: &TraceStudyArgs, root: &Path) -> Result<()> {
    let mut run = Run::create(root, "trace-study", a.seed)?;
    let (field, _) = a.field.load()?;
    let pts = read_points(&a.image)?;
    if pts.nrows() != 1 || pts.ncols() != field.dim() {
        return Err(Error::config(format!(
            "trace-study wants a single point of dim {}, got {}x{}",
            field.dim(),
            pts.nrows(),
            pts.ncols()
        )));
    }
    let x: Vec<f64> = pts.row(0).to_vec();
    let counts = parse_usize_list(&a.k)?;
    let dist = ProbeDist::from_name(&a.probe_dist)?;
    let solver = a.solver.build()?;
    let stats =
        density::grad_variance_study(&field, &x, &solver, &counts, a.trials, dist, a.seed, a.grad)?;
    let mut rows = Vec::with_capacity(stats.len());
    for s in &stats {
        let mut row = vec![s.probes as f64, s.trials as f64, s.logp_mean, s.logp_std];
        if a.grad {
            row.push(s.grad_median_rel_std.unwrap_or(f64::NAN));
        }
        rows.push(row);
    }
    let header: Vec<&str> = if a.grad {
        vec!["probes", "trials", "logp_mean", "logp_std", "grad_median_rel_std"]
    } else {
        vec!["probes", "trials", "logp_mean", "logp_std"]
    };
    let out = run.path(&a.out);
    io::write_csv(&out, &header, &rows)?;
    for s in &stats {
        println!(
            "K = {:>4}: logp {:.4} +- {:.4}",
            s.probes, s.logp_mean, s.logp_std
        );
    }
    run.record("image", a.image.display());
    run.record("K", &a.k);
    run.record("trials", a.trials);
    run.record("out", out.display());
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Forward operator: denoise|lowfreq|sparsefreq.
    #[arg(long)]
    pub forward: String,
    /// Image side for DFT operators.
    #[arg(long)]
    pub side: Option<usize>,
    /// Full dimension for the denoising operator (default: truth length).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Fraction of DFT coefficients kept (lowfreq).
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Frequency list `ky,kx;ky,kx` (sparsefreq).
    #[arg(long)]
    pub freqs: Option<String>,
    /// Noise std (complex magnitude for DFT operators).
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Treat sigma as per real component instead of complex magnitude.
    #[arg(long)]
    pub per_component: bool,
    /// Ground-truth array file (flattened row-major).
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "meas.bin")]
    pub out: String,
}

fn cmd_simulate(a: &SimulateArgs, root: &Path) -> Result<()> {
    let mut run = Run::create(root, "simulate", a.seed)?;
    let truth = read_flat(&a.truth)?;
    let need_side = || {
        a.side
            .ok_or_else(|| Error::config(format!("--forward {} needs --side", a.forward)))
    };
    let header = match a.forward.as_str() {
        "denoise" => io::MeasurementHeader {
            kind: "denoise".to_string(),
            dim_or_side: a.dim.unwrap_or(truth.len()),
            fraction: None,
            freqs: None,
            sigma: a.sigma,
            per_component_noise: true,
            seed: a.seed,
        },
        "lowfreq" => io::MeasurementHeader {
            kind: "lowfreq".to_string(),
            dim_or_side: need_side()?,
            fraction: Some(
                a.fraction
                    .ok_or_else(|| Error::config("--forward lowfreq needs --fraction"))?,
            ),
            freqs: None,
            sigma: a.sigma,
            per_component_noise: a.per_component,
            seed: a.seed,
        },
        "sparsefreq" => io::MeasurementHeader {
            kind: "sparsefreq".to_string(),
            dim_or_side: need_side()?,
            fraction: None,
            freqs: Some(parse_freq_list(a.freqs.as_deref().ok_or_else(|| {
                Error::config("--forward sparsefreq needs --freqs")
            })?)?),
            sigma: a.sigma,
            per_component_noise: a.per_component,
            seed: a.seed,
        },
        other => {
            return Err(Error::config(format!(
                "unknown forward operator '{other}' (denoise|lowfreq|sparsefreq)"
            )))
        }
    };
    let model = header.build_model()?;
    if truth.len() != model.op.in_dim() {
        return Err(Error::config(format!(
            "truth has {} entries but the operator wants {}",
            truth.len(),
            model.op.in_dim()
        )));
    }
    let y = inverse::simulate_measurement(&model, &truth, a.seed);
    let out = run.path(&a.out);
    io::write_measurement(&out, &header, &y)?;
    if model.op.is_complex() {
        println!(
            "measured {} complex coefficients ({} real components) -> {}",
            model.op.out_dim() / 2,
            model.op.out_dim(),
            out.display()
        );
    } else {
        println!(
            "measured {} components -> {}",
            model.op.out_dim(),
            out.display()
        );
    }
    run.record("forward", &a.forward);
    run.record("truth", a.truth.display());
    run.record("sigma", a.sigma);
    run.record("out_dim", model.op.out_dim());
    run.record("out", out.display());
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sample-posterior

#[derive(Args, Debug)]
pub struct SamplePosteriorArgs {
    /// dpi|proj|ald|dps.
    #[arg(long)]
    pub method: String,
    #[command(flatten)]
    pub field: FieldArgs,
    /// Measurement file from `simulate`.
    #[arg(long)]
    pub meas: PathBuf,
    /// key=value config file with the method hyperparameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Posterior samples to draw (for dpi: before postprocessing).
    #[arg(long, default_value_t = 128)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    // --- dpi ---
    /// Coupling layers in the variational flow.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    /// Optimization step budget (plateau detection may stop earlier).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Hutchinson probes for the prior term; 0 = exact divergence.
    #[arg(long)]
    pub probes: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    // --- baselines ---
    /// Projection weight (proj).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Likelihood weight scale (ald).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// annealed|renormalize (ald).
    #[arg(long)]
    pub gamma_schedule: Option<String>,
    /// Guidance scale (dps).
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Reverse-SDE steps / annealing levels.
    #[arg(long)]
    pub sampler_steps: Option<usize>,
    /// ALD Langevin step relative to sigma_i^2.
    #[arg(long)]
    pub step_rel: Option<f64>,
    /// ALD Langevin iterations per level.
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long, default_value = "samples.bin")]
    pub out: String,
}

/// Outlier cutoff applied to DPI sample archives (restoration protocol).
const DPI_POSTPROCESS_THRESHOLD: f64 = 2.0;

fn cmd_sample_posterior(a: &SamplePosteriorArgs, root: &Path) -> Result<()> {
    let mut run = Run::create(root, "sample-posterior", a.seed)?;
    let mut cfg = Cfg::load(a.config.as_ref())?;
    let (field, _) = a.field.load()?;
    let (model, header) = io::read_measurement(&a.meas)?;
    if model.op.in_dim() != field.dim() {
        return Err(Error::config(format!(
            "measurement operator wants dim {}, field has {}",
            model.op.in_dim(),
            field.dim()
        )));
    }
    run.record("method", &a.method);
    run.record("meas", a.meas.display());
    run.record("operator", &header.kind);
    run.record("n", a.n);
    let out = run.path(&a.out);

    if a.method == "dpi" {
        let layers = cfg.usize("layers", a.layers, 16)?;
        let batch = cfg.usize("batch", a.batch, 64)?;
        let lr = cfg.f64("lr", a.lr, 2e-4)?;
        let clip = cfg.f64("clip", a.clip, 1.0)?;
        let steps = cfg.usize("steps", a.steps, 20_000)?;
        let probes = cfg.usize("probes", a.probes, 16)?;
        cfg.finish(&mut run)?;
        let dpi = DpiConfig {
            batch,
            lr,
            clip_norm: clip,
            steps,
            seed: a.seed,
            prior: PriorKind::Score,
            elbo_probes: if probes == 0 {
                DivEstimator::Exact
            } else {
                DivEstimator::Hutchinson {
                    probes,
                    dist: ProbeDist::Rademacher,
                    seed: a.seed,
                }
            },
            solver: a.solver.build()?,
        };
        let flow = FlowModel::new(field.dim(), layers, a.seed)?;
        let prior = ScorePrior::new(&field, dpi.solver, dpi.elbo_probes.clone());
        let likelihood = GaussianLikelihood::new(&model);
        let fit = vi::fit(flow, &prior, &likelihood, &dpi, None)?;
        let (raw, _) = fit.flow.sample_and_logq(a.n, a.seed)?;
        let kept = vi::postprocess_samples(&raw, DPI_POSTPROCESS_THRESHOLD)?;
        io::write_matrix(&out, &kept)?;
        io::write_csv(&run.path("trace.csv"), &vi::TRACE_HEADER, &vi::trace_rows(&fit.trace))?;
        fit.flow.save(&run.path("flow.bin"))?;
        let last = fit.trace.last().map(|(_, t)| t.loss).unwrap_or(f64::NAN);
        run.record("steps_run", fit.steps_run);
        run.record("kept", kept.nrows());
        run.record("out", out.display());
        println!(
            "dpi: {} steps (final loss {last:.4}); kept {}/{} samples -> {}",
            fit.steps_run,
            kept.nrows(),
            a.n,
            out.display()
        );
    } else {
        let method = BaselineMethod::from_name(&a.method)?;
        let bc = BaselineConfig {
            method,
            lambda_w: cfg.f64("lambda", a.lambda, 1.0)?,
            gamma: cfg.f64("gamma", a.gamma, 1.0)?,
            gamma_schedule: match cfg
                .string("gamma_schedule", a.gamma_schedule.as_deref(), "annealed")?
                .as_str()
            {
                "annealed" => GammaSchedule::Annealed,
                "renormalize" => GammaSchedule::Renormalize,
                other => {
                    return Err(Error::config(format!(
                        "unknown gamma schedule '{other}' (annealed|renormalize)"
                    )))
                }
            },
            zeta: cfg.f64("zeta", a.zeta, 0.5)?,
            n_steps: cfg.usize("sampler_steps", a.sampler_steps, 256)?,
            seed: a.seed,
            step_rel: cfg.f64("step_rel", a.step_rel, 0.2)?,
            inner_steps: cfg.usize("inner_steps", a.inner_steps, 5)?,
        };
        cfg.finish(&mut run)?;
        let samples = match method {
            BaselineMethod::SdeProj => baselines::sde_proj_sample(&field, &model, &bc, a.n)?,
            BaselineMethod::Ald => baselines::ald_sample(&field, Some(&model), &bc, a.n)?,
            BaselineMethod::Dps => baselines::dps_sample(&field, &model, &bc, a.n)?,
        };
        io::write_matrix(&out, &samples)?;
        run.record("out", out.display());
        println!("{}: {} samples -> {}", method.name(), a.n, out.display());
    }
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Posterior sample matrix.
    #[arg(long)]
    pub samples: PathBuf,
    /// Ground-truth array (flattened row-major).
    #[arg(long)]
    pub truth: PathBuf,
    /// Gaussian posterior oracle file; adds a KL column (moment-matched
    /// Gaussian fit of the samples vs the oracle).
    #[arg(long)]
    pub posterior_oracle: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub data_range: f64,
    /// Image side for SSIM windows and PGM export (default: sqrt(dim) when
    /// the dimension is a perfect square, else a 1-row layout).
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "metrics.csv")]
    pub out: String,
}

fn cmd_eval(a: &EvalArgs, root: &Path) -> Result<()> {
    let mut run = Run::create(root, "eval", a.seed)?;
    let samples = io::read_matrix(&a.samples)?;
    let truth = read_flat(&a.truth)?;
    let d = truth.len();
    if samples.ncols() != d {
        return Err(Error::config(format!(
            "samples have dim {}, truth has {d}",
            samples.ncols()
        )));
    }
    if samples.nrows() == 0 {
        return Err(Error::config("eval: empty sample set"));
    }
    let n = samples.nrows() as f64;
    let mean: Vec<f64> = (0..d).map(|j| samples.column(j).sum() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let m = mean[j];
            let var = samples.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                / (n - 1.0).max(1.0);
            var.sqrt()
        })
        .collect();

    let (rows, cols) = match a.side {
        Some(s) => {
            if s * s != d {
                return Err(Error::config(format!("--side {s} does not square to dim {d}")));
            }
            (s, s)
        }
        None => {
            let s = (d as f64).sqrt().round() as usize;
            if s * s == d {
                (s, s)
            } else {
                (1, d)
            }
        }
    };
    let metrics = eval::restoration_metrics(&mean, &truth, rows, cols, a.data_range)?;
    let truth_norm = l2_norm(&truth);
    let err: Vec<f64> = mean.iter().zip(truth.iter()).map(|(a, b)| a - b).collect();
    let mean_rel_l2 = if truth_norm > 0.0 { l2_norm(&err) / truth_norm } else { f64::NAN };

    let mut header = vec!["mse", "psnr", "ssim", "mean_rel_l2"];
    let mut row = vec![metrics.mse, metrics.psnr, metrics.ssim, mean_rel_l2];
    if let Some(oracle_path) = &a.posterior_oracle {
        let oracle = GaussianPrior::load(oracle_path)?;
        let fitted = fit_gaussian(&samples, 0.0)?;
        let kl = gaussian_kl(&fitted, &oracle)?;
        header.push("kl_fit_vs_oracle");
        row.push(kl);
        run.record("posterior_oracle", oracle_path.display());
    }
    let out = run.path(&a.out);
    io::write_csv(&out, &header, &[row.clone()])?;
    io::write_vector(&run.path("mean.bin"), &mean)?;
    io::write_vector(&run.path("std.bin"), &std)?;
    if rows > 1 {
        io::write_pgm(&run.path("mean.pgm"), rows, cols, &mean)?;
        io::write_pgm(&run.path("std.pgm"), rows, cols, &std)?;
    }
    run.record("samples", a.samples.display());
    run.record("n_samples", samples.nrows());
    run.record("out", out.display());
    println!(
        "mse {:.5}  psnr {:.2}  ssim {:.4}  mean rel L2 {:.4}{}",
        metrics.mse,
        metrics.psnr,
        metrics.ssim,
        mean_rel_l2,
        row.get(4).map(|kl| format!("  kl {kl:.4}")).unwrap_or_default()
    );
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-2d

#[derive(Args, Debug)]
pub struct Bench2dArgs {
    /// Benchmark target (only `bimodal` is defined).
    #[arg(long, default_value = "bimodal")]
    pub target: String,
    /// Trained 2-D score checkpoint; omitted, one is trained on the spot.
    #[arg(long)]
    pub score: Option<PathBuf>,
    /// Grid for the projection weight lambda.
    #[arg(long, default_value = "0.1,0.3,0.5,0.7,1.0")]
    pub grid_proj: String,
    /// Grid for the ALD gamma scale.
    #[arg(long, default_value = "0.1,0.3,1,3,10")]
    pub grid_ald: String,
    /// Grid for the DPS zeta scale.
    #[arg(long, default_value = "0.1,0.3,1,3,10")]
    pub grid_dps: String,
    /// Samples per method for the KDE-based KL.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Reverse-SDE steps for the baselines.
    #[arg(long, default_value_t = 128)]
    pub sampler_steps: usize,
    /// Measurement noise std for y = x0 + x1 + noise.
    #[arg(long, default_value_t = eval::BENCH_2D_SIGMA)]
    pub sigma: f64,
    /// Measured data value.
    #[arg(long, default_value_t = eval::BENCH_2D_DATA)]
    pub y: f64,
    /// Coupling layers in the variational flow.
    #[arg(long, default_value_t = 16)]
    pub layers: usize,
    #[arg(long, default_value_t = 2000)]
    pub dpi_steps: usize,
    #[arg(long, default_value_t = 32)]
    pub dpi_batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub dpi_lr: f64,
    /// Transport solver for the DPI prior term (`name` or `name:dt`).
    #[arg(long, default_value = "heun:1/64")]
    pub dpi_solver: String,
    /// Training steps when no --score is given.
    #[arg(long, default_value_t = 3000)]
    pub train_steps: usize,
    /// Training-set size drawn from the mixture when no --score is given.
    #[arg(long, default_value_t = 4096)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Basename for the emitted .csv/.md table.
    #[arg(long, default_value = "bench2d")]
    pub out: String,
}

fn cmd_bench_2d(a: &Bench2dArgs, root: &Path) -> Result<()> {
    if a.target != "bimodal" {
        return Err(Error::config(format!("unknown benchmark target '{}'", a.target)));
    }
    let mut run = Run::create(root, "bench-2d", a.seed)?;
    let mixture = eval::GaussianMixture::bimodal_2d();
    let model = eval::bimodal_measurement(a.sigma, a.y)?;
    let posterior = mixture.posterior(&model)?;

    let field = match &a.score {
        Some(path) => ScoreField::load(path)?,
        None => {
            println!(
                "training a 2-D score network ({} samples, {} steps)...",
                a.train_samples, a.train_steps
            );
            let data = mixture.sample(a.train_samples, a.seed)?;
            let spec = MlpSpec { hidden: vec![48, 48], freqs: 4 };
            let mut opt = OptimizerConfig::new(1e-3, 64, a.train_steps);
            opt.clip_norm = Some(1.0);
            let trained = train_dsm(&spec, &data, DiffusionSpec::new(8.0)?, &opt, a.seed)?;
            trained.field.save(&run.path("score2d.bin"))?;
            trained.field
        }
    };

    let base = BaselineConfig {
        n_steps: a.sampler_steps,
        seed: a.seed,
        ..BaselineConfig::default()
    };
    let logp = |x: &[f64]| posterior.logpdf(x);
    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut grid_minima = Vec::new();
    for (method, grid_text) in [
        (BaselineMethod::SdeProj, &a.grid_proj),
        (BaselineMethod::Ald, &a.grid_ald),
        (BaselineMethod::Dps, &a.grid_dps),
    ] {
        let grid = parse_f64_list(grid_text)?;
        let mut cfg = base.clone();
        cfg.method = method;
        println!("grid-searching {} over {grid:?}...", method.name());
        let result =
            baselines::hyperparameter_grid_search(&field, &model, &cfg, &grid, eval::BENCH_2D_BANDWIDTH, &logp, a.n)?;
        for r in &result.rows {
            cells.push(vec![
                method.name().to_string(),
                format!("{}", r.value),
                r.kl.map_or_else(|| "diverged".to_string(), |kl| format!("{kl:.4}")),
            ]);
        }
        grid_minima.push((method.name(), result.best_kl));
    }

    println!("fitting DPI ({} layers, {} steps)...", a.layers, a.dpi_steps);
    let dpi_solver = parse_solver_list(&a.dpi_solver, 1e-5, 1e-5)?;
    let dpi = DpiConfig {
        batch: a.dpi_batch,
        lr: a.dpi_lr,
        clip_norm: 1.0,
        steps: a.dpi_steps,
        seed: a.seed,
        prior: PriorKind::Score,
        elbo_probes: DivEstimator::Exact,
        solver: dpi_solver[0],
    };
    let flow = FlowModel::new(2, a.layers, a.seed)?;
    let prior = ScorePrior::new(&field, dpi.solver, DivEstimator::Exact);
    let likelihood = GaussianLikelihood::new(&model);
    let fit = vi::fit(flow, &prior, &likelihood, &dpi, None)?;
    let (raw, _) = fit.flow.sample_and_logq(a.n, a.seed)?;
    let kept = vi::postprocess_samples(&raw, DPI_POSTPROCESS_THRESHOLD)?;
    let dpi_kl = eval::kde_kl(&kept, eval::BENCH_2D_BANDWIDTH, |x| posterior.logpdf(x))?.kl;
    cells.push(vec!["dpi".to_string(), "-".to_string(), format!("{dpi_kl:.4}")]);

    let header = ["method", "weight", "kl"];
    let csv = run.path(&format!("{}.csv", a.out));
    eval::write_string_csv(&csv, &header, &cells)?;
    let md = eval::format_markdown_table(&header, &cells);
    std::fs::write(run.path(&format!("{}.md", a.out)), &md)?;
    print!("{md}");
    for (name, best) in &grid_minima {
        let verdict = if dpi_kl < *best { "beats" } else { "does NOT beat" };
        println!("dpi ({dpi_kl:.4}) {verdict} {name}'s grid minimum ({best:.4})");
    }
    run.record("n", a.n);
    run.record("dpi_kl", dpi_kl);
    run.record("out", csv.display());
    run.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_parser_accepts_fractions_and_floats() {
        assert_eq!(parse_ratio("0.25").unwrap(), 0.25);
        assert_eq!(parse_ratio("1/4").unwrap(), 0.25);
        assert_eq!(parse_ratio(" 1 / 4092 ").unwrap(), 1.0 / 4092.0);
        assert!(parse_ratio("x").is_err());
        assert!(parse_ratio("1/0").is_err());
    }

    #[test]
    fn solver_list_parser_builds_fixed_and_adaptive_entries() {
        let list = parse_solver_list("euler:1/4092,dopri5", 1e-4, 1e-6).unwrap();
        assert_eq!(list.len(), 2);
        assert_eq!(list[0].method, Method::Euler);
        assert!((list[0].fixed_dt.unwrap() - 1.0 / 4092.0).abs() < 1e-15);
        assert_eq!(list[1].method, Method::Dopri5);
        assert_eq!(list[1].fixed_dt, None);
        assert_eq!(list[1].rtol, 1e-4);
        assert_eq!(list[1].atol, 1e-6);
        assert!(parse_solver_list("rk4", 1e-5, 1e-5).is_err());
    }

    #[test]
    fn freq_list_parser() {
        assert_eq!(parse_freq_list("0,1;1,-1").unwrap(), vec![(0, 1), (1, -1)]);
        assert!(parse_freq_list("0;1").is_err());
        assert!(parse_freq_list("a,b").is_err());
    }

    #[test]
    fn config_flags_override_file_values() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cfg.txt");
        std::fs::write(&path, "lr = 0.5\nbatch = 7\n").unwrap();
        let mut cfg = Cfg::load(Some(&path)).unwrap();
        // flag wins over file, file wins over default
        assert_eq!(cfg.f64("lr", Some(0.25), 1e-3).unwrap(), 0.25);
        assert_eq!(cfg.usize("batch", None, 64).unwrap(), 7);
        assert_eq!(cfg.usize("steps", None, 100).unwrap(), 100);
        let mut run = Run {
            dir: tmp.path().to_path_buf(),
            manifest: BTreeMap::new(),
        };
        cfg.finish(&mut run).unwrap();
        assert_eq!(run.manifest.get("lr").unwrap(), "0.25");
        assert_eq!(run.manifest.get("batch").unwrap(), "7");
    }

    #[test]
    fn unrecognized_config_keys_are_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cfg.txt");
        std::fs::write(&path, "lr = 0.5\ntypo_key = 3\n").unwrap();
        let mut cfg = Cfg::load(Some(&path)).unwrap();
        cfg.f64("lr", None, 1e-3).unwrap();
        let mut run = Run {
            dir: tmp.path().to_path_buf(),
            manifest: BTreeMap::new(),
        };
        let err = cfg.finish(&mut run).unwrap_err();
        assert!(err.to_string().contains("typo_key"), "{err}");
    }

    #[test]
    fn point_reader_promotes_rank_one_files() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("v.bin");
        io::write_array(&path, &[3], &[1.0, 2.0, 3.0]).unwrap();
        let pts = read_points(&path).unwrap();
        assert_eq!(pts.shape(), &[1, 3]);
        io::write_array(&path, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let pts = read_points(&path).unwrap();
        assert_eq!(pts.shape(), &[2, 2]);
        assert_eq!(pts[(1, 0)], 3.0);
    }

    #[test]
    fn cli_parses_the_documented_invocations() {
        // clap wiring: the spec'd flag spellings must all resolve
        Cli::try_parse_from([
            "score-prior",
            "simulate",
            "--forward",
            "lowfreq",
            "--side",
            "16",
            "--fraction",
            "0.0625",
            "--sigma",
            "1.0",
            "--truth",
            "t.bin",
            "--seed",
            "3",
            "--out",
            "y.bin",
        ])
        .unwrap();
        Cli::try_parse_from([
            "score-prior",
            "sample-posterior",
            "--method",
            "dpi",
            "--score",
            "m.bin",
            "--meas",
            "y.bin",
            "--n",
            "128",
        ])
        .unwrap();
        Cli::try_parse_from([
            "score-prior",
            "trace-study",
            "--score",
            "m.bin",
            "--image",
            "x.bin",
            "--K",
            "1,2,4",
            "--trials",
            "50",
        ])
        .unwrap();
        Cli::try_parse_from(["score-prior", "bench-2d", "--target", "bimodal"]).unwrap();
        assert!(Cli::try_parse_from(["score-prior", "logprob", "--bogus-flag", "1"]).is_err());
    }
}
