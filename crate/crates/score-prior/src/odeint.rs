//! Explicit Runge–Kutta integrators with NFE accounting.
//!
//! Six methods are available: `euler`, `heun` (2nd order), `bosh3`
//! (Bogacki–Shampine 3(2)), `tsit5` (Tsitouras 5(4)), `dopri5`
//! (Dormand–Prince 5(4)) and `dopri8` (Hairer's DOP853: 8th-order
//! propagation with a combined 5th/3rd-order error estimate). All adaptive
//! methods are FSAL except `heun`; FSAL methods reuse the last stage of an
//! accepted step as the first stage of the next one, so `dopri5` costs
//! `6n + 1` evaluations over `n` fixed steps rather than `7n`.
//!
//! Step-size control is a plain integral controller:
//! `factor = safety * err_norm^(-1/(q+1))` clamped to `[0.2, 10]`, where `q`
//! is the order of the embedded error estimator and `err_norm` is the RMS of
//! the componentwise error divided by `atol + rtol * max(|y0|, |y1|)`; a
//! step is accepted when `err_norm <= 1`. The initial step comes from the
//! standard two-evaluation magnitude heuristic.
//!
//! Euler has no embedded companion, so in adaptive mode it is paired with a
//! Heun-style estimate (two stages, FSAL); fixed-step euler is the plain
//! one-stage method.

use crate::error::{Error, Result};

/// Integration method tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Euler,
    Heun,
    Bosh3,
    Tsit5,
    Dopri5,
    Dopri8,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Euler,
        Method::Heun,
        Method::Bosh3,
        Method::Tsit5,
        Method::Dopri5,
        Method::Dopri8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Heun => "heun",
            Method::Bosh3 => "bosh3",
            Method::Tsit5 => "tsit5",
            Method::Dopri5 => "dopri5",
            Method::Dopri8 => "dopri8",
        }
    }

    pub fn from_name(name: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == name)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown method '{name}' (expected euler|heun|bosh3|tsit5|dopri5|dopri8)"
                ))
            })
    }

    /// Order of the propagated solution.
    pub fn order(self) -> u32 {
        match self {
            Method::Euler => 1,
            Method::Heun => 2,
            Method::Bosh3 => 3,
            Method::Tsit5 | Method::Dopri5 => 5,
            Method::Dopri8 => 8,
        }
    }

    /// Order of the embedded error estimator (drives the controller
    /// exponent `1/(q+1)`).
    pub fn err_order(self) -> u32 {
        match self {
            Method::Euler | Method::Heun => 1,
            Method::Bosh3 => 2,
            Method::Tsit5 | Method::Dopri5 => 4,
            Method::Dopri8 => 7,
        }
    }

    /// Field evaluations per step once FSAL reuse is in effect.
    pub fn effective_stages(self, fixed: bool) -> usize {
        let tab = self.tableau(fixed);
        if tab.fsal {
            tab.stages() - 1
        } else {
            tab.stages()
        }
    }

    /// Butcher tableau backing this method. Euler has two: the one-stage
    /// scheme in fixed mode and a two-stage embedded pair in adaptive mode.
    pub fn tableau(self, fixed: bool) -> &'static Tableau {
        match self {
            Method::Euler => {
                if fixed {
                    &EULER
                } else {
                    &EULER_PAIR
                }
            }
            Method::Heun => &HEUN,
            Method::Bosh3 => &BOSH3,
            Method::Tsit5 => &TSIT5,
            Method::Dopri5 => &DOPRI5,
            Method::Dopri8 => &DOPRI8,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Explicit Butcher tableau with embedded error weights.
///
/// `a` holds the strictly lower-triangular rows for stages `2..=s`
/// (`a[i-1]` has `i` entries). `e` gives the error estimate directly as
/// `err = h * sum_i e[i] * k_i` (difference of the two embedded solutions);
/// `e3` is the companion third-order estimate used only by `dopri8`'s
/// combined error norm.
#[derive(Debug)]
pub struct Tableau {
    pub c: &'static [f64],
    pub a: &'static [&'static [f64]],
    pub b: &'static [f64],
    pub e: Option<&'static [f64]>,
    pub e3: Option<&'static [f64]>,
    pub fsal: bool,
}

impl Tableau {
    pub fn stages(&self) -> usize {
        self.c.len()
    }
}

static EULER: Tableau = Tableau {
    c: &[0.0],
    a: &[],
    b: &[1.0],
    e: None,
    e3: None,
    fsal: false,
};

/// Euler propagation with a Heun-style embedded estimate; the second stage
/// sits at the euler point, making the pair FSAL.
static EULER_PAIR: Tableau = Tableau {
    c: &[0.0, 1.0],
    a: &[&[1.0]],
    b: &[1.0, 0.0],
    e: Some(&[-0.5, 0.5]),
    e3: None,
    fsal: true,
};

static HEUN: Tableau = Tableau {
    c: &[0.0, 1.0],
    a: &[&[1.0]],
    b: &[0.5, 0.5],
    e: Some(&[-0.5, 0.5]),
    e3: None,
    fsal: false,
};

static BOSH3: Tableau = Tableau {
    c: &[0.0, 0.5, 0.75, 1.0],
    a: &[
        &[0.5],
        &[0.0, 0.75],
        &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0],
    ],
    b: &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0],
    e: Some(&[-5.0 / 72.0, 1.0 / 12.0, 1.0 / 9.0, -1.0 / 8.0]),
    e3: None,
    fsal: true,
};

static TSIT5: Tableau = Tableau {
    c: &[
        0.0,
        0.161,
        0.327,
        0.9,
        0.9800255409045097,
        1.0,
        1.0,
    ],
    a: &[
        &[0.161],
        &[-0.008480655492356989, 0.335480655492357],
        &[2.8971530571054935, -6.359448489975075, 4.3622954328695815],
        &[
            5.325864828439257,
            -11.748883564062828,
            7.4955393428898365,
            -0.09249506636175525,
        ],
        &[
            5.86145544294642,
            -12.92096931784711,
            8.159367898576159,
            -0.071584973281401,
            -0.028269050394068383,
        ],
        &[
            0.09646076681806523,
            0.01,
            0.4798896504144996,
            1.379008574103742,
            -3.290069515436081,
            2.324710524099774,
        ],
    ],
    b: &[
        0.09646076681806523,
        0.01,
        0.4798896504144996,
        1.379008574103742,
        -3.290069515436081,
        2.324710524099774,
        0.0,
    ],
    e: Some(&[
        -0.00178001105222577714,
        -0.0008164344596567469,
        0.007880878010261995,
        -0.1447110071732629,
        0.5823571654525552,
        -0.45808210592918697,
        0.015151515151515152,
    ]),
    e3: None,
    fsal: true,
};

static DOPRI5: Tableau = Tableau {
    c: &[0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0],
    a: &[
        &[0.2],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
        ],
        &[
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
        &[
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ],
    b: &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ],
    e: Some(&[
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ]),
    e3: None,
    fsal: true,
};

// DOP853: 12 propagation stages plus a 13th evaluation at the accepted
// point, represented here as a 13-stage FSAL tableau (the 13th row of `a`
// equals `b`, so the last stage lands exactly on the step result).
static DOPRI8: Tableau = Tableau {
    c: &[
        0.0,
        0.05260015195876773,
        0.0789002279381516,
        0.1183503419072274,
        0.2816496580927726,
        0.3333333333333333,
        0.25,
        0.3076923076923077,
        0.6512820512820513,
        0.6,
        0.8571428571428571,
        1.0,
        1.0,
    ],
    a: &[
        &[0.05260015195876773],
        &[0.0197250569845379, 0.0591751709536137],
        &[0.02958758547680685, 0.0, 0.08876275643042054],
        &[0.2413651341592667, 0.0, -0.8845494793282861, 0.924834003261792],
        &[
            0.037037037037037035,
            0.0,
            0.0,
            0.17082860872947386,
            0.12546768756682242,
        ],
        &[
            0.037109375,
            0.0,
            0.0,
            0.17025221101954405,
            0.06021653898045596,
            -0.017578125,
        ],
        &[
            0.03709200011850479,
            0.0,
            0.0,
            0.17038392571223998,
            0.10726203044637328,
            -0.015319437748624402,
            0.008273789163814023,
        ],
        &[
            0.6241109587160757,
            0.0,
            0.0,
            -3.3608926294469414,
            -0.868219346841726,
            27.59209969944671,
            20.154067550477894,
            -43.48988418106996,
        ],
        &[
            0.47766253643826434,
            0.0,
            0.0,
            -2.4881146199716677,
            -0.5902908268368428,
            21.230051448181193,
            15.279233632882423,
            -33.28821096898486,
            -0.020331201708508627,
        ],
        &[
            -0.9371424300859873,
            0.0,
            0.0,
            5.186372428844064,
            1.0914373489967295,
            -8.149787010746927,
            -18.52006565999696,
            22.739487099350505,
            2.4936055526796523,
            -3.0467644718982196,
        ],
        &[
            2.273310147516538,
            0.0,
            0.0,
            -10.53449546673725,
            -2.0008720582248625,
            -17.9589318631188,
            27.94888452941996,
            -2.8589982771350235,
            -8.87285693353063,
            12.360567175794303,
            0.6433927460157636,
        ],
        &[
            0.054293734116568765,
            0.0,
            0.0,
            0.0,
            0.0,
            4.450312892752409,
            1.8915178993145003,
            -5.801203960010585,
            0.3111643669578199,
            -0.1521609496625161,
            0.20136540080403034,
            0.04471061572777259,
        ],
    ],
    b: &[
        0.054293734116568765,
        0.0,
        0.0,
        0.0,
        0.0,
        4.450312892752409,
        1.8915178993145003,
        -5.801203960010585,
        0.3111643669578199,
        -0.1521609496625161,
        0.20136540080403034,
        0.04471061572777259,
        0.0,
    ],
    e: Some(&[
        0.01312004499419488,
        0.0,
        0.0,
        0.0,
        0.0,
        -1.2251564463762044,
        -0.4957589496572502,
        1.6643771824549864,
        -0.35032884874997366,
        0.3341791187130175,
        0.08192320648511571,
        -0.022355307863886294,
        0.0,
    ]),
    e3: Some(&[
        -0.18980075407240762,
        0.0,
        0.0,
        0.0,
        0.0,
        4.450312892752409,
        1.8915178993145003,
        -5.801203960010585,
        -0.4226823213237919,
        -0.1521609496625161,
        0.20136540080403034,
        0.02265179219836082,
        0.0,
    ]),
    fsal: true,
};

/// Solver settings shared by all integrations.
#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// When present, takes `ceil(|t1 - t0| / fixed_dt)` equal steps instead
    /// of adapting.
    pub fixed_dt: Option<f64>,
    pub max_steps: usize,
    pub safety: f64,
}

impl Default for SolverConfig {
    /// Adaptive dopri5 at rtol = atol = 1e-5.
    fn default() -> SolverConfig {
        SolverConfig::new(Method::Dopri5)
    }
}

impl SolverConfig {
    pub fn new(method: Method) -> SolverConfig {
        SolverConfig {
            method,
            rtol: 1e-5,
            atol: 1e-5,
            fixed_dt: None,
            max_steps: 100_000,
            safety: 0.9,
        }
    }

    pub fn fixed(method: Method, dt: f64) -> SolverConfig {
        SolverConfig {
            fixed_dt: Some(dt),
            ..SolverConfig::new(method)
        }
    }

    pub fn with_tol(mut self, rtol: f64, atol: f64) -> SolverConfig {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::config(format!(
                "solver: rtol and atol must be positive, got {} and {}",
                self.rtol, self.atol
            )));
        }
        if let Some(dt) = self.fixed_dt {
            if !(dt > 0.0) {
                return Err(Error::config(format!("solver: fixed_dt must be positive, got {dt}")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::config("solver: max_steps must be positive"));
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return Err(Error::config(format!(
                "solver: safety must lie in (0, 1), got {}",
                self.safety
            )));
        }
        Ok(())
    }
}

/// Outcome of [`integrate`].
#[derive(Clone, Debug)]
pub struct IntegrationResult {
    pub y_final: Vec<f64>,
    /// Exact count of vector-field evaluations (rejected steps included).
    pub nfe: usize,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
}

fn check_finite(k: &[f64], context: &'static str, t: f64) -> Result<()> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context, t });
    }
    Ok(())
}

/// Evaluates all stages of `tab` at `(t, y)` with step `h` into `k`.
/// When `reuse_k0` is set, `k[0]` is assumed to already hold `f(t, y)`.
pub(crate) fn eval_stages<F>(
    tab: &Tableau,
    field: &mut F,
    y: &[f64],
    t: f64,
    h: f64,
    k: &mut [Vec<f64>],
    u: &mut [f64],
    reuse_k0: bool,
    nfe: &mut usize,
) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if !reuse_k0 {
        field(t, y, &mut k[0])?;
        *nfe += 1;
        check_finite(&k[0], "rk stage", t)?;
    }
    for i in 1..tab.stages() {
        u.copy_from_slice(y);
        for (j, &aij) in tab.a[i - 1].iter().enumerate() {
            if aij != 0.0 {
                for (um, &kj) in u.iter_mut().zip(k[j].iter()) {
                    *um += h * aij * kj;
                }
            }
        }
        let ti = t + tab.c[i] * h;
        field(ti, u, &mut k[i])?;
        *nfe += 1;
        check_finite(&k[i], "rk stage", ti)?;
    }
    Ok(())
}

/// `y1 = y + h * sum_i w[i] k_i` into `out`.
pub(crate) fn combine(y: &[f64], h: f64, w: &[f64], k: &[Vec<f64>], out: &mut [f64]) {
    out.copy_from_slice(y);
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 {
            for (o, &kj) in out.iter_mut().zip(k[j].iter()) {
                *o += h * wj * kj;
            }
        }
    }
}

/// One explicit RK step of `method` from `(t, y)` with step `dt`. Returns
/// the advanced state and the embedded error estimate (a zero vector for
/// euler, which has no companion).
pub fn step<F>(method: Method, field: &mut F, y: &[f64], t: f64, dt: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if dt == 0.0 {
        return Err(Error::config("step: dt must be nonzero"));
    }
    let tab = method.tableau(method == Method::Euler);
    let n = y.len();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; tab.stages()];
    let mut u = vec![0.0; n];
    let mut nfe = 0;
    eval_stages(tab, field, y, t, dt, &mut k, &mut u, false, &mut nfe)?;
    let mut y1 = vec![0.0; n];
    combine(y, dt, tab.b, &k, &mut y1);
    let mut err = vec![0.0; n];
    if let Some(e) = tab.e {
        let zero = vec![0.0; n];
        combine(&zero, dt, e, &k, &mut err);
    }
    Ok((y1, err))
}

/// RMS error norm: `sqrt(mean_i (err_i / (atol + rtol * max(|y0_i|, |y1_i|)))^2)`.
fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], atol: f64, rtol: f64) -> f64 {
    let n = err.len() as f64;
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1.iter()))
        .map(|(&e, (&a, &b))| {
            let scale = atol + rtol * a.abs().max(b.abs());
            (e / scale) * (e / scale)
        })
        .sum();
    (s / n).sqrt()
}

/// DOP853's combined norm: with `s5`, `s3` the squared scaled norms of the
/// 5th- and 3rd-order estimates, the effective error is
/// `s5 / sqrt((s5 + 0.01 * s3) * n)`.
fn error_norm_853(
    err5: &[f64],
    err3: &[f64],
    y0: &[f64],
    y1: &[f64],
    atol: f64,
    rtol: f64,
) -> f64 {
    let n = err5.len() as f64;
    let mut s5 = 0.0;
    let mut s3 = 0.0;
    for i in 0..err5.len() {
        let scale = atol + rtol * y0[i].abs().max(y1[i].abs());
        s5 += (err5[i] / scale) * (err5[i] / scale);
        s3 += (err3[i] / scale) * (err3[i] / scale);
    }
    if s5 == 0.0 && s3 == 0.0 {
        return 0.0;
    }
    s5 / ((s5 + 0.01 * s3) * n).sqrt()
}

/// Two-evaluation initial step-size heuristic (Hairer §II.4). Consumes one
/// extra field evaluation beyond `f0`, which the caller passes in and keeps
/// as the first stage.
fn initial_step<F>(
    field: &mut F,
    y0: &[f64],
    t0: f64,
    dir: f64,
    f0: &[f64],
    span: f64,
    err_order: u32,
    atol: f64,
    rtol: f64,
    nfe: &mut usize,
) -> Result<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y0.len() as f64;
    let rms = |v: &[f64], scale: &[f64]| -> f64 {
        (v.iter()
            .zip(scale.iter())
            .map(|(&a, &s)| (a / s) * (a / s))
            .sum::<f64>()
            / n)
            .sqrt()
    };
    let scale: Vec<f64> = y0.iter().map(|&y| atol + rtol * y.abs()).collect();
    let d0 = rms(y0, &scale);
    let d1 = rms(f0, &scale);
    // clamp the probe so slow dynamics never push the trial evaluation
    // past the far end of the integration interval
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        (0.01 * d0 / d1).min(span.abs())
    };
    let y1: Vec<f64> = y0.iter().zip(f0.iter()).map(|(&y, &f)| y + h0 * dir * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    field(t0 + h0 * dir, &y1, &mut f1)?;
    *nfe += 1;
    check_finite(&f1, "initial step probe", t0 + h0 * dir)?;
    let df: Vec<f64> = f1.iter().zip(f0.iter()).map(|(&a, &b)| a - b).collect();
    let d2 = rms(&df, &scale) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / (err_order as f64 + 1.0))
    };
    Ok((100.0 * h0).min(h1).min(span.abs()))
}

/// Integrates `dy/dt = field(t, y)` from `t0` to `t1` (either direction).
///
/// The field writes its value into the provided output slice so that batch
/// callers can avoid per-call allocation. Errors from the field propagate
/// out unchanged.
pub fn integrate<F>(mut field: F, y0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<IntegrationResult>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    cfg.validate()?;
    if t0 == t1 {
        return Err(Error::config("integrate: t0 and t1 must differ"));
    }
    let span = t1 - t0;
    let dir = span.signum();
    let n = y0.len();
    let tab = cfg.method.tableau(cfg.fixed_dt.is_some());
    let s = tab.stages();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; s];
    let mut u = vec![0.0; n];
    let mut y = y0.to_vec();
    let mut y1 = vec![0.0; n];
    let mut nfe = 0usize;

    if let Some(dt) = cfg.fixed_dt {
        let nsteps = ((span.abs() / dt).ceil() as usize).max(1);
        let h = span / nsteps as f64;
        for i in 0..nsteps {
            if i >= cfg.max_steps {
                return Err(Error::NoConvergence {
                    context: "fixed-step integrate",
                    max_steps: cfg.max_steps,
                    t: t0 + i as f64 * h,
                    partial: y,
                });
            }
            let t = t0 + i as f64 * h;
            let reuse = tab.fsal && i > 0;
            eval_stages(tab, &mut field, &y, t, h, &mut k, &mut u, reuse, &mut nfe)?;
            combine(&y, h, tab.b, &k, &mut y1);
            std::mem::swap(&mut y, &mut y1);
            if tab.fsal {
                k.swap(0, s - 1);
            }
        }
        return Ok(IntegrationResult {
            y_final: y,
            nfe,
            steps_accepted: nsteps,
            steps_rejected: 0,
        });
    }

    // Adaptive mode.
    field(t0, &y, &mut k[0])?;
    nfe += 1;
    check_finite(&k[0], "rk stage", t0)?;
    let mut h_abs = initial_step(
        &mut field,
        &y,
        t0,
        dir,
        &k[0],
        span,
        cfg.method.err_order(),
        cfg.atol,
        cfg.rtol,
        &mut nfe,
    )?;
    let mut t = t0;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut err = vec![0.0; n];
    let mut err3 = vec![0.0; n];
    let zero = vec![0.0; n];
    let q = cfg.method.err_order() as f64;

    while (t1 - t) * dir > 0.0 {
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::NoConvergence {
                context: "adaptive integrate",
                max_steps: cfg.max_steps,
                t,
                partial: y,
            });
        }
        if h_abs < 1e-14 * t.abs().max(1.0) {
            return Err(Error::NoConvergence {
                context: "adaptive step underflow",
                max_steps: cfg.max_steps,
                t,
                partial: y,
            });
        }
        let last = h_abs >= (t1 - t).abs();
        let h = if last { t1 - t } else { h_abs * dir };

        // k[0] always holds f(t, y) here (initial eval or FSAL carry-over;
        // non-FSAL methods refresh it below).
        if !tab.fsal && accepted + rejected > 0 {
            field(t, &y, &mut k[0])?;
            nfe += 1;
            check_finite(&k[0], "rk stage", t)?;
        }
        eval_stages(tab, &mut field, &y, t, h, &mut k, &mut u, true, &mut nfe)?;
        combine(&y, h, tab.b, &k, &mut y1);
        combine(&zero, h, tab.e.expect("adaptive tableau has error weights"), &k, &mut err);
        let err_norm = if let Some(e3) = tab.e3 {
            combine(&zero, h, e3, &k, &mut err3);
            error_norm_853(&err, &err3, &y, &y1, cfg.atol, cfg.rtol)
        } else {
            error_norm(&err, &y, &y1, cfg.atol, cfg.rtol)
        };

        if err_norm <= 1.0 {
            t = if last { t1 } else { t + h };
            std::mem::swap(&mut y, &mut y1);
            accepted += 1;
            if tab.fsal {
                k.swap(0, s - 1);
            }
        } else {
            rejected += 1;
        }
        let factor = if err_norm == 0.0 {
            10.0
        } else {
            (cfg.safety * err_norm.powf(-1.0 / (q + 1.0))).clamp(0.2, 10.0)
        };
        h_abs = (h.abs() * factor).min(span.abs());
    }

    Ok(IntegrationResult {
        y_final: y,
        nfe,
        steps_accepted: accepted,
        steps_rejected: rejected,
    })
}
