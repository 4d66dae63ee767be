//! Small fully-connected networks with exact derivatives.
//!
//! The networks here are tiny (a few hidden layers of width <= a few
//! hundred), so instead of pulling in an autodiff framework we evaluate them
//! over a generic [`Scalar`] type:
//!
//! * `f64` gives the plain forward pass and, via a hand-written backward
//!   sweep, reverse-mode gradients (VJPs and parameter gradients);
//! * [`Dual`] numbers give exact forward-mode directional derivatives
//!   (JVPs), and running the *backward* sweep in `Dual` arithmetic gives
//!   exact Hessian-vector products (forward-over-reverse).
//!
//! All activations are SiLU `x * sigmoid(x)`, composed from `Scalar`
//! primitives so every mode stays exact to machine precision.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Numeric type the network is evaluated over. `f64` for values and
/// reverse-mode sweeps, [`Dual`] for forward-mode tangents.
pub trait Scalar:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    /// Primal (value) part.
    fn value(self) -> f64;
    fn exp(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// First-order dual number `v + eps * d` with `eps^2 = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    pub fn with_tangent(v: f64, d: f64) -> Self {
        Dual { v, d }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.v * o.d + self.d * o.v,
        }
    }
}

impl std::ops::Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

impl std::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: -self.d,
        }
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual {
            v: e,
            d: self.d * e,
        }
    }
}

/// `1 / (1 + exp(-x))`, valid for any [`Scalar`].
pub fn sigmoid<S: Scalar>(x: S) -> S {
    let one = S::from_f64(1.0);
    one / (one + (-x).exp())
}

/// SiLU activation `x * sigmoid(x)`.
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// Derivative of SiLU: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`, again
/// generic so backward sweeps can run in `Dual` arithmetic.
pub fn silu_deriv<S: Scalar>(x: S) -> S {
    let one = S::from_f64(1.0);
    let s = sigmoid(x);
    s * (one + x * (one - s))
}

/// One affine layer `y = W x + b` with `W` stored out-of-rows.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn apply<S: Scalar>(&self, x: &[S], out: &mut Vec<S>) {
        out.clear();
        for (row, bi) in self.w.rows().into_iter().zip(self.b.iter()) {
            let mut acc = S::from_f64(*bi);
            for (wij, xj) in row.iter().zip(x.iter()) {
                acc = acc + S::from_f64(*wij) * *xj;
            }
            out.push(acc);
        }
    }

    /// `W^T delta`, accumulated into a fresh vector.
    fn apply_transpose<S: Scalar>(&self, delta: &[S]) -> Vec<S> {
        let mut out = vec![S::from_f64(0.0); self.w.ncols()];
        for (row, di) in self.w.rows().into_iter().zip(delta.iter()) {
            for (o, wij) in out.iter_mut().zip(row.iter()) {
                *o = *o + S::from_f64(*wij) * *di;
            }
        }
        out
    }
}

/// Multi-layer perceptron: affine layers with SiLU between them (no
/// activation after the last layer).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer parameter gradients, same shapes as the network.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Vec<f64>)>,
}

/// Intermediate values of a forward pass, kept for the backward sweep.
pub struct ForwardTrace<S> {
    /// Input to each affine layer (`acts[0]` is the network input).
    acts: Vec<Vec<S>>,
    /// Pre-activation output of each *hidden* affine layer.
    pre: Vec<Vec<S>>,
    /// Network output.
    pub output: Vec<S>,
}

impl Mlp {
    /// Builds a network with the given layer widths
    /// (`dims = [in, h1, ..., out]`). Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; if `zero_final` is set the last
    /// layer starts at exactly zero so the network output is identically
    /// zero at initialization.
    pub fn init<R: Rng>(dims: &[usize], zero_final: bool, rng: &mut R) -> Mlp {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let draw = |rng: &mut R| {
                if last && zero_final {
                    0.0
                } else {
                    rng.random_range(-bound..bound)
                }
            };
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| draw(rng));
            let b: Vec<f64> = (0..fan_out).map(|_| draw(rng)).collect();
            layers.push(Dense { w, b });
        }
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.w.nrows()));
        dims
    }

    /// Forward pass over any scalar type, recording the trace needed by
    /// [`Mlp::backward_input`] / [`Mlp::backward_full`].
    pub fn forward_trace<S: Scalar>(&self, input: &[S]) -> ForwardTrace<S> {
        assert_eq!(input.len(), self.input_dim());
        let n = self.layers.len();
        let mut acts: Vec<Vec<S>> = Vec::with_capacity(n);
        let mut pre: Vec<Vec<S>> = Vec::with_capacity(n - 1);
        let mut cur = input.to_vec();
        let mut buf = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            acts.push(cur.clone());
            layer.apply(&cur, &mut buf);
            if l + 1 < n {
                pre.push(buf.clone());
                cur.clear();
                cur.extend(buf.iter().map(|&z| silu(z)));
            } else {
                cur = buf.clone();
            }
        }
        ForwardTrace {
            acts,
            pre,
            output: cur,
        }
    }

    /// Plain forward pass.
    pub fn forward<S: Scalar>(&self, input: &[S]) -> Vec<S> {
        self.forward_trace(input).output
    }

    /// Input gradient of `cotangent . output` (a VJP when `S = f64`; with
    /// dual inputs and a constant-lifted cotangent, the dual parts form an
    /// exact Hessian-vector product of the scalar `cotangent . output`).
    pub fn backward_input<S: Scalar>(&self, trace: &ForwardTrace<S>, cotangent: &[S]) -> Vec<S> {
        assert_eq!(cotangent.len(), self.output_dim());
        let n = self.layers.len();
        let mut delta = cotangent.to_vec();
        for l in (0..n).rev() {
            let mut back = self.layers[l].apply_transpose(&delta);
            if l > 0 {
                for (g, z) in back.iter_mut().zip(trace.pre[l - 1].iter()) {
                    *g = *g * silu_deriv(*z);
                }
            }
            delta = back;
        }
        delta
    }

    /// Reverse sweep returning both the input gradient and per-parameter
    /// gradients of `cotangent . output`.
    pub fn backward_full(&self, trace: &ForwardTrace<f64>, cotangent: &[f64]) -> (Vec<f64>, Gradients) {
        assert_eq!(cotangent.len(), self.output_dim());
        let n = self.layers.len();
        let mut grads: Vec<(Array2<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (Array2::zeros(l.w.dim()), vec![0.0; l.b.len()]))
            .collect();
        let mut delta = cotangent.to_vec();
        for l in (0..n).rev() {
            // dL/dW_l = delta outer acts[l], dL/db_l = delta
            let (gw, gb) = &mut grads[l];
            for (i, di) in delta.iter().enumerate() {
                gb[i] = *di;
                for (j, aj) in trace.acts[l].iter().enumerate() {
                    gw[(i, j)] = di * aj;
                }
            }
            let mut back = self.layers[l].apply_transpose(&delta);
            if l > 0 {
                for (g, z) in back.iter_mut().zip(trace.pre[l - 1].iter()) {
                    *g *= silu_deriv(*z);
                }
            }
            delta = back;
        }
        (delta, Gradients { layers: grads })
    }

    /// Directional derivative `J(x) v` via a dual-number forward pass.
    /// `tangent` must match the input dimension.
    pub fn jvp(&self, input: &[f64], tangent: &[f64]) -> Vec<f64> {
        let dual_in: Vec<Dual> = input
            .iter()
            .zip(tangent.iter())
            .map(|(&v, &d)| Dual::with_tangent(v, d))
            .collect();
        self.forward(&dual_in).into_iter().map(|o| o.d).collect()
    }

    /// `J(x)^T cotangent` via the reverse sweep.
    pub fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Vec<f64> {
        let trace = self.forward_trace(input);
        self.backward_input(&trace, cotangent)
    }

    /// Hessian-vector product `H v` of the scalar `phi(x) = cotangent . f(x)`
    /// (cotangent held fixed), computed forward-over-reverse.
    pub fn hvp(&self, input: &[f64], cotangent: &[f64], v: &[f64]) -> Vec<f64> {
        let dual_in: Vec<Dual> = input
            .iter()
            .zip(v.iter())
            .map(|(&x, &t)| Dual::with_tangent(x, t))
            .collect();
        let dual_cot: Vec<Dual> = cotangent.iter().map(|&c| Dual::constant(c)).collect();
        let trace = self.forward_trace(&dual_in);
        self.backward_input(&trace, &dual_cot)
            .into_iter()
            .map(|g| g.d)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    /// Parameters flattened in a fixed order (per layer: W row-major, then b).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.w.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in l.b.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
    }
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Gradients {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.dim()), vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(other.layers.iter()) {
            w.zip_mut_with(ow, |a, &o| *a += scale * o);
            for (bi, obi) in b.iter_mut().zip(ob.iter()) {
                *bi += scale * obi;
            }
        }
    }

    /// Same flattening order as [`Mlp::flat_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

/// Rescales `grad` in place so its global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Adam hyperparameters plus the loop settings shared by the training drivers.
#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub n_steps: usize,
}

impl OptimizerConfig {
    pub fn new(lr: f64, batch_size: usize, n_steps: usize) -> OptimizerConfig {
        OptimizerConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            batch_size,
            n_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer: lr must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer: beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer: eps must be positive"));
        }
        if self.batch_size == 0 || self.n_steps == 0 {
            return Err(Error::config("optimizer: batch_size and n_steps must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("optimizer: clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Score-matching defaults (Adam 1e-3, batch 128, 20k steps, no clipping).
impl Default for OptimizerConfig {
    fn default() -> OptimizerConfig {
        OptimizerConfig::new(1e-3, 128, 20_000)
    }
}

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Adam with all moment/stability constants taken from `opt`.
    pub fn from_config(opt: &OptimizerConfig, n_params: usize) -> Adam {
        Adam {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One update of `params` in place given the gradient `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
