//! Affine-coupling normalizing flow: exact sampling, log-density, and
//! inverse maps.
//!
//! The flow is the variational family for posterior fitting and doubles as a
//! standalone density model. Each coupling layer leaves the masked
//! coordinates untouched and applies an elementwise affine map to the rest,
//! with log-scale and shift produced by small MLPs of the masked part. Final
//! net layers start at zero, so a freshly constructed flow is exactly the
//! identity map and its density is the standard-normal base.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{expect_magic, read_f64_vec, read_u64, write_f64_slice, write_magic, write_u64};
use crate::nn::{ForwardTrace, Gradients, Mlp};

/// Checkpoint file magic.
pub const FLOW_MAGIC: &[u8; 5] = b"SPFL1";

/// Default bound on the coupling log-scale (passed through tanh).
pub const DEFAULT_SCALE_CLAMP: f64 = 3.0;

/// Coupling-net hidden width for a given input dimension.
fn coupling_width(dim: usize) -> usize {
    (2 * dim).max(64)
}

fn log_standard_normal(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * (z.len() as f64 * (2.0 * PI).ln() + sq)
}

/// One affine coupling: coordinates with `mask[i] = true` pass through and
/// drive an elementwise affine update of the complement.
pub struct CouplingLayer {
    mask: Vec<bool>,
    pass_idx: Vec<usize>,
    rest_idx: Vec<usize>,
    scale_net: Mlp,
    shift_net: Mlp,
    scale_clamp: f64,
}

impl CouplingLayer {
    pub(crate) fn new<R: Rng>(
        mask: Vec<bool>,
        width: usize,
        scale_clamp: f64,
        rng: &mut R,
    ) -> Result<CouplingLayer> {
        let pass_idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let rest_idx: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if pass_idx.is_empty() || rest_idx.is_empty() {
            return Err(Error::config(
                "coupling mask must pass at least one coordinate and transform at least one",
            ));
        }
        if !(scale_clamp > 0.0) {
            return Err(Error::config("scale_clamp must be positive"));
        }
        let dims = [pass_idx.len(), width, width, rest_idx.len()];
        Ok(CouplingLayer {
            mask,
            pass_idx,
            rest_idx,
            scale_net: Mlp::init(&dims, true, rng),
            shift_net: Mlp::init(&dims, true, rng),
            scale_clamp,
        })
    }

    fn gather_pass(&self, u: &[f64]) -> Vec<f64> {
        self.pass_idx.iter().map(|&i| u[i]).collect()
    }

    /// Clamped log-scales and shifts for the given pass-through values.
    fn scale_shift(&self, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s: Vec<f64> = self
            .scale_net
            .forward(a)
            .into_iter()
            .map(|raw| self.scale_clamp * raw.tanh())
            .collect();
        (s, self.shift_net.forward(a))
    }

    /// In-place forward update; returns this layer's log-det contribution.
    fn forward_into(&self, u: &mut [f64]) -> f64 {
        let a = self.gather_pass(u);
        let (s, b) = self.scale_shift(&a);
        for (j, &i) in self.rest_idx.iter().enumerate() {
            u[i] = u[i] * s[j].exp() + b[j];
        }
        s.iter().sum()
    }

    /// In-place inverse update; returns the *forward* log-det contribution
    /// (the inverse contributes its negation).
    fn inverse_into(&self, v: &mut [f64]) -> f64 {
        let a = self.gather_pass(v);
        let (s, b) = self.scale_shift(&a);
        for (j, &i) in self.rest_idx.iter().enumerate() {
            v[i] = (v[i] - b[j]) * (-s[j]).exp();
        }
        s.iter().sum()
    }
}

/// Per-layer intermediates of a traced forward pass, kept for the backward
/// parameter sweep.
struct LayerTrace {
    scale: ForwardTrace<f64>,
    shift: ForwardTrace<f64>,
    /// Rest-coordinate values *before* this layer's affine update.
    u_rest: Vec<f64>,
    /// Clamped log-scales.
    s: Vec<f64>,
}

/// Forward pass with everything the backward sweep needs.
pub(crate) struct FlowTrace {
    pub(crate) x: Vec<f64>,
    pub(crate) logdet: f64,
    layers: Vec<LayerTrace>,
}

/// Parameter gradients for every coupling net, shaped like the flow.
pub(crate) struct FlowGradients {
    /// Per layer: (scale-net gradients, shift-net gradients).
    layers: Vec<(Gradients, Gradients)>,
}

impl FlowGradients {
    pub(crate) fn zeros_like(flow: &FlowModel) -> FlowGradients {
        FlowGradients {
            layers: flow
                .layers
                .iter()
                .map(|l| (Gradients::zeros_like(&l.scale_net), Gradients::zeros_like(&l.shift_net)))
                .collect(),
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &FlowGradients, scale: f64) {
        for (mine, theirs) in self.layers.iter_mut().zip(other.layers.iter()) {
            mine.0.add_scaled(&theirs.0, scale);
            mine.1.add_scaled(&theirs.1, scale);
        }
    }

    /// Flattened in the same order as [`FlowModel::flat_params`].
    pub(crate) fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (gs, gb) in &self.layers {
            out.extend(gs.to_flat());
            out.extend(gb.to_flat());
        }
        out
    }
}

/// Invertible map from a standard-normal base to the model distribution.
pub struct FlowModel {
    dim: usize,
    layers: Vec<CouplingLayer>,
}

impl FlowModel {
    /// Builds a flow of `n_layers` couplings over `dim` coordinates.
    ///
    /// Coordinates are split in half under a seed-derived fixed permutation;
    /// successive layers use complementary masks so every coordinate is
    /// transformed by every other layer. Coupling nets have two hidden layers
    /// of width `max(64, 2 dim)` and zero-initialized final layers, making
    /// the fresh flow an exact identity.
    pub fn new(dim: usize, n_layers: usize, seed: u64) -> Result<FlowModel> {
        Self::with_clamp(dim, n_layers, DEFAULT_SCALE_CLAMP, seed)
    }

    /// `new` with an explicit log-scale clamp.
    pub fn with_clamp(dim: usize, n_layers: usize, scale_clamp: f64, seed: u64) -> Result<FlowModel> {
        if dim < 2 {
            return Err(Error::config("flow dimension must be at least 2"));
        }
        if n_layers == 0 {
            return Err(Error::config("flow needs at least one coupling layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(&mut rng);
        let mut rank = vec![0usize; dim];
        for (pos, &coord) in perm.iter().enumerate() {
            rank[coord] = pos;
        }
        let half = dim / 2;
        let width = coupling_width(dim);
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let flip = k % 2 == 1;
            let mask: Vec<bool> = (0..dim).map(|i| (rank[i] < half) != flip).collect();
            layers.push(CouplingLayer::new(mask, width, scale_clamp, &mut rng)?);
        }
        Ok(FlowModel { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::config(format!(
                "flow input has dimension {}, model expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Pushes a base point through every coupling; returns the model-space
    /// point and the log-determinant of the forward Jacobian.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(z)?;
        let mut x = z.to_vec();
        let mut logdet = 0.0;
        for layer in &self.layers {
            logdet += layer.forward_into(&mut x);
        }
        Ok((x, logdet))
    }

    /// Pulls a model-space point back to the base; returns the base point
    /// and the log-determinant of the *inverse* Jacobian.
    ///
    /// The per-layer log-scale sums are identical to the forward pass at the
    /// corresponding point and are totaled in the same (ascending-layer)
    /// order, so `inverse` returns exactly the negation of `forward`'s
    /// log-determinant.
    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let mut z = x.to_vec();
        let mut per_layer = vec![0.0; self.layers.len()];
        for (k, layer) in self.layers.iter().enumerate().rev() {
            per_layer[k] = layer.inverse_into(&mut z);
        }
        let logdet_fwd: f64 = per_layer.iter().sum();
        Ok((z, -logdet_fwd))
    }

    /// Draws `n` samples with their exact log-densities.
    ///
    /// Sample `i` is generated from an independent RNG stream, so any prefix
    /// of a larger draw is reproducible.
    pub fn sample_and_logq(&self, n: usize, seed: u64) -> Result<(Array2<f64>, Vec<f64>)> {
        if n == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        let mut samples = Array2::zeros((n, self.dim));
        let mut logq = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let (x, logdet) = self.forward(&z)?;
            logq.push(log_standard_normal(&z) - logdet);
            samples.row_mut(i).iter_mut().zip(x.iter()).for_each(|(o, &v)| *o = v);
        }
        Ok((samples, logq))
    }

    /// Exact log-density of an arbitrary point: invert, then base density
    /// plus the inverse log-determinant.
    pub fn logq_of(&self, x: &[f64]) -> Result<f64> {
        let (z, logdet_inv) = self.inverse(x)?;
        Ok(log_standard_normal(&z) + logdet_inv)
    }

    /// `logq_of` together with its gradient in `x`, via a reverse sweep over
    /// the inverse pass. Used when the flow itself serves as a prior.
    pub fn logq_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dim(x)?;
        let n = self.layers.len();
        let mut v = x.to_vec();
        // Traces pushed in execution order (last layer first).
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(n);
        let mut per_layer = vec![0.0; n];
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let a = layer.gather_pass(&v);
            let scale = layer.scale_net.forward_trace(&a);
            let shift = layer.shift_net.forward_trace(&a);
            let s: Vec<f64> = scale.output.iter().map(|raw| layer.scale_clamp * raw.tanh()).collect();
            let mut u_rest = Vec::with_capacity(layer.rest_idx.len());
            for (j, &i) in layer.rest_idx.iter().enumerate() {
                v[i] = (v[i] - shift.output[j]) * (-s[j]).exp();
                u_rest.push(v[i]);
            }
            per_layer[k] = s.iter().sum();
            traces.push(LayerTrace { scale, shift, u_rest, s });
        }
        let logdet_fwd: f64 = per_layer.iter().sum();
        let logq = log_standard_normal(&v) - logdet_fwd;

        // Reverse sweep: seed with d logq / dz, then walk the inverse
        // computation backwards (layer 0 was executed last).
        let mut g: Vec<f64> = v.iter().map(|&zi| -zi).collect();
        for (k, layer) in self.layers.iter().enumerate() {
            let tr = &traces[n - 1 - k];
            let g_rest: Vec<f64> = layer.rest_idx.iter().map(|&i| g[i]).collect();
            let mut cot_v_rest = Vec::with_capacity(g_rest.len());
            let mut cot_s_raw = Vec::with_capacity(g_rest.len());
            let mut cot_b = Vec::with_capacity(g_rest.len());
            for j in 0..g_rest.len() {
                let e = (-tr.s[j]).exp();
                // u_rest = (v_rest - b) e^{-s}; logq also holds a -Σs term.
                let cot_s = -g_rest[j] * tr.u_rest[j] - 1.0;
                cot_v_rest.push(g_rest[j] * e);
                cot_s_raw.push(cot_s * (layer.scale_clamp - tr.s[j] * tr.s[j] / layer.scale_clamp));
                cot_b.push(-g_rest[j] * e);
            }
            let ga_scale = layer.scale_net.backward_input(&tr.scale, &cot_s_raw);
            let ga_shift = layer.shift_net.backward_input(&tr.shift, &cot_b);
            for (j, &i) in layer.pass_idx.iter().enumerate() {
                g[i] += ga_scale[j] + ga_shift[j];
            }
            for (j, &i) in layer.rest_idx.iter().enumerate() {
                g[i] = cot_v_rest[j];
            }
        }
        Ok((logq, g))
    }

    /// Forward pass keeping per-layer net traces for [`FlowModel::backward`].
    pub(crate) fn forward_traced(&self, z: &[f64]) -> Result<FlowTrace> {
        self.check_dim(z)?;
        let mut x = z.to_vec();
        let mut logdet = 0.0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.gather_pass(&x);
            let scale = layer.scale_net.forward_trace(&a);
            let shift = layer.shift_net.forward_trace(&a);
            let s: Vec<f64> = scale.output.iter().map(|raw| layer.scale_clamp * raw.tanh()).collect();
            let u_rest: Vec<f64> = layer.rest_idx.iter().map(|&i| x[i]).collect();
            for (j, &i) in layer.rest_idx.iter().enumerate() {
                x[i] = x[i] * s[j].exp() + shift.output[j];
            }
            logdet += s.iter().sum::<f64>();
            layers.push(LayerTrace { scale, shift, u_rest, s });
        }
        Ok(FlowTrace { x, logdet, layers })
    }

    /// Reverse sweep over a traced forward pass.
    ///
    /// Propagates a cotangent `w_x` on the output point and a scalar
    /// cotangent `logdet_cot` on the accumulated log-determinant; returns the
    /// cotangent on the base point and the parameter gradients.
    pub(crate) fn backward(
        &self,
        trace: &FlowTrace,
        w_x: &[f64],
        logdet_cot: f64,
    ) -> (Vec<f64>, FlowGradients) {
        assert_eq!(w_x.len(), self.dim);
        let mut w = w_x.to_vec();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (layer, tr) in self.layers.iter().zip(trace.layers.iter()).rev() {
            let w_rest: Vec<f64> = layer.rest_idx.iter().map(|&i| w[i]).collect();
            let mut cot_u_rest = Vec::with_capacity(w_rest.len());
            let mut cot_s_raw = Vec::with_capacity(w_rest.len());
            for j in 0..w_rest.len() {
                let e = tr.s[j].exp();
                // x_rest = u_rest e^s + b; logdet holds a +Σs term.
                let cot_s = w_rest[j] * tr.u_rest[j] * e + logdet_cot;
                cot_u_rest.push(w_rest[j] * e);
                cot_s_raw.push(cot_s * (layer.scale_clamp - tr.s[j] * tr.s[j] / layer.scale_clamp));
            }
            let (ga_scale, g_scale) = layer.scale_net.backward_full(&tr.scale, &cot_s_raw);
            let (ga_shift, g_shift) = layer.shift_net.backward_full(&tr.shift, &w_rest);
            for (j, &i) in layer.pass_idx.iter().enumerate() {
                w[i] += ga_scale[j] + ga_shift[j];
            }
            for (j, &i) in layer.rest_idx.iter().enumerate() {
                w[i] = cot_u_rest[j];
            }
            grads.push((g_scale, g_shift));
        }
        grads.reverse();
        (w, FlowGradients { layers: grads })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.scale_net.num_params() + l.shift_net.num_params())
            .sum()
    }

    /// All parameters as one vector (per layer: scale net, then shift net).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.scale_net.flat_params());
            out.extend(l.shift_net.flat_params());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::config(format!(
                "parameter vector has length {}, flow has {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.scale_net.num_params();
            l.scale_net.set_flat_params(&flat[offset..offset + n]);
            offset += n;
            let n = l.shift_net.num_params();
            l.shift_net.set_flat_params(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Writes the checkpoint: magic, shape, masks, then the parameter block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_magic(&mut w, FLOW_MAGIC)?;
        write_u64(&mut w, self.dim as u64)?;
        write_u64(&mut w, self.layers.len() as u64)?;
        write_u64(&mut w, self.layers[0].scale_net.layer_dims()[1] as u64)?;
        write_f64_slice(&mut w, &[self.layers[0].scale_clamp])?;
        for l in &self.layers {
            for &m in &l.mask {
                write_u64(&mut w, m as u64)?;
            }
        }
        let flat = self.flat_params();
        write_u64(&mut w, flat.len() as u64)?;
        write_f64_slice(&mut w, &flat)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FlowModel> {
        let mut r = BufReader::new(File::open(path)?);
        expect_magic(&mut r, FLOW_MAGIC, "flow checkpoint")?;
        let dim = read_u64(&mut r)? as usize;
        let n_layers = read_u64(&mut r)? as usize;
        let width = read_u64(&mut r)? as usize;
        let scale_clamp = read_f64_vec(&mut r, 1)?[0];
        if dim < 2 || n_layers == 0 || width == 0 {
            return Err(Error::Format("flow checkpoint has invalid shape".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let mut mask = Vec::with_capacity(dim);
            for _ in 0..dim {
                mask.push(read_u64(&mut r)? != 0);
            }
            layers.push(CouplingLayer::new(mask, width, scale_clamp, &mut rng)?);
        }
        let mut model = FlowModel { dim, layers };
        let n_params = read_u64(&mut r)? as usize;
        if n_params != model.num_params() {
            return Err(Error::Format(format!(
                "flow checkpoint holds {} parameters, architecture needs {}",
                n_params,
                model.num_params()
            )));
        }
        let flat = read_f64_vec(&mut r, n_params)?;
        model.set_flat_params(&flat)?;
        Ok(model)
    }
}
