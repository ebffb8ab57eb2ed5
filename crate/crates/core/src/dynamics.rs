//! Per-context Gaussian transition model `s' ~ N(s + MLP(s, a), diag(sigma^2))`
//! with hand-written reverse-mode gradients.
//!
//! Hidden layers use ReLU, the output layer is affine. A two-entry
//! `layer_sizes` gives a purely affine mean map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Self {
        let mut layer_sizes = vec![state_dim + action_dim];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(state_dim);
        Self { layer_sizes, activation: Activation::Relu }
    }

    pub fn state_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }

    pub fn action_dim(&self) -> usize {
        self.layer_sizes[0].saturating_sub(self.state_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::Invalid(format!("network layers {:?}", self.layer_sizes)));
        }
        if self.layer_sizes[0] < self.state_dim() {
            return Err(Error::Invalid("input layer smaller than the state".into()));
        }
        Ok(())
    }

    /// Number of weights and biases (excluding the log standard deviations).
    pub fn n_weights(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn n_params(&self) -> usize {
        self.n_weights() + self.state_dim()
    }
}

/// One affine layer; `w` is `out x in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

/// Dynamics parameters of a single context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextParams {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
    pub log_std: Vec<f64>,
}

/// Diagonal Gaussian over the next state.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Gaussian {
    /// `mean + std * eps` for an externally supplied standard-normal vector.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }

    pub fn ln_pdf(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(x)
            .map(|((m, s), v)| {
                let z = (v - m) / s;
                -s.ln() - 0.5 * LN_2PI - 0.5 * z * z
            })
            .sum()
    }
}

/// Reusable forward/backward buffers.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl ContextParams {
    /// Zero-initialized parameters with the given log standard deviation.
    pub fn zeros(spec: &NetworkSpec, log_std: f64) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Layer { w: vec![0.0; w[0] * w[1]], b: vec![0.0; w[1]], n_in: w[0], n_out: w[1] })
            .collect();
        Self { spec: spec.clone(), layers, log_std: vec![log_std; spec.state_dim()] }
    }

    /// Weights drawn from N(0, weight_std^2), zero biases, `log_std = ln 0.1`.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, weight_std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec, 0.1f64.ln());
        let normal = Normal::new(0.0, weight_std).expect("positive std");
        for layer in &mut p.layers {
            for w in &mut layer.w {
                *w = normal.sample(rng);
            }
        }
        p
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.spec.action_dim()
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    /// Iterates weights and biases (not the log standard deviations) in
    /// flattening order.
    pub fn weights_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
    }

    /// Flattened parameter vector: per layer `w` then `b`, then `log_std`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.weights_iter());
        out.extend_from_slice(&self.log_std);
        out
    }

    pub fn unflatten(spec: &NetworkSpec, flat: &[f64]) -> Result<Self> {
        spec.validate()?;
        if flat.len() != spec.n_params() {
            return Err(dim(format!("{} parameters for a network with {}", flat.len(), spec.n_params())));
        }
        let mut p = Self::zeros(spec, 0.0);
        p.assign(flat);
        Ok(p)
    }

    /// Overwrites the parameters from a flat vector of matching length.
    pub fn assign(&mut self, flat: &[f64]) {
        let mut i = 0;
        for layer in &mut self.layers {
            let nw = layer.w.len();
            layer.w.copy_from_slice(&flat[i..i + nw]);
            i += nw;
            let nb = layer.b.len();
            layer.b.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
        let n = self.log_std.len();
        self.log_std.copy_from_slice(&flat[i..i + n]);
    }

    fn check_dims(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim() || a.len() != self.action_dim() {
            return Err(dim(format!(
                "state/action of length {}/{} for a model expecting {}/{}",
                s.len(),
                a.len(),
                self.state_dim(),
                self.action_dim()
            )));
        }
        Ok(())
    }

    /// Runs the network, leaving every layer's post-activation in `ws.acts`
    /// (the last entry is the raw network output).
    fn forward(&self, ws: &mut Workspace, s: &[f64], a: &[f64]) {
        let n_layers = self.layers.len();
        ws.acts.resize_with(n_layers + 1, Vec::new);
        let input = &mut ws.acts[0];
        input.clear();
        input.extend_from_slice(s);
        input.extend_from_slice(a);
        for (li, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = ws.acts.split_at_mut(li + 1);
            let x = &prev[li];
            let out = &mut rest[0];
            out.clear();
            out.extend_from_slice(&layer.b);
            for (o, row) in out.iter_mut().zip(layer.w.chunks_exact(layer.n_in)) {
                *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            }
            if li + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    pub fn mean_into(&self, ws: &mut Workspace, s: &[f64], a: &[f64], out: &mut [f64]) {
        self.forward(ws, s, a);
        let y = ws.acts.last().expect("at least one layer");
        for ((o, si), yi) in out.iter_mut().zip(s).zip(y) {
            *o = si + yi;
        }
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<Gaussian> {
        self.check_dims(s, a)?;
        let mut ws = Workspace::default();
        let mut mean = vec![0.0; s.len()];
        self.mean_into(&mut ws, s, a, &mut mean);
        Ok(Gaussian { mean, std: self.log_std.iter().map(|v| v.exp()).collect() })
    }

    /// Log-density of `s_next`, reusing the caller's workspace. Dimensions are
    /// not checked.
    pub fn log_likelihood_ws(&self, ws: &mut Workspace, s: &[f64], a: &[f64], s_next: &[f64]) -> f64 {
        self.forward(ws, s, a);
        let y = ws.acts.last().expect("at least one layer");
        let mut ll = 0.0;
        for d in 0..s.len() {
            let r = s_next[d] - s[d] - y[d];
            let ls = self.log_std[d];
            ll += -ls - 0.5 * LN_2PI - 0.5 * r * r * (-2.0 * ls).exp();
        }
        ll
    }

    pub fn log_likelihood(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64> {
        self.check_dims(s, a)?;
        if s_next.len() != s.len() {
            return Err(dim("next-state length differs from state length"));
        }
        Ok(self.log_likelihood_ws(&mut Workspace::default(), s, a, s_next))
    }

    /// Adds `weight * d log p(s_next | s, a) / d theta` into `grad` (flattened
    /// layout) and returns the log-density.
    pub fn accumulate_grad(
        &self,
        ws: &mut Workspace,
        s: &[f64],
        a: &[f64],
        s_next: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) -> f64 {
        self.forward(ws, s, a);
        let n_layers = self.layers.len();
        let dsz = s.len();
        let mut ll = 0.0;
        ws.delta.clear();
        let log_std_offset = self.spec.n_weights();
        {
            let y = &ws.acts[n_layers];
            for d in 0..dsz {
                let r = s_next[d] - s[d] - y[d];
                let ls = self.log_std[d];
                let inv_var = (-2.0 * ls).exp();
                ll += -ls - 0.5 * LN_2PI - 0.5 * r * r * inv_var;
                ws.delta.push(r * inv_var);
                grad[log_std_offset + d] += weight * (r * r * inv_var - 1.0);
            }
        }
        // layer offsets in the flattened vector
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.w.len() + layer.b.len();
        }
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let x = &ws.acts[li];
            let base = offsets[li];
            for (o, &dl) in ws.delta.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                let g = weight * dl;
                let row = &mut grad[base + o * layer.n_in..base + (o + 1) * layer.n_in];
                for (gw, xv) in row.iter_mut().zip(x) {
                    *gw += g * xv;
                }
                grad[base + layer.w.len() + o] += g;
            }
            if li == 0 {
                break;
            }
            ws.delta_next.clear();
            ws.delta_next.resize(layer.n_in, 0.0);
            for (o, &dl) in ws.delta.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                for (dn, w) in ws.delta_next.iter_mut().zip(row) {
                    *dn += dl * w;
                }
            }
            // ReLU derivative of the previous layer's output
            for (dn, &xv) in ws.delta_next.iter_mut().zip(x.iter()) {
                if xv <= 0.0 {
                    *dn = 0.0;
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_next);
        }
        ll
    }

    /// Log-density and its gradient over the flattened parameters.
    pub fn log_likelihood_and_grad(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dims(s, a)?;
        if s_next.len() != s.len() {
            return Err(dim("next-state length differs from state length"));
        }
        let mut grad = vec![0.0; self.n_params()];
        let ll = self.accumulate_grad(&mut Workspace::default(), s, a, s_next, 1.0, &mut grad);
        if !ll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("transition log-likelihood or gradient".into()));
        }
        Ok((ll, grad))
    }
}

/// JSON checkpoint of a set of per-context parameters: the network layout
/// followed by one flat parameter array per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub spec: NetworkSpec,
    pub params: Vec<Vec<f64>>,
}

impl ParamsFile {
    pub fn from_thetas(thetas: &[ContextParams]) -> Result<Self> {
        let spec = thetas.first().ok_or_else(|| Error::Invalid("no contexts".into()))?.spec.clone();
        Ok(Self { spec, params: thetas.iter().map(|t| t.flatten()).collect() })
    }

    pub fn thetas(&self) -> Result<Vec<ContextParams>> {
        self.params.iter().map(|p| ContextParams::unflatten(&self.spec, p)).collect()
    }
}
