//! A single batch-normalized linear layer driven by random inputs:
//!
//! `f(X) = gamma_out * BN(W (gamma_in * X))`
//!
//! `X` is `C x B` (features by batch), `W` is `K x C` and each of its rows is
//! one neuron. Batch norm is applied per output feature over the batch and
//! has no affine parameters of its own; `gamma_out` plays that role and is
//! frozen, as is `gamma_in`. Only `W` is trained.
//!
//! In random-walk mode the gradient arriving at the output is pure noise. In
//! synthetic mode it comes from a mean-squared error against fixed targets.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::math::{dot, RngStream};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.cols.max(1))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn fill_normal(&mut self, rng: &mut RngStream, std: f64) {
        rng.fill_normal(&mut self.data, std);
    }
}

/// Statistics kept by [`bn_forward`] for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormCache {
    pub mean: f64,
    /// Biased batch variance.
    pub var: f64,
    pub eps: f64,
    pub x_hat: Vec<f64>,
}

impl BatchNormCache {
    fn inv_std(&self) -> f64 {
        1.0 / (self.var + self.eps).sqrt()
    }
}

/// Normalizes `x` over its entries: `(x - mean) / sqrt(var + eps)`.
pub fn bn_forward(x: &[f64], eps: f64) -> Result<(Vec<f64>, BatchNormCache)> {
    if x.is_empty() {
        return Err(Error::domain("bn_forward: empty batch"));
    }
    if !(eps >= 0.0) {
        return Err(Error::domain(format!("bn_forward: eps must be >= 0, got {eps}")));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var + eps == 0.0 {
        return Err(Error::domain("bn_forward: zero batch variance with eps = 0"));
    }
    let inv = 1.0 / (var + eps).sqrt();
    let x_hat: Vec<f64> = x.iter().map(|v| (v - mean) * inv).collect();
    Ok((x_hat.clone(), BatchNormCache { mean, var, eps, x_hat }))
}

/// Exact gradient through [`bn_forward`] with the batch mean and variance
/// treated as functions of the input:
///
/// `dx = (dy - mean(dy) - x_hat * mean(dy * x_hat)) / sqrt(var + eps)`
pub fn bn_backward(cache: &BatchNormCache, upstream: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; upstream.len()];
    bn_backward_into(cache, upstream, &mut out)?;
    Ok(out)
}

fn bn_backward_into(cache: &BatchNormCache, upstream: &[f64], out: &mut [f64]) -> Result<()> {
    check_dims(cache.x_hat.len(), upstream.len())?;
    let n = upstream.len() as f64;
    let mean_dy = upstream.iter().sum::<f64>() / n;
    let mean_dy_xhat = dot(upstream, &cache.x_hat) / n;
    let inv = cache.inv_std();
    for ((o, dy), xh) in out.iter_mut().zip(upstream).zip(&cache.x_hat) {
        *o = inv * (dy - mean_dy - xh * mean_dy_xhat);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemMode {
    #[default]
    RandomWalk,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(rename = "B", alias = "batch", default = "default_batch")]
    pub batch: usize,
    #[serde(rename = "C", alias = "inputs", default = "default_width")]
    pub inputs: usize,
    #[serde(rename = "K", alias = "neurons", default = "default_width")]
    pub neurons: usize,
    #[serde(default = "default_loss_scale")]
    pub loss_scale: f64,
    #[serde(default = "default_eps_bn")]
    pub eps_bn: f64,
    #[serde(default)]
    pub mode: SystemMode,
    /// Multiplies the initial weights.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_batch() -> usize {
    32
}
fn default_width() -> usize {
    128
}
fn default_loss_scale() -> f64 {
    1.0
}
fn default_eps_bn() -> f64 {
    1e-5
}
fn default_init_scale() -> f64 {
    1.0
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            batch: default_batch(),
            inputs: default_width(),
            neurons: default_width(),
            loss_scale: default_loss_scale(),
            eps_bn: default_eps_bn(),
            mode: SystemMode::default(),
            init_scale: default_init_scale(),
        }
    }
}

impl SystemConfig {
    pub fn new(batch: usize, inputs: usize, neurons: usize) -> Self {
        SystemConfig {
            batch,
            inputs,
            neurons,
            ..Self::default()
        }
    }

    pub fn with_eps_bn(self, eps_bn: f64) -> Self {
        SystemConfig { eps_bn, ..self }
    }

    pub fn with_loss_scale(self, loss_scale: f64) -> Self {
        SystemConfig { loss_scale, ..self }
    }

    pub fn with_mode(self, mode: SystemMode) -> Self {
        SystemConfig { mode, ..self }
    }

    pub fn with_init_scale(self, init_scale: f64) -> Self {
        SystemConfig { init_scale, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("system.B", self.batch),
            ("system.C", self.inputs),
            ("system.K", self.neurons),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return Err(Error::config("system.loss_scale", "must be finite and > 0"));
        }
        if !(self.eps_bn >= 0.0 && self.eps_bn.is_finite()) {
            return Err(Error::config("system.eps_bn", "must be finite and >= 0"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("system.init_scale", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
struct ForwardCache {
    /// `gamma_in * X`, `C x B`.
    z: Matrix,
    bn: Vec<BatchNormCache>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// `dL/dW`, `K x C`.
    pub dw: Matrix,
    /// Synthetic mode only.
    pub loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SimpleSystem {
    cfg: SystemConfig,
    w: Matrix,
    gamma_in: Vec<f64>,
    gamma_out: Vec<f64>,
    targets: Option<Matrix>,
    rng: RngStream,
    cache: Option<ForwardCache>,
}

/// Builds the system. `W ~ U[-1/sqrt(C), 1/sqrt(C)]` times `init_scale`,
/// both gammas `~ N(0, 1)` and, in synthetic mode, targets `~ N(0, 1)`.
/// Initialization and the per-step sampling use separate streams derived
/// from `seed`.
pub fn init_system(cfg: SystemConfig, seed: u64) -> Result<SimpleSystem> {
    cfg.validate()?;
    let root = RngStream::new(seed);
    let mut init = root.derive(0);
    let (k, c, b) = (cfg.neurons, cfg.inputs, cfg.batch);
    let bound = 1.0 / (c as f64).sqrt();
    let w = Matrix::from_fn(k, c, |_, _| cfg.init_scale * init.uniform(-bound, bound));
    let mut gamma_in = vec![0.0; c];
    init.fill_normal(&mut gamma_in, 1.0);
    let mut gamma_out = vec![0.0; k];
    init.fill_normal(&mut gamma_out, 1.0);
    let targets = match cfg.mode {
        SystemMode::RandomWalk => None,
        SystemMode::Synthetic => {
            let mut t = Matrix::zeros(k, b);
            t.fill_normal(&mut init, 1.0);
            Some(t)
        }
    };
    Ok(SimpleSystem {
        cfg,
        w,
        gamma_in,
        gamma_out,
        targets,
        rng: root.derive(1),
        cache: None,
    })
}

impl SimpleSystem {
    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        self.cache = None;
        &mut self.w
    }

    pub fn gamma_in(&self) -> &[f64] {
        &self.gamma_in
    }

    pub fn gamma_out(&self) -> &[f64] {
        &self.gamma_out
    }

    pub fn targets(&self) -> Option<&Matrix> {
        self.targets.as_ref()
    }

    pub fn set_targets(&mut self, targets: Matrix) -> Result<()> {
        check_dims(self.cfg.neurons, targets.rows())?;
        check_dims(self.cfg.batch, targets.cols())?;
        self.targets = Some(targets);
        Ok(())
    }

    /// A fresh `C x B` input batch with `N(0, 1)` entries.
    pub fn sample_inputs(&mut self) -> Matrix {
        let mut x = Matrix::zeros(self.cfg.inputs, self.cfg.batch);
        x.fill_normal(&mut self.rng, 1.0);
        x
    }

    /// Output gradients with std `loss_scale / (K B)`.
    pub fn sample_output_grad(&mut self) -> Matrix {
        let (k, b) = (self.cfg.neurons, self.cfg.batch);
        let mut dy = Matrix::zeros(k, b);
        dy.fill_normal(&mut self.rng, self.cfg.loss_scale / (k * b) as f64);
        dy
    }

    /// `f(X)` for a `C x B` input, `K x B` output. Keeps what
    /// [`SimpleSystem::backward`] needs.
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (k, c, b) = (self.cfg.neurons, self.cfg.inputs, self.cfg.batch);
        check_dims(c, x.rows())?;
        check_dims(b, x.cols())?;
        self.cache = None;
        let mut z = x.clone();
        for (ci, g) in self.gamma_in.iter().enumerate() {
            for v in z.row_mut(ci) {
                *v *= g;
            }
        }
        let mut h = Matrix::zeros(k, b);
        for ki in 0..k {
            let w_row = self.w.row(ki);
            let h_row = &mut h.data[ki * b..(ki + 1) * b];
            for (ci, &wk) in w_row.iter().enumerate() {
                for (hv, zv) in h_row.iter_mut().zip(z.row(ci)) {
                    *hv += wk * zv;
                }
            }
        }
        let mut out = Matrix::zeros(k, b);
        let mut bn = Vec::with_capacity(k);
        for ki in 0..k {
            let (x_hat, cache) = bn_forward(h.row(ki), self.cfg.eps_bn)?;
            let g = self.gamma_out[ki];
            for (o, v) in out.row_mut(ki).iter_mut().zip(&x_hat) {
                *o = g * v;
            }
            bn.push(cache);
        }
        self.cache = Some(ForwardCache { z, bn });
        Ok(out)
    }

    /// `dL/dW` for the output gradient `dy` (`K x B`) of the last forward pass.
    /// The cache is consumed, so a second call without a new forward is an
    /// error.
    pub fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("backward called without a preceding forward".into()))?;
        let (k, c, b) = (self.cfg.neurons, self.cfg.inputs, self.cfg.batch);
        check_dims(k, dy.rows())?;
        check_dims(b, dy.cols())?;
        let mut dw = Matrix::zeros(k, c);
        let mut upstream = vec![0.0; b];
        let mut dh = vec![0.0; b];
        for ki in 0..k {
            let g = self.gamma_out[ki];
            for (u, d) in upstream.iter_mut().zip(dy.row(ki)) {
                *u = g * d;
            }
            bn_backward_into(&cache.bn[ki], &upstream, &mut dh)?;
            for (ci, out) in dw.row_mut(ki).iter_mut().enumerate() {
                *out = dot(&dh, cache.z.row(ci));
            }
        }
        Ok(dw)
    }

    /// One random-walk step: fresh inputs, fresh output gradients, exact
    /// backpropagation.
    pub fn forward_backward(&mut self) -> Result<Gradients> {
        let x = self.sample_inputs();
        self.forward(&x)?;
        let dy = self.sample_output_grad();
        Ok(Gradients {
            dw: self.backward(&dy)?,
            loss: None,
        })
    }

    /// Gradient of `loss_scale * mean((f(X) - targets)^2)` for a given input.
    pub fn synthetic_gradient(&mut self, x: &Matrix, targets: &Matrix) -> Result<Gradients> {
        let y = self.forward(x)?;
        check_dims(y.rows(), targets.rows())?;
        check_dims(y.cols(), targets.cols())?;
        let n = y.as_slice().len() as f64;
        let s = self.cfg.loss_scale;
        let mut loss = 0.0;
        let mut dy = Matrix::zeros(y.rows(), y.cols());
        for ((d, yv), tv) in dy.data.iter_mut().zip(y.as_slice()).zip(targets.as_slice()) {
            let r = yv - tv;
            loss += r * r;
            *d = 2.0 * s * r / n;
        }
        Ok(Gradients {
            dw: self.backward(&dy)?,
            loss: Some(s * loss / n),
        })
    }

    /// One synthetic-mode step: fresh inputs against the stored targets.
    pub fn forward_backward_synthetic(&mut self) -> Result<Gradients> {
        let targets = self
            .targets
            .clone()
            .ok_or_else(|| Error::Usage("synthetic step needs targets".into()))?;
        let x = self.sample_inputs();
        self.synthetic_gradient(&x, &targets)
    }

    /// Dispatches on the configured mode.
    pub fn step_gradients(&mut self) -> Result<Gradients> {
        match self.cfg.mode {
            SystemMode::RandomWalk => self.forward_backward(),
            SystemMode::Synthetic => self.forward_backward_synthetic(),
        }
    }
}
