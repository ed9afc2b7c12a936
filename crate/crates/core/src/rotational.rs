//! The rotational wrapper: weights in the rotational set keep a fixed norm
//! and are rotated by a prescribed expected angle per step. Weight decay is
//! dropped for them; the decay strength only sets the target angle.
//!
//! Per step and per weight vector `p`:
//!
//! 1. `d = delta_g / lr`
//! 2. remove the mean of `d` (when centering), then its component along `p`
//! 3. `nu = beta * nu + (1 - beta) * |d|^2`
//! 4. `p += eta_r * scale * n_p * d / (sqrt(nu / (1 - beta^t)) + eps)`
//! 5. `p = n_p * p / |p|`

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::math::{norm, norm_sq, project_out_in_place, remove_mean_in_place, RngStream};
use crate::optim::{OptimizerConfig, OptimizerKind, UpdateDecomposition};
use crate::predict::{predict_partial, GradientStats, PredictOptions};
use crate::system::Matrix;

pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_EPS_RV: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One rotational unit per row of the weight matrix.
    #[default]
    Neuron,
    /// The whole flattened matrix is one unit.
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceMode {
    /// All affected neurons rotate `f` times slower.
    Slow,
    /// Half of the affected neurons rotate `f` times faster, half `f` times slower.
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceSpec {
    /// Portion of neurons left unaffected.
    pub p: f64,
    pub f: f64,
    pub mode: ImbalanceMode,
}

impl ImbalanceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("wrapper.imbalance.p", "must be in [0, 1]"));
        }
        if !(self.f >= 1.0 && self.f.is_finite()) {
            return Err(Error::config("wrapper.imbalance.f", "must be finite and >= 1"));
        }
        Ok(())
    }
}

/// Per-neuron angular-update multipliers. Membership of the affected classes
/// is a seeded shuffle of the neuron indices.
pub fn assign_imbalance(spec: &ImbalanceSpec, neurons: usize, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let affected = (1.0 - spec.p) * neurons as f64;
    let (n_fast, n_slow) = match spec.mode {
        ImbalanceMode::Slow => (0, (affected.round() as usize).min(neurons)),
        ImbalanceMode::Split => {
            let half = ((affected / 2.0).round() as usize).min(neurons);
            (half, half.min(neurons - half))
        }
    };
    let mut order: Vec<usize> = (0..neurons).collect();
    RngStream::new(seed).derive(0x1B_A1A4CE).shuffle(&mut order);
    let mut scales = vec![1.0; neurons];
    for &i in &order[..n_fast] {
        scales[i] = spec.f;
    }
    for &i in &order[n_fast..n_fast + n_slow] {
        scales[i] = 1.0 / spec.f;
    }
    Ok(scales)
}

/// The target expected angular update for weights wrapped around `inner`.
///
/// An explicit `eta_r_override` wins. Otherwise the equilibrium angular
/// update of the inner optimizer is used, which needs `weight_decay > 0`.
/// Adam+L2 has no closed form without gradient statistics; with
/// `adamw_formula_for_adam_l2` the AdamW expression is used for it instead.
pub fn resolve_target_eta_r(
    inner: &OptimizerConfig,
    c: usize,
    eta_r_override: Option<f64>,
    adamw_formula_for_adam_l2: bool,
) -> Result<f64> {
    if let Some(v) = eta_r_override {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config("wrapper.eta_r_override", "must be finite and > 0"));
        }
        return Ok(v);
    }
    if inner.weight_decay <= 0.0 {
        return Err(Error::domain(
            "rotational target needs weight_decay > 0 to set eta_r; supply weight_decay or an explicit eta_r_override",
        ));
    }
    let cfg = if inner.kind == OptimizerKind::AdamL2 && adamw_formula_for_adam_l2 {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            ..*inner
        }
    } else {
        *inner
    };
    let pred = predict_partial(&cfg, c, &GradientStats::none(), PredictOptions::default())?;
    pred.eta_r_hat.get().map_err(|e| match e {
        Error::MissingStat(what) => Error::domain(format!(
            "no closed-form eta_r for {} without {what}; set adamw_eta_r_for_adam_l2 or eta_r_override",
            inner.kind
        )),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationalState {
    nu: f64,
    n_p: f64,
    beta: f64,
    eps_rv: f64,
    t: u64,
    center: bool,
    imbalance_scale: f64,
    skipped: u64,
}

/// Records `n_p = |p|` and, when `center` is set, replaces `p` by its
/// mean-free part rescaled to `n_p`.
pub fn init_rotational(p: &mut [f64], center: bool) -> Result<RotationalState> {
    let n_p = norm(p);
    if !(n_p > 0.0 && n_p.is_finite()) {
        return Err(Error::domain("init_rotational: weight has zero norm"));
    }
    if center {
        remove_mean_in_place(p);
        let m = norm(p);
        if m == 0.0 {
            return Err(Error::domain("init_rotational: constant weight cannot be centered"));
        }
        for x in p.iter_mut() {
            *x *= n_p / m;
        }
    }
    Ok(RotationalState {
        nu: 0.0,
        n_p,
        beta: DEFAULT_BETA,
        eps_rv: DEFAULT_EPS_RV,
        t: 0,
        center,
        imbalance_scale: 1.0,
        skipped: 0,
    })
}

impl RotationalState {
    pub fn with_beta(self, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::config("wrapper.beta", "must be in [0, 1)"));
        }
        Ok(RotationalState { beta, ..self })
    }

    pub fn with_eps(self, eps_rv: f64) -> Result<Self> {
        if !(eps_rv >= 0.0 && eps_rv.is_finite()) {
            return Err(Error::config("wrapper.eps_rv", "must be finite and >= 0"));
        }
        Ok(RotationalState { eps_rv, ..self })
    }

    pub fn with_imbalance_scale(self, imbalance_scale: f64) -> Result<Self> {
        if !(imbalance_scale > 0.0 && imbalance_scale.is_finite()) {
            return Err(Error::domain("imbalance scale must be finite and > 0"));
        }
        Ok(RotationalState {
            imbalance_scale,
            ..self
        })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn n_p(&self) -> f64 {
        self.n_p
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn imbalance_scale(&self) -> f64 {
        self.imbalance_scale
    }

    /// Steps skipped because the projected update and the RMS history were both zero.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }
}

/// What a wrapped step did.
#[derive(Clone, Debug, PartialEq)]
pub struct WrappedStep {
    /// False for the zero-update no-op.
    pub applied: bool,
    /// Norm of the increment added before renormalization.
    pub increment_norm: f64,
    /// The increment itself; empty for the no-op.
    pub increment: Vec<f64>,
}

/// One wrapped step on `p`. `lr` must be the learning rate the inner
/// optimizer used to produce `inner`; `inner.delta_lambda` is ignored.
pub fn wrapped_step(
    state: &mut RotationalState,
    p: &mut [f64],
    inner: &UpdateDecomposition,
    lr: f64,
    eta_r: f64,
) -> Result<WrappedStep> {
    check_dims(p.len(), inner.delta_g.len())?;
    wrapped_step_raw(state, p, &inner.delta_g, lr, eta_r)
}

fn wrapped_step_raw(
    state: &mut RotationalState,
    p: &mut [f64],
    delta_g: &[f64],
    lr: f64,
    eta_r: f64,
) -> Result<WrappedStep> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::domain(format!(
            "wrapped_step: learning rate must be > 0, got {lr}"
        )));
    }
    if !(eta_r >= 0.0 && eta_r.is_finite()) {
        return Err(Error::domain(format!(
            "wrapped_step: eta_r must be finite and >= 0, got {eta_r}"
        )));
    }
    let mut d: Vec<f64> = delta_g.iter().map(|x| x / lr).collect();
    // A second pass removes what cancellation leaves behind when most of
    // the update was radial or mean.
    for _ in 0..2 {
        if state.center {
            remove_mean_in_place(&mut d);
        }
        project_out_in_place(&mut d, p)?;
    }
    let d_sq = norm_sq(&d);
    if d_sq == 0.0 && state.nu == 0.0 {
        state.skipped += 1;
        log::debug!("rotational step skipped: zero update with empty RMS history");
        return Ok(WrappedStep {
            applied: false,
            increment_norm: 0.0,
            increment: Vec::new(),
        });
    }
    state.nu = state.beta * state.nu + (1.0 - state.beta) * d_sq;
    state.t += 1;
    let bias = 1.0 - state.beta.powi(state.t.min(i32::MAX as u64) as i32);
    let denom = (state.nu / bias).sqrt() + state.eps_rv;
    let coeff = eta_r * state.imbalance_scale * state.n_p / denom;
    for (x, dv) in p.iter_mut().zip(d.iter_mut()) {
        *dv *= coeff;
        *x += *dv;
    }
    let n = norm(p);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::domain("wrapped_step: weight became degenerate"));
    }
    let s = state.n_p / n;
    for x in p.iter_mut() {
        *x *= s;
    }
    Ok(WrappedStep {
        applied: true,
        increment_norm: coeff * d_sq.sqrt(),
        increment: d,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrapperConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_eps_rv")]
    pub eps_rv: f64,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default = "default_center")]
    pub center: bool,
    #[serde(default)]
    pub imbalance: Option<ImbalanceSpec>,
    #[serde(default)]
    /// Target angular update to use instead of the inner optimizer's
    /// equilibrium. With the wrapper off it replaces the prediction in the check.
    pub eta_r_override: Option<f64>,
    /// Use the AdamW angular update when the inner optimizer is Adam+L2.
    #[serde(default)]
    pub adamw_eta_r_for_adam_l2: bool,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_eps_rv() -> f64 {
    DEFAULT_EPS_RV
}
fn default_center() -> bool {
    true
}

impl Default for WrapperConfig {
    fn default() -> Self {
        WrapperConfig {
            enabled: false,
            beta: DEFAULT_BETA,
            eps_rv: DEFAULT_EPS_RV,
            granularity: Granularity::Neuron,
            center: true,
            imbalance: None,
            eta_r_override: None,
            adamw_eta_r_for_adam_l2: false,
        }
    }
}

impl WrapperConfig {
    pub fn enabled() -> Self {
        WrapperConfig {
            enabled: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config("wrapper.beta", "must be in [0, 1)"));
        }
        if !(self.eps_rv >= 0.0 && self.eps_rv.is_finite()) {
            return Err(Error::config("wrapper.eps_rv", "must be finite and >= 0"));
        }
        if let Some(spec) = &self.imbalance {
            spec.validate()?;
            if self.granularity == Granularity::Layer {
                return Err(Error::config("wrapper.imbalance", "needs neuron granularity"));
            }
        }
        if let Some(v) = self.eta_r_override {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config("wrapper.eta_r_override", "must be finite and > 0"));
            }
        }
        Ok(())
    }

    /// Dimension of one rotational unit of a `neurons x inputs` matrix.
    pub fn unit_dim(&self, neurons: usize, inputs: usize) -> usize {
        match self.granularity {
            Granularity::Neuron => inputs,
            Granularity::Layer => neurons * inputs,
        }
    }
}

/// Rotational states for every unit of one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationalLayer {
    granularity: Granularity,
    states: Vec<RotationalState>,
}

impl RotationalLayer {
    /// Initializes (and, when centering, modifies) `w`. `seed` drives the
    /// imbalance assignment.
    pub fn init(w: &mut Matrix, cfg: &WrapperConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let build = |p: &mut [f64], scale: f64| -> Result<RotationalState> {
            init_rotational(p, cfg.center)?
                .with_beta(cfg.beta)?
                .with_eps(cfg.eps_rv)?
                .with_imbalance_scale(scale)
        };
        let states = match cfg.granularity {
            Granularity::Neuron => {
                let scales = match &cfg.imbalance {
                    Some(spec) => assign_imbalance(spec, w.rows(), seed)?,
                    None => vec![1.0; w.rows()],
                };
                (0..w.rows())
                    .map(|k| build(w.row_mut(k), scales[k]))
                    .collect::<Result<Vec<_>>>()?
            }
            Granularity::Layer => vec![build(w.as_mut_slice(), 1.0)?],
        };
        Ok(RotationalLayer {
            granularity: cfg.granularity,
            states,
        })
    }

    pub fn states(&self) -> &[RotationalState] {
        &self.states
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Applies one wrapped step. `delta_g` holds the inner optimizer's
    /// gradient-driven update for every entry of `w`.
    pub fn step(&mut self, w: &mut Matrix, delta_g: &Matrix, lr: f64, eta_r: f64) -> Result<Vec<WrappedStep>> {
        check_dims(w.rows(), delta_g.rows())?;
        check_dims(w.cols(), delta_g.cols())?;
        match self.granularity {
            Granularity::Neuron => (0..w.rows())
                .map(|k| wrapped_step_raw(&mut self.states[k], w.row_mut(k), delta_g.row(k), lr, eta_r))
                .collect(),
            Granularity::Layer => Ok(vec![wrapped_step_raw(
                &mut self.states[0],
                w.as_mut_slice(),
                delta_g.as_slice(),
                lr,
                eta_r,
            )?]),
        }
    }
}
