//! SGDM, AdamW, Adam+L2 and Lion with an explicit split of every step into a
//! gradient-driven part and a decay-driven part.
//!
//! Each `step_*` function advances the optimizer state by one iteration and
//! returns an [`UpdateDecomposition`]; the parameter itself is not touched.
//! `p + delta_g + delta_lambda` is the standalone optimizer's next iterate.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgdm,
    #[serde(rename = "adamw")]
    AdamW,
    #[serde(rename = "adam_l2")]
    AdamL2,
    Lion,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgdm => "sgdm",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::AdamL2 => "adam_l2",
            OptimizerKind::Lion => "lion",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters. Fields that do not apply to `kind` are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// SGDM only.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// AdamW / Adam+L2 only.
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    fn base(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind,
            lr,
            weight_decay,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgdm(lr: f64, weight_decay: f64, momentum: f64) -> Self {
        OptimizerConfig {
            momentum,
            ..Self::base(OptimizerKind::Sgdm, lr, weight_decay)
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::base(OptimizerKind::AdamW, lr, weight_decay)
    }

    pub fn adam_l2(lr: f64, weight_decay: f64) -> Self {
        Self::base(OptimizerKind::AdamL2, lr, weight_decay)
    }

    pub fn lion(lr: f64, weight_decay: f64) -> Self {
        Self::base(OptimizerKind::Lion, lr, weight_decay)
    }

    pub fn with_betas(self, beta1: f64, beta2: f64) -> Self {
        Self { beta1, beta2, ..self }
    }

    pub fn with_eps(self, eps: f64) -> Self {
        Self { eps, ..self }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    pub fn with_weight_decay(self, weight_decay: f64) -> Self {
        Self { weight_decay, ..self }
    }

    /// Checks the bounds relevant to `kind`. Errors carry the offending field name.
    pub fn validate(&self) -> Result<()> {
        fn field(name: &str, ok: bool, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(name, msg))
            }
        }
        field("lr", self.lr.is_finite() && self.lr >= 0.0, "must be finite and >= 0")?;
        field(
            "weight_decay",
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "must be finite and >= 0",
        )?;
        let unit = |x: f64| (0.0..1.0).contains(&x);
        match self.kind {
            OptimizerKind::Sgdm => field("momentum", unit(self.momentum), "must be in [0, 1)"),
            OptimizerKind::AdamW | OptimizerKind::AdamL2 | OptimizerKind::Lion => {
                field("beta1", unit(self.beta1), "must be in [0, 1)")?;
                field("beta2", unit(self.beta2), "must be in [0, 1)")?;
                if self.kind != OptimizerKind::Lion {
                    field("eps", self.eps.is_finite() && self.eps >= 0.0, "must be >= 0")?;
                }
                Ok(())
            }
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    kind: OptimizerKind,
    t: u64,
    /// First moment (SGDM: gradient part of the momentum).
    m: Vec<f64>,
    /// Second moment; empty for SGDM and Lion.
    v: Vec<f64>,
    /// SGDM only: the decay part of the momentum.
    m_decay: Vec<f64>,
}

impl OptState {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        let (v, m_decay) = match kind {
            OptimizerKind::Sgdm => (Vec::new(), vec![0.0; dim]),
            OptimizerKind::AdamW | OptimizerKind::AdamL2 => (vec![0.0; dim], Vec::new()),
            OptimizerKind::Lion => (Vec::new(), Vec::new()),
        };
        OptState {
            kind,
            t: 0,
            m: vec![0.0; dim],
            v,
            m_decay,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// The optimizer's momentum buffer as the textbook update sees it. For
    /// SGDM this is the sum of the gradient and decay accumulators.
    pub fn momentum(&self) -> Vec<f64> {
        match self.kind {
            OptimizerKind::Sgdm => self.m.iter().zip(&self.m_decay).map(|(a, b)| a + b).collect(),
            _ => self.m.clone(),
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> Option<&[f64]> {
        if self.v.is_empty() {
            None
        } else {
            Some(&self.v)
        }
    }

    pub fn decay_momentum(&self) -> Option<&[f64]> {
        if self.m_decay.is_empty() {
            None
        } else {
            Some(&self.m_decay)
        }
    }
}

/// `omega_{t+1} - omega_t = delta_g + delta_lambda`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateDecomposition {
    pub delta_g: Vec<f64>,
    pub delta_lambda: Vec<f64>,
}

impl UpdateDecomposition {
    pub fn apply(&self, p: &mut [f64]) {
        for ((x, g), d) in p.iter_mut().zip(&self.delta_g).zip(&self.delta_lambda) {
            *x += g + d;
        }
    }

    pub fn total(&self) -> Vec<f64> {
        self.delta_g
            .iter()
            .zip(&self.delta_lambda)
            .map(|(g, d)| g + d)
            .collect()
    }
}

fn check_step(state: &OptState, p: &[f64], g: &[f64], cfg: &OptimizerConfig, kind: OptimizerKind) -> Result<()> {
    if cfg.kind != kind || state.kind != kind {
        return Err(Error::Usage(format!(
            "{kind} step called with config kind {} and state kind {}",
            cfg.kind, state.kind
        )));
    }
    check_dims(state.dim(), p.len())?;
    check_dims(state.dim(), g.len())
}

/// Dispatches on `cfg.kind`.
pub fn step(state: &mut OptState, p: &[f64], g: &[f64], cfg: &OptimizerConfig) -> Result<UpdateDecomposition> {
    match cfg.kind {
        OptimizerKind::Sgdm => step_sgdm(state, p, g, cfg),
        OptimizerKind::AdamW => step_adamw(state, p, g, cfg),
        OptimizerKind::AdamL2 => step_adam_l2(state, p, g, cfg),
        OptimizerKind::Lion => step_lion(state, p, g, cfg),
    }
}

/// SGD with coupled L2 decay inside the momentum, `m <- alpha m + g + lambda p`,
/// tracked as two accumulators so the decay part can be reported separately.
pub fn step_sgdm(state: &mut OptState, p: &[f64], g: &[f64], cfg: &OptimizerConfig) -> Result<UpdateDecomposition> {
    check_step(state, p, g, cfg, OptimizerKind::Sgdm)?;
    let (alpha, lr, wd) = (cfg.momentum, cfg.lr, cfg.weight_decay);
    state.t += 1;
    let n = p.len();
    let mut delta_g = Vec::with_capacity(n);
    let mut delta_lambda = Vec::with_capacity(n);
    for i in 0..n {
        state.m[i] = alpha * state.m[i] + g[i];
        state.m_decay[i] = alpha * state.m_decay[i] + wd * p[i];
        delta_g.push(-lr * state.m[i]);
        delta_lambda.push(-lr * state.m_decay[i]);
    }
    Ok(UpdateDecomposition { delta_g, delta_lambda })
}

/// Bias-corrected Adam direction `m_hat / (sqrt(v_hat) + eps)` with 0/0 = 0.
#[inline]
fn adam_direction(m: f64, v: f64, bc1: f64, bc2: f64, eps: f64) -> f64 {
    let num = m / bc1;
    let den = (v / bc2).sqrt() + eps;
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn adam_moments(state: &mut OptState, grad: impl Fn(usize) -> f64, cfg: &OptimizerConfig) -> Vec<f64> {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    (0..state.m.len())
        .map(|i| {
            let gi = grad(i);
            state.m[i] = b1 * state.m[i] + (1.0 - b1) * gi;
            state.v[i] = b2 * state.v[i] + (1.0 - b2) * gi * gi;
            -cfg.lr * adam_direction(state.m[i], state.v[i], bc1, bc2, cfg.eps)
        })
        .collect()
}

/// Adam with decoupled weight decay `-lr * lambda * p`.
pub fn step_adamw(state: &mut OptState, p: &[f64], g: &[f64], cfg: &OptimizerConfig) -> Result<UpdateDecomposition> {
    check_step(state, p, g, cfg, OptimizerKind::AdamW)?;
    let delta_g = adam_moments(state, |i| g[i], cfg);
    let delta_lambda = p.iter().map(|x| -cfg.lr * cfg.weight_decay * x).collect();
    Ok(UpdateDecomposition { delta_g, delta_lambda })
}

/// Adam on `g + lambda p`. The decay goes through the preconditioner and is
/// not separable, so all of the step is reported in `delta_g`.
pub fn step_adam_l2(state: &mut OptState, p: &[f64], g: &[f64], cfg: &OptimizerConfig) -> Result<UpdateDecomposition> {
    check_step(state, p, g, cfg, OptimizerKind::AdamL2)?;
    let wd = cfg.weight_decay;
    let delta_g = adam_moments(state, |i| g[i] + wd * p[i], cfg);
    let delta_lambda = vec![0.0; p.len()];
    Ok(UpdateDecomposition { delta_g, delta_lambda })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Lion: the sign is taken of the beta1 interpolation with the previous
/// momentum, before the beta2 momentum update.
pub fn step_lion(state: &mut OptState, p: &[f64], g: &[f64], cfg: &OptimizerConfig) -> Result<UpdateDecomposition> {
    check_step(state, p, g, cfg, OptimizerKind::Lion)?;
    let (b1, b2, lr) = (cfg.beta1, cfg.beta2, cfg.lr);
    state.t += 1;
    let mut delta_g = Vec::with_capacity(p.len());
    for (m, gi) in state.m.iter_mut().zip(g) {
        let dir = sign(b1 * *m + (1.0 - b1) * gi);
        *m = b2 * *m + (1.0 - b2) * gi;
        delta_g.push(-lr * dir);
    }
    let delta_lambda = p.iter().map(|x| -lr * cfg.weight_decay * x).collect();
    Ok(UpdateDecomposition { delta_g, delta_lambda })
}

/// Which single-step term a total update contribution is computed for.
#[derive(Clone, Copy, Debug)]
pub enum TucTerm<'a> {
    /// The gradient `g_t`.
    Gradient(&'a [f64]),
    /// The weight decay of `omega_t`.
    Decay(&'a [f64]),
}

/// Total update contribution of one step's gradient or decay term, summed
/// over `horizon` subsequent updates.
///
/// SGDM: a fresh optimizer receives the term once and zeros afterwards; the
/// resulting updates are accumulated. AdamW gradient: the truncated sum
/// `-lr sum_k beta1^k (1 - beta1) g / (sqrt(v_k) + eps)` against the recorded
/// second moments `second_moments[k]` (at least `horizon` of them). AdamW
/// decay has no momentum and is `-lr lambda omega`.
pub fn compute_tuc(
    cfg: &OptimizerConfig,
    term: TucTerm<'_>,
    horizon: usize,
    second_moments: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::domain("compute_tuc: horizon must be >= 1"));
    }
    match (cfg.kind, term) {
        (OptimizerKind::Sgdm, term) => {
            let (g, p, cfg_used) = match term {
                TucTerm::Gradient(g) => (g.to_vec(), vec![0.0; g.len()], cfg.with_weight_decay(0.0)),
                TucTerm::Decay(w) => (vec![0.0; w.len()], w.to_vec(), *cfg),
            };
            let n = g.len();
            let zeros = vec![0.0; n];
            let mut state = OptState::new(OptimizerKind::Sgdm, n);
            let mut total = vec![0.0; n];
            for k in 0..horizon {
                let (gk, pk) = if k == 0 { (&g, &p) } else { (&zeros, &zeros) };
                let d = step_sgdm(&mut state, pk, gk, &cfg_used)?;
                for (acc, x) in total.iter_mut().zip(d.total()) {
                    *acc += x;
                }
            }
            Ok(total)
        }
        (OptimizerKind::AdamW, TucTerm::Gradient(g)) => {
            if second_moments.len() < horizon {
                return Err(Error::domain(format!(
                    "compute_tuc: AdamW needs {horizon} recorded second moments, got {}",
                    second_moments.len()
                )));
            }
            let mut total = vec![0.0; g.len()];
            let mut weight = 1.0 - cfg.beta1;
            for v in &second_moments[..horizon] {
                check_dims(g.len(), v.len())?;
                for ((acc, gi), vi) in total.iter_mut().zip(g).zip(v) {
                    let den = vi.sqrt() + cfg.eps;
                    if den > 0.0 {
                        *acc -= cfg.lr * weight * gi / den;
                    }
                }
                weight *= cfg.beta1;
            }
            Ok(total)
        }
        (OptimizerKind::AdamW, TucTerm::Decay(w)) => Ok(w.iter().map(|x| -cfg.lr * cfg.weight_decay * x).collect()),
        (kind, _) => Err(Error::domain(format!("compute_tuc: not defined for {kind}"))),
    }
}

/// Closed-form SGDM contributions, `-lr/(1-alpha) g` and `-lr lambda/(1-alpha) omega`.
pub fn sgdm_tuc_closed_form(cfg: &OptimizerConfig, term: TucTerm<'_>) -> Vec<f64> {
    let scale = cfg.lr / (1.0 - cfg.momentum);
    match term {
        TucTerm::Gradient(g) => g.iter().map(|x| -scale * x).collect(),
        TucTerm::Decay(w) => w.iter().map(|x| -scale * cfg.weight_decay * x).collect(),
    }
}
