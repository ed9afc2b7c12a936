//! Closed-form steady-state predictions for weight vectors under SGDM, AdamW,
//! Adam+L2 and Lion in a random walk, plus the AdamW norm-convergence curve
//! and the effective weight decay of scale-sensitive weights.
//!
//! All predictions use the small `lr * lambda` forms unless
//! [`PredictOptions::exact`] is set, which keeps the `-lr * lambda^2` terms in
//! the equilibrium-norm denominators (SGDM, AdamW, Lion).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::math::{dot, norm_sq};
use crate::optim::{OptimizerConfig, OptimizerKind};

/// Gradient statistics that some predictions depend on.
///
/// `unit_expected_sq_norm` is `E[|g~|^2]` with `g~ = |omega| g`, the gradient the
/// weight would have at unit norm.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientStats {
    pub expected_sq_norm: Option<f64>,
    pub unit_expected_sq_norm: Option<f64>,
    /// `sqrt(E[g~_k^2])` for each coordinate `k`.
    pub per_coord_sqrt_second_moment: Option<Vec<f64>>,
}

impl GradientStats {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_expected_sq_norm(mut self, v: f64) -> Self {
        self.expected_sq_norm = Some(v);
        self
    }

    pub fn with_unit_expected_sq_norm(mut self, v: f64) -> Self {
        self.unit_expected_sq_norm = Some(v);
        self
    }

    pub fn with_per_coord(mut self, v: Vec<f64>) -> Self {
        self.per_coord_sqrt_second_moment = Some(v);
        self
    }

    fn validate(&self, c: usize) -> Result<()> {
        let nonneg = |name: &str, x: f64| {
            if x >= 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::domain(format!("{name} must be finite and >= 0, got {x}")))
            }
        };
        if let Some(x) = self.expected_sq_norm {
            nonneg("expected_sq_norm", x)?;
        }
        if let Some(x) = self.unit_expected_sq_norm {
            nonneg("unit_expected_sq_norm", x)?;
        }
        if let Some(v) = &self.per_coord_sqrt_second_moment {
            crate::error::check_dims(c, v.len())?;
            for &x in v {
                nonneg("per_coord_sqrt_second_moment", x)?;
            }
        }
        Ok(())
    }

    /// `<1, sqrt(E[g~^2])>`; falls back to `sqrt(C) sqrt(E[|g~|^2])` when only
    /// the scalar is known (coordinates assumed to share one second moment).
    fn coord_sum(&self, c: usize) -> Option<f64> {
        if let Some(v) = &self.per_coord_sqrt_second_moment {
            return Some(v.iter().sum());
        }
        self.unit_expected_sq_norm.map(|e| (c as f64).sqrt() * e.sqrt())
    }
}

pub const REQ_GRAD_SQ: &str = "E[‖g‖²]";
pub const REQ_UNIT_GRAD_SQ: &str = "E[‖g̃‖²]";
pub const REQ_PER_COORD: &str = "per-coordinate sqrt(E[g̃²]) or E[‖g̃‖²]";

/// One predicted quantity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Estimate {
    Value(f64),
    /// Weight decay is zero: the norm grows without bound.
    NoEquilibrium,
    /// The named gradient statistic was not supplied.
    Requires(&'static str),
    /// The quantity is not defined for this optimizer.
    NotApplicable,
}

impl Estimate {
    pub fn value(self) -> Option<f64> {
        match self {
            Estimate::Value(v) => Some(v),
            _ => None,
        }
    }

    /// The number, or the reason there is none as an error.
    pub fn get(self) -> Result<f64> {
        match self {
            Estimate::Value(v) => Ok(v),
            Estimate::NoEquilibrium => Err(Error::NoEquilibrium),
            Estimate::Requires(what) => Err(Error::MissingStat(what)),
            Estimate::NotApplicable => Err(Error::domain("quantity not defined for this optimizer")),
        }
    }

    fn map(self, f: impl FnOnce(f64) -> f64) -> Estimate {
        match self {
            Estimate::Value(v) => Estimate::Value(f(v)),
            other => other,
        }
    }
}

impl Serialize for Estimate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Estimate::Value(v) => s.serialize_f64(*v),
            Estimate::NoEquilibrium => s.serialize_str("no equilibrium"),
            Estimate::Requires(what) => s.serialize_str(&format!("requires {what}")),
            Estimate::NotApplicable => s.serialize_none(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquilibriumPrediction {
    pub kind: OptimizerKind,
    /// RMS update size.
    pub eta_g_hat: Estimate,
    /// Expected angular update in radians.
    pub eta_r_hat: Estimate,
    /// Equilibrium weight norm.
    pub omega_norm_hat: Estimate,
    /// RMS diffusion rate (SGDM and AdamW only).
    pub tau_g_hat: Estimate,
    /// Rotational diffusion rate (SGDM and AdamW only).
    pub tau_r_hat: Estimate,
    /// Set when the prediction rests on a cruder model than the others.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub approximation: Option<&'static str>,
}

impl EquilibriumPrediction {
    fn estimates(&self) -> [Estimate; 5] {
        [
            self.eta_g_hat,
            self.eta_r_hat,
            self.omega_norm_hat,
            self.tau_g_hat,
            self.tau_r_hat,
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Keep the `-lr * lambda^2` term in equilibrium-norm denominators.
    pub exact: bool,
}

pub const LION_APPROXIMATION: &str = "sign modelled as a scaled identity assuming i.i.d. Gaussian pre-sign coordinates";

/// Like [`predict`], but quantities that need missing statistics are reported
/// as [`Estimate::Requires`] instead of failing.
pub fn predict_partial(
    cfg: &OptimizerConfig,
    c: usize,
    stats: &GradientStats,
    opts: PredictOptions,
) -> Result<EquilibriumPrediction> {
    cfg.validate()?;
    if c == 0 {
        return Err(Error::domain("dimension C must be >= 1"));
    }
    stats.validate(c)?;
    let (lr, wd) = (cfg.lr, cfg.weight_decay);
    let cf = c as f64;
    let decayed = wd > 0.0;
    let eq = |f: &dyn Fn() -> f64| {
        if decayed {
            Estimate::Value(f())
        } else {
            Estimate::NoEquilibrium
        }
    };
    // The -lr*lambda^2 correction, or 0 for the simplified forms.
    let corr = if opts.exact { lr * wd * wd } else { 0.0 };

    let pred = match cfg.kind {
        OptimizerKind::Sgdm => {
            let a = cfg.momentum;
            let eta_g = match stats.expected_sq_norm {
                Some(e) => Estimate::Value(lr * (e / (1.0 - a * a)).sqrt()),
                None => Estimate::Requires(REQ_GRAD_SQ),
            };
            let tau_g = match stats.expected_sq_norm {
                Some(e) => Estimate::Value(lr / (1.0 - a) * e.sqrt()),
                None => Estimate::Requires(REQ_GRAD_SQ),
            };
            let denom = 2.0 * wd * (1.0 - a) - corr;
            let omega = match (decayed, stats.unit_expected_sq_norm) {
                (false, _) => Estimate::NoEquilibrium,
                (true, Some(e)) => Estimate::Value((lr * e / denom).powf(0.25)),
                (true, None) => Estimate::Requires(REQ_UNIT_GRAD_SQ),
            };
            EquilibriumPrediction {
                kind: cfg.kind,
                eta_g_hat: eta_g,
                eta_r_hat: eq(&|| (lr * denom / (1.0 - a * a)).sqrt()),
                omega_norm_hat: omega,
                tau_g_hat: tau_g,
                tau_r_hat: eq(&|| (lr * denom).sqrt() / (1.0 - a)),
                approximation: None,
            }
        }
        OptimizerKind::AdamW => {
            let k = momentum_factor(cfg.beta1);
            let denom = 2.0 * wd - corr;
            EquilibriumPrediction {
                kind: cfg.kind,
                eta_g_hat: Estimate::Value(lr * (cf * k).sqrt()),
                eta_r_hat: eq(&|| (lr * denom * k).sqrt()),
                omega_norm_hat: eq(&|| (lr * cf / denom).sqrt()),
                tau_g_hat: Estimate::Value(lr * cf.sqrt()),
                tau_r_hat: eq(&|| (lr * denom).sqrt()),
                approximation: None,
            }
        }
        OptimizerKind::AdamL2 => {
            let k = momentum_factor(cfg.beta1);
            let sum = stats.coord_sum(c);
            let (eta_r, omega) = match (decayed, sum) {
                (false, _) => (Estimate::NoEquilibrium, Estimate::NoEquilibrium),
                (true, None) => (Estimate::Requires(REQ_PER_COORD), Estimate::Requires(REQ_PER_COORD)),
                (true, Some(s)) if s <= 0.0 => {
                    return Err(Error::domain("Adam+L2 prediction needs a non-zero gradient statistic"))
                }
                (true, Some(s)) => (
                    Estimate::Value((2.0 * lr * lr * wd / s).cbrt() * (k * cf).sqrt()),
                    Estimate::Value((lr / (2.0 * wd) * s).cbrt()),
                ),
            };
            EquilibriumPrediction {
                kind: cfg.kind,
                eta_g_hat: Estimate::Value(lr * (cf * k).sqrt()),
                eta_r_hat: eta_r,
                omega_norm_hat: omega,
                tau_g_hat: Estimate::NotApplicable,
                tau_r_hat: Estimate::NotApplicable,
                approximation: None,
            }
        }
        OptimizerKind::Lion => {
            let q = lion_factor(cfg.beta1, cfg.beta2);
            let eta_g = lr * cf.sqrt();
            let omega = eq(&|| (2.0 * lr * cf / (PI * (2.0 * wd - corr))).sqrt() / q.sqrt());
            EquilibriumPrediction {
                kind: cfg.kind,
                eta_g_hat: Estimate::Value(eta_g),
                eta_r_hat: if opts.exact {
                    omega.map(|w| eta_g / w)
                } else {
                    eq(&|| (PI * lr * wd * q).sqrt())
                },
                omega_norm_hat: omega,
                tau_g_hat: Estimate::NotApplicable,
                tau_r_hat: Estimate::NotApplicable,
                approximation: Some(LION_APPROXIMATION),
            }
        }
    };
    Ok(pred)
}

/// Steady-state prediction for `cfg` on a `c`-dimensional weight vector.
///
/// With zero weight decay the equilibrium quantities are
/// [`Estimate::NoEquilibrium`]. A statistic needed by the optimizer's row
/// that was not supplied is an error naming it.
pub fn predict(cfg: &OptimizerConfig, c: usize, stats: &GradientStats) -> Result<EquilibriumPrediction> {
    predict_with(cfg, c, stats, PredictOptions::default())
}

pub fn predict_with(
    cfg: &OptimizerConfig,
    c: usize,
    stats: &GradientStats,
    opts: PredictOptions,
) -> Result<EquilibriumPrediction> {
    let pred = predict_partial(cfg, c, stats, opts)?;
    for e in pred.estimates() {
        if let Estimate::Requires(what) = e {
            return Err(Error::MissingStat(what));
        }
    }
    Ok(pred)
}

/// `(1 - beta1) / (1 + beta1)`, the variance reduction of an EMA of white noise.
fn momentum_factor(beta1: f64) -> f64 {
    (1.0 - beta1) / (1.0 + beta1)
}

/// Variance factor of Lion's pre-sign interpolation.
fn lion_factor(beta1: f64, beta2: f64) -> f64 {
    (1.0 - beta1).powi(2) + beta1 * beta1 * (1.0 - beta2) / (1.0 + beta2)
}

fn adamw_contraction(cfg: &OptimizerConfig) -> Result<f64> {
    if cfg.kind != OptimizerKind::AdamW {
        return Err(Error::domain(format!(
            "norm convergence is modelled for AdamW, got {}",
            cfg.kind
        )));
    }
    let x = cfg.lr * cfg.weight_decay;
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::domain(format!(
            "norm convergence needs 0 < lr*lambda < 1, got {x}"
        )));
    }
    Ok(1.0 - 2.0 * x + x * x)
}

/// Fixed point `lr^2 C / (2 lr lambda - lr^2 lambda^2)` of the AdamW squared-norm recurrence.
pub fn adamw_norm_fixed_point(cfg: &OptimizerConfig, c: usize) -> Result<f64> {
    adamw_contraction(cfg)?;
    let (lr, wd) = (cfg.lr, cfg.weight_decay);
    Ok(lr * lr * c as f64 / (2.0 * lr * wd - lr * lr * wd * wd))
}

/// Expected squared norm `E[omega_i^2]` for `i = 0..=steps` under AdamW,
/// starting from `omega0_sq`.
pub fn norm_convergence_curve(omega0_sq: f64, cfg: &OptimizerConfig, c: usize, steps: usize) -> Result<Vec<f64>> {
    let a = adamw_contraction(cfg)?;
    let fp = adamw_norm_fixed_point(cfg, c)?;
    if !(omega0_sq >= 0.0) {
        return Err(Error::domain("initial squared norm must be >= 0"));
    }
    let mut out = Vec::with_capacity(steps + 1);
    let mut ai = 1.0;
    for _ in 0..=steps {
        out.push(omega0_sq * ai + fp * (1.0 - ai));
        ai *= a;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialStats {
    /// Relative radial gradient coefficient; positive values act as extra decay.
    pub lambda_u: f64,
    /// `lambda + lambda_u`.
    pub lambda_e: f64,
}

pub fn effective_decay(lambda: f64, lambda_u: f64) -> Result<RadialStats> {
    if !(lambda >= 0.0) {
        return Err(Error::domain(format!("weight decay must be >= 0, got {lambda}")));
    }
    Ok(RadialStats {
        lambda_u,
        lambda_e: lambda + lambda_u,
    })
}

/// Prediction for a scale-sensitive weight: `cfg` with its weight decay
/// replaced by `radial.lambda_e`. A non-positive effective decay has no
/// equilibrium.
pub fn predict_scale_sensitive(
    cfg: &OptimizerConfig,
    radial: &RadialStats,
    c: usize,
    stats: &GradientStats,
    opts: PredictOptions,
) -> Result<EquilibriumPrediction> {
    let effective = cfg.with_weight_decay(radial.lambda_e.max(0.0));
    predict_partial(&effective, c, stats, opts)
}

/// Sample mean of `<omega, g> / |omega|^2` over the given gradients.
pub fn estimate_lambda_u<'a, I>(omega: &[f64], samples: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let n2 = norm_sq(omega);
    if n2 == 0.0 {
        return Err(Error::domain("estimate_lambda_u: omega has zero norm"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for g in samples {
        crate::error::check_dims(omega.len(), g.len())?;
        total += dot(omega, g) / n2;
        count += 1;
    }
    if count == 0 {
        return Err(Error::domain("estimate_lambda_u: needs at least one gradient sample"));
    }
    Ok(total / count as f64)
}
