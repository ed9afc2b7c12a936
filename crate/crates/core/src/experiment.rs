//! Experiment configs, the seeded run loop over the simple system, the
//! measured-vs-predicted check, and the Monte-Carlo norm-convergence run.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{norm, RngStream, StreamingMoments};
use crate::optim::{step, OptState, OptimizerConfig, OptimizerKind, UpdateDecomposition};
use crate::predict::{
    effective_decay, norm_convergence_curve, predict_partial, predict_scale_sensitive, EquilibriumPrediction, Estimate,
    GradientStats, PredictOptions,
};
use crate::rotational::{resolve_target_eta_r, RotationalLayer, WrapperConfig};
use crate::system::{init_system, Matrix, SystemConfig, SystemMode};
use crate::telemetry::{
    layer_aggregate, read_csv, record_step, window_mean, MeanKind, Metric, StepObservation, TelemetryRecord,
    TelemetryWriter, WindowStats, LAYER_UNIT,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Name of the single trainable layer in telemetry output.
pub const LAYER: &str = "w";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineSchedule {
    /// Multiplier reached at the last step, in `(0, 1]`.
    pub final_fraction: f64,
}

/// Learning-rate multiplier: optional linear warmup followed by an optional
/// cosine decay over the remaining steps. Both absent means constant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub cosine: Option<CosineSchedule>,
}

impl ScheduleConfig {
    pub fn is_constant(&self) -> bool {
        self.warmup_steps == 0 && self.cosine.is_none()
    }

    /// Multiplier for 1-based step `t` of `steps`.
    pub fn multiplier(&self, t: u64, steps: u64) -> f64 {
        let warm = if self.warmup_steps > 0 && t <= self.warmup_steps {
            t as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let cos = match self.cosine {
            Some(c) if t > self.warmup_steps => {
                let span = steps.saturating_sub(self.warmup_steps + 1);
                let progress = if span == 0 {
                    1.0
                } else {
                    (t - self.warmup_steps - 1) as f64 / span as f64
                };
                c.final_fraction + (1.0 - c.final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            _ => 1.0,
        };
        warm * cos
    }

    fn validate(&self) -> Result<()> {
        if let Some(c) = self.cosine {
            if !(c.final_fraction > 0.0 && c.final_fraction <= 1.0) {
                return Err(Error::config("schedule.cosine.final_fraction", "must be in (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryConfig {
    /// Write one row per neuron as well as the layer aggregate. Defaults to
    /// on for at most 256 neurons.
    #[serde(default)]
    pub per_neuron: Option<bool>,
    #[serde(default = "default_flush_interval")]
    pub flush_interval: u64,
}

fn default_flush_interval() -> u64 {
    1000
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        TelemetryConfig {
            per_neuron: None,
            flush_interval: default_flush_interval(),
        }
    }
}

impl TelemetryConfig {
    pub fn per_neuron_for(&self, neurons: usize) -> bool {
        self.per_neuron.unwrap_or(neurons <= 256)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// The report window is `[burn_in_steps, steps]`.
    #[serde(default = "default_burn_in")]
    pub burn_in_steps: u64,
    /// Tolerance for angular-update verdicts, in percent.
    #[serde(default = "default_tolerance")]
    pub tolerance_pct: f64,
    /// Tolerance for the weight-norm verdict; defaults to `tolerance_pct`.
    #[serde(default)]
    pub norm_tolerance_pct: Option<f64>,
    /// Add one angular-update verdict per neuron.
    #[serde(default)]
    pub per_neuron: bool,
    /// Start the window at the first step whose layer-mean norm is within 5%
    /// of its mean over the declared window.
    #[serde(default)]
    pub auto_burn_in: bool,
    /// Keep the `-lr * lambda^2` terms in the predictions.
    #[serde(default)]
    pub exact: bool,
    #[serde(default = "default_downsample")]
    pub downsample_factor: usize,
}

fn default_burn_in() -> u64 {
    5000
}
fn default_tolerance() -> f64 {
    10.0
}
fn default_downsample() -> usize {
    100
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            burn_in_steps: default_burn_in(),
            tolerance_pct: default_tolerance(),
            norm_tolerance_pct: None,
            per_neuron: false,
            auto_burn_in: false,
            exact: false,
            downsample_factor: default_downsample(),
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub system: SystemConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub wrapper: WrapperConfig,
    pub steps: u64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub telemetry: TelemetryConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

impl ExperimentConfig {
    pub fn new(optimizer: OptimizerConfig, steps: u64) -> Self {
        ExperimentConfig {
            name: default_name(),
            seed: 0,
            system: SystemConfig::default(),
            optimizer,
            wrapper: WrapperConfig::default(),
            steps,
            schedule: ScheduleConfig::default(),
            telemetry: TelemetryConfig::default(),
            report: ReportConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(json_config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.report.burn_in_steps >= self.steps {
            return Err(Error::config("report.burn_in_steps", "must be < steps"));
        }
        if !(self.report.tolerance_pct > 0.0) {
            return Err(Error::config("report.tolerance_pct", "must be > 0"));
        }
        if let Some(t) = self.report.norm_tolerance_pct {
            if !(t > 0.0) {
                return Err(Error::config("report.norm_tolerance_pct", "must be > 0"));
            }
        }
        if self.report.downsample_factor == 0 {
            return Err(Error::config("report.downsample_factor", "must be >= 1"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file-name-safe string"));
        }
        self.system.validate()?;
        self.optimizer
            .validate()
            .map_err(|e| prefix_config_path(e, "optimizer"))?;
        self.wrapper.validate()?;
        self.schedule.validate()?;
        if self.wrapper.enabled && self.optimizer.lr <= 0.0 {
            return Err(Error::config("optimizer.lr", "must be > 0 with the wrapper enabled"));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Declared report window, inclusive.
    pub fn window(&self) -> (u64, u64) {
        (self.report.burn_in_steps.max(1), self.steps)
    }
}

fn prefix_config_path(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { path, message } => Error::Config {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    }
}

fn json_config_error(e: serde_json::Error) -> Error {
    Error::config(format!("line {} column {}", e.line(), e.column()), e.to_string())
}

/// What a run leaves behind besides the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub steps: u64,
    pub window: (u64, u64),
    pub neurons: usize,
    pub inputs: usize,
    /// Window mean of every metric, per neuron and for the layer (`-1`).
    pub units: Vec<UnitSummary>,
    /// Per neuron and coordinate, `sqrt` of the window mean of `(|w| g_c)^2`.
    /// Only kept for Adam+L2 runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_coord_sqrt_second_moment: Option<Vec<Vec<f64>>>,
    /// Per neuron, the sum over coordinates of the quantity above.
    pub coord_sums: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrapper: Option<WrapperSummary>,
    pub csv_rows: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub neuron: i64,
    pub means: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrapperSummary {
    /// Mean over the window of the per-step target angle.
    pub eta_r_target: f64,
    pub imbalance_scales: Vec<f64>,
    pub initial_norms: Vec<f64>,
    /// Largest `| |p| / n_p - 1 |` seen after any step.
    pub max_norm_drift: f64,
    pub skipped_steps: u64,
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub stats: WindowStats,
    pub series: LayerSeries,
    pub weights: Matrix,
}

impl RunOutcome {
    /// Checks over the declared window without going through the CSV.
    pub fn check(&self, cfg: &ExperimentConfig) -> Result<ComparisonReport> {
        check(cfg, &self.summary, &self.stats, &self.series)
    }
}

impl RunSummary {
    pub fn mean(&self, neuron: i64, metric: Metric) -> Option<f64> {
        self.units
            .iter()
            .find(|u| u.neuron == neuron)
            .and_then(|u| u.means.get(metric.name()).copied().flatten())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Runs `cfg` and streams telemetry to `csv` when given.
pub fn run_experiment<W: Write>(cfg: &ExperimentConfig, csv: Option<W>) -> Result<RunOutcome> {
    cfg.validate()?;
    let (k, c) = (cfg.system.neurons, cfg.system.inputs);
    let mut sys = init_system(cfg.system, cfg.seed)?;
    let mut w = sys.weights().clone();
    let mut layer = if cfg.wrapper.enabled {
        Some(RotationalLayer::init(&mut w, &cfg.wrapper, cfg.seed)?)
    } else {
        None
    };
    *sys.weights_mut() = w;
    let unit_dim = cfg.wrapper.unit_dim(k, c);
    let initial_norms: Vec<f64> = layer
        .as_ref()
        .map(|l| l.states().iter().map(|s| s.n_p()).collect())
        .unwrap_or_default();

    let mut states: Vec<OptState> = (0..k).map(|_| OptState::new(cfg.optimizer.kind, c)).collect();
    let per_neuron_rows = cfg.telemetry.per_neuron_for(k);
    let mut writer = csv
        .map(|sink| TelemetryWriter::new(sink, cfg.telemetry.flush_interval))
        .transpose()?;
    let (from, to) = cfg.window();
    let mut stats = WindowStats::new(from, to);
    let mut series = LayerSeries::default();
    let mut coord_sq = vec![0.0; k * c];
    let mut window_steps = 0u64;
    let mut target_moments = StreamingMoments::new();
    let mut max_drift = 0.0f64;

    let mut decs: Vec<UpdateDecomposition> = Vec::with_capacity(k);
    let mut records: Vec<TelemetryRecord> = Vec::with_capacity(k);
    let mut delta_g = Matrix::zeros(k, c);

    for t in 1..=cfg.steps {
        let lr = cfg.optimizer.lr * cfg.schedule.multiplier(t, cfg.steps);
        let step_cfg = cfg.optimizer.with_lr(lr);
        let eta_r = match &layer {
            Some(_) => Some(resolve_target_eta_r(
                &step_cfg,
                unit_dim,
                cfg.wrapper.eta_r_override,
                cfg.wrapper.adamw_eta_r_for_adam_l2,
            )?),
            None => None,
        };
        let grads = sys.step_gradients()?;
        let prev = sys.weights().clone();
        let momenta: Vec<Vec<f64>> = states.iter().map(|s| s.momentum()).collect();

        decs.clear();
        for (ki, state) in states.iter_mut().enumerate() {
            decs.push(step(state, prev.row(ki), grads.dw.row(ki), &step_cfg)?);
        }
        {
            let w = sys.weights_mut();
            match (&mut layer, eta_r) {
                (Some(l), Some(eta_r)) => {
                    for (ki, d) in decs.iter().enumerate() {
                        delta_g.row_mut(ki).copy_from_slice(&d.delta_g);
                    }
                    l.step(w, &delta_g, lr, eta_r)?;
                }
                _ => {
                    for (ki, d) in decs.iter().enumerate() {
                        d.apply(w.row_mut(ki));
                    }
                }
            }
            for ki in 0..k {
                if w.row(ki).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        step: t as usize,
                        unit: ki,
                    });
                }
            }
        }
        let w = sys.weights();
        if let Some(l) = &layer {
            let norms: Vec<f64> = match cfg.wrapper.granularity {
                crate::rotational::Granularity::Neuron => (0..k).map(|ki| norm(w.row(ki))).collect(),
                crate::rotational::Granularity::Layer => vec![norm(w.as_slice())],
            };
            for (n, s) in norms.iter().zip(l.states()) {
                max_drift = max_drift.max((n / s.n_p() - 1.0).abs());
            }
        }

        records.clear();
        for ki in 0..k {
            records.push(record_step(
                t,
                LAYER,
                ki as i64,
                StepObservation {
                    prev: prev.row(ki),
                    new: w.row(ki),
                    decomposition: &decs[ki],
                    gradient: grads.dw.row(ki),
                    momentum: Some(&momenta[ki]),
                },
            ));
        }
        let agg = layer_aggregate(t, LAYER, &records);
        for r in &records {
            stats.push(r);
        }
        stats.push(&agg);
        series.push(&agg);
        if (from..=to).contains(&t) {
            window_steps += 1;
            if let Some(eta_r) = eta_r {
                target_moments.push(eta_r);
            }
            for ki in 0..k {
                let p = prev.row(ki);
                let w_sq: f64 = p.iter().map(|x| x * x).sum();
                for (acc, g) in coord_sq[ki * c..(ki + 1) * c].iter_mut().zip(grads.dw.row(ki)) {
                    *acc += w_sq * g * g;
                }
            }
        }
        if let Some(wr) = writer.as_mut() {
            if per_neuron_rows {
                for r in records.drain(..) {
                    wr.push(r);
                }
            }
            wr.push(agg);
            wr.end_step(t)?;
        }
    }

    let csv_rows = match writer {
        Some(wr) => {
            let rows_before = wr.rows();
            let mut wr = wr;
            wr.flush()?;
            let rows = wr.rows().max(rows_before);
            wr.finish()?;
            rows
        }
        None => 0,
    };

    let per_coord: Vec<Vec<f64>> = (0..k)
        .map(|ki| {
            coord_sq[ki * c..(ki + 1) * c]
                .iter()
                .map(|s| (s / window_steps.max(1) as f64).sqrt())
                .collect()
        })
        .collect();
    let coord_sums = per_coord.iter().map(|v| v.iter().sum()).collect();
    let mut units: Vec<UnitSummary> = (0..k as i64)
        .chain(std::iter::once(LAYER_UNIT))
        .map(|n| UnitSummary {
            neuron: n,
            means: Metric::ALL
                .iter()
                .map(|m| (m.name().to_string(), stats.mean(LAYER, n, *m)))
                .collect(),
        })
        .collect();
    units.sort_by_key(|u| u.neuron);

    let wrapper = layer.as_ref().map(|l| WrapperSummary {
        eta_r_target: target_moments.mean(),
        imbalance_scales: l.states().iter().map(|s| s.imbalance_scale()).collect(),
        initial_norms: initial_norms.clone(),
        max_norm_drift: max_drift,
        skipped_steps: l.states().iter().map(|s| s.skipped()).sum(),
    });
    let summary = RunSummary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        version: VERSION.to_string(),
        steps: cfg.steps,
        window: (from, to),
        neurons: k,
        inputs: c,
        units,
        per_coord_sqrt_second_moment: (cfg.optimizer.kind == OptimizerKind::AdamL2).then_some(per_coord),
        coord_sums,
        wrapper,
        csv_rows,
    };
    Ok(RunOutcome {
        summary,
        stats,
        series,
        weights: sys.weights().clone(),
    })
}

/// One measured-vs-predicted comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub quantity: String,
    /// `None` for layer-level verdicts.
    pub neuron: Option<i64>,
    pub measured: f64,
    pub predicted: Option<f64>,
    /// `|measured - predicted| / predicted`, or the absolute deviation for
    /// quantities whose prediction is zero.
    pub error: Option<f64>,
    /// Bound on `error`: a fraction for relative errors.
    pub tolerance: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Verdict {
    fn relative(quantity: &str, neuron: Option<i64>, measured: f64, predicted: Option<f64>, tolerance: f64) -> Self {
        let error = predicted.map(|p| (measured - p).abs() / p.abs());
        Verdict {
            quantity: quantity.to_string(),
            neuron,
            measured,
            predicted,
            error,
            tolerance,
            pass: error.is_some_and(|e| e <= tolerance),
            note: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub window: (u64, u64),
    pub downsample_factor: usize,
    /// Layer-mean prediction at the configured learning rate, wrapper off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_prediction: Option<serde_json::Value>,
    pub verdicts: Vec<Verdict>,
    /// RMS-downsampled layer-mean series, keyed by metric name.
    pub layer_series: BTreeMap<String, Vec<f64>>,
    pub pass: bool,
}

/// Aggregate-row series needed by the report.
#[derive(Clone, Debug, Default)]
pub struct LayerSeries {
    series: BTreeMap<Metric, Vec<(u64, f64)>>,
}

impl LayerSeries {
    const METRICS: [Metric; 3] = [Metric::AngularUpdate, Metric::WeightNorm, Metric::RmsUpdate];

    pub fn push(&mut self, r: &TelemetryRecord) {
        if !r.is_aggregate() {
            return;
        }
        for m in Self::METRICS {
            if let Some(v) = r.get(m) {
                self.series.entry(m).or_default().push((r.step, v));
            }
        }
    }

    fn get(&self, m: Metric) -> &[(u64, f64)] {
        self.series.get(&m).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// First step whose layer-mean norm is within 5% of its mean over `window`.
pub fn auto_burn_in(series: &LayerSeries, window: (u64, u64)) -> Option<u64> {
    let norms = series.get(Metric::WeightNorm);
    let target = window_mean(norms, window.0, window.1, MeanKind::Arithmetic).ok()?;
    norms
        .iter()
        .find(|(_, v)| ((v - target) / target).abs() <= 0.05)
        .map(|(s, _)| *s)
}

/// Checks a run from its CSV and summary. Reads the CSV twice when the
/// window is chosen automatically.
pub fn check_csv(cfg: &ExperimentConfig, summary: &RunSummary, csv_path: &Path) -> Result<ComparisonReport> {
    let mut series = LayerSeries::default();
    read_csv(std::fs::File::open(csv_path)?, |r| {
        series.push(&r);
        Ok(())
    })?;
    let mut window = summary.window;
    if cfg.report.auto_burn_in {
        if let Some(s) = auto_burn_in(&series, window) {
            window.0 = s.min(window.1);
        }
    }
    let mut stats = WindowStats::new(window.0, window.1);
    read_csv(std::fs::File::open(csv_path)?, |r| {
        stats.push(&r);
        Ok(())
    })?;
    check(cfg, summary, &stats, &series)
}

/// Verdicts for a finished run; a pure function of its inputs.
pub fn check(
    cfg: &ExperimentConfig,
    summary: &RunSummary,
    stats: &WindowStats,
    series: &LayerSeries,
) -> Result<ComparisonReport> {
    let neurons: Vec<i64> = (0..summary.neurons as i64).collect();
    let measured = |n: i64, m: Metric| stats.mean(LAYER, n, m);
    let angular: Vec<f64> = neurons
        .iter()
        .map(|&n| measured(n, Metric::AngularUpdate).ok_or(Error::MissingStat("angular_update")))
        .collect::<Result<_>>()?;
    let layer_angular = crate::math::mean(&angular);
    let tol = cfg.report.tolerance_pct / 100.0;
    let norm_tol = cfg.report.norm_tolerance_pct.map_or(tol, |t| t / 100.0);
    let opts = PredictOptions {
        exact: cfg.report.exact,
    };
    let mut verdicts = Vec::new();
    let mut layer_prediction = None;

    if let Some(wrap) = &summary.wrapper {
        let targets: Vec<f64> = wrap.imbalance_scales.iter().map(|s| wrap.eta_r_target * s).collect();
        let target_scale = if targets.len() == neurons.len() {
            targets.clone()
        } else {
            vec![wrap.eta_r_target; neurons.len()]
        };
        verdicts.push(Verdict::relative(
            "angular_update",
            None,
            layer_angular,
            Some(crate::math::mean(&target_scale)),
            tol,
        ));
        if cfg.report.per_neuron || cfg.wrapper.granularity == crate::rotational::Granularity::Neuron {
            for (&n, (&a, &p)) in neurons.iter().zip(angular.iter().zip(&target_scale)) {
                verdicts.push(Verdict::relative("angular_update", Some(n), a, Some(p), tol));
            }
        }
        verdicts.push(Verdict {
            quantity: "norm_drift".into(),
            neuron: None,
            measured: wrap.max_norm_drift,
            predicted: Some(0.0),
            error: Some(wrap.max_norm_drift),
            tolerance: 1e-12,
            pass: wrap.max_norm_drift <= 1e-12,
            note: None,
        });
    } else {
        let synthetic = cfg.system.mode == SystemMode::Synthetic;
        let mut preds: Vec<EquilibriumPrediction> = Vec::with_capacity(neurons.len());
        for &n in &neurons {
            let mut st = GradientStats::none();
            st.expected_sq_norm = measured(n, Metric::GradSqNorm);
            st.unit_expected_sq_norm = measured(n, Metric::UnitGradSqNorm);
            if let Some(pc) = &summary.per_coord_sqrt_second_moment {
                st.per_coord_sqrt_second_moment = pc.get(n as usize).cloned();
            }
            let p = if synthetic {
                let lambda_u = measured(n, Metric::RadialCoeff).ok_or(Error::MissingStat("radial_coeff"))?;
                let radial = effective_decay(cfg.optimizer.weight_decay, lambda_u)?;
                predict_scale_sensitive(&cfg.optimizer, &radial, summary.inputs, &st, opts)?
            } else {
                predict_partial(&cfg.optimizer, summary.inputs, &st, opts)?
            };
            preds.push(p);
        }
        // Without the wrapper an override is a stand-in for the prediction.
        let injected = cfg.wrapper.eta_r_override;
        if let Some(v) = injected {
            for p in &mut preds {
                p.eta_r_hat = Estimate::Value(v);
            }
        }
        let mean_estimate = |f: fn(&EquilibriumPrediction) -> Estimate| -> Estimate {
            let mut vals = Vec::with_capacity(preds.len());
            for p in &preds {
                match f(p) {
                    Estimate::Value(v) => vals.push(v),
                    other => return other,
                }
            }
            Estimate::Value(crate::math::mean(&vals))
        };
        let eta_r = mean_estimate(|p| p.eta_r_hat);
        let omega = mean_estimate(|p| p.omega_norm_hat);
        let layer_norm = crate::math::mean(
            &neurons
                .iter()
                .map(|&n| measured(n, Metric::WeightNorm).unwrap_or(f64::NAN))
                .collect::<Vec<_>>(),
        );
        let note = |e: Estimate| match e {
            Estimate::Value(_) => None,
            Estimate::NoEquilibrium => Some("no equilibrium".to_string()),
            Estimate::Requires(what) => Some(format!("requires {what}")),
            Estimate::NotApplicable => Some("not applicable".to_string()),
        };
        let mut v = Verdict::relative("angular_update", None, layer_angular, eta_r.value(), tol);
        v.note = note(eta_r).or(injected.map(|_| "prediction overridden by wrapper.eta_r_override".to_string()));
        verdicts.push(v);
        let mut v = Verdict::relative("weight_norm", None, layer_norm, omega.value(), norm_tol);
        v.note = note(omega);
        verdicts.push(v);
        if cfg.report.per_neuron {
            for ((&n, &a), p) in neurons.iter().zip(&angular).zip(&preds) {
                verdicts.push(Verdict::relative(
                    "angular_update",
                    Some(n),
                    a,
                    p.eta_r_hat.value(),
                    tol,
                ));
            }
        }
        let mut layer_stats = GradientStats::none();
        layer_stats.expected_sq_norm = measured(LAYER_UNIT, Metric::GradSqNorm);
        layer_stats.unit_expected_sq_norm = measured(LAYER_UNIT, Metric::UnitGradSqNorm);
        let lp = predict_partial(&cfg.optimizer, summary.inputs, &layer_stats, opts)?;
        layer_prediction = Some(serde_json::to_value(&lp)?);
    }

    let factor = cfg.report.downsample_factor;
    let mut layer_series = BTreeMap::new();
    for m in LayerSeries::METRICS {
        let raw: Vec<f64> = series.get(m).iter().map(|(_, v)| *v).collect();
        layer_series.insert(m.name().to_string(), crate::math::rms_downsample(&raw, factor)?);
    }
    let pass = verdicts.iter().all(|v| v.pass);
    Ok(ComparisonReport {
        name: summary.name.clone(),
        seed: summary.seed,
        config_hash: summary.config_hash.clone(),
        version: summary.version.clone(),
        window: (stats.from, stats.to),
        downsample_factor: factor,
        layer_prediction,
        verdicts,
        layer_series,
        pass,
    })
}

/// Files written by [`run_to_dir`].
pub struct RunFiles {
    pub csv: std::path::PathBuf,
    pub summary: std::path::PathBuf,
}

pub fn run_files(dir: &Path) -> RunFiles {
    RunFiles {
        csv: dir.join("telemetry.csv"),
        summary: dir.join("summary.json"),
    }
}

/// Runs `cfg`, writing `telemetry.csv` and `summary.json` into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(dir)?;
    let files = run_files(dir);
    let sink = std::io::BufWriter::new(std::fs::File::create(&files.csv)?);
    let out = run_experiment(cfg, Some(sink))?;
    std::fs::write(&files.summary, serde_json::to_string_pretty(&out.summary)? + "\n")?;
    Ok(out)
}

/// Inputs of the Monte-Carlo norm-convergence run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeConfig {
    #[serde(default = "default_converge_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Initial squared norm.
    pub omega0_sq: f64,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(rename = "C", alias = "dim")]
    pub dim: usize,
    pub steps: usize,
    pub trials: usize,
    /// Pointwise relative-error tolerance in percent, applied after `check_from`.
    #[serde(default = "default_converge_tolerance")]
    pub tolerance_pct: f64,
    #[serde(default = "default_check_from")]
    pub check_from: usize,
}

fn default_converge_name() -> String {
    "converge".into()
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
fn default_converge_tolerance() -> f64 {
    15.0
}
fn default_check_from() -> usize {
    50
}

impl ConvergeConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ConvergeConfig = serde_json::from_str(text).map_err(json_config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::adamw(self.lr, self.weight_decay)
            .with_betas(self.beta1, self.beta2)
            .with_eps(self.eps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials", "must be >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("C", "must be >= 1"));
        }
        if !(self.omega0_sq > 0.0 && self.omega0_sq.is_finite()) {
            return Err(Error::config("omega0_sq", "must be finite and > 0"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file-name-safe string"));
        }
        self.optimizer().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergeRow {
    pub step: usize,
    pub monte_carlo: f64,
    pub analytic: Option<f64>,
    pub rel_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergeReport {
    pub name: String,
    pub fixed_point: Option<f64>,
    pub rows: Vec<ConvergeRow>,
    /// Largest relative error at steps `>= check_from`.
    pub max_rel_error: Option<f64>,
    pub tolerance_pct: f64,
    pub pass: Option<bool>,
}

/// Averages `|w_i|^2` over independent AdamW random walks with i.i.d.
/// `N(0, 1)` gradient coordinates and compares it with the analytic curve.
pub fn run_converge(cfg: &ConvergeConfig) -> Result<ConvergeReport> {
    cfg.validate()?;
    let opt = cfg.optimizer();
    let analytic = if cfg.weight_decay > 0.0 {
        Some(norm_convergence_curve(cfg.omega0_sq, &opt, cfg.dim, cfg.steps)?)
    } else {
        None
    };
    let mut sums = vec![0.0; cfg.steps + 1];
    let root = RngStream::new(cfg.seed);
    let mut g = vec![0.0; cfg.dim];
    for trial in 0..cfg.trials {
        let mut rng = root.derive(trial as u64);
        let mut w = vec![0.0; cfg.dim];
        rng.fill_normal(&mut w, 1.0);
        let n = norm(&w);
        w.iter_mut().for_each(|x| *x *= cfg.omega0_sq.sqrt() / n);
        let mut state = OptState::new(OptimizerKind::AdamW, cfg.dim);
        sums[0] += crate::math::norm_sq(&w);
        for s in sums.iter_mut().skip(1) {
            rng.fill_normal(&mut g, 1.0);
            let d = step(&mut state, &w, &g, &opt)?;
            d.apply(&mut w);
            *s += crate::math::norm_sq(&w);
        }
    }
    let trials = cfg.trials as f64;
    let rows: Vec<ConvergeRow> = sums
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mc = s / trials;
            let a = analytic.as_ref().map(|c| c[i]);
            ConvergeRow {
                step: i,
                monte_carlo: mc,
                analytic: a,
                rel_error: a.map(|a| (mc - a).abs() / a),
            }
        })
        .collect();
    let max_rel_error = analytic.as_ref().map(|_| {
        rows.iter()
            .filter(|r| r.step >= cfg.check_from)
            .filter_map(|r| r.rel_error)
            .fold(0.0, f64::max)
    });
    Ok(ConvergeReport {
        name: cfg.name.clone(),
        fixed_point: analytic
            .as_ref()
            .map(|_| crate::predict::adamw_norm_fixed_point(&opt, cfg.dim))
            .transpose()?,
        rows,
        max_rel_error,
        tolerance_pct: cfg.tolerance_pct,
        pass: max_rel_error.map(|e| e <= cfg.tolerance_pct / 100.0),
    })
}

/// `step,monte_carlo,analytic,rel_error`; the analytic columns are empty
/// without weight decay.
pub fn write_converge_csv<W: Write>(report: &ConvergeReport, sink: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(sink);
    out.write_record(["step", "monte_carlo", "analytic", "rel_error"])?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.rows {
        out.write_record([
            r.step.to_string(),
            r.monte_carlo.to_string(),
            f(r.analytic),
            f(r.rel_error),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Input of the `predict` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub optimizer: OptimizerConfig,
    #[serde(rename = "C", alias = "dim")]
    pub dim: usize,
    #[serde(default)]
    pub stats: GradientStats,
    #[serde(default)]
    pub exact: bool,
    /// Relative radial gradient coefficient of a scale-sensitive weight.
    #[serde(default)]
    pub lambda_u: Option<f64>,
}

impl PredictRequest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(json_config_error)
    }
}

/// The prediction for a request. Zero (effective) weight decay is an
/// error; statistics that are missing are reported inside the prediction.
pub fn run_predict(req: &PredictRequest) -> Result<EquilibriumPrediction> {
    let opts = PredictOptions { exact: req.exact };
    let pred = match req.lambda_u {
        Some(lu) => {
            let radial = effective_decay(req.optimizer.weight_decay, lu)?;
            predict_scale_sensitive(&req.optimizer, &radial, req.dim, &req.stats, opts)?
        }
        None => predict_partial(&req.optimizer, req.dim, &req.stats, opts)?,
    };
    if pred.eta_r_hat == Estimate::NoEquilibrium {
        return Err(Error::NoEquilibrium);
    }
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(optimizer: OptimizerConfig, steps: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(optimizer, steps);
        cfg.system = SystemConfig::new(8, 16, 6);
        cfg.report.burn_in_steps = steps / 2;
        cfg
    }

    #[test]
    fn schedule_multipliers() {
        let c = ScheduleConfig::default();
        assert!(c.is_constant());
        assert_eq!(c.multiplier(7, 10), 1.0);
        let s = ScheduleConfig {
            warmup_steps: 4,
            cosine: Some(CosineSchedule { final_fraction: 0.1 }),
        };
        assert_eq!(s.multiplier(1, 14), 0.25);
        assert_eq!(s.multiplier(4, 14), 1.0);
        assert_eq!(s.multiplier(5, 14), 1.0);
        assert!((s.multiplier(14, 14) - 0.1).abs() < 1e-15);
        for t in 1..=14 {
            let m = s.multiplier(t, 14);
            assert!(m > 0.0 && m <= 1.0);
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let text = r#"{"name": "a", "optimizer": {"kind": "adamw", "lr": 0.0125, "weight_decay": 0.08}, "steps": 20,
                      "report": {"burn_in_steps": 5}}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.system, SystemConfig::default());
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_json(), cfg.to_json());

        let bad = text.replace("\"steps\"", "\"stepz\"");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config { .. })));
        let bad = text.replace("\"weight_decay\"", "\"wd\"");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config { .. })));
        let bad = text.replace("0.0125", "-1");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "optimizer.lr"),
            other => panic!("{other:?}"),
        }
        let bad = text.replace("\"burn_in_steps\": 5", "\"burn_in_steps\": 20");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn row_count_contract() {
        let cfg = small(OptimizerConfig::adamw(1e-2, 0.1), 1);
        let mut cfg = cfg;
        cfg.report.burn_in_steps = 0;
        let mut buf = Vec::new();
        let out = run_experiment(&cfg, Some(&mut buf)).unwrap();
        let recs = crate::telemetry::read_csv_all(buf.as_slice()).unwrap();
        assert_eq!(recs.len(), 7);
        assert_eq!(out.summary.csv_rows, 7);

        let mut cfg = small(OptimizerConfig::adamw(1e-2, 0.1), 30);
        cfg.telemetry.per_neuron = Some(false);
        let mut buf = Vec::new();
        run_experiment(&cfg, Some(&mut buf)).unwrap();
        assert_eq!(crate::telemetry::read_csv_all(buf.as_slice()).unwrap().len(), 30);
    }

    #[test]
    fn runs_are_deterministic_and_telemetry_is_passive() {
        for opt in [
            OptimizerConfig::sgdm(0.1, 1e-3, 0.9),
            OptimizerConfig::adamw(1e-2, 0.1),
            OptimizerConfig::adam_l2(1e-3, 1e-3),
            OptimizerConfig::lion(1e-3, 0.5),
        ] {
            let mut cfg = small(opt, 40);
            cfg.telemetry.flush_interval = 7;
            let (mut a, mut b) = (Vec::new(), Vec::new());
            let ra = run_experiment(&cfg, Some(&mut a)).unwrap();
            run_experiment(&cfg, Some(&mut b)).unwrap();
            assert_eq!(a, b);
            let rc = run_experiment::<Vec<u8>>(&cfg, None).unwrap();
            assert_eq!(ra.weights, rc.weights);
            assert_eq!(
                ra.summary,
                RunSummary {
                    csv_rows: ra.summary.csv_rows,
                    ..rc.summary.clone()
                }
            );
        }
    }

    #[test]
    fn check_is_a_pure_function_of_csv_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(OptimizerConfig::adamw(1e-2, 0.1), 60);
        cfg.report.per_neuron = true;
        run_to_dir(&cfg, dir.path()).unwrap();
        let files = run_files(dir.path());
        let summary = RunSummary::load(&files.summary).unwrap();
        let a = check_csv(&cfg, &summary, &files.csv).unwrap();
        let b = check_csv(&cfg, &summary, &files.csv).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.verdicts.len(), 2 + 6);
        assert_eq!(a.layer_series["angular_update"].len(), 1);
    }

    #[test]
    fn in_memory_and_csv_checks_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(OptimizerConfig::sgdm(0.1, 1e-3, 0.9), 50);
        let out = run_to_dir(&cfg, dir.path()).unwrap();
        let files = run_files(dir.path());
        let from_csv = check_csv(&cfg, &out.summary, &files.csv).unwrap();
        let direct = out.check(&cfg).unwrap();
        assert_eq!(from_csv.verdicts, direct.verdicts);
    }

    #[test]
    fn wrong_override_fails_the_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(OptimizerConfig::adamw(1e-2, 0.1), 300);
        cfg.wrapper = WrapperConfig::enabled();
        cfg.report.burn_in_steps = 100;
        cfg.report.tolerance_pct = 5.0;
        let out = run_to_dir(&cfg, dir.path()).unwrap();
        let files = run_files(dir.path());
        let good = check_csv(&cfg, &out.summary, &files.csv).unwrap();
        assert!(good.pass, "{:?}", good.verdicts);

        let mut summary = out.summary.clone();
        summary.wrapper.as_mut().unwrap().eta_r_target *= 2.0;
        assert!(!check_csv(&cfg, &summary, &files.csv).unwrap().pass);
    }

    #[test]
    fn non_finite_weights_are_reported() {
        let mut cfg = small(OptimizerConfig::sgdm(1e300, 0.0, 0.0), 50);
        cfg.system = cfg.system.with_loss_scale(1e300);
        match run_experiment::<Vec<u8>>(&cfg, None) {
            Err(Error::NonFinite { step, .. }) => assert!(step >= 1),
            other => panic!("{:?}", other.map(|o| o.summary)),
        }
    }

    #[test]
    fn scheduled_wrapper_tracks_the_schedule() {
        let mut cfg = small(OptimizerConfig::adamw(1e-2, 0.1), 400);
        cfg.wrapper = WrapperConfig::enabled();
        cfg.schedule.cosine = Some(CosineSchedule { final_fraction: 0.25 });
        let mut buf = Vec::new();
        run_experiment(&cfg, Some(&mut buf)).unwrap();
        let recs = crate::telemetry::read_csv_all(buf.as_slice()).unwrap();
        let agg: Vec<(u64, f64)> = recs
            .iter()
            .filter(|r| r.is_aggregate())
            .map(|r| (r.step, r.angular_update.unwrap()))
            .collect();
        let early = window_mean(&agg, 20, 60, MeanKind::Arithmetic).unwrap();
        let late = window_mean(&agg, 360, 400, MeanKind::Arithmetic).unwrap();
        // eta_r scales with sqrt(lr); the multiplier falls to about 0.25.
        assert!((late / early - 0.5).abs() < 0.1, "{late} / {early}");
    }

    #[test]
    fn converge_matches_analytic_at_fixed_point() {
        let cfg = ConvergeConfig {
            name: "c".into(),
            seed: 1,
            omega0_sq: 6.4,
            lr: 1e-2,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dim: 128,
            steps: 300,
            trials: 50,
            tolerance_pct: 15.0,
            check_from: 50,
        };
        let r = run_converge(&cfg).unwrap();
        assert_eq!(r.rows.len(), 301);
        assert!((r.rows[0].monte_carlo - 6.4).abs() < 1e-12);
        assert!(r.pass.unwrap(), "{:?}", r.max_rel_error);

        let grow = run_converge(&ConvergeConfig {
            weight_decay: 0.0,
            omega0_sq: 1.0,
            ..cfg
        })
        .unwrap();
        assert!(grow.pass.is_none() && grow.fixed_point.is_none());
        assert!(grow.rows[300].monte_carlo > 1.5 * grow.rows[150].monte_carlo - 0.5);
        let mut buf = Vec::new();
        write_converge_csv(&grow, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().ends_with(",,"));
    }

    #[test]
    fn predict_requests() {
        let req = PredictRequest::from_json(
            r#"{"optimizer": {"kind": "adamw", "lr": 0.0125, "weight_decay": 0.08}, "C": 128}"#,
        )
        .unwrap();
        let p = run_predict(&req).unwrap();
        assert!((p.eta_r_hat.value().unwrap() / 1.02598e-2 - 1.0).abs() < 1e-5);
        let zero = PredictRequest {
            optimizer: OptimizerConfig::adamw(1e-2, 0.0),
            ..req.clone()
        };
        assert!(matches!(run_predict(&zero), Err(Error::NoEquilibrium)));
        let sgdm = PredictRequest {
            optimizer: OptimizerConfig::sgdm(0.5, 1e-4, 0.9),
            ..req
        };
        let json = serde_json::to_value(run_predict(&sgdm).unwrap()).unwrap();
        assert_eq!(json["omega_norm_hat"], "requires E[‖g̃‖²]");
        assert!(json["eta_r_hat"].is_number());
    }
}
