//! Per-step, per-neuron measurements and their CSV form.
//!
//! One CSV row per (step, unit) with the columns of [`CSV_HEADER`]. A
//! `neuron` of `-1` marks the layer aggregate and missing values are empty
//! fields. Floats are written in Rust's shortest round-trip form, so reading
//! a file back gives bit-identical values.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{angle_between, cosine, dot, norm_sq, rms_downsample};
use crate::optim::UpdateDecomposition;

pub const CSV_HEADER: [&str; 10] = [
    "step",
    "layer",
    "neuron",
    "weight_norm",
    "angular_update",
    "rms_update",
    "radial_coeff",
    "grad_sq_norm",
    "unit_grad_sq_norm",
    "momentum_grad_cos",
];

/// Neuron index used for layer aggregates.
pub const LAYER_UNIT: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    WeightNorm,
    AngularUpdate,
    RmsUpdate,
    RadialCoeff,
    GradSqNorm,
    UnitGradSqNorm,
    MomentumGradCos,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::WeightNorm,
        Metric::AngularUpdate,
        Metric::RmsUpdate,
        Metric::RadialCoeff,
        Metric::GradSqNorm,
        Metric::UnitGradSqNorm,
        Metric::MomentumGradCos,
    ];

    pub fn name(self) -> &'static str {
        CSV_HEADER[3 + self as usize]
    }

    /// Update sizes average as root-mean-square, everything else arithmetically.
    pub fn mean_kind(self) -> MeanKind {
        match self {
            Metric::RmsUpdate => MeanKind::Rms,
            _ => MeanKind::Arithmetic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    Arithmetic,
    Rms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: u64,
    pub layer: String,
    pub neuron: i64,
    pub weight_norm: Option<f64>,
    /// Radians between the weight before and after the step.
    pub angular_update: Option<f64>,
    /// `|delta_g|`.
    pub rms_update: Option<f64>,
    /// `<w, g> / |w|^2` at the pre-step weight.
    pub radial_coeff: Option<f64>,
    pub grad_sq_norm: Option<f64>,
    /// `|w|^2 |g|^2` at the pre-step weight.
    pub unit_grad_sq_norm: Option<f64>,
    /// Cosine between the momentum before the step and the gradient.
    pub momentum_grad_cos: Option<f64>,
}

impl TelemetryRecord {
    pub fn empty(step: u64, layer: impl Into<String>, neuron: i64) -> Self {
        TelemetryRecord {
            step,
            layer: layer.into(),
            neuron,
            weight_norm: None,
            angular_update: None,
            rms_update: None,
            radial_coeff: None,
            grad_sq_norm: None,
            unit_grad_sq_norm: None,
            momentum_grad_cos: None,
        }
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::WeightNorm => self.weight_norm,
            Metric::AngularUpdate => self.angular_update,
            Metric::RmsUpdate => self.rms_update,
            Metric::RadialCoeff => self.radial_coeff,
            Metric::GradSqNorm => self.grad_sq_norm,
            Metric::UnitGradSqNorm => self.unit_grad_sq_norm,
            Metric::MomentumGradCos => self.momentum_grad_cos,
        }
    }

    fn slot(&mut self, metric: Metric) -> &mut Option<f64> {
        match metric {
            Metric::WeightNorm => &mut self.weight_norm,
            Metric::AngularUpdate => &mut self.angular_update,
            Metric::RmsUpdate => &mut self.rms_update,
            Metric::RadialCoeff => &mut self.radial_coeff,
            Metric::GradSqNorm => &mut self.grad_sq_norm,
            Metric::UnitGradSqNorm => &mut self.unit_grad_sq_norm,
            Metric::MomentumGradCos => &mut self.momentum_grad_cos,
        }
    }

    pub fn is_aggregate(&self) -> bool {
        self.neuron == LAYER_UNIT
    }
}

/// Inputs to [`record_step`] for one weight vector.
#[derive(Clone, Copy, Debug)]
pub struct StepObservation<'a> {
    pub prev: &'a [f64],
    pub new: &'a [f64],
    pub decomposition: &'a UpdateDecomposition,
    pub gradient: &'a [f64],
    /// The momentum the optimizer held before this step, if it has one.
    pub momentum: Option<&'a [f64]>,
}

/// Measures one step of one unit. Quantities that are undefined for the
/// inputs (zero-norm weights, zero momentum) are left empty.
pub fn record_step(step: u64, layer: &str, neuron: i64, obs: StepObservation<'_>) -> TelemetryRecord {
    let prev_sq = norm_sq(obs.prev);
    let grad_sq = norm_sq(obs.gradient);
    let mut r = TelemetryRecord::empty(step, layer, neuron);
    r.weight_norm = Some(norm_sq(obs.new).sqrt());
    r.angular_update = angle_between(obs.prev, obs.new).ok();
    r.rms_update = Some(norm_sq(&obs.decomposition.delta_g).sqrt());
    if prev_sq > 0.0 {
        r.radial_coeff = Some(dot(obs.prev, obs.gradient) / prev_sq);
    }
    r.grad_sq_norm = Some(grad_sq);
    r.unit_grad_sq_norm = Some(prev_sq * grad_sq);
    r.momentum_grad_cos = obs.momentum.and_then(|m| cosine(m, obs.gradient));
    r
}

fn mean_of(values: impl Iterator<Item = f64>, kind: MeanKind) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += match kind {
            MeanKind::Arithmetic => v,
            MeanKind::Rms => v * v,
        };
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let m = sum / n as f64;
    Some(match kind {
        MeanKind::Arithmetic => m,
        MeanKind::Rms => m.sqrt(),
    })
}

/// Mean of `metric` across the given neuron records, using the metric's
/// [`MeanKind`]. Records without the metric are skipped.
pub fn layer_mean(records: &[TelemetryRecord], metric: Metric) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::domain("layer_mean: no records"));
    }
    mean_of(records.iter().filter_map(|r| r.get(metric)), metric.mean_kind())
        .ok_or_else(|| Error::domain(format!("layer_mean: no record has {}", metric.name())))
}

/// The `neuron = -1` row for one step.
pub fn layer_aggregate(step: u64, layer: &str, records: &[TelemetryRecord]) -> TelemetryRecord {
    let mut agg = TelemetryRecord::empty(step, layer, LAYER_UNIT);
    for m in Metric::ALL {
        *agg.slot(m) = mean_of(records.iter().filter_map(|r| r.get(m)), m.mean_kind());
    }
    agg
}

/// Mean of the points with `from <= step <= to`.
pub fn window_mean(series: &[(u64, f64)], from: u64, to: u64, kind: MeanKind) -> Result<f64> {
    mean_of(
        series.iter().filter(|(s, _)| (from..=to).contains(s)).map(|(_, v)| *v),
        kind,
    )
    .ok_or_else(|| Error::domain(format!("window_mean: no samples in [{from}, {to}]")))
}

/// A metric's time series for one unit after RMS downsampling.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateSeries {
    pub layer: String,
    pub neuron: i64,
    pub metric: Metric,
    pub downsample_factor: usize,
    pub values: Vec<f64>,
    pub window: (u64, u64),
    pub window_mean: Option<f64>,
}

pub fn aggregate_series(
    records: &[TelemetryRecord],
    layer: &str,
    neuron: i64,
    metric: Metric,
    factor: usize,
    window: (u64, u64),
) -> Result<AggregateSeries> {
    let series: Vec<(u64, f64)> = records
        .iter()
        .filter(|r| r.layer == layer && r.neuron == neuron)
        .filter_map(|r| r.get(metric).map(|v| (r.step, v)))
        .collect();
    let raw: Vec<f64> = series.iter().map(|(_, v)| *v).collect();
    Ok(AggregateSeries {
        layer: layer.to_string(),
        neuron,
        metric,
        downsample_factor: factor,
        values: rms_downsample(&raw, factor)?,
        window,
        window_mean: window_mean(&series, window.0, window.1, metric.mean_kind()).ok(),
    })
}

/// Running window means per (layer, neuron) and metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub from: u64,
    pub to: u64,
    units: BTreeMap<(String, i64), UnitAccumulator>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct UnitAccumulator {
    sums: [f64; 7],
    counts: [u64; 7],
}

impl WindowStats {
    pub fn new(from: u64, to: u64) -> Self {
        WindowStats {
            from,
            to,
            units: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, r: &TelemetryRecord) {
        if !(self.from..=self.to).contains(&r.step) {
            return;
        }
        let acc = self.units.entry((r.layer.clone(), r.neuron)).or_default();
        for m in Metric::ALL {
            if let Some(v) = r.get(m) {
                let i = m as usize;
                acc.sums[i] += match m.mean_kind() {
                    MeanKind::Arithmetic => v,
                    MeanKind::Rms => v * v,
                };
                acc.counts[i] += 1;
            }
        }
    }

    pub fn mean(&self, layer: &str, neuron: i64, metric: Metric) -> Option<f64> {
        let acc = self.units.get(&(layer.to_string(), neuron))?;
        let i = metric as usize;
        if acc.counts[i] == 0 {
            return None;
        }
        let m = acc.sums[i] / acc.counts[i] as f64;
        Some(match metric.mean_kind() {
            MeanKind::Arithmetic => m,
            MeanKind::Rms => m.sqrt(),
        })
    }

    /// Neuron indices seen for `layer`, excluding the aggregate.
    pub fn neurons(&self, layer: &str) -> Vec<i64> {
        self.units
            .keys()
            .filter(|(l, n)| l == layer && *n != LAYER_UNIT)
            .map(|(_, n)| *n)
            .collect()
    }

    pub fn layers(&self) -> Vec<String> {
        let mut out: Vec<String> = self.units.keys().map(|(l, _)| l.clone()).collect();
        out.dedup();
        out
    }
}

fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Buffered CSV writer. Records are handed over in step order and written
/// out every `flush_interval` steps.
pub struct TelemetryWriter<W: Write> {
    out: csv::Writer<W>,
    buffer: Vec<TelemetryRecord>,
    flush_interval: u64,
    rows: u64,
}

impl<W: Write> TelemetryWriter<W> {
    pub fn new(sink: W, flush_interval: u64) -> Result<Self> {
        let mut out = csv::Writer::from_writer(sink);
        out.write_record(CSV_HEADER)?;
        Ok(TelemetryWriter {
            out,
            buffer: Vec::new(),
            flush_interval: flush_interval.max(1),
            rows: 0,
        })
    }

    pub fn push(&mut self, r: TelemetryRecord) {
        self.buffer.push(r);
    }

    /// Call once all records of `step` are pushed.
    pub fn end_step(&mut self, step: u64) -> Result<()> {
        if step.is_multiple_of(self.flush_interval) {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        for r in self.buffer.drain(..) {
            self.out.write_record([
                r.step.to_string(),
                r.layer,
                r.neuron.to_string(),
                fmt_opt(r.weight_norm),
                fmt_opt(r.angular_update),
                fmt_opt(r.rms_update),
                fmt_opt(r.radial_coeff),
                fmt_opt(r.grad_sq_norm),
                fmt_opt(r.unit_grad_sq_norm),
                fmt_opt(r.momentum_grad_cos),
            ])?;
            self.rows += 1;
        }
        self.out.flush()?;
        Ok(())
    }

    /// Data rows written so far.
    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn finish(mut self) -> Result<W> {
        self.flush()?;
        self.out
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::new(e.error().kind(), e.error().to_string())))
    }
}

fn parse_opt(field: &str, column: &str, line: u64) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::domain(format!("telemetry line {line}: bad {column} value {field:?}")))
}

/// Streams the records of a telemetry CSV to `f`.
pub fn read_csv(source: impl Read, mut f: impl FnMut(TelemetryRecord) -> Result<()>) -> Result<()> {
    let mut rdr = csv::Reader::from_reader(source);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::domain(format!(
            "telemetry header mismatch: expected {}, got {}",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut row = csv::StringRecord::new();
    let mut line = 1u64;
    while rdr.read_record(&mut row)? {
        line += 1;
        let bad = |col: &str| Error::domain(format!("telemetry line {line}: bad {col}"));
        let mut r = TelemetryRecord::empty(
            row[0].parse().map_err(|_| bad("step"))?,
            &row[1],
            row[2].parse().map_err(|_| bad("neuron"))?,
        );
        for (i, m) in Metric::ALL.into_iter().enumerate() {
            *r.slot(m) = parse_opt(&row[3 + i], m.name(), line)?;
        }
        f(r)?;
    }
    Ok(())
}

pub fn read_csv_all(source: impl Read) -> Result<Vec<TelemetryRecord>> {
    let mut out = Vec::new();
    read_csv(source, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}
