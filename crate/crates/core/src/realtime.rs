//! Realtime grid intensity: polling a provider during a run and integrating
//! emissions against the resulting step function.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::IntervalEnergy;
use crate::carbon::regions::RealtimeEndpoint;
use crate::carbon::{IntensityKind, IntensityRecord};
use crate::sensors::replay::ScriptedIntensity;

pub const DEFAULT_POLL_INTERVAL_S: f64 = 300.0;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RealtimeError {
    #[error("intensity provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("cannot parse provider response: {0}")]
    Parse(String),
    #[error("series timestamps must increase: {last} then {got}")]
    NonIncreasing { last: f64, got: f64 },
    #[error("negative intensity {0}")]
    Negative(f64),
}

/// One poll result. `g_per_kwh` is `None` when the provider was down, in
/// which case the fallback applies until the next successful poll.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityPoint {
    pub t: f64,
    pub g_per_kwh: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntensitySeries {
    pub region_id: String,
    pub points: Vec<IntensityPoint>,
}

impl IntensitySeries {
    pub fn new(region_id: impl Into<String>) -> Self {
        IntensitySeries {
            region_id: region_id.into(),
            points: Vec::new(),
        }
    }

    pub fn from_values(region_id: &str, values: &[(f64, f64)]) -> Result<Self, RealtimeError> {
        let mut s = IntensitySeries::new(region_id);
        for &(t, g) in values {
            s.push(t, Some(g))?;
        }
        Ok(s)
    }

    pub fn push(&mut self, t: f64, g_per_kwh: Option<f64>) -> Result<(), RealtimeError> {
        if let Some(last) = self.points.last() {
            if !(t > last.t) {
                return Err(RealtimeError::NonIncreasing {
                    last: last.t,
                    got: t,
                });
            }
        }
        if let Some(g) = g_per_kwh {
            if !(g >= 0.0) {
                return Err(RealtimeError::Negative(g));
            }
        }
        self.points.push(IntensityPoint { t, g_per_kwh });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Intensity in force at `t`: the most recent poll at or before `t`,
    /// `fallback` before the first poll or after a failed one.
    pub fn value_at(&self, t: f64, fallback: f64) -> f64 {
        let idx = self.points.partition_point(|p| p.t <= t);
        match idx.checked_sub(1).map(|i| self.points[i]) {
            Some(IntensityPoint {
                g_per_kwh: Some(g), ..
            }) => g,
            _ => fallback,
        }
    }

    pub fn successful_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().filter_map(|p| p.g_per_kwh)
    }
}

/// kg CO₂eq of the intervals' credited energy (before PUE) under a
/// zero-order hold of `series`, sampled at each interval's start.
pub fn integrate_time_varying_emissions(
    intervals: &[IntervalEnergy],
    series: &IntensitySeries,
    fallback_g_per_kwh: f64,
) -> f64 {
    intervals
        .iter()
        .map(|i| i.credited_kwh() * series.value_at(i.t_start, fallback_g_per_kwh) / 1000.0)
        .sum()
}

pub trait IntensityProvider: Send {
    /// Current intensity in gCO₂eq/kWh.
    fn current(&mut self, now: f64) -> Result<f64, RealtimeError>;
}

/// Always answers with the same value.
#[derive(Debug, Clone, Copy)]
pub struct FixedProvider(pub f64);

impl IntensityProvider for FixedProvider {
    fn current(&mut self, _now: f64) -> Result<f64, RealtimeError> {
        Ok(self.0)
    }
}

/// Answers from a script of (time, value) steps; a `None` step is an outage.
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    script: Vec<ScriptedIntensity>,
}

impl ScriptedProvider {
    pub fn new(mut script: Vec<ScriptedIntensity>) -> Self {
        script.sort_by(|a, b| a.t.total_cmp(&b.t));
        ScriptedProvider { script }
    }
}

impl IntensityProvider for ScriptedProvider {
    fn current(&mut self, now: f64) -> Result<f64, RealtimeError> {
        let idx = self.script.partition_point(|s| s.t <= now);
        match idx.checked_sub(1).map(|i| &self.script[i]) {
            Some(ScriptedIntensity {
                g_per_kwh: Some(g), ..
            }) => Ok(*g),
            Some(_) => Err(RealtimeError::ProviderUnavailable("scripted outage".into())),
            None => Err(RealtimeError::ProviderUnavailable(
                "no scripted value yet".into(),
            )),
        }
    }
}

/// HTTP GET against a region's configured endpoint.
#[derive(Debug, Clone)]
pub struct HttpIntensityProvider {
    pub endpoint: RealtimeEndpoint,
    pub timeout: Duration,
}

impl HttpIntensityProvider {
    pub fn new(endpoint: RealtimeEndpoint) -> Self {
        HttpIntensityProvider {
            endpoint,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl IntensityProvider for HttpIntensityProvider {
    fn current(&mut self, _now: f64) -> Result<f64, RealtimeError> {
        let body = ureq::get(&self.endpoint.url)
            .timeout(self.timeout)
            .call()
            .map_err(|e| RealtimeError::ProviderUnavailable(e.to_string()))?
            .into_string()
            .map_err(|e| RealtimeError::ProviderUnavailable(e.to_string()))?;
        parse_response(&self.endpoint.parse, &body)
    }
}

/// Apply a parse rule: `number`, `json:<pointer>` or `csv_last:<column>`,
/// where the column is a zero-based index or a header name.
pub fn parse_response(rule: &str, body: &str) -> Result<f64, RealtimeError> {
    let value = if rule == "number" {
        body.trim()
            .parse::<f64>()
            .map_err(|e| RealtimeError::Parse(e.to_string()))?
    } else if let Some(pointer) = rule.strip_prefix("json:") {
        let doc: serde_json::Value =
            serde_json::from_str(body).map_err(|e| RealtimeError::Parse(e.to_string()))?;
        doc.pointer(pointer)
            .and_then(|v| {
                v.as_f64()
                    .or_else(|| v.as_str().and_then(|s| s.parse().ok()))
            })
            .ok_or_else(|| RealtimeError::Parse(format!("no number at {pointer}")))?
    } else if let Some(column) = rule.strip_prefix("csv_last:") {
        csv_last(body, column)?
    } else {
        return Err(RealtimeError::Parse(format!("unknown parse rule {rule}")));
    };
    if !(value >= 0.0) {
        return Err(RealtimeError::Negative(value));
    }
    Ok(value)
}

fn csv_last(body: &str, column: &str) -> Result<f64, RealtimeError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(body.as_bytes());
    let idx = match column.parse::<usize>() {
        Ok(i) => i,
        Err(_) => reader
            .headers()
            .map_err(|e| RealtimeError::Parse(e.to_string()))?
            .iter()
            .position(|h| h.trim() == column)
            .ok_or_else(|| RealtimeError::Parse(format!("no column {column}")))?,
    };
    let mut last = None;
    for row in reader.records() {
        let row = row.map_err(|e| RealtimeError::Parse(e.to_string()))?;
        if let Some(v) = row.get(idx).and_then(|s| s.trim().parse::<f64>().ok()) {
            last = Some(v);
        }
    }
    last.ok_or_else(|| RealtimeError::Parse("no numeric rows".into()))
}

/// One poll, shaped as the record the monitor logs.
pub fn poll_realtime_intensity(
    provider: &mut dyn IntensityProvider,
    now: f64,
    region_id: &str,
) -> Result<IntensityRecord, RealtimeError> {
    let g = provider.current(now)?;
    if !(g >= 0.0) {
        return Err(RealtimeError::Negative(g));
    }
    Ok(IntensityRecord {
        region_id: region_id.to_string(),
        g_per_kwh: g,
        kind: IntensityKind::Realtime,
        timestamp: Some(now),
    })
}

/// Decides when the next poll is due.
#[derive(Debug, Clone)]
pub struct PollSchedule {
    pub interval_s: f64,
    last: Option<f64>,
}

impl PollSchedule {
    pub fn new(interval_s: f64) -> Self {
        PollSchedule {
            interval_s,
            last: None,
        }
    }

    pub fn due(&self, now: f64) -> bool {
        match self.last {
            None => true,
            Some(last) => now - last >= self.interval_s - 1e-9,
        }
    }

    pub fn mark(&mut self, now: f64) {
        self.last = Some(now);
    }
}
