//! Rough energy estimates from partial information, compared against full
//! tracking, and extrapolation of deployment-scale emissions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{EnergyLedger, IntervalEnergy};
use crate::carbon::{compute_emissions, Region};
use crate::realtime::{integrate_time_varying_emissions, IntensitySeries};

const BUNDLED_GPUS: &str = include_str!("../data/gpus.csv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("unknown GPU model {0}")]
    UnknownGpuModel(String),
    #[error("GPU model {query} is ambiguous: {candidates:?}")]
    AmbiguousGpuModel {
        query: String,
        candidates: Vec<String>,
    },
    #[error("invalid GPU data: {0}")]
    InvalidData(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    pub model: String,
    pub tdp_w: f64,
    pub peak_pflops: f64,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpuTable {
    specs: Vec<GpuSpec>,
}

fn normalize(s: &str) -> String {
    s.to_ascii_lowercase()
        .replace("nvidia", "")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl GpuTable {
    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_GPUS).expect("bundled GPU data is valid")
    }

    pub fn from_csv(text: &str) -> Result<Self, EstimationError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut specs = Vec::new();
        for row in reader.deserialize() {
            let spec: GpuSpec = row.map_err(|e| EstimationError::InvalidData(e.to_string()))?;
            if !(spec.tdp_w > 0.0 && spec.peak_pflops > 0.0) {
                return Err(EstimationError::InvalidData(format!(
                    "{}: tdp and peak must be positive",
                    spec.model
                )));
            }
            specs.push(spec);
        }
        Ok(GpuTable { specs })
    }

    pub fn from_file(path: &Path) -> Result<Self, EstimationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EstimationError::InvalidData(format!("{}: {e}", path.display())))?;
        Self::from_csv(&text)
    }

    pub fn specs(&self) -> &[GpuSpec] {
        &self.specs
    }

    /// Exact match ignoring case and an "NVIDIA" prefix, else a unique
    /// substring match.
    pub fn get(&self, model: &str) -> Result<&GpuSpec, EstimationError> {
        let q = normalize(model);
        if let Some(s) = self.specs.iter().find(|s| normalize(&s.model) == q) {
            return Ok(s);
        }
        let hits: Vec<&GpuSpec> = self
            .specs
            .iter()
            .filter(|s| !q.is_empty() && normalize(&s.model).contains(&q))
            .collect();
        match hits.as_slice() {
            [one] => Ok(one),
            [] => Err(EstimationError::UnknownGpuModel(model.to_string())),
            many => Err(EstimationError::AmbiguousGpuModel {
                query: model.to_string(),
                candidates: many.iter().map(|s| s.model.clone()).collect(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    FullTracking,
    TdpTimeUtil,
    GpuHoursTdp,
    PflopsHr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult {
    pub method: EstimateMethod,
    pub kwh: f64,
    pub assumptions: Vec<String>,
}

/// n GPUs at TDP for `hours`, scaled by a utilization factor.
pub fn estimate_tdp_method(n_gpus: u32, spec: &GpuSpec, hours: f64, util: f64) -> f64 {
    n_gpus as f64 * spec.tdp_w * hours * util / 1000.0
}

pub fn estimate_gpu_hours_method(gpu_hours: f64, spec: &GpuSpec) -> f64 {
    gpu_hours * spec.tdp_w / 1000.0
}

pub fn estimate_pflops_method(pflops_hr: f64, spec: &GpuSpec) -> f64 {
    pflops_hr * spec.tdp_w / spec.peak_pflops / 1000.0
}

pub fn tdp_estimate(n_gpus: u32, spec: &GpuSpec, hours: f64, util: f64) -> EstimateResult {
    EstimateResult {
        method: EstimateMethod::TdpTimeUtil,
        kwh: estimate_tdp_method(n_gpus, spec, hours, util),
        assumptions: vec![
            format!("{n_gpus} x {} at TDP {} W", spec.model, spec.tdp_w),
            format!("utilization factor {util}"),
            "CPU and DRAM energy omitted".into(),
        ],
    }
}

pub fn gpu_hours_estimate(gpu_hours: f64, spec: &GpuSpec) -> EstimateResult {
    EstimateResult {
        method: EstimateMethod::GpuHoursTdp,
        kwh: estimate_gpu_hours_method(gpu_hours, spec),
        assumptions: vec![
            format!("{gpu_hours} GPU-hours at TDP {} W", spec.tdp_w),
            "CPU and DRAM energy omitted".into(),
        ],
    }
}

pub fn pflops_estimate(pflops_hr: f64, spec: &GpuSpec) -> EstimateResult {
    EstimateResult {
        method: EstimateMethod::PflopsHr,
        kwh: estimate_pflops_method(pflops_hr, spec),
        assumptions: vec![
            format!("{pflops_hr} PFLOP-hours"),
            format!(
                "{} peak {} PFLOPS at TDP {} W",
                spec.model, spec.peak_pflops, spec.tdp_w
            ),
        ],
    }
}

pub fn full_tracking_estimate(ledger: &EnergyLedger) -> EstimateResult {
    EstimateResult {
        method: EstimateMethod::FullTracking,
        kwh: ledger.e_total_kwh,
        assumptions: vec![format!("measured, PUE {}", ledger.pue)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityBasis {
    Realtime,
    RegionAverage,
    UsAverage,
}

/// Intensities to price each estimate under. `realtime` is the series with
/// the credited intervals of the tracked run.
#[derive(Debug, Clone)]
pub struct ComparisonIntensities<'a> {
    pub us_average: f64,
    pub region_average: f64,
    pub realtime: Option<(&'a IntensitySeries, &'a [IntervalEnergy])>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: EstimateMethod,
    pub basis: IntensityBasis,
    pub kwh: f64,
    pub kg_co2eq: f64,
    /// Against full tracking under the most specific basis available.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub ground_truth: IntensityBasis,
    pub ground_truth_kg: f64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, method: EstimateMethod, basis: IntensityBasis) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.basis == basis)
    }
}

/// Energy-weighted mean intensity of the tracked run under the realtime
/// series; estimates without a time profile are priced at this value.
pub fn effective_intensity(
    intervals: &[IntervalEnergy],
    series: &IntensitySeries,
    fallback: f64,
) -> f64 {
    let kwh: f64 = intervals.iter().map(|i| i.credited_kwh()).sum();
    if kwh > 0.0 {
        integrate_time_varying_emissions(intervals, series, fallback) * 1000.0 / kwh
    } else {
        fallback
    }
}

pub fn compare_estimates(
    full: &EnergyLedger,
    estimates: &[EstimateResult],
    intensities: &ComparisonIntensities<'_>,
) -> ComparisonTable {
    let mut bases = Vec::new();
    if let Some((series, intervals)) = intensities.realtime {
        let g = effective_intensity(intervals, series, intensities.region_average);
        bases.push((IntensityBasis::Realtime, g));
    }
    bases.push((IntensityBasis::RegionAverage, intensities.region_average));
    bases.push((IntensityBasis::UsAverage, intensities.us_average));
    let (truth_basis, truth_g) = bases[0];
    let truth_kg = compute_emissions(full.e_total_kwh, truth_g);

    let full_row = full_tracking_estimate(full);
    let mut rows = Vec::new();
    for est in std::iter::once(&full_row).chain(estimates) {
        for &(basis, g) in &bases {
            let kg = compute_emissions(est.kwh, g);
            let relative_error = if truth_kg > 0.0 {
                (kg - truth_kg) / truth_kg
            } else if kg == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            rows.push(ComparisonRow {
                method: est.method,
                basis,
                kwh: est.kwh,
                kg_co2eq: kg,
                relative_error,
            });
        }
    }
    ComparisonTable {
        ground_truth: truth_basis,
        ground_truth_kg: truth_kg,
        rows,
    }
}

/// kg CO₂eq per day from an energy delta per unit of work repeated
/// `daily_multiplier` times a day in `region`.
pub fn scale_inference_emissions(
    per_batch_kwh_delta: f64,
    daily_multiplier: f64,
    region: &Region,
) -> f64 {
    scale_inference_emissions_at(
        per_batch_kwh_delta,
        daily_multiplier,
        region.avg_intensity_g_per_kwh,
    )
}

pub fn scale_inference_emissions_at(
    per_batch_kwh_delta: f64,
    daily_multiplier: f64,
    g_per_kwh: f64,
) -> f64 {
    per_batch_kwh_delta * daily_multiplier * g_per_kwh / 1000.0
}
