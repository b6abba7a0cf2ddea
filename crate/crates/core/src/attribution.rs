//! Energy crediting.
//!
//! Each polling interval is split per resource: the system-wide energy of the
//! resource over the interval times the tree's share of that resource. Counter
//! resources (CPU package, DRAM) report energy directly; GPU power readings are
//! integrated with the trapezoidal rule. The ledger sums credited energy and
//! scales it by the run's PUE.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carbon::EmissionsEstimate;
use crate::reporting::{round_half_even, ImpactSummary};
use crate::sensors::{PowerSample, ResourceShares};
use crate::JOULES_PER_KWH;

/// PUE applied when a run does not configure one.
pub const DEFAULT_PUE: f64 = 1.58;

#[derive(Debug, Error, PartialEq)]
pub enum AttributionError {
    #[error("interval end {end} is not after start {start}")]
    NegativeInterval { start: f64, end: f64 },
    #[error("resource shares must lie in [0, 1]")]
    InvalidShares,
    #[error("pue {0} is below 1.0")]
    InvalidPue(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceEnergy {
    pub cpu_j: f64,
    pub dram_j: f64,
    pub gpu_j: f64,
}

impl ResourceEnergy {
    pub fn total(&self) -> f64 {
        self.cpu_j + self.dram_j + self.gpu_j
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalEnergy {
    pub t_start: f64,
    pub t_end: f64,
    pub e_cpu_j: f64,
    pub e_dram_j: f64,
    pub e_gpu_j: f64,
    pub credited_cpu_j: f64,
    pub credited_dram_j: f64,
    pub credited_gpu_j: f64,
    /// Device-seconds during which the tree used some GPU.
    #[serde(default)]
    pub gpu_device_s: f64,
}

impl IntervalEnergy {
    pub fn duration_s(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn credited_j(&self) -> f64 {
        self.credited_cpu_j + self.credited_dram_j + self.credited_gpu_j
    }

    /// Credited energy before PUE, in kWh.
    pub fn credited_kwh(&self) -> f64 {
        self.credited_j() / JOULES_PER_KWH
    }

    pub fn system_j(&self) -> f64 {
        self.e_cpu_j + self.e_dram_j + self.e_gpu_j
    }
}

fn gpu_interval_energy(prev: Option<f64>, next: Option<f64>, dt: f64) -> f64 {
    match (prev, next) {
        (Some(a), Some(b)) => (a + b) / 2.0 * dt,
        // one endpoint missing (sensor fault): hold the reading we have
        (Some(p), None) | (None, Some(p)) => p * dt,
        (None, None) => 0.0,
    }
}

/// Credit one interval between two consecutive samples.
pub fn attribute_interval(
    prev: &PowerSample,
    next: &PowerSample,
    shares: &ResourceShares,
) -> Result<IntervalEnergy, AttributionError> {
    let dt = next.timestamp - prev.timestamp;
    if !(dt > 0.0) {
        return Err(AttributionError::NegativeInterval {
            start: prev.timestamp,
            end: next.timestamp,
        });
    }
    if !shares.is_valid() {
        return Err(AttributionError::InvalidShares);
    }

    let e_cpu = next.sys.cpu_energy_total();
    let e_dram = next.sys.dram_energy_total();

    let mut devices: Vec<u32> = prev
        .sys
        .gpus
        .iter()
        .chain(&next.sys.gpus)
        .map(|g| g.index)
        .collect();
    devices.sort_unstable();
    devices.dedup();

    let (mut e_gpu, mut credited_gpu, mut gpu_device_s) = (0.0, 0.0, 0.0);
    for d in devices {
        let p_prev = prev.sys.gpu(d).and_then(|g| g.power_w);
        let p_next = next.sys.gpu(d).and_then(|g| g.power_w);
        let e = gpu_interval_energy(p_prev, p_next, dt);
        let share = shares.gpu_share(d);
        e_gpu += e;
        credited_gpu += share * e;
        if share > 0.0 {
            gpu_device_s += dt;
        }
    }

    Ok(IntervalEnergy {
        t_start: prev.timestamp,
        t_end: next.timestamp,
        e_cpu_j: e_cpu,
        e_dram_j: e_dram,
        e_gpu_j: e_gpu,
        credited_cpu_j: shares.cpu * e_cpu,
        credited_dram_j: shares.dram * e_dram,
        credited_gpu_j: credited_gpu,
        gpu_device_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub total_raw_j: ResourceEnergy,
    pub total_credited_j: ResourceEnergy,
    pub pue: f64,
    pub e_total_kwh: f64,
    #[serde(default)]
    pub gpu_hours: f64,
    #[serde(default)]
    pub intervals: usize,
}

impl EnergyLedger {
    pub fn new(pue: f64) -> Result<Self, AttributionError> {
        if !(pue >= 1.0) {
            return Err(AttributionError::InvalidPue(pue));
        }
        Ok(EnergyLedger {
            total_raw_j: ResourceEnergy::default(),
            total_credited_j: ResourceEnergy::default(),
            pue,
            e_total_kwh: 0.0,
            gpu_hours: 0.0,
            intervals: 0,
        })
    }

    pub fn accumulate(&mut self, interval: &IntervalEnergy) {
        self.total_raw_j.cpu_j += interval.e_cpu_j;
        self.total_raw_j.dram_j += interval.e_dram_j;
        self.total_raw_j.gpu_j += interval.e_gpu_j;
        self.total_credited_j.cpu_j += interval.credited_cpu_j;
        self.total_credited_j.dram_j += interval.credited_dram_j;
        self.total_credited_j.gpu_j += interval.credited_gpu_j;
        self.gpu_hours += interval.gpu_device_s / 3600.0;
        self.intervals += 1;
        self.e_total_kwh = self.pue * self.total_credited_j.total() / JOULES_PER_KWH;
    }

    /// Credited kWh before PUE.
    pub fn credited_kwh(&self) -> f64 {
        self.total_credited_j.total() / JOULES_PER_KWH
    }

    /// The same ledger under a different PUE.
    pub fn with_pue(&self, pue: f64) -> Result<Self, AttributionError> {
        let mut other = EnergyLedger::new(pue)?;
        other.total_raw_j = self.total_raw_j;
        other.total_credited_j = self.total_credited_j;
        other.gpu_hours = self.gpu_hours;
        other.intervals = self.intervals;
        other.e_total_kwh = pue * self.credited_kwh();
        Ok(other)
    }
}

pub fn accumulate(mut ledger: EnergyLedger, interval: &IntervalEnergy) -> EnergyLedger {
    ledger.accumulate(interval);
    ledger
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub run_id: String,
    pub duration_s: f64,
}

/// Round the ledger and emissions into the reported summary.
pub fn summarize(
    ledger: &EnergyLedger,
    carbon: &EmissionsEstimate,
    run_meta: &RunMeta,
) -> ImpactSummary {
    ImpactSummary {
        run_id: run_meta.run_id.clone(),
        kwh: round_half_even(ledger.e_total_kwh, 3),
        kg_co2eq: carbon.kg_co2eq.map(|kg| round_half_even(kg, 3)),
        scc: carbon.scc.map(|s| s.rounded()),
        country: carbon.country.clone(),
        region_id: carbon.region_id.clone(),
        duration_s: run_meta.duration_s.max(0.0),
    }
}
