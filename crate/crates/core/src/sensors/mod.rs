//! Telemetry acquisition.
//!
//! Every data source implements [`Sensor`]. A [`SensorRouter`] holds the
//! candidate sensors; at launch the monitor keeps only the ones whose
//! compatibility check passes on the current machine, then calls
//! [`Sensor::gather`] on each of them once per tick. Sensors fill in the
//! shared [`TickReadings`]; the process-tree sensor runs first so that GPU
//! sensors can attach per-process utilization to tree members.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::log::HardwareComponent;

pub mod counter;
pub mod gpu;
pub mod powercap;
pub mod procfs;
pub mod replay;
pub mod shares;

pub use counter::{advance_energy_counter, EnergyCounterState};
pub use replay::{ReplayCursor, ReplayStep, ReplayTrace};
pub use shares::{sample_utilization_shares, ResourceShares};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("raw counter value {raw} exceeds max range {max} for domain {domain}")]
    RangeViolation { domain: String, raw: u64, max: u64 },
    #[error("process {0} is gone")]
    ProcessGone(u32),
    #[error("non-increasing timestamps: {prev} then {next}")]
    ClockSkew { prev: f64, next: f64 },
    #[error("replay trace exhausted")]
    TraceExhausted,
    #[error("duplicate sensor name {0}")]
    DuplicateName(String),
    #[error("scripted fault in sensor {0}")]
    ScriptedFault(String),
    #[error("{sensor}: {message}")]
    Read { sensor: String, message: String },
}

impl SensorError {
    pub(crate) fn read(sensor: &str, message: impl std::fmt::Display) -> Self {
        SensorError::Read {
            sensor: sensor.to_string(),
            message: message.to_string(),
        }
    }
}

/// One GPU device's readings at a tick.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GpuReading {
    pub index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub util_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pstate: Option<u8>,
    /// Sum of SM utilization over every process on the device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sm_total_pct: Option<f64>,
}

/// System-wide readings at one tick. Counter energies are the energy consumed
/// since the previous tick, per domain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemReadings {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cpu_energy_j: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dram_energy_j: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gpus: Vec<GpuReading>,
    /// Cumulative busy CPU time over all cores, seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_busy_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_used_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_freq_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disk_write_bps: Option<f64>,
}

impl SystemReadings {
    pub fn cpu_energy_total(&self) -> f64 {
        self.cpu_energy_j.values().sum()
    }

    pub fn dram_energy_total(&self) -> f64 {
        self.dram_energy_j.values().sum()
    }

    pub fn gpu(&self, index: u32) -> Option<&GpuReading> {
        self.gpus.iter().find(|g| g.index == index)
    }

    pub fn gpu_power_total(&self) -> Option<f64> {
        let mut any = false;
        let total = self
            .gpus
            .iter()
            .filter_map(|g| g.power_w)
            .inspect(|_| any = true)
            .sum();
        any.then_some(total)
    }

    /// Check the physical-range invariants.
    pub fn validate(&self) -> Result<(), String> {
        let energies = self
            .cpu_energy_j
            .values()
            .chain(self.dram_energy_j.values());
        if energies.into_iter().any(|e| !(*e >= 0.0)) {
            return Err("negative energy reading".into());
        }
        for g in &self.gpus {
            if g.power_w.is_some_and(|p| !(p >= 0.0)) {
                return Err(format!("gpu {} negative power", g.index));
            }
            for pct in [g.util_pct, g.mem_pct].into_iter().flatten() {
                if !(0.0..=100.0).contains(&pct) {
                    return Err(format!("gpu {} utilization {pct} out of range", g.index));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp: f64,
    pub sys: SystemReadings,
}

/// Per-process usage of one tree member.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcessUsage {
    /// Cumulative user+system CPU time, seconds.
    pub cpu_time_s: f64,
    pub rss_bytes: u64,
    /// SM utilization percent per GPU device index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gpu_sm_pct: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcessTreeSnapshot {
    pub timestamp: f64,
    pub root_pid: u32,
    pub members: BTreeMap<u32, ProcessUsage>,
}

impl ProcessTreeSnapshot {
    pub fn cpu_time_total(&self) -> f64 {
        self.members.values().map(|m| m.cpu_time_s).sum()
    }

    pub fn rss_total(&self) -> u64 {
        self.members.values().map(|m| m.rss_bytes).sum()
    }
}

/// What the compatibility checks get to look at.
#[derive(Debug, Clone, Default)]
pub struct SystemInfo {
    pub powercap_root: PathBuf,
    pub procfs_root: PathBuf,
    /// Path of the GPU management executable, if found on `PATH`.
    pub smi_path: Option<PathBuf>,
    pub is_admin: bool,
    pub replay: bool,
    pub cpu_model: Option<String>,
}

impl SystemInfo {
    pub fn detect() -> Self {
        let procfs_root = PathBuf::from("/proc");
        SystemInfo {
            powercap_root: PathBuf::from(powercap::POWERCAP_ROOT),
            cpu_model: procfs::cpu_model(&procfs_root),
            procfs_root,
            smi_path: gpu::find_smi(),
            is_admin: unsafe { libc::geteuid() } == 0,
            replay: false,
        }
    }

    pub fn replay() -> Self {
        SystemInfo {
            replay: true,
            ..SystemInfo::default()
        }
    }
}

/// Inputs available to a sensor during one tick.
#[derive(Debug, Clone, Copy)]
pub struct TickContext<'a> {
    pub now: f64,
    pub root_pid: u32,
    pub step: Option<&'a ReplayStep>,
}

/// Accumulates everything the sensors gathered during one tick.
#[derive(Debug, Clone, Default)]
pub struct TickReadings {
    pub sys: SystemReadings,
    pub tree: Option<ProcessTreeSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorDescriptor {
    pub name: String,
    pub description: String,
}

pub trait Sensor: Send {
    fn name(&self) -> &str;

    fn description(&self) -> &str;

    /// Sensors needing administrator access are never selected.
    fn requires_admin(&self) -> bool {
        false
    }

    fn is_compatible(&self, system: &SystemInfo) -> bool;

    fn gather(&mut self, ctx: &TickContext<'_>, out: &mut TickReadings) -> Result<(), SensorError>;

    /// Hardware this sensor can describe for the log header.
    fn hardware(&self) -> Vec<HardwareComponent> {
        Vec::new()
    }

    fn descriptor(&self) -> SensorDescriptor {
        SensorDescriptor {
            name: self.name().to_string(),
            description: self.description().to_string(),
        }
    }
}

/// Ordered set of uniquely named sensors.
pub struct SensorRouter {
    sensors: Vec<Box<dyn Sensor>>,
}

impl std::fmt::Debug for SensorRouter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.sensors.iter().map(|s| s.name()))
            .finish()
    }
}

impl SensorRouter {
    pub fn new(sensors: Vec<Box<dyn Sensor>>) -> Result<Self, SensorError> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &sensors {
            if !seen.insert(s.name().to_string()) {
                return Err(SensorError::DuplicateName(s.name().to_string()));
            }
        }
        Ok(SensorRouter { sensors })
    }

    /// Router for a live Linux machine: procfs, powercap counters and the GPU tool.
    pub fn system_default() -> Self {
        SensorRouter {
            sensors: vec![
                Box::new(procfs::ProcessTreeSensor::new("/proc")),
                Box::new(procfs::SystemStatSensor::new("/proc")),
                Box::new(powercap::PowercapSensor::new(powercap::POWERCAP_ROOT)),
                Box::new(gpu::SmiSensor::new()),
            ],
        }
    }

    /// Router whose sensors all read from the replay step of the current tick.
    pub fn replay_default() -> Self {
        SensorRouter {
            sensors: replay::replay_sensors(),
        }
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn descriptors(&self) -> Vec<SensorDescriptor> {
        self.sensors.iter().map(|s| s.descriptor()).collect()
    }

    pub fn sensors_mut(&mut self) -> impl Iterator<Item = &mut Box<dyn Sensor>> {
        self.sensors.iter_mut()
    }

    pub fn hardware(&self) -> Vec<HardwareComponent> {
        self.sensors.iter().flat_map(|s| s.hardware()).collect()
    }
}

/// Keep the sensors that can run on `system`. An empty result is fine; the run
/// proceeds with whatever is available.
pub fn list_compatible_sensors(system: &SystemInfo, router: SensorRouter) -> SensorRouter {
    let sensors = router
        .sensors
        .into_iter()
        .filter(|s| (!s.requires_admin() || system.is_admin) && s.is_compatible(system))
        .collect();
    SensorRouter { sensors }
}
