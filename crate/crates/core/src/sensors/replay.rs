//! Deterministic replay backend.
//!
//! A trace is a JSON document with one step per tick. Each step carries the
//! system readings and the process-tree usage for that tick, plus an optional
//! list of sensor names that should fail on that tick. Three replay sensors
//! split a step the same way the live sensors split real telemetry, so a
//! scripted GPU fault leaves the CPU/DRAM side of the sample intact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    PowerSample, ProcessTreeSnapshot, ProcessUsage, Sensor, SensorError, SystemInfo,
    SystemReadings, TickContext, TickReadings,
};
use crate::log::HardwareComponent;

pub const PROCESS_SENSOR: &str = "replay-process";
pub const POWER_SENSOR: &str = "replay-power";
pub const GPU_SENSOR: &str = "replay-gpu";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayTree {
    pub root_pid: u32,
    pub members: BTreeMap<u32, ProcessUsage>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub t: f64,
    pub sys: SystemReadings,
    pub tree: ReplayTree,
    /// Names of sensors that fail on this step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<String>,
    /// The root process has exited by this step.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub root_exited: bool,
}

impl ReplayStep {
    pub fn snapshot(&self) -> ProcessTreeSnapshot {
        ProcessTreeSnapshot {
            timestamp: self.t,
            root_pid: self.tree.root_pid,
            members: self.tree.members.clone(),
        }
    }

    pub fn sample(&self) -> PowerSample {
        PowerSample {
            timestamp: self.t,
            sys: self.sys.clone(),
        }
    }

    fn faulted(&self, sensor: &str) -> bool {
        self.faults.iter().any(|f| f == sensor)
    }
}

/// Scripted realtime intensity: the value in force from `t` onward, or a
/// provider outage when `g_per_kwh` is null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedIntensity {
    pub t: f64,
    pub g_per_kwh: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayTrace {
    #[serde(default)]
    pub hardware: Vec<HardwareComponent>,
    pub steps: Vec<ReplayStep>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intensity: Vec<ScriptedIntensity>,
}

impl ReplayTrace {
    /// Build `count` steps spaced `dt` apart starting at `start`.
    pub fn generate(
        start: f64,
        dt: f64,
        count: usize,
        mut step: impl FnMut(usize, f64) -> ReplayStep,
    ) -> Self {
        let steps = (0..count)
            .map(|i| {
                let t = start + dt * i as f64;
                let mut s = step(i, t);
                s.t = t;
                s
            })
            .collect();
        ReplayTrace {
            hardware: Vec::new(),
            steps,
            intensity: Vec::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, SensorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| SensorError::read("replay", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| SensorError::read("replay", format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn start_time(&self) -> Option<f64> {
        self.steps.first().map(|s| s.t)
    }
}

/// Walks a trace one step at a time.
#[derive(Debug, Clone)]
pub struct ReplayCursor {
    trace: ReplayTrace,
    position: usize,
}

impl ReplayCursor {
    pub fn new(trace: ReplayTrace) -> Self {
        ReplayCursor { trace, position: 0 }
    }

    pub fn trace(&self) -> &ReplayTrace {
        &self.trace
    }

    pub fn next_step(&mut self) -> Result<&ReplayStep, SensorError> {
        let step = self
            .trace
            .steps
            .get(self.position)
            .ok_or(SensorError::TraceExhausted)?;
        self.position += 1;
        Ok(step)
    }

    pub fn replay_next(&mut self) -> Result<(PowerSample, ProcessTreeSnapshot), SensorError> {
        let step = self.next_step()?;
        Ok((step.sample(), step.snapshot()))
    }

    pub fn remaining(&self) -> usize {
        self.trace.steps.len() - self.position
    }
}

fn current<'a>(ctx: &TickContext<'a>, sensor: &str) -> Result<&'a ReplayStep, SensorError> {
    let step = ctx
        .step
        .ok_or_else(|| SensorError::read(sensor, "no replay step for this tick"))?;
    if step.faulted(sensor) {
        return Err(SensorError::ScriptedFault(sensor.to_string()));
    }
    Ok(step)
}

struct ReplayProcess;
struct ReplayPower;
struct ReplayGpu;

impl Sensor for ReplayProcess {
    fn name(&self) -> &str {
        PROCESS_SENSOR
    }
    fn description(&self) -> &str {
        "process tree usage from a replay trace"
    }
    fn is_compatible(&self, system: &SystemInfo) -> bool {
        system.replay
    }
    fn gather(&mut self, ctx: &TickContext<'_>, out: &mut TickReadings) -> Result<(), SensorError> {
        let step = current(ctx, PROCESS_SENSOR)?;
        if step.root_exited {
            return Err(SensorError::ProcessGone(step.tree.root_pid));
        }
        let mut snapshot = step.snapshot();
        for member in snapshot.members.values_mut() {
            member.gpu_sm_pct.clear();
        }
        out.tree = Some(snapshot);
        Ok(())
    }
}

impl Sensor for ReplayPower {
    fn name(&self) -> &str {
        POWER_SENSOR
    }
    fn description(&self) -> &str {
        "CPU/DRAM energy and system statistics from a replay trace"
    }
    fn is_compatible(&self, system: &SystemInfo) -> bool {
        system.replay
    }
    fn gather(&mut self, ctx: &TickContext<'_>, out: &mut TickReadings) -> Result<(), SensorError> {
        let sys = &current(ctx, POWER_SENSOR)?.sys;
        out.sys.cpu_energy_j = sys.cpu_energy_j.clone();
        out.sys.dram_energy_j = sys.dram_energy_j.clone();
        out.sys.cpu_busy_s = sys.cpu_busy_s;
        out.sys.mem_used_bytes = sys.mem_used_bytes;
        out.sys.cpu_freq_hz = sys.cpu_freq_hz;
        out.sys.disk_write_bps = sys.disk_write_bps;
        Ok(())
    }
}

impl Sensor for ReplayGpu {
    fn name(&self) -> &str {
        GPU_SENSOR
    }
    fn description(&self) -> &str {
        "GPU power and per-process utilization from a replay trace"
    }
    fn is_compatible(&self, system: &SystemInfo) -> bool {
        system.replay
    }
    fn gather(&mut self, ctx: &TickContext<'_>, out: &mut TickReadings) -> Result<(), SensorError> {
        let step = current(ctx, GPU_SENSOR)?;
        out.sys.gpus = step.sys.gpus.clone();
        if let Some(tree) = &mut out.tree {
            for (pid, usage) in &step.tree.members {
                if let Some(member) = tree.members.get_mut(pid) {
                    member.gpu_sm_pct = usage.gpu_sm_pct.clone();
                }
            }
        }
        Ok(())
    }
}

pub fn replay_sensors() -> Vec<Box<dyn Sensor>> {
    vec![
        Box::new(ReplayProcess),
        Box::new(ReplayPower),
        Box::new(ReplayGpu),
    ]
}
