use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{PowerSample, ProcessTreeSnapshot, SensorError};

/// Fraction of each resource used by the tracked tree over one interval.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceShares {
    pub cpu: f64,
    pub dram: f64,
    /// Keyed by GPU device index.
    pub gpu: BTreeMap<u32, f64>,
}

impl ResourceShares {
    /// Every share set to one, for every listed device.
    pub fn full(devices: impl IntoIterator<Item = u32>) -> Self {
        ResourceShares {
            cpu: 1.0,
            dram: 1.0,
            gpu: devices.into_iter().map(|d| (d, 1.0)).collect(),
        }
    }

    pub fn gpu_share(&self, device: u32) -> f64 {
        self.gpu.get(&device).copied().unwrap_or(0.0)
    }

    pub fn is_valid(&self) -> bool {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        ok(self.cpu) && ok(self.dram) && self.gpu.values().all(|&g| ok(g))
    }
}

fn ratio(part: f64, total: f64) -> f64 {
    if total > 0.0 && part > 0.0 {
        (part / total).min(1.0)
    } else {
        0.0
    }
}

/// Shares of CPU, DRAM and per-device GPU usage held by the tree between two
/// snapshots.
///
/// CPU: tree CPU-time delta over system busy-time delta. A pid missing from
/// `prev` was born during the interval, so all of its CPU time counts.
/// DRAM: tree RSS over used memory at `next`. GPU: tree SM utilization over
/// the device's total SM utilization at `next`. A zero denominator yields 0.
pub fn sample_utilization_shares(
    prev: &ProcessTreeSnapshot,
    next: &ProcessTreeSnapshot,
    system_prev: &PowerSample,
    system_next: &PowerSample,
) -> Result<ResourceShares, SensorError> {
    if !(next.timestamp > prev.timestamp) {
        return Err(SensorError::ClockSkew {
            prev: prev.timestamp,
            next: next.timestamp,
        });
    }
    if !(system_next.timestamp > system_prev.timestamp) {
        return Err(SensorError::ClockSkew {
            prev: system_prev.timestamp,
            next: system_next.timestamp,
        });
    }

    let tree_cpu: f64 = next
        .members
        .iter()
        .map(|(pid, usage)| {
            let before = prev.members.get(pid).map_or(0.0, |p| p.cpu_time_s);
            (usage.cpu_time_s - before).max(0.0)
        })
        .sum();
    let busy = match (system_prev.sys.cpu_busy_s, system_next.sys.cpu_busy_s) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };

    let dram = ratio(
        next.rss_total() as f64,
        system_next.sys.mem_used_bytes.unwrap_or(0) as f64,
    );

    let gpu = system_next
        .sys
        .gpus
        .iter()
        .map(|device| {
            let tree_sm: f64 = next
                .members
                .values()
                .filter_map(|m| m.gpu_sm_pct.get(&device.index))
                .sum();
            let total = device.sm_total_pct.or(device.util_pct).unwrap_or(0.0);
            (device.index, ratio(tree_sm, total))
        })
        .collect();

    Ok(ResourceShares {
        cpu: ratio(tree_cpu, busy),
        dram,
        gpu,
    })
}
