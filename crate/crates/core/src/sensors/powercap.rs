//! CPU package and DRAM energy from the powercap `intel-rapl` zones.
//!
//! Each zone directory carries `name`, `energy_uj` and `max_energy_range_uj`.
//! Package zones (`package-N`) feed the CPU term, `dram` subzones the DRAM
//! term. `core`/`uncore` subzones are already inside their package and `psys`
//! covers the whole platform, so both are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use super::{EnergyCounterState, Sensor, SensorError, SystemInfo, TickContext, TickReadings};

pub const POWERCAP_ROOT: &str = "/sys/class/powercap";
pub const SENSOR_NAME: &str = "powercap-rapl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    Package,
    Dram,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaplDomain {
    pub path: PathBuf,
    pub name: String,
    pub kind: DomainKind,
}

fn read_trimmed(path: &Path) -> std::io::Result<String> {
    Ok(fs::read_to_string(path)?.trim().to_string())
}

fn read_u64(path: &Path) -> Result<u64, SensorError> {
    let text = read_trimmed(path)
        .map_err(|e| SensorError::read(SENSOR_NAME, format!("{}: {e}", path.display())))?;
    text.parse()
        .map_err(|e| SensorError::read(SENSOR_NAME, format!("{}: {e}", path.display())))
}

/// Find package and DRAM zones under `root`, sorted by path.
pub fn discover_domains(root: &Path) -> Vec<RaplDomain> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else {
            continue;
        };
        for entry in entries.flatten() {
            let file_name = entry.file_name();
            let file_name = file_name.to_string_lossy();
            if !file_name.starts_with("intel-rapl:") {
                continue;
            }
            let path = entry.path();
            // zones nest (intel-rapl:0/intel-rapl:0:0); the class dir also
            // symlinks every zone, so dedupe by name below
            stack.push(path.clone());
            let Ok(name) = read_trimmed(&path.join("name")) else {
                continue;
            };
            let kind = if name.starts_with("package") {
                DomainKind::Package
            } else if name == "dram" {
                DomainKind::Dram
            } else {
                continue;
            };
            found.push(RaplDomain {
                path,
                name: format!("{name}@{file_name}"),
                kind,
            });
        }
    }
    found.sort_by(|a, b| a.name.cmp(&b.name));
    found.dedup_by(|a, b| a.name == b.name);
    found
}

pub struct PowercapSensor {
    root: PathBuf,
    counters: Option<Vec<(RaplDomain, EnergyCounterState)>>,
}

impl PowercapSensor {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        PowercapSensor {
            root: root.into(),
            counters: None,
        }
    }

    fn init(&self) -> Result<Vec<(RaplDomain, EnergyCounterState)>, SensorError> {
        discover_domains(&self.root)
            .into_iter()
            .map(|d| {
                let raw = read_u64(&d.path.join("energy_uj"))?;
                let max = read_u64(&d.path.join("max_energy_range_uj"))?;
                let state = EnergyCounterState::new(d.name.clone(), raw, max);
                Ok((d, state))
            })
            .collect()
    }
}

impl Sensor for PowercapSensor {
    fn name(&self) -> &str {
        SENSOR_NAME
    }

    fn description(&self) -> &str {
        "CPU package and DRAM energy counters from the powercap filesystem"
    }

    fn is_compatible(&self, system: &SystemInfo) -> bool {
        if system.replay {
            return false;
        }
        // energy_uj is root-only on patched kernels; an unreadable counter
        // means the sensor is unavailable rather than a failure
        let domains = discover_domains(&system.powercap_root);
        !domains.is_empty()
            && domains
                .iter()
                .all(|d| read_u64(&d.path.join("energy_uj")).is_ok())
    }

    fn gather(
        &mut self,
        _ctx: &TickContext<'_>,
        out: &mut TickReadings,
    ) -> Result<(), SensorError> {
        let counters = match &mut self.counters {
            Some(c) => c,
            None => {
                let init = self.init()?;
                for (d, _) in &init {
                    record(out, d, 0.0);
                }
                self.counters = Some(init);
                return Ok(());
            }
        };
        for (domain, state) in counters.iter_mut() {
            let raw = read_u64(&domain.path.join("energy_uj"))?;
            let delta_uj = state.advance(raw)?;
            record(out, domain, delta_uj as f64 * 1e-6);
        }
        Ok(())
    }
}

fn record(out: &mut TickReadings, domain: &RaplDomain, joules: f64) {
    let map = match domain.kind {
        DomainKind::Package => &mut out.sys.cpu_energy_j,
        DomainKind::Dram => &mut out.sys.dram_energy_j,
    };
    map.insert(domain.name.clone(), joules);
}
