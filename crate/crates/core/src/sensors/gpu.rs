//! GPU power and utilization through the vendor `nvidia-smi` executable.
//!
//! Device readings come from the CSV query interface; per-process SM
//! utilization from `pmon`. When `pmon` reports no SM figure for a process
//! (older drivers, unsupported boards) the device utilization is split evenly
//! across its compute contexts, so the tree's share becomes its fraction of
//! contexts on that device.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;

use super::{GpuReading, Sensor, SensorError, SystemInfo, TickContext, TickReadings};
use crate::log::HardwareComponent;

pub const SENSOR_NAME: &str = "nvidia-smi";
const SMI_EXE: &str = "nvidia-smi";

const QUERY_ARGS: [&str; 2] = [
    "--query-gpu=index,power.draw,utilization.gpu,utilization.memory,pstate",
    "--format=csv,noheader,nounits",
];
const NAME_ARGS: [&str; 2] = ["--query-gpu=index,name", "--format=csv,noheader,nounits"];
const PMON_ARGS: [&str; 5] = ["pmon", "-c", "1", "-s", "u"];

pub fn find_smi() -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(SMI_EXE))
        .find(|candidate| candidate.is_file())
}

fn number(field: &str) -> Option<f64> {
    field.trim().parse().ok()
}

/// Parse `--query-gpu=index,power.draw,utilization.gpu,utilization.memory,pstate`.
/// Unsupported fields (`[N/A]`, `[Not Supported]`) become `None`.
pub fn parse_gpu_query(stdout: &str) -> Vec<GpuReading> {
    stdout
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let index = f.first()?.parse().ok()?;
            Some(GpuReading {
                index,
                power_w: f.get(1).and_then(|s| number(s)),
                util_pct: f.get(2).and_then(|s| number(s)),
                mem_pct: f.get(3).and_then(|s| number(s)),
                pstate: f
                    .get(4)
                    .and_then(|s| s.strip_prefix('P'))
                    .and_then(|s| s.parse().ok()),
                sm_total_pct: None,
            })
        })
        .collect()
}

pub fn parse_gpu_names(stdout: &str) -> Vec<(u32, String)> {
    stdout
        .lines()
        .filter_map(|l| {
            let (idx, name) = l.split_once(',')?;
            Some((idx.trim().parse().ok()?, name.trim().to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmonRow {
    pub device: u32,
    pub pid: u32,
    pub sm_pct: Option<f64>,
}

/// Parse `pmon -s u` output. Header lines start with `#`; idle devices show
/// `-` in the pid column.
pub fn parse_pmon(stdout: &str) -> Vec<PmonRow> {
    stdout
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            Some(PmonRow {
                device: f.first()?.parse().ok()?,
                pid: f.get(1)?.parse().ok()?,
                sm_pct: f.get(3).and_then(|s| number(s)),
            })
        })
        .collect()
}

/// Per-process SM utilization by (device, pid), with the even-split fallback
/// for rows lacking an SM figure.
pub fn per_process_sm(rows: &[PmonRow], devices: &[GpuReading]) -> BTreeMap<(u32, u32), f64> {
    let mut contexts: BTreeMap<u32, usize> = BTreeMap::new();
    for r in rows {
        *contexts.entry(r.device).or_default() += 1;
    }
    rows.iter()
        .map(|r| {
            let sm = r.sm_pct.unwrap_or_else(|| {
                let util = devices
                    .iter()
                    .find(|d| d.index == r.device)
                    .and_then(|d| d.util_pct)
                    .unwrap_or(0.0);
                util / contexts[&r.device] as f64
            });
            ((r.device, r.pid), sm)
        })
        .collect()
}

/// Fold the per-process figures into the device readings and the tree members.
pub fn attach_process_utilization(out: &mut TickReadings, per_process: &BTreeMap<(u32, u32), f64>) {
    for gpu in &mut out.sys.gpus {
        let total: f64 = per_process
            .iter()
            .filter(|((d, _), _)| *d == gpu.index)
            .map(|(_, v)| v)
            .sum();
        gpu.sm_total_pct = Some(total);
    }
    if let Some(tree) = &mut out.tree {
        for (&(device, pid), &sm) in per_process {
            if let Some(member) = tree.members.get_mut(&pid) {
                member.gpu_sm_pct.insert(device, sm);
            }
        }
    }
}

pub struct SmiSensor {
    exe: PathBuf,
}

impl SmiSensor {
    pub fn new() -> Self {
        SmiSensor {
            exe: find_smi().unwrap_or_else(|| PathBuf::from(SMI_EXE)),
        }
    }

    fn run(&self, args: &[&str]) -> Result<String, SensorError> {
        let output = Command::new(&self.exe)
            .args(args)
            .output()
            .map_err(|e| SensorError::read(SENSOR_NAME, e))?;
        if !output.status.success() {
            return Err(SensorError::read(
                SENSOR_NAME,
                format!("{} exited with {}", self.exe.display(), output.status),
            ));
        }
        Ok(String::from_utf8_lossy(&output.stdout).into_owned())
    }
}

impl Default for SmiSensor {
    fn default() -> Self {
        Self::new()
    }
}

impl Sensor for SmiSensor {
    fn name(&self) -> &str {
        SENSOR_NAME
    }

    fn description(&self) -> &str {
        "GPU power draw, utilization, performance state and per-process SM utilization"
    }

    fn is_compatible(&self, system: &SystemInfo) -> bool {
        !system.replay && system.smi_path.is_some()
    }

    fn gather(
        &mut self,
        _ctx: &TickContext<'_>,
        out: &mut TickReadings,
    ) -> Result<(), SensorError> {
        let devices = parse_gpu_query(&self.run(&QUERY_ARGS)?);
        // pmon is optional; without it every share falls back to zero
        let rows = self
            .run(&PMON_ARGS)
            .map(|s| parse_pmon(&s))
            .unwrap_or_default();
        let per_process = per_process_sm(&rows, &devices);
        out.sys.gpus = devices;
        attach_process_utilization(out, &per_process);
        Ok(())
    }

    fn hardware(&self) -> Vec<HardwareComponent> {
        self.run(&NAME_ARGS)
            .map(|s| parse_gpu_names(&s))
            .unwrap_or_default()
            .into_iter()
            .map(|(_, model)| HardwareComponent {
                kind: "gpu".into(),
                model,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensors::{ProcessTreeSnapshot, ProcessUsage};

    const QUERY: &str = "0, 212.45, 87, 40, P2\n1, [N/A], 0, 0, P8\n";
    const PMON: &str = "\
# gpu        pid  type    sm   mem   enc   dec   command
# Idx          #   C/G     %     %     %     %   name
    0      4242     C    60    30     -     -   python
    0      5151     C    20     5     -     -   python
    1          -     -     -     -     -     -   -
";

    #[test]
    fn query_parsing() {
        let g = parse_gpu_query(QUERY);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].power_w, Some(212.45));
        assert_eq!(g[0].util_pct, Some(87.0));
        assert_eq!(g[0].pstate, Some(2));
        assert_eq!(g[1].power_w, None);
        assert_eq!(g[1].pstate, Some(8));
    }

    #[test]
    fn pmon_parsing_skips_idle_rows() {
        let rows = parse_pmon(PMON);
        assert_eq!(
            rows,
            vec![
                PmonRow {
                    device: 0,
                    pid: 4242,
                    sm_pct: Some(60.0)
                },
                PmonRow {
                    device: 0,
                    pid: 5151,
                    sm_pct: Some(20.0)
                },
            ]
        );
    }

    #[test]
    fn attaches_to_tree_members() {
        let mut out = TickReadings {
            sys: Default::default(),
            tree: Some(ProcessTreeSnapshot {
                timestamp: 1.0,
                root_pid: 4242,
                members: [(4242, ProcessUsage::default())].into_iter().collect(),
            }),
        };
        out.sys.gpus = parse_gpu_query(QUERY);
        let per = per_process_sm(&parse_pmon(PMON), &out.sys.gpus);
        attach_process_utilization(&mut out, &per);
        assert_eq!(out.sys.gpus[0].sm_total_pct, Some(80.0));
        assert_eq!(out.sys.gpus[1].sm_total_pct, Some(0.0));
        let member = &out.tree.unwrap().members[&4242];
        assert_eq!(member.gpu_sm_pct[&0], 60.0);
    }

    #[test]
    fn context_count_fallback() {
        let rows = vec![
            PmonRow {
                device: 0,
                pid: 1,
                sm_pct: None,
            },
            PmonRow {
                device: 0,
                pid: 2,
                sm_pct: None,
            },
            PmonRow {
                device: 0,
                pid: 3,
                sm_pct: None,
            },
            PmonRow {
                device: 0,
                pid: 4,
                sm_pct: None,
            },
        ];
        let devices = parse_gpu_query("0, 100, 80, 10, P0\n");
        let per = per_process_sm(&rows, &devices);
        assert_eq!(per[&(0, 1)], 20.0);
        let total: f64 = per.values().sum();
        assert!((total - 80.0).abs() < 1e-12);
    }

    #[test]
    fn names() {
        assert_eq!(
            parse_gpu_names("0, Tesla V100-SXM2-16GB\n"),
            vec![(0, "Tesla V100-SXM2-16GB".to_string())]
        );
    }
}
