//! Process-tree and system-wide CPU/memory statistics from procfs.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    ProcessTreeSnapshot, ProcessUsage, Sensor, SensorError, SystemInfo, TickContext, TickReadings,
};
use crate::log::HardwareComponent;

pub const TREE_SENSOR_NAME: &str = "procfs-tree";
pub const SYSTEM_SENSOR_NAME: &str = "procfs-system";

fn clock_ticks_per_second() -> f64 {
    let ticks = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if ticks > 0 {
        ticks as f64
    } else {
        100.0
    }
}

fn page_size() -> u64 {
    let size = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if size > 0 {
        size as u64
    } else {
        4096
    }
}

/// Fields of `/proc/<pid>/stat` that the tree sampler needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PidStat {
    pub pid: u32,
    pub state: char,
    pub ppid: u32,
    pub utime_ticks: u64,
    pub stime_ticks: u64,
    pub rss_pages: u64,
}

/// Parse one `stat` line. The command name sits in parentheses and may itself
/// contain spaces or parentheses, so fields are counted from the last `)`.
pub fn parse_pid_stat(line: &str) -> Option<PidStat> {
    let open = line.find('(')?;
    let close = line.rfind(')')?;
    let pid = line[..open].trim().parse().ok()?;
    let rest: Vec<&str> = line[close + 1..].split_whitespace().collect();
    // rest[0] is field 3 (state)
    let field = |n: usize| rest.get(n - 3).copied();
    Some(PidStat {
        pid,
        state: field(3)?.chars().next()?,
        ppid: field(4)?.parse().ok()?,
        utime_ticks: field(14)?.parse().ok()?,
        stime_ticks: field(15)?.parse().ok()?,
        rss_pages: field(24)?.parse().ok()?,
    })
}

fn read_all_stats(procfs_root: &Path) -> Vec<PidStat> {
    let Ok(entries) = fs::read_dir(procfs_root) else {
        return Vec::new();
    };
    entries
        .flatten()
        .filter(|e| {
            e.file_name()
                .to_string_lossy()
                .bytes()
                .all(|b| b.is_ascii_digit())
        })
        .filter_map(|e| fs::read_to_string(e.path().join("stat")).ok())
        .filter_map(|line| parse_pid_stat(&line))
        .collect()
}

fn is_dead(state: char) -> bool {
    matches!(state, 'Z' | 'X' | 'x')
}

/// Build the tree rooted at `root_pid` from a set of per-pid stats.
pub fn tree_from_stats(
    stats: &[PidStat],
    root_pid: u32,
    timestamp: f64,
    ticks_per_s: f64,
    page_bytes: u64,
) -> Result<ProcessTreeSnapshot, SensorError> {
    let by_pid: HashMap<u32, &PidStat> = stats.iter().map(|s| (s.pid, s)).collect();
    match by_pid.get(&root_pid) {
        Some(root) if !is_dead(root.state) => {}
        _ => return Err(SensorError::ProcessGone(root_pid)),
    }
    let mut children: HashMap<u32, Vec<u32>> = HashMap::new();
    for s in stats {
        children.entry(s.ppid).or_default().push(s.pid);
    }
    let mut members = BTreeMap::new();
    let mut queue = VecDeque::from([root_pid]);
    while let Some(pid) = queue.pop_front() {
        let Some(stat) = by_pid.get(&pid) else {
            continue;
        };
        if members.contains_key(&pid) {
            continue;
        }
        if !is_dead(stat.state) {
            members.insert(
                pid,
                ProcessUsage {
                    cpu_time_s: (stat.utime_ticks + stat.stime_ticks) as f64 / ticks_per_s,
                    rss_bytes: stat.rss_pages * page_bytes,
                    gpu_sm_pct: BTreeMap::new(),
                },
            );
        }
        if let Some(kids) = children.get(&pid) {
            queue.extend(kids.iter().copied());
        }
    }
    Ok(ProcessTreeSnapshot {
        timestamp,
        root_pid,
        members,
    })
}

/// Snapshot the live tree of `root_pid` from `/proc`.
pub fn snapshot_process_tree(root_pid: u32) -> Result<ProcessTreeSnapshot, SensorError> {
    snapshot_process_tree_at(Path::new("/proc"), root_pid, crate::now_epoch())
}

pub fn snapshot_process_tree_at(
    procfs_root: &Path,
    root_pid: u32,
    timestamp: f64,
) -> Result<ProcessTreeSnapshot, SensorError> {
    let stats = read_all_stats(procfs_root);
    tree_from_stats(
        &stats,
        root_pid,
        timestamp,
        clock_ticks_per_second(),
        page_size(),
    )
}

/// Busy jiffies from the aggregate `cpu` line of `/proc/stat`.
pub fn parse_cpu_busy_ticks(stat: &str) -> Option<u64> {
    let line = stat.lines().find(|l| l.starts_with("cpu "))?;
    let v: Vec<u64> = line
        .split_whitespace()
        .skip(1)
        .filter_map(|x| x.parse().ok())
        .collect();
    // user nice system idle iowait irq softirq steal (guest is inside user)
    let get = |i: usize| v.get(i).copied().unwrap_or(0);
    if v.len() < 4 {
        return None;
    }
    Some(get(0) + get(1) + get(2) + get(5) + get(6) + get(7))
}

pub fn parse_mem_used_bytes(meminfo: &str) -> Option<u64> {
    let kb = |key: &str| -> Option<u64> {
        meminfo
            .lines()
            .find(|l| l.starts_with(key))?
            .split_whitespace()
            .nth(1)?
            .parse()
            .ok()
    };
    let total = kb("MemTotal:")?;
    let available = kb("MemAvailable:").or_else(|| kb("MemFree:"))?;
    Some(total.saturating_sub(available) * 1024)
}

pub fn parse_mean_cpu_freq_hz(cpuinfo: &str) -> Option<f64> {
    let mhz: Vec<f64> = cpuinfo
        .lines()
        .filter(|l| l.starts_with("cpu MHz"))
        .filter_map(|l| l.split(':').nth(1)?.trim().parse().ok())
        .collect();
    (!mhz.is_empty()).then(|| mhz.iter().sum::<f64>() / mhz.len() as f64 * 1e6)
}

/// Total sectors written over the named whole-disk devices.
pub fn parse_sectors_written(diskstats: &str, disks: &[String]) -> u64 {
    diskstats
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let name = f.get(2)?;
            if !disks.is_empty() && !disks.iter().any(|d| d == name) {
                return None;
            }
            f.get(9)?.parse::<u64>().ok()
        })
        .sum()
}

pub fn cpu_model(procfs_root: &Path) -> Option<String> {
    let info = fs::read_to_string(procfs_root.join("cpuinfo")).ok()?;
    info.lines()
        .find(|l| l.starts_with("model name"))
        .and_then(|l| l.split(':').nth(1))
        .map(|s| s.trim().to_string())
}

/// Tracks the root process and all its live descendants.
pub struct ProcessTreeSensor {
    procfs_root: PathBuf,
}

impl ProcessTreeSensor {
    pub fn new(procfs_root: impl Into<PathBuf>) -> Self {
        ProcessTreeSensor {
            procfs_root: procfs_root.into(),
        }
    }
}

impl Sensor for ProcessTreeSensor {
    fn name(&self) -> &str {
        TREE_SENSOR_NAME
    }

    fn description(&self) -> &str {
        "cumulative CPU time and RSS of the tracked process tree"
    }

    fn is_compatible(&self, system: &SystemInfo) -> bool {
        !system.replay && system.procfs_root.join("self/stat").exists()
    }

    fn gather(&mut self, ctx: &TickContext<'_>, out: &mut TickReadings) -> Result<(), SensorError> {
        out.tree = Some(snapshot_process_tree_at(
            &self.procfs_root,
            ctx.root_pid,
            ctx.now,
        )?);
        Ok(())
    }
}

/// System busy time, memory, frequency and disk write rate.
pub struct SystemStatSensor {
    procfs_root: PathBuf,
    disks: Vec<String>,
    last_sectors: Option<(f64, u64)>,
}

impl SystemStatSensor {
    pub fn new(procfs_root: impl Into<PathBuf>) -> Self {
        let disks = fs::read_dir("/sys/block")
            .map(|entries| {
                entries
                    .flatten()
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .filter(|n| !n.starts_with("loop") && !n.starts_with("ram"))
                    .collect()
            })
            .unwrap_or_default();
        SystemStatSensor {
            procfs_root: procfs_root.into(),
            disks,
            last_sectors: None,
        }
    }

    fn read(&self, file: &str) -> Result<String, SensorError> {
        fs::read_to_string(self.procfs_root.join(file))
            .map_err(|e| SensorError::read(SYSTEM_SENSOR_NAME, format!("{file}: {e}")))
    }
}

impl Sensor for SystemStatSensor {
    fn name(&self) -> &str {
        SYSTEM_SENSOR_NAME
    }

    fn description(&self) -> &str {
        "system busy CPU time, used memory, CPU frequency and disk writes"
    }

    fn is_compatible(&self, system: &SystemInfo) -> bool {
        !system.replay && system.procfs_root.join("stat").exists()
    }

    fn gather(&mut self, ctx: &TickContext<'_>, out: &mut TickReadings) -> Result<(), SensorError> {
        let busy = parse_cpu_busy_ticks(&self.read("stat")?)
            .ok_or_else(|| SensorError::read(SYSTEM_SENSOR_NAME, "no cpu line in stat"))?;
        out.sys.cpu_busy_s = Some(busy as f64 / clock_ticks_per_second());
        out.sys.mem_used_bytes = parse_mem_used_bytes(&self.read("meminfo")?);
        out.sys.cpu_freq_hz = self
            .read("cpuinfo")
            .ok()
            .and_then(|s| parse_mean_cpu_freq_hz(&s));
        if let Ok(diskstats) = self.read("diskstats") {
            let sectors = parse_sectors_written(&diskstats, &self.disks);
            if let Some((t, prev)) = self.last_sectors {
                if ctx.now > t {
                    out.sys.disk_write_bps =
                        Some(sectors.saturating_sub(prev) as f64 * 512.0 / (ctx.now - t));
                }
            }
            self.last_sectors = Some((ctx.now, sectors));
        }
        Ok(())
    }

    fn hardware(&self) -> Vec<HardwareComponent> {
        cpu_model(&self.procfs_root)
            .map(|model| HardwareComponent {
                kind: "cpu".into(),
                model,
            })
            .into_iter()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stat(pid: u32, ppid: u32, state: char, ticks: u64, rss: u64) -> PidStat {
        PidStat {
            pid,
            state,
            ppid,
            utime_ticks: ticks,
            stime_ticks: 0,
            rss_pages: rss,
        }
    }

    #[test]
    fn parses_stat_with_odd_comm() {
        let line = "4242 (my (weird) cmd) S 1 4242 4242 0 -1 4194560 100 0 0 0 250 50 0 0 20 0 3 0 1000 123456 789 18446744073709551615";
        let s = parse_pid_stat(line).unwrap();
        assert_eq!(s.pid, 4242);
        assert_eq!(s.state, 'S');
        assert_eq!(s.ppid, 1);
        assert_eq!(s.utime_ticks, 250);
        assert_eq!(s.stime_ticks, 50);
        assert_eq!(s.rss_pages, 789);
    }

    #[test]
    fn root_with_two_children() {
        let stats = vec![
            stat(1, 0, 'S', 0, 0),
            stat(10, 1, 'S', 100, 10),
            stat(11, 10, 'R', 50, 5),
            stat(12, 10, 'S', 25, 5),
            stat(20, 1, 'S', 999, 1),
        ];
        let tree = tree_from_stats(&stats, 10, 5.0, 100.0, 4096).unwrap();
        assert_eq!(tree.members.len(), 3);
        assert_eq!(tree.members[&10].cpu_time_s, 1.0);
        assert_eq!(tree.rss_total(), 20 * 4096);
    }

    #[test]
    fn exited_child_is_omitted() {
        let stats = vec![stat(10, 1, 'S', 100, 10), stat(11, 10, 'Z', 50, 0)];
        let tree = tree_from_stats(&stats, 10, 5.0, 100.0, 4096).unwrap();
        assert_eq!(tree.members.keys().copied().collect::<Vec<_>>(), vec![10]);
    }

    #[test]
    fn gone_or_zombie_root() {
        let stats = vec![stat(10, 1, 'Z', 100, 0)];
        assert_eq!(
            tree_from_stats(&stats, 10, 0.0, 100.0, 4096).unwrap_err(),
            SensorError::ProcessGone(10)
        );
        assert_eq!(
            tree_from_stats(&[], 7, 0.0, 100.0, 4096).unwrap_err(),
            SensorError::ProcessGone(7)
        );
    }

    #[test]
    fn live_self_snapshot() {
        let me = std::process::id();
        let tree = snapshot_process_tree(me).unwrap();
        assert!(tree.members.contains_key(&me));
    }

    #[test]
    fn cpu_busy_ticks() {
        let stat = "cpu  100 5 50 1000 20 3 2 1 7 0\ncpu0 1 2 3 4\n";
        assert_eq!(parse_cpu_busy_ticks(stat), Some(100 + 5 + 50 + 3 + 2 + 1));
    }

    #[test]
    fn mem_used() {
        let info = "MemTotal:       16000 kB\nMemFree:  1000 kB\nMemAvailable:    6000 kB\n";
        assert_eq!(parse_mem_used_bytes(info), Some(10000 * 1024));
    }

    #[test]
    fn cpu_freq_mean() {
        let info = "processor : 0\ncpu MHz\t\t: 2000.000\nprocessor : 1\ncpu MHz\t\t: 3000.000\n";
        assert_eq!(parse_mean_cpu_freq_hz(info), Some(2.5e9));
    }

    #[test]
    fn sectors_written_whole_disks() {
        let stats = "   8       0 sda 1 2 3 4 5 6 700 8 9 10 11\n   8       1 sda1 1 2 3 4 5 6 300 8 9 10 11\n";
        assert_eq!(parse_sectors_written(stats, &["sda".to_string()]), 700);
    }
}
