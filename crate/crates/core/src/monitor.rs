//! Run lifecycle: write the header, sample on a background thread, finalize.
//!
//! [`launch_monitor`] resolves the run's region, writes the log header and
//! starts one sampler thread that owns the sensors and the log writer. Each
//! tick reads every sensor, credits the interval since the previous tick and
//! appends a sample record. Sensor failures become exception records and are
//! also queued for [`MonitorHandle::check_for_exceptions`]; they never stop
//! sampling. [`MonitorHandle::shutdown`] stops the sampler, computes emissions
//! and appends the final record.
//!
//! With the replay backend the sampler walks the whole trace on the trace's
//! own clock, so the log does not depend on wall time or on the workload.

use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::attribution::{
    attribute_interval, summarize, EnergyLedger, IntervalEnergy, RunMeta, DEFAULT_PUE,
};
use crate::carbon::geolocate::{HttpGeoProvider, OfflineProvider};
use crate::carbon::{
    compute_emissions, geolocate, region_override, EmissionsEstimate, GeoProvider, IntensityKind,
    Location, RegionDb, SccTable,
};
use crate::log::{
    run_id_for, ExceptionRecord, HardwareComponent, IntensityLogRecord, LogError, LogHeader,
    LogRecord, LogWriter, PackageVersion, SampleRecord, LOG_FILE_NAME,
};
use crate::realtime::{
    integrate_time_varying_emissions, poll_realtime_intensity, HttpIntensityProvider,
    IntensityProvider, IntensitySeries, PollSchedule, ScriptedProvider, DEFAULT_POLL_INTERVAL_S,
};
use crate::reporting::ImpactSummary;
use crate::sensors::{
    list_compatible_sensors, sample_utilization_shares, PowerSample, ProcessTreeSnapshot,
    ReplayCursor, ReplayTrace, ResourceShares, SensorError, SensorRouter, SystemInfo, TickContext,
    TickReadings,
};
use crate::{now_epoch, SCHEMA_VERSION, TOOL_VERSION};

/// Exception source used for realtime intensity failures.
pub const REALTIME_SOURCE: &str = "realtime-intensity";
/// Exception source used for region resolution failures.
pub const GEOLOCATION_SOURCE: &str = "geolocation";

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("failed to launch monitor: {0}")]
    LaunchFailure(String),
    #[error("invalid monitor configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone)]
pub enum SensorBackend {
    System,
    Replay(ReplayTrace),
}

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub log_dir: PathBuf,
    pub poll_interval_s: f64,
    pub pue: f64,
    pub region_override: Option<String>,
    pub realtime_poll_interval_s: f64,
    pub sensor_backend: SensorBackend,
    /// Groups runs in the appendix.
    pub experiment: Option<String>,
    /// No geolocation or realtime network calls.
    pub offline: bool,
    /// Address to geolocate; the machine's public address when `None`.
    pub ip: Option<IpAddr>,
}

impl MonitorConfig {
    pub fn new(log_dir: impl Into<PathBuf>) -> Self {
        MonitorConfig {
            log_dir: log_dir.into(),
            poll_interval_s: 1.0,
            pue: DEFAULT_PUE,
            region_override: None,
            realtime_poll_interval_s: DEFAULT_POLL_INTERVAL_S,
            sensor_backend: SensorBackend::System,
            experiment: None,
            offline: false,
            ip: None,
        }
    }

    pub fn validate(&self) -> Result<(), MonitorError> {
        if !(self.poll_interval_s > 0.0 && self.poll_interval_s.is_finite()) {
            return Err(MonitorError::Config(
                "poll interval must be positive".into(),
            ));
        }
        if !(self.realtime_poll_interval_s > 0.0 && self.realtime_poll_interval_s.is_finite()) {
            return Err(MonitorError::Config(
                "realtime poll interval must be positive".into(),
            ));
        }
        if !(self.pue >= 1.0 && self.pue.is_finite()) {
            return Err(MonitorError::Config(format!(
                "pue {} is below 1.0",
                self.pue
            )));
        }
        Ok(())
    }

    pub fn log_path(&self) -> PathBuf {
        self.log_dir.join(LOG_FILE_NAME)
    }
}

/// Data and providers used to turn energy into emissions.
pub struct CarbonPipeline {
    pub regions: RegionDb,
    pub scc: SccTable,
    pub geo: Box<dyn GeoProvider + Send>,
    /// Overrides the provider chosen from the region data.
    pub realtime: Option<Box<dyn IntensityProvider>>,
}

impl CarbonPipeline {
    pub fn bundled(offline: bool) -> Self {
        CarbonPipeline {
            regions: RegionDb::bundled(),
            scc: SccTable::bundled(),
            geo: if offline {
                Box::new(OfflineProvider)
            } else {
                Box::new(HttpGeoProvider::default())
            },
            realtime: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRegion {
    pub region_id: String,
    pub country: Option<String>,
    pub avg_g_per_kwh: f64,
}

fn resolve_location(
    config: &MonitorConfig,
    pipeline: &CarbonPipeline,
) -> Result<
    (
        ResolvedRegion,
        Option<crate::carbon::regions::RealtimeEndpoint>,
    ),
    String,
> {
    let override_region = region_override(config.region_override.as_deref());
    let location = geolocate(config.ip, pipeline.geo.as_ref(), override_region.as_deref())
        .map_err(|e| e.to_string())?;
    let id = match location {
        Location::Region(id) => id,
        Location::Point(p) => pipeline
            .regions
            .resolve(p)
            .map_err(|e| e.to_string())?
            .id
            .clone(),
    };
    let source = pipeline.regions.lookup(&id).map_err(|e| e.to_string())?;
    let endpoint = source
        .grid_region
        .as_deref()
        .and_then(|g| pipeline.regions.region(g))
        .and_then(|r| r.realtime.clone());
    Ok((
        ResolvedRegion {
            region_id: source.grid_region.unwrap_or(source.id),
            country: source.country,
            avg_g_per_kwh: source.g_per_kwh,
        },
        endpoint,
    ))
}

/// Clock that never runs backwards: wall time at start plus a monotonic
/// elapsed duration.
#[derive(Debug, Clone, Copy)]
struct MonotonicClock {
    epoch: f64,
    origin: Instant,
}

impl MonotonicClock {
    fn start() -> Self {
        MonotonicClock {
            epoch: now_epoch(),
            origin: Instant::now(),
        }
    }

    fn now(&self) -> f64 {
        self.epoch + self.origin.elapsed().as_secs_f64()
    }
}

/// Everything the sampler carries from one tick to the next.
pub struct SamplerState {
    pub root_pid: u32,
    pub ledger: EnergyLedger,
    pub intervals: Vec<IntervalEnergy>,
    pub series: IntensitySeries,
    pub samples_written: usize,
    pub last_t: Option<f64>,
    prev_sample: Option<PowerSample>,
    prev_tree: Option<ProcessTreeSnapshot>,
    last_shares: Option<ResourceShares>,
    realtime: Option<(Box<dyn IntensityProvider>, PollSchedule)>,
    exceptions: Sender<ExceptionRecord>,
}

impl SamplerState {
    pub fn new(
        root_pid: u32,
        pue: f64,
        region_id: &str,
        exceptions: Sender<ExceptionRecord>,
    ) -> Result<Self, MonitorError> {
        Ok(SamplerState {
            root_pid,
            ledger: EnergyLedger::new(pue).map_err(|e| MonitorError::Config(e.to_string()))?,
            intervals: Vec::new(),
            series: IntensitySeries::new(region_id),
            samples_written: 0,
            last_t: None,
            prev_sample: None,
            prev_tree: None,
            last_shares: None,
            realtime: None,
            exceptions,
        })
    }

    pub fn with_realtime(mut self, provider: Box<dyn IntensityProvider>, interval_s: f64) -> Self {
        self.realtime = Some((provider, PollSchedule::new(interval_s)));
        self
    }

    fn report(&mut self, log: &mut LogWriter, t: f64, source: &str, message: String) {
        let record = ExceptionRecord {
            t,
            source: source.to_string(),
            message,
        };
        log::warn!("{}: {}", record.source, record.message);
        if let Err(e) = log.append(&LogRecord::Exception(record.clone())) {
            log::error!("cannot log exception: {e}");
        }
        let _ = self.exceptions.send(record);
    }

    fn shares_for(
        &mut self,
        tree: Option<&ProcessTreeSnapshot>,
        sample: &PowerSample,
        log: &mut LogWriter,
    ) -> Option<ResourceShares> {
        if let (Some(prev_tree), Some(prev_sample), Some(tree)) =
            (&self.prev_tree, &self.prev_sample, tree)
        {
            match sample_utilization_shares(prev_tree, tree, prev_sample, sample) {
                Ok(s) => {
                    self.last_shares = Some(s.clone());
                    return Some(s);
                }
                Err(e) => self.report(log, sample.timestamp, "shares", e.to_string()),
            }
        }
        // no fresh tree delta (tree sensor failed or the root just exited)
        self.last_shares.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickOutcome {
    Continue,
    RootGone,
}

/// One sampler tick: read every sensor, credit the interval since the
/// previous tick, append the sample and, when due, poll realtime intensity.
pub fn poll_once(
    router: &mut SensorRouter,
    state: &mut SamplerState,
    log: &mut LogWriter,
    ctx: &TickContext<'_>,
) -> TickOutcome {
    let now = match state.last_t {
        Some(last) if ctx.now <= last => {
            state.report(
                log,
                last,
                "clock",
                SensorError::ClockSkew {
                    prev: last,
                    next: ctx.now,
                }
                .to_string(),
            );
            return TickOutcome::Continue;
        }
        _ => ctx.now,
    };
    let mut readings = TickReadings::default();
    let mut root_gone = false;
    let mut failures = Vec::new();
    for sensor in router.sensors_mut() {
        match sensor.gather(ctx, &mut readings) {
            Ok(()) => {}
            Err(SensorError::ProcessGone(_)) => root_gone = true,
            Err(e) => failures.push((sensor.name().to_string(), e.to_string())),
        }
    }
    for (source, message) in failures {
        state.report(log, now, &source, message);
    }

    let sample = PowerSample {
        timestamp: now,
        sys: readings.sys,
    };
    let mut credited = None;
    if let Some(prev) = state.prev_sample.clone() {
        if let Some(shares) = state.shares_for(readings.tree.as_ref(), &sample, log) {
            match attribute_interval(&prev, &sample, &shares) {
                Ok(interval) => {
                    state.ledger.accumulate(&interval);
                    state.intervals.push(interval);
                    credited = Some(interval);
                }
                Err(e) => state.report(log, now, "attribution", e.to_string()),
            }
        }
    }

    let record = SampleRecord {
        t: now,
        sys: sample.sys.clone(),
        proc: readings
            .tree
            .as_ref()
            .map(|t| t.members.clone())
            .unwrap_or_default(),
        credited,
    };
    match log.append(&LogRecord::Sample(record)) {
        Ok(()) => state.samples_written += 1,
        Err(e) => {
            log::error!("cannot append sample: {e}");
            let _ = state.exceptions.send(ExceptionRecord {
                t: now,
                source: "log".into(),
                message: e.to_string(),
            });
        }
    }
    state.prev_sample = Some(sample);
    state.prev_tree = readings.tree;
    state.last_t = Some(now);

    poll_realtime(state, log, now);

    if root_gone {
        TickOutcome::RootGone
    } else {
        TickOutcome::Continue
    }
}

fn poll_realtime(state: &mut SamplerState, log: &mut LogWriter, now: f64) {
    let Some((provider, schedule)) = state.realtime.as_mut() else {
        return;
    };
    if !schedule.due(now) {
        return;
    }
    schedule.mark(now);
    let region = state.series.region_id.clone();
    match poll_realtime_intensity(provider.as_mut(), now, &region) {
        Ok(rec) => {
            let _ = state.series.push(now, Some(rec.g_per_kwh));
            let record = LogRecord::Intensity(IntensityLogRecord {
                t: now,
                region_id: rec.region_id,
                g_per_kwh: rec.g_per_kwh,
                basis: IntensityKind::Realtime,
            });
            if let Err(e) = log.append(&record) {
                log::error!("cannot append intensity: {e}");
            }
        }
        Err(e) => {
            let _ = state.series.push(now, None);
            state.report(log, now, REALTIME_SOURCE, e.to_string());
        }
    }
}

fn environment_manifest(system: bool) -> Vec<PackageVersion> {
    let mut env = vec![
        PackageVersion {
            name: "impact-core".into(),
            version: TOOL_VERSION.into(),
        },
        PackageVersion {
            name: "os".into(),
            version: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
        },
    ];
    if system {
        if let Ok(release) = std::fs::read_to_string("/proc/sys/kernel/osrelease") {
            env.push(PackageVersion {
                name: "kernel".into(),
                version: release.trim().to_string(),
            });
        }
    }
    env
}

struct SamplerOutput {
    state: SamplerState,
    log: LogWriter,
}

enum Driver {
    Replay(ReplayCursor),
    System(MonotonicClock, Duration),
}

fn run_sampler(
    mut router: SensorRouter,
    mut state: SamplerState,
    mut log: LogWriter,
    driver: Driver,
    stop: Arc<AtomicBool>,
) -> SamplerOutput {
    let root = state.root_pid;
    match driver {
        Driver::Replay(mut cursor) => {
            // the trace decides when the run ends, not the workload
            while let Ok(step) = cursor.next_step() {
                let ctx = TickContext {
                    now: step.t,
                    root_pid: root,
                    step: Some(step),
                };
                if poll_once(&mut router, &mut state, &mut log, &ctx) == TickOutcome::RootGone {
                    break;
                }
            }
        }
        Driver::System(clock, interval) => {
            let mut next = Instant::now();
            loop {
                let ctx = TickContext {
                    now: clock.now(),
                    root_pid: root,
                    step: None,
                };
                if poll_once(&mut router, &mut state, &mut log, &ctx) == TickOutcome::RootGone {
                    break;
                }
                next += interval;
                // sleep in short slices so shutdown is noticed promptly
                while Instant::now() < next && !stop.load(Ordering::SeqCst) {
                    let left = next.saturating_duration_since(Instant::now());
                    thread::sleep(left.min(Duration::from_millis(20)));
                }
                if stop.load(Ordering::SeqCst) {
                    // final partial interval
                    let ctx = TickContext {
                        now: clock.now(),
                        root_pid: root,
                        step: None,
                    };
                    poll_once(&mut router, &mut state, &mut log, &ctx);
                    break;
                }
                if Instant::now() > next + interval {
                    // fell behind (suspended machine); resynchronize
                    next = Instant::now();
                }
            }
        }
    }
    SamplerOutput { state, log }
}

pub struct MonitorHandle {
    log_path: PathBuf,
    header: LogHeader,
    region: Option<ResolvedRegion>,
    scc: SccTable,
    replay: bool,
    clock: MonotonicClock,
    stop: Arc<AtomicBool>,
    finished: Arc<AtomicBool>,
    exceptions: Receiver<ExceptionRecord>,
    sampler: Option<JoinHandle<SamplerOutput>>,
    summary: Option<ImpactSummary>,
}

impl std::fmt::Debug for MonitorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MonitorHandle")
            .field("log_path", &self.log_path)
            .field("alive", &self.is_alive())
            .finish()
    }
}

pub fn launch_monitor(config: MonitorConfig, root_pid: u32) -> Result<MonitorHandle, MonitorError> {
    let pipeline = CarbonPipeline::bundled(config.offline);
    launch_monitor_with(config, root_pid, pipeline)
}

pub fn launch_monitor_with(
    config: MonitorConfig,
    root_pid: u32,
    pipeline: CarbonPipeline,
) -> Result<MonitorHandle, MonitorError> {
    config.validate()?;
    std::fs::create_dir_all(&config.log_dir)
        .map_err(|e| MonitorError::LaunchFailure(format!("{}: {e}", config.log_dir.display())))?;
    let log_path = config.log_path();
    let mut log =
        LogWriter::create(&log_path).map_err(|e| MonitorError::LaunchFailure(e.to_string()))?;

    let (router, trace_hw, driver, start_time, clock) = match &config.sensor_backend {
        SensorBackend::Replay(trace) => {
            let router =
                list_compatible_sensors(&SystemInfo::replay(), SensorRouter::replay_default());
            let start = trace.start_time().unwrap_or(0.0);
            (
                router,
                trace.hardware.clone(),
                Driver::Replay(ReplayCursor::new(trace.clone())),
                start,
                MonotonicClock::start(),
            )
        }
        SensorBackend::System => {
            let router =
                list_compatible_sensors(&SystemInfo::detect(), SensorRouter::system_default());
            let clock = MonotonicClock::start();
            (
                router,
                Vec::new(),
                Driver::System(clock, Duration::from_secs_f64(config.poll_interval_s)),
                clock.epoch,
                clock,
            )
        }
    };
    let replay = matches!(config.sensor_backend, SensorBackend::Replay(_));

    let mut hardware = trace_hw;
    hardware.extend(router.hardware());
    hardware.extend(router.descriptors().into_iter().map(|d| HardwareComponent {
        kind: "sensor".into(),
        model: d.name,
    }));

    let (region, endpoint, geo_error) = match resolve_location(&config, &pipeline) {
        Ok((r, e)) => (Some(r), e, None),
        Err(msg) => (None, None, Some(msg)),
    };

    let header = LogHeader {
        schema_version: SCHEMA_VERSION.into(),
        tool_version: TOOL_VERSION.into(),
        start_time,
        hardware,
        environment: environment_manifest(!replay),
        region_hint: region.as_ref().map(|r| r.region_id.clone()),
        pue: config.pue,
        experiment: config.experiment.clone(),
        poll_interval_s: Some(config.poll_interval_s),
    };
    log.append(&LogRecord::Header(header.clone()))
        .map_err(|e| MonitorError::LaunchFailure(e.to_string()))?;

    let (tx, rx) = mpsc::channel();
    let mut state = SamplerState::new(
        root_pid,
        config.pue,
        region.as_ref().map_or("unknown", |r| r.region_id.as_str()),
        tx,
    )?;
    match (&region, geo_error) {
        (Some(r), _) => {
            log.append(&LogRecord::Intensity(IntensityLogRecord {
                t: start_time,
                region_id: r.region_id.clone(),
                g_per_kwh: r.avg_g_per_kwh,
                basis: IntensityKind::Average,
            }))?;
            let provider: Option<Box<dyn IntensityProvider>> =
                match (pipeline.realtime, &config.sensor_backend) {
                    (Some(p), _) => Some(p),
                    (None, SensorBackend::Replay(trace)) if !trace.intensity.is_empty() => {
                        Some(Box::new(ScriptedProvider::new(trace.intensity.clone())))
                    }
                    (None, SensorBackend::System) if !config.offline => endpoint.map(|e| {
                        Box::new(HttpIntensityProvider::new(e)) as Box<dyn IntensityProvider>
                    }),
                    _ => None,
                };
            if let Some(p) = provider {
                state = state.with_realtime(p, config.realtime_poll_interval_s);
            }
        }
        (None, msg) => {
            let message = msg.unwrap_or_default();
            state.report(
                &mut log,
                start_time,
                GEOLOCATION_SOURCE,
                format!("{message}; reporting energy only"),
            );
        }
    }

    let stop = Arc::new(AtomicBool::new(false));
    let finished = Arc::new(AtomicBool::new(false));
    let sampler = {
        let stop = Arc::clone(&stop);
        let finished = Arc::clone(&finished);
        thread::Builder::new()
            .name("impact-sampler".into())
            .spawn(move || {
                let out = run_sampler(router, state, log, driver, stop);
                finished.store(true, Ordering::SeqCst);
                out
            })
            .map_err(|e| MonitorError::LaunchFailure(e.to_string()))?
    };

    Ok(MonitorHandle {
        log_path,
        header,
        region,
        scc: pipeline.scc,
        replay,
        clock,
        stop,
        finished,
        exceptions: rx,
        sampler: Some(sampler),
        summary: None,
    })
}

impl MonitorHandle {
    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn header(&self) -> &LogHeader {
        &self.header
    }

    pub fn region(&self) -> Option<&ResolvedRegion> {
        self.region.as_ref()
    }

    pub fn run_id(&self) -> String {
        run_id_for(&self.header)
    }

    /// True while the sampler thread is running.
    pub fn is_alive(&self) -> bool {
        self.sampler.is_some() && !self.finished.load(Ordering::SeqCst)
    }

    /// Drain sampler exceptions queued since the last call.
    pub fn check_for_exceptions(&self) -> Vec<ExceptionRecord> {
        self.exceptions.try_iter().collect()
    }

    /// Block until the sampler stops on its own (root exit or end of trace).
    pub fn wait(&mut self) -> ImpactSummary {
        if let Some(h) = self.sampler.take() {
            let out = h.join();
            return self.finish(out.ok());
        }
        self.shutdown()
    }

    /// Stop sampling, compute emissions and append the final record. Later
    /// calls return the same summary without writing anything.
    pub fn shutdown(&mut self) -> ImpactSummary {
        if let Some(s) = &self.summary {
            return s.clone();
        }
        self.stop.store(true, Ordering::SeqCst);
        let out = self.sampler.take().and_then(|h| h.join().ok());
        self.finish(out)
    }

    fn finish(&mut self, out: Option<SamplerOutput>) -> ImpactSummary {
        if let Some(s) = &self.summary {
            return s.clone();
        }
        let (state, log) = match out {
            Some(o) => (Some(o.state), Some(o.log)),
            None => {
                log::error!("sampler thread panicked; finalizing with what was logged");
                (None, LogWriter::open(&self.log_path).ok())
            }
        };
        let ledger = state
            .as_ref()
            .map(|s| s.ledger.clone())
            .unwrap_or_else(|| EnergyLedger::new(self.header.pue).expect("header pue is valid"));
        let last_t = state.as_ref().and_then(|s| s.last_t);
        let end_time = if self.replay {
            last_t.unwrap_or(self.header.start_time)
        } else {
            self.clock.now().max(last_t.unwrap_or(f64::MIN))
        };

        let estimate = match &self.region {
            Some(r) => {
                let (kg, basis) = match &state {
                    Some(s) if !s.series.is_empty() => (
                        ledger.pue
                            * integrate_time_varying_emissions(
                                &s.intervals,
                                &s.series,
                                r.avg_g_per_kwh,
                            ),
                        IntensityKind::Realtime,
                    ),
                    _ => (
                        compute_emissions(ledger.e_total_kwh, r.avg_g_per_kwh),
                        IntensityKind::Average,
                    ),
                };
                EmissionsEstimate {
                    kg_co2eq: Some(kg),
                    scc: None,
                    country: r.country.clone(),
                    region_id: Some(r.region_id.clone()),
                    basis: Some(basis),
                }
                .with_scc(&self.scc)
            }
            None => EmissionsEstimate::energy_only(),
        };
        let summary = summarize(
            &ledger,
            &estimate,
            &RunMeta {
                run_id: self.run_id(),
                duration_s: end_time - self.header.start_time,
            },
        );
        match log {
            Some(mut log) => {
                if let Err(e) = log.finalize(end_time, &summary, Some(&ledger)) {
                    log::error!("cannot write final record: {e}");
                }
            }
            None => log::error!("cannot reopen {} to finalize", self.log_path.display()),
        }
        self.summary = Some(summary.clone());
        summary
    }
}

impl Drop for MonitorHandle {
    fn drop(&mut self) {
        if self.summary.is_none() {
            self.shutdown();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::read_records;
    use crate::sensors::replay::{ReplayStep, ReplayTree, ScriptedIntensity};
    use crate::sensors::{GpuReading, ProcessUsage, SystemReadings};
    use std::collections::BTreeMap;

    fn constant_trace(n: usize, dt: f64, watts: f64) -> ReplayTrace {
        ReplayTrace::generate(1000.0, dt, n, |i, _| {
            let mut sys = SystemReadings {
                cpu_busy_s: Some(i as f64 * dt),
                mem_used_bytes: Some(1 << 30),
                ..SystemReadings::default()
            };
            sys.cpu_energy_j.insert("package-0".into(), watts * dt);
            ReplayStep {
                sys,
                tree: ReplayTree {
                    root_pid: 42,
                    members: BTreeMap::from([(
                        42,
                        ProcessUsage {
                            cpu_time_s: i as f64 * dt,
                            rss_bytes: 1 << 30,
                            gpu_sm_pct: BTreeMap::new(),
                        },
                    )]),
                },
                ..ReplayStep::default()
            }
        })
    }

    fn config(dir: &Path, trace: ReplayTrace, region: Option<&str>) -> MonitorConfig {
        MonitorConfig {
            pue: 1.0,
            region_override: region.map(str::to_string),
            sensor_backend: SensorBackend::Replay(trace),
            offline: true,
            ..MonitorConfig::new(dir)
        }
    }

    #[test]
    fn hour_of_100w_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let mut trace = constant_trace(61, 60.0, 100.0);
        trace.intensity.push(ScriptedIntensity {
            t: 0.0,
            g_per_kwh: Some(100.0),
        });
        let mut pipeline = CarbonPipeline::bundled(true);
        pipeline.realtime = None;
        let mut handle =
            launch_monitor_with(config(dir.path(), trace, Some("US")), 42, pipeline).unwrap();
        let s = handle.wait();
        assert_eq!(s.kwh, 0.1);
        assert_eq!(s.kg_co2eq, Some(0.01));
        assert_eq!(s.duration_s, 3600.0);
        let contents = read_records(&dir.path().join(LOG_FILE_NAME)).unwrap();
        assert_eq!(contents.samples().count(), 61);
        assert!(contents.final_record().is_some());
    }

    #[test]
    fn shutdown_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut handle =
            launch_monitor(config(dir.path(), constant_trace(5, 1.0, 10.0), None), 42).unwrap();
        let a = handle.shutdown();
        let b = handle.shutdown();
        assert_eq!(a, b);
        assert_eq!(a.kg_co2eq, None);
        let contents = read_records(handle.log_path()).unwrap();
        let finals = contents
            .records
            .iter()
            .filter(|r| matches!(r, LogRecord::Final(_)))
            .count();
        assert_eq!(finals, 1);
        // no region: geolocation exception, energy only
        assert!(contents
            .exceptions()
            .any(|e| e.source == GEOLOCATION_SOURCE));
    }

    #[test]
    fn gpu_fault_logged_and_run_continues() {
        let dir = tempfile::tempdir().unwrap();
        let mut trace = constant_trace(10, 1.0, 10.0);
        for step in &mut trace.steps {
            step.sys.gpus.push(GpuReading {
                index: 0,
                power_w: Some(50.0),
                util_pct: Some(100.0),
                ..GpuReading::default()
            });
        }
        trace.steps[3].faults.push("replay-gpu".into());
        let mut handle = launch_monitor(config(dir.path(), trace, Some("FR")), 42).unwrap();
        let summary = handle.wait();
        let queued = handle.check_for_exceptions();
        assert_eq!(queued.len(), 1);
        assert_eq!(queued[0].source, "replay-gpu");
        assert!(handle.check_for_exceptions().is_empty());

        let contents = read_records(handle.log_path()).unwrap();
        let samples: Vec<_> = contents.samples().collect();
        assert_eq!(samples.len(), 10);
        assert!(samples[3].sys.gpus.is_empty());
        assert!(!samples[4].sys.gpus.is_empty());
        assert!(summary.kg_co2eq.is_some());
    }

    #[test]
    fn root_exit_finalizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut trace = constant_trace(10, 1.0, 10.0);
        trace.steps[5].root_exited = true;
        let mut handle = launch_monitor(config(dir.path(), trace, Some("FR")), 42).unwrap();
        let s = handle.wait();
        let contents = read_records(handle.log_path()).unwrap();
        assert_eq!(contents.samples().count(), 6);
        assert_eq!(s.duration_s, 5.0);
        // the exit tick is still credited with the last shares
        assert!((s.kwh - 50.0 / 3.6e6).abs() < 1e-3);
    }

    #[test]
    fn scripted_outage_falls_back_to_average() {
        let dir = tempfile::tempdir().unwrap();
        let mut trace = constant_trace(7, 60.0, 60.0);
        trace.intensity = vec![
            ScriptedIntensity {
                t: 0.0,
                g_per_kwh: Some(100.0),
            },
            ScriptedIntensity {
                t: 1120.0,
                g_per_kwh: None,
            },
            ScriptedIntensity {
                t: 1230.0,
                g_per_kwh: Some(100.0),
            },
        ];
        let mut cfg = config(dir.path(), trace, Some("FR"));
        cfg.realtime_poll_interval_s = 120.0;
        let mut handle = launch_monitor(cfg, 42).unwrap();
        handle.wait();
        let contents = read_records(handle.log_path()).unwrap();
        // polls at 1000, 1120 (outage), 1240, 1360
        let polls: Vec<f64> = contents
            .intensities()
            .filter(|i| i.basis == IntensityKind::Realtime)
            .map(|i| i.t)
            .collect();
        assert_eq!(polls, vec![1000.0, 1240.0, 1360.0]);
        assert!(contents.exceptions().any(|e| e.source == REALTIME_SOURCE));
    }

    #[test]
    fn bad_log_dir_is_launch_failure() {
        let file = tempfile::NamedTempFile::new().unwrap();
        let cfg = config(&file.path().join("sub"), constant_trace(2, 1.0, 1.0), None);
        assert!(matches!(
            launch_monitor(cfg, 42),
            Err(MonitorError::LaunchFailure(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = MonitorConfig::new("x");
        c.poll_interval_s = 0.0;
        assert!(c.validate().is_err());
        let mut c = MonitorConfig::new("x");
        c.pue = 0.9;
        assert!(c.validate().is_err());
        assert_eq!(MonitorConfig::new("x").pue, DEFAULT_PUE);
    }

    #[test]
    fn live_monitor_on_own_process() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MonitorConfig {
            poll_interval_s: 0.05,
            offline: true,
            region_override: Some("CA-QC".into()),
            ..MonitorConfig::new(dir.path())
        };
        let mut handle = launch_monitor(cfg, std::process::id()).unwrap();
        thread::sleep(Duration::from_millis(300));
        assert!(handle.is_alive());
        let s = handle.shutdown();
        assert!(!handle.is_alive());
        assert!(s.kwh >= 0.0);
        let contents = read_records(handle.log_path()).unwrap();
        assert!(contents.samples().count() >= 2);
        assert!(contents.final_record().is_some());
    }
}
