//! Run an external command under the monitor.
//!
//! The workload inherits stdio. SIGINT and SIGTERM received by the wrapper
//! are forwarded to it, and its exit status is passed through: the child's
//! exit code, or `128 + signal` when it was killed by a signal.

use std::ffi::OsString;
use std::os::unix::process::ExitStatusExt;
use std::path::PathBuf;
use std::process::{Command, ExitStatus};
use std::thread;

use signal_hook::consts::{SIGINT, SIGTERM};
use signal_hook::iterator::Signals;
use thiserror::Error;

use crate::log::ExceptionRecord;
use crate::monitor::{launch_monitor_with, CarbonPipeline, MonitorConfig, MonitorError};
use crate::reporting::ImpactSummary;

/// Exit code used when the workload or the monitor could not be started.
pub const LAUNCH_FAILURE_EXIT: i32 = 120;

#[derive(Debug, Error)]
pub enum WrapperError {
    #[error("no command given")]
    EmptyCommand,
    #[error("cannot start {command}: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

impl WrapperError {
    pub fn exit_code(&self) -> i32 {
        LAUNCH_FAILURE_EXIT
    }
}

#[derive(Debug)]
pub struct WrapOutcome {
    pub exit_code: i32,
    pub summary: ImpactSummary,
    pub log_path: PathBuf,
    pub exceptions: Vec<ExceptionRecord>,
}

pub fn exit_code_of(status: ExitStatus) -> i32 {
    match (status.code(), status.signal()) {
        (Some(code), _) => code,
        (None, Some(sig)) => 128 + sig,
        (None, None) => LAUNCH_FAILURE_EXIT,
    }
}

pub fn run_wrapped(
    command: &[OsString],
    config: MonitorConfig,
) -> Result<WrapOutcome, WrapperError> {
    let pipeline = CarbonPipeline::bundled(config.offline);
    run_wrapped_with(command, config, pipeline)
}

pub fn run_wrapped_with(
    command: &[OsString],
    config: MonitorConfig,
    pipeline: CarbonPipeline,
) -> Result<WrapOutcome, WrapperError> {
    let (program, args) = command.split_first().ok_or(WrapperError::EmptyCommand)?;
    config.validate()?;
    if config.log_path().exists() {
        return Err(MonitorError::LaunchFailure(format!(
            "{} already exists",
            config.log_path().display()
        ))
        .into());
    }
    // registered before spawning so an early signal is not lost
    let mut signals = Signals::new([SIGINT, SIGTERM]).map_err(|e| WrapperError::Spawn {
        command: program.to_string_lossy().into_owned(),
        source: e,
    })?;
    let signal_handle = signals.handle();

    let mut child = Command::new(program)
        .args(args)
        .spawn()
        .map_err(|e| WrapperError::Spawn {
            command: program.to_string_lossy().into_owned(),
            source: e,
        })?;
    let pid = child.id();

    let mut monitor = match launch_monitor_with(config, pid, pipeline) {
        Ok(m) => m,
        Err(e) => {
            let _ = child.kill();
            let _ = child.wait();
            signal_handle.close();
            return Err(e.into());
        }
    };

    let forwarder = thread::spawn(move || {
        for sig in signals.forever() {
            log::info!("forwarding signal {sig} to {pid}");
            unsafe {
                libc::kill(pid as libc::pid_t, sig);
            }
        }
    });

    let status = child.wait();
    signal_handle.close();
    let _ = forwarder.join();

    let summary = monitor.shutdown();
    let exceptions = monitor.check_for_exceptions();
    let exit_code = match status {
        Ok(s) => exit_code_of(s),
        Err(e) => {
            log::error!("cannot wait for workload: {e}");
            LAUNCH_FAILURE_EXIT
        }
    };
    Ok(WrapOutcome {
        exit_code,
        summary,
        log_path: monitor.log_path().to_path_buf(),
        exceptions,
    })
}
