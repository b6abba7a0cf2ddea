//! Per-process energy and carbon accounting for compute workloads.
//!
//! A run is tracked by a sampler that polls every compatible [`sensors::Sensor`]
//! on a fixed cadence, credits the tracked process tree with its share of each
//! resource's energy ([`attribution`]), converts the result to emissions using
//! grid carbon intensity ([`carbon`], [`realtime`]) and writes everything to an
//! append-only log ([`log`]). The [`reporting`] module turns finished logs into
//! impact statements, static HTML appendices and energy leaderboards.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod carbon;
pub mod estimation;
pub mod log;
pub mod monitor;
pub mod realtime;
pub mod reporting;
pub mod sensors;
pub mod wrapper;

/// Version of this toolkit, written into every log header.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Version of the on-disk log schema.
pub const SCHEMA_VERSION: &str = "1.0.0";

/// Seconds since the Unix epoch as a float.
pub fn now_epoch() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub(crate) const JOULES_PER_KWH: f64 = 3.6e6;
