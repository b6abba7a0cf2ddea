//! A finished (or crashed) run loaded back from its log.

use std::path::{Path, PathBuf};

use crate::attribution::IntervalEnergy;
use crate::log::{
    read_records, run_id_for, ExceptionRecord, FinalRecord, IntensityLogRecord, LogError,
    LogHeader, LogRecord, SampleRecord, LOG_FILE_NAME,
};
use crate::JOULES_PER_KWH;

use super::{round_half_even, ImpactSummary};

#[derive(Debug, Clone)]
pub struct RunData {
    pub log_path: PathBuf,
    pub header: LogHeader,
    pub samples: Vec<SampleRecord>,
    pub intensities: Vec<IntensityLogRecord>,
    pub exceptions: Vec<ExceptionRecord>,
    pub final_record: Option<FinalRecord>,
    pub warnings: usize,
}

/// One point of the power-over-time plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerPoint {
    pub t: f64,
    pub system_w: f64,
    pub credited_w: f64,
}

impl RunData {
    /// Load from a log directory or directly from a log file.
    pub fn load(path: &Path) -> Result<Self, LogError> {
        let log_path = if path.is_dir() {
            path.join(LOG_FILE_NAME)
        } else {
            path.to_path_buf()
        };
        let contents = read_records(&log_path)?;
        let mut run = RunData {
            log_path,
            header: contents.header().clone(),
            samples: Vec::new(),
            intensities: Vec::new(),
            exceptions: Vec::new(),
            final_record: None,
            warnings: contents.warnings,
        };
        for record in contents.records {
            match record {
                LogRecord::Header(_) => {}
                LogRecord::Sample(s) => run.samples.push(s),
                LogRecord::Intensity(i) => run.intensities.push(i),
                LogRecord::Exception(e) => run.exceptions.push(e),
                LogRecord::Final(f) => run.final_record = Some(f),
            }
        }
        Ok(run)
    }

    pub fn run_id(&self) -> String {
        match &self.final_record {
            Some(f) => f.summary.run_id.clone(),
            None => run_id_for(&self.header),
        }
    }

    pub fn experiment(&self) -> &str {
        self.header.experiment.as_deref().unwrap_or("default")
    }

    pub fn end_time(&self) -> f64 {
        self.final_record
            .as_ref()
            .map(|f| f.end_time)
            .or_else(|| self.samples.last().map(|s| s.t))
            .unwrap_or(self.header.start_time)
    }

    pub fn intervals(&self) -> impl Iterator<Item = &IntervalEnergy> {
        self.samples.iter().filter_map(|s| s.credited.as_ref())
    }

    /// The logged summary, or an energy-only one rebuilt from the samples of
    /// a run that never finalized.
    pub fn summary(&self) -> ImpactSummary {
        if let Some(f) = &self.final_record {
            return f.summary.clone();
        }
        let credited_j: f64 = self.intervals().map(|i| i.credited_j()).sum();
        ImpactSummary {
            run_id: self.run_id(),
            kwh: round_half_even(self.header.pue * credited_j / JOULES_PER_KWH, 3),
            kg_co2eq: None,
            scc: None,
            country: None,
            region_id: self.header.region_hint.clone(),
            duration_s: self.end_time() - self.header.start_time,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.final_record.is_some()
    }

    pub fn power_series(&self) -> Vec<PowerPoint> {
        self.intervals()
            .filter(|i| i.duration_s() > 0.0)
            .map(|i| PowerPoint {
                t: i.t_end,
                system_w: i.system_j() / i.duration_s(),
                credited_w: i.credited_j() / i.duration_s(),
            })
            .collect()
    }
}
