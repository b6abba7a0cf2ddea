//! Impact statements, experiment aggregation, HTML appendices, leaderboards
//! and regional intensity tables.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carbon::{social_cost, CarbonError, RegionDb, SccTable, SocialCost};
use crate::log::LogError;

pub mod appendix;
pub mod leaderboard;
pub mod run;
mod svg;

pub use appendix::{generate_appendix, AppendixOptions, AppendixOutput};
pub use leaderboard::{generate_leaderboard, rank_entries, LeaderboardEntry, RankedEntry};
pub use run::RunData;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no input")]
    EmptyInput,
    #[error("failed to parse logs: {}", .0.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect::<Vec<_>>().join("; "))]
    ParseFailure(Vec<(PathBuf, LogError)>),
    #[error("run {0} has no emissions estimate")]
    MissingEmissions(String),
    #[error(transparent)]
    Carbon(#[from] CarbonError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl ReportError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ReportError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactSummary {
    pub run_id: String,
    pub kwh: f64,
    pub kg_co2eq: Option<f64>,
    pub scc: Option<SocialCost>,
    pub country: Option<String>,
    pub region_id: Option<String>,
    pub duration_s: f64,
}

/// Round to `decimals` places, ties to even.
pub fn round_half_even(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = value * scale;
    // snap values that are a tie up to representation error
    let nearest_half = (scaled * 2.0).round() / 2.0;
    let scaled = if (scaled - nearest_half).abs() < 1e-9 * scaled.abs().max(1.0) {
        nearest_half
    } else {
        scaled
    };
    let r = scaled.round_ties_even() / scale;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Totals across runs, as reported in a statement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatementTotals {
    pub kg_co2eq: f64,
    pub kwh: f64,
    pub country: String,
    pub scc: SocialCost,
}

pub fn statement_totals(
    summaries: &[ImpactSummary],
    country: &str,
    scc: &SccTable,
) -> Result<StatementTotals, ReportError> {
    if summaries.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let entry = scc.get(country)?;
    let mut kg = 0.0;
    let mut kwh = 0.0;
    for s in summaries {
        kg += s
            .kg_co2eq
            .ok_or_else(|| ReportError::MissingEmissions(s.run_id.clone()))?;
        kwh += s.kwh;
    }
    let kg = round_half_even(kg, 3);
    Ok(StatementTotals {
        kg_co2eq: kg,
        kwh: round_half_even(kwh, 3),
        country: entry.country.clone(),
        scc: social_cost(kg, entry),
    })
}

pub fn format_statement(t: &StatementTotals) -> String {
    format!(
        "This work contributed {:.3} kg of $CO_{{2eq}}$ to the atmosphere and used {:.3} kWh of electricity, having a {}-specific social cost of carbon of {}.",
        t.kg_co2eq, t.kwh, t.country, t.scc
    )
}

pub fn generate_impact_statement(
    summaries: &[ImpactSummary],
    country: &str,
    scc: &SccTable,
) -> Result<String, ReportError> {
    statement_totals(summaries, country, scc).map(|t| format_statement(&t))
}

/// Mean and standard error (sample standard deviation over √n).
pub fn aggregate_experiments(values: &[f64]) -> Result<(f64, f64), ReportError> {
    let n = values.len();
    if n == 0 {
        return Err(ReportError::EmptyInput);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

/// kWh saved by `runs` runs of the cheaper configuration `a` instead of `b`.
pub fn compute_savings(runs: u64, kwh_per_run_a: f64, kwh_per_run_b: f64) -> f64 {
    runs as f64 * (kwh_per_run_b - kwh_per_run_a)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionRow {
    pub id: String,
    pub display_name: String,
    pub g_per_kwh: f64,
    pub source: String,
    pub year: i32,
    pub cloud: bool,
}

/// Grid and cloud regions sorted by ascending intensity.
pub fn region_emissions_report(db: &RegionDb, cloud_only: bool) -> Vec<RegionRow> {
    let ids = db
        .regions
        .iter()
        .map(|r| r.id.as_str())
        .chain(db.cloud_regions.iter().map(|c| c.id.as_str()));
    let mut rows: Vec<RegionRow> = ids
        .filter_map(|id| db.lookup(id).ok())
        .filter(|s| !cloud_only || s.cloud)
        .map(|s| RegionRow {
            id: s.id,
            display_name: s.display_name,
            g_per_kwh: s.g_per_kwh,
            source: s.source,
            year: s.year,
            cloud: s.cloud,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.g_per_kwh
            .total_cmp(&b.g_per_kwh)
            .then_with(|| a.id.cmp(&b.id))
    });
    rows
}

pub(crate) fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}
