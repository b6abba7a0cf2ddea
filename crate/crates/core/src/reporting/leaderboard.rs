//! Energy leaderboard: entries ranked per environment by performance per kWh.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{html_escape, ReportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub algorithm: String,
    pub environment: String,
    /// Mean performance over the entry's runs, e.g. average return.
    pub performance_metric: f64,
    /// Total kWh over the entry's runs.
    pub kwh: f64,
    #[serde(default = "one")]
    pub runs: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEntry {
    /// `None` for entries without positive energy, which cannot be ranked.
    pub rank: Option<usize>,
    pub ratio: Option<f64>,
    pub entry: LeaderboardEntry,
}

/// Per environment, entries in rank order.
pub fn rank_entries(entries: &[LeaderboardEntry]) -> BTreeMap<String, Vec<RankedEntry>> {
    let mut by_env: BTreeMap<String, Vec<RankedEntry>> = BTreeMap::new();
    for e in entries {
        let ratio = (e.kwh > 0.0).then(|| e.performance_metric / e.kwh);
        by_env
            .entry(e.environment.clone())
            .or_default()
            .push(RankedEntry {
                rank: None,
                ratio,
                entry: e.clone(),
            });
    }
    for list in by_env.values_mut() {
        list.sort_by(|a, b| match (a.ratio, b.ratio) {
            (Some(x), Some(y)) => y
                .total_cmp(&x)
                .then_with(|| a.entry.algorithm.cmp(&b.entry.algorithm)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.entry.algorithm.cmp(&b.entry.algorithm),
        });
        for (i, r) in list.iter_mut().enumerate() {
            if r.ratio.is_some() {
                r.rank = Some(i + 1);
            }
        }
    }
    by_env
}

pub fn load_entries(path: &Path) -> Result<Vec<LeaderboardEntry>, ReportError> {
    let text = fs::read_to_string(path).map_err(|e| ReportError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| ReportError::Invalid(format!("{}: {e}", path.display())))
}

pub fn render_leaderboard(entries: &[LeaderboardEntry]) -> String {
    let mut body = String::new();
    for (env, list) in rank_entries(entries) {
        let _ = write!(
            body,
            "<h2>{}</h2>\n<table><tr><th>Rank</th><th class=\"l\">Algorithm</th><th>Performance</th><th>kWh</th><th>Performance per kWh</th><th>Runs</th></tr>",
            html_escape(&env)
        );
        for r in list {
            let _ = write!(
                body,
                "<tr><td>{}</td><td class=\"l\">{}</td><td>{:.3}</td><td>{:.3}</td><td>{}</td><td>{}</td></tr>",
                r.rank.map_or("-".into(), |n| n.to_string()),
                html_escape(&r.entry.algorithm),
                r.entry.performance_metric,
                r.entry.kwh,
                r.ratio.map_or("n/a".into(), |x| format!("{x:.3}")),
                r.entry.runs
            );
        }
        body.push_str("</table>\n");
    }
    format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head><meta charset=\"utf-8\"><title>Energy leaderboard</title><style>body{{font-family:sans-serif;max-width:60em;margin:2em auto}}table{{border-collapse:collapse}}td,th{{border:1px solid #ccc;padding:.3em .6em;text-align:right}}td.l,th.l{{text-align:left}}</style></head>\n<body>\n<h1>Energy leaderboard</h1>\n{body}<footer>Ranked by mean performance divided by total kWh. Entries without measured energy are listed unranked.</footer>\n</body>\n</html>\n"
    )
}

/// Write `index.html` and `leaderboard.json` into `out_dir`.
pub fn generate_leaderboard(
    entries: &[LeaderboardEntry],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    if entries.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    for e in entries {
        if e.runs < 1 || !e.kwh.is_finite() || !e.performance_metric.is_finite() {
            return Err(ReportError::Invalid(format!(
                "bad leaderboard entry {}/{}",
                e.environment, e.algorithm
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| ReportError::io(out_dir, e))?;
    let html = out_dir.join("index.html");
    fs::write(&html, render_leaderboard(entries)).map_err(|e| ReportError::io(&html, e))?;
    let json = out_dir.join("leaderboard.json");
    let ranked = serde_json::to_string_pretty(&rank_entries(entries))
        .map_err(|e| ReportError::Invalid(e.to_string()))?;
    fs::write(&json, ranked + "\n").map_err(|e| ReportError::io(&json, e))?;
    Ok(vec![html, json])
}
