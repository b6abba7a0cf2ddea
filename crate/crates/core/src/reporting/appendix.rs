//! Static HTML appendix built from run logs.
//!
//! Layout: `index.html` with a table per experiment, `runs/<run_id>/index.html`
//! per run, and `data/<run_id>.summary` holding the summary as JSON. Output is
//! a pure function of the logs and the options.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::RunData;
use super::svg::{line_chart, Series};
use super::{aggregate_experiments, html_escape, ImpactSummary, ReportError};

#[derive(Debug, Clone, Default)]
pub struct AppendixOptions {
    /// Shown in the page footer; `None` leaves it out.
    pub generated_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppendixOutput {
    pub run_ids: Vec<String>,
    pub files: Vec<PathBuf>,
}

const STYLE: &str = "body{font-family:sans-serif;max-width:60em;margin:2em auto;color:#222}\
table{border-collapse:collapse;margin:1em 0}td,th{border:1px solid #ccc;padding:.3em .6em;text-align:right}\
th{background:#f4f4f4}td.l,th.l{text-align:left}footer{margin-top:3em;font-size:.8em;color:#666}";

fn page(title: &str, body: &str, opts: &AppendixOptions) -> String {
    let mut footer = String::from("Energy is credited per polling interval from each resource's share of system usage, scaled by PUE.");
    if let Some(ts) = &opts.generated_at {
        let _ = write!(footer, " Generated {}.", html_escape(ts));
    }
    format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head><meta charset=\"utf-8\"><title>{}</title><style>{STYLE}</style></head>\n<body>\n<h1>{}</h1>\n{body}\n<footer>{footer}</footer>\n</body>\n</html>\n",
        html_escape(title),
        html_escape(title)
    )
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.decimals$}"))
}

fn write_file(path: &Path, contents: &str, files: &mut Vec<PathBuf>) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ReportError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| ReportError::io(path, e))?;
    files.push(path.to_path_buf());
    Ok(())
}

fn run_page(run: &RunData, summary: &ImpactSummary, opts: &AppendixOptions) -> String {
    let mut body = String::new();
    let h = &run.header;
    body.push_str("<p><a href=\"../../index.html\">All runs</a></p>\n<h2>Totals</h2>\n<table>");
    let rows = [
        ("Energy (kWh, incl. PUE)", format!("{:.3}", summary.kwh)),
        (
            "Emissions (kg CO<sub>2</sub>eq)",
            fmt_opt(summary.kg_co2eq, 3),
        ),
        (
            "Social cost of carbon",
            summary
                .scc
                .map_or("n/a".into(), |s| html_escape(&s.to_string())),
        ),
        (
            "Region",
            html_escape(summary.region_id.as_deref().unwrap_or("unknown")),
        ),
        ("Duration (s)", format!("{:.1}", summary.duration_s)),
        ("PUE", format!("{}", h.pue)),
        ("Samples", run.samples.len().to_string()),
        ("Sensor exceptions", run.exceptions.len().to_string()),
        (
            "Finalized",
            if run.is_complete() { "yes" } else { "no" }.to_string(),
        ),
    ];
    for (k, v) in rows {
        let _ = write!(body, "<tr><th class=\"l\">{k}</th><td>{v}</td></tr>");
    }
    body.push_str("</table>\n");

    let t0 = h.start_time;
    let power = run.power_series();
    body.push_str("<h2>Power over time</h2>\n");
    body.push_str(&line_chart(
        "Power draw",
        "W",
        &[
            Series {
                label: "system",
                color: "#888",
                points: power.iter().map(|p| (p.t - t0, p.system_w)).collect(),
                step: false,
            },
            Series {
                label: "credited to tracked processes",
                color: "#c33",
                points: power.iter().map(|p| (p.t - t0, p.credited_w)).collect(),
                step: false,
            },
        ],
    ));
    body.push('\n');
    if !run.intensities.is_empty() {
        body.push_str("<h2>Carbon intensity</h2>\n");
        body.push_str(&line_chart(
            "Carbon intensity",
            "gCO2eq/kWh",
            &[Series {
                label: "grid intensity",
                color: "#27a",
                points: run
                    .intensities
                    .iter()
                    .map(|i| (i.t - t0, i.g_per_kwh))
                    .collect(),
                step: true,
            }],
        ));
        body.push('\n');
    }

    body.push_str("<h2>Hardware</h2>\n<table><tr><th class=\"l\">Component</th><th class=\"l\">Model</th></tr>");
    for c in &h.hardware {
        let _ = write!(
            body,
            "<tr><td class=\"l\">{}</td><td class=\"l\">{}</td></tr>",
            html_escape(&c.kind),
            html_escape(&c.model)
        );
    }
    body.push_str("</table>\n<h2>Environment</h2>\n<table><tr><th class=\"l\">Name</th><th class=\"l\">Version</th></tr>");
    for p in &h.environment {
        let _ = write!(
            body,
            "<tr><td class=\"l\">{}</td><td class=\"l\">{}</td></tr>",
            html_escape(&p.name),
            html_escape(&p.version)
        );
    }
    let _ = write!(
        body,
        "</table>\n<p>Log schema {}, tool {}.</p>",
        html_escape(&h.schema_version),
        html_escape(&h.tool_version)
    );
    if !run.exceptions.is_empty() {
        body.push_str("\n<h2>Exceptions</h2>\n<table><tr><th>t (s)</th><th class=\"l\">Source</th><th class=\"l\">Message</th></tr>");
        for e in &run.exceptions {
            let _ = write!(
                body,
                "<tr><td>{:.1}</td><td class=\"l\">{}</td><td class=\"l\">{}</td></tr>",
                e.t - t0,
                html_escape(&e.source),
                html_escape(&e.message)
            );
        }
        body.push_str("</table>");
    }
    page(&format!("Run {}", summary.run_id), &body, opts)
}

fn mean_se_cell(values: &[f64]) -> String {
    match aggregate_experiments(values) {
        Ok((m, se)) => format!("{m:.3} ± {se:.3}"),
        Err(_) => "n/a".into(),
    }
}

fn index_page(runs: &[(RunData, ImpactSummary)], opts: &AppendixOptions) -> String {
    let mut groups: BTreeMap<&str, Vec<&(RunData, ImpactSummary)>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.0.experiment()).or_default().push(r);
    }
    let mut body = String::from("<h2>Experiments (mean ± standard error)</h2>\n<table><tr><th class=\"l\">Experiment</th><th>Runs</th><th>kWh</th><th>kg CO<sub>2</sub>eq</th><th>Duration (s)</th></tr>");
    for (name, members) in &groups {
        let kwh: Vec<f64> = members.iter().map(|r| r.1.kwh).collect();
        let kg: Vec<f64> = members.iter().filter_map(|r| r.1.kg_co2eq).collect();
        let dur: Vec<f64> = members.iter().map(|r| r.1.duration_s).collect();
        let kg_cell = if kg.len() == members.len() {
            mean_se_cell(&kg)
        } else {
            "n/a".into()
        };
        let _ = write!(
            body,
            "<tr><td class=\"l\">{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            html_escape(name),
            members.len(),
            mean_se_cell(&kwh),
            kg_cell,
            mean_se_cell(&dur)
        );
    }
    body.push_str("</table>\n<h2>Runs</h2>\n<table><tr><th class=\"l\">Run</th><th class=\"l\">Experiment</th><th>kWh</th><th>kg CO<sub>2</sub>eq</th><th class=\"l\">Region</th><th>Duration (s)</th></tr>");
    for (run, s) in runs {
        let _ = write!(
            body,
            "<tr><td class=\"l\"><a href=\"runs/{id}/index.html\">{id}</a></td><td class=\"l\">{}</td><td>{:.3}</td><td>{}</td><td class=\"l\">{}</td><td>{:.1}</td></tr>",
            html_escape(run.experiment()),
            s.kwh,
            fmt_opt(s.kg_co2eq, 3),
            html_escape(s.region_id.as_deref().unwrap_or("unknown")),
            s.duration_s,
            id = html_escape(&s.run_id),
        );
    }
    body.push_str("</table>");
    page("Energy and carbon appendix", &body, opts)
}

pub fn generate_appendix(
    log_dirs: &[PathBuf],
    out_dir: &Path,
    opts: &AppendixOptions,
) -> Result<AppendixOutput, ReportError> {
    if log_dirs.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for dir in log_dirs {
        match RunData::load(dir) {
            Ok(r) => runs.push(r),
            Err(e) => failures.push((dir.clone(), e)),
        }
    }
    if !failures.is_empty() {
        return Err(ReportError::ParseFailure(failures));
    }
    runs.sort_by(|a, b| {
        a.experiment()
            .cmp(b.experiment())
            .then(a.header.start_time.total_cmp(&b.header.start_time))
            .then_with(|| a.run_id().cmp(&b.run_id()))
    });

    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let runs: Vec<(RunData, ImpactSummary)> = runs
        .into_iter()
        .map(|r| {
            let mut s = r.summary();
            let n = seen.entry(s.run_id.clone()).or_insert(0);
            *n += 1;
            if *n > 1 {
                s.run_id = format!("{}-{}", s.run_id, n);
            }
            (r, s)
        })
        .collect();

    let mut files = Vec::new();
    for (run, summary) in &runs {
        let json = serde_json::to_string_pretty(summary)
            .map_err(|e| ReportError::Invalid(e.to_string()))?;
        write_file(
            &out_dir
                .join("data")
                .join(format!("{}.summary", summary.run_id)),
            &(json + "\n"),
            &mut files,
        )?;
        write_file(
            &out_dir
                .join("runs")
                .join(&summary.run_id)
                .join("index.html"),
            &run_page(run, summary, opts),
            &mut files,
        )?;
    }
    write_file(
        &out_dir.join("index.html"),
        &index_page(&runs, opts),
        &mut files,
    )?;
    Ok(AppendixOutput {
        run_ids: runs.into_iter().map(|(_, s)| s.run_id).collect(),
        files,
    })
}
