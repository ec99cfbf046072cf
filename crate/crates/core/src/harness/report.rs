//! Text and JSON rendering of harness results.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use serde::Serialize;

use super::{HarnessConfig, MatrixReport, Model, Property, ScenarioResult};
use crate::error::{Error, Result};
use crate::runtime::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sink {
    Stdout,
    Path(PathBuf),
}

#[derive(Serialize)]
struct JsonCell<'a> {
    outer: Model,
    inner: Model,
    property: &'static str,
    expected: &'static str,
    observed: &'static str,
    scenario_ids: &'a [&'static str],
    duration_ms: u64,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    mode: Mode,
    config: &'a HarnessConfig,
    cells: Vec<JsonCell<'a>>,
    pass: bool,
}

#[derive(Serialize)]
struct JsonResult<'a> {
    id: &'a str,
    mode: Mode,
    observed: &'static str,
    detail: &'a str,
    expected: String,
    matches: bool,
    duration_ms: u64,
}

fn issue(b: bool) -> &'static str {
    if b {
        "issue"
    } else {
        "ok"
    }
}

fn prop_name(p: Property) -> &'static str {
    match p {
        Property::Safety => "safety",
        Property::Liveness => "liveness",
    }
}

pub fn report_json(report: &MatrixReport) -> String {
    let doc = JsonReport {
        mode: report.mode,
        config: &report.config,
        cells: report
            .cells
            .iter()
            .map(|c| JsonCell {
                outer: c.outer,
                inner: c.inner,
                property: prop_name(c.property),
                expected: issue(c.expected),
                observed: issue(c.observed),
                scenario_ids: &c.scenario_ids,
                duration_ms: c.duration.as_millis() as u64,
            })
            .collect(),
        pass: report.pass,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
    s.push('\n');
    s
}

pub fn result_json(r: &ScenarioResult) -> String {
    let doc = JsonResult {
        id: r.id,
        mode: r.mode,
        observed: r.observed.name(),
        detail: r.observed.detail(),
        expected: r.expected.to_string(),
        matches: r.matches(),
        duration_ms: r.duration.as_millis() as u64,
    };
    let mut s = serde_json::to_string(&doc).expect("result serializes");
    s.push('\n');
    s
}

const SHORT: [&str; 5] = ["atoms", "agents", "refs", "fut/prom", "channels"];

pub fn report_text(report: &MatrixReport) -> String {
    let mut out = String::new();
    let props: Vec<Property> = report.which.properties();
    for p in props {
        let _ = writeln!(out, "{} ({} mode), row = outer model, column = inner model", prop_name(p), report.mode);
        let _ = write!(out, "{:<10}", "");
        for h in SHORT {
            let _ = write!(out, "{h:>10}");
        }
        out.push('\n');
        for o in Model::ALL {
            let _ = write!(out, "{:<10}", SHORT[o.index()]);
            for i in Model::ALL {
                let mark = match report.cell(p, o, i) {
                    Some(c) => {
                        let base = if c.observed { "✗" } else { "✓" };
                        if c.observed == c.expected {
                            base.to_string()
                        } else {
                            format!("{base}!")
                        }
                    }
                    None => "?".to_string(),
                };
                let _ = write!(out, "{mark:>10}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    if report.mode == Mode::Guarded {
        out.push_str("left unmitigated in guarded mode:\n");
        out.push_str("  atoms safety row: deferring effects would be contrary to the purpose of atoms\n");
        out.push_str("  channels liveness column: liveness issues are inherent to this model\n\n");
    }
    out.push_str("scenarios:\n");
    for r in &report.results {
        let _ = writeln!(
            out,
            "  {:<28} {:<6} observed {:<40} expected {:<40} {:>6} ms  {}",
            r.id,
            if r.matches() { "ok" } else { "FAIL" },
            r.observed.verdict().to_string(),
            r.expected.to_string(),
            r.duration.as_millis(),
            r.observed.detail()
        );
    }
    let _ = writeln!(out, "\npass: {}", report.pass);
    out
}

fn write_sink(text: &str, sink: &Sink) -> Result<()> {
    match sink {
        Sink::Stdout => {
            let mut h = std::io::stdout().lock();
            h.write_all(text.as_bytes())
                .and_then(|_| h.flush())
                .map_err(|e| Error::SinkUnwritable(e.to_string()))
        }
        Sink::Path(p) => {
            std::fs::write(p, text).map_err(|e| Error::SinkUnwritable(format!("{}: {e}", p.display())))
        }
    }
}

pub fn report_emit(report: &MatrixReport, format: Format, sink: &Sink) -> Result<()> {
    let text = match format {
        Format::Text => report_text(report),
        Format::Json => report_json(report),
    };
    write_sink(&text, sink)
}

pub fn result_emit(result: &ScenarioResult, format: Format, sink: &Sink) -> Result<()> {
    let text = match format {
        Format::Json => result_json(result),
        Format::Text => format!(
            "{} [{}] observed {} expected {} ({} ms)\n  {}\n",
            result.id,
            result.mode,
            result.observed.verdict(),
            result.expected,
            result.duration.as_millis(),
            result.observed.detail()
        ),
    };
    write_sink(&text, sink)
}
