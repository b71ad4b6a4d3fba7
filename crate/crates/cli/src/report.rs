//! Comparison tables over search results and training logs.

use std::path::Path;

use dmlm_core::pipeline::{read_log, SearchReport};
use dmlm_core::Error;

/// One configuration and its metrics; absent cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub config: String,
    pub lambda_speech: Option<f64>,
    pub lambda_text: Option<f64>,
    pub lambda_image: Option<f64>,
    pub steps: Option<usize>,
    pub final_loss: Option<f64>,
    pub dev_metric: Option<f64>,
}

pub const COLUMNS: [&str; 7] = [
    "config",
    "lambda_speech",
    "lambda_text",
    "lambda_image",
    "steps",
    "final_loss",
    "dev_metric",
];

fn file_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads one input: a search report (JSON object) or a training log (JSONL).
pub fn rows_from_file(path: &Path) -> Result<Vec<Row>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let is_log = path.extension().is_some_and(|e| e == "jsonl");
    if !is_log {
        let report: SearchReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        return Ok(report
            .trials
            .iter()
            .chain(&report.baselines)
            .map(|t| Row {
                config: t.label.clone(),
                lambda_speech: Some(t.lambda_speech),
                lambda_text: Some(t.lambda_text),
                lambda_image: Some(t.lambda_image),
                steps: Some(t.steps),
                final_loss: None,
                dev_metric: t.dev_wer,
            })
            .collect());
    }
    let log = read_log(path)?;
    let dev_metric = log.iter().filter_map(|r| r.dev_metric).fold(None, |best: Option<f64>, m| {
        Some(best.map_or(m, |b| b.min(m)))
    });
    Ok(vec![Row {
        config: file_label(path),
        lambda_speech: None,
        lambda_text: None,
        lambda_image: None,
        steps: log.last().map(|r| r.step + 1),
        final_loss: log.last().map(|r| r.loss_total),
        dev_metric,
    }])
}

/// Sorts by ascending dev metric, rows without one last, stable otherwise.
pub fn sort_rows(rows: &mut [Row]) {
    rows.sort_by(|a, b| {
        let key = |r: &Row| r.dev_metric.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b))
    });
}

fn cells(row: &Row) -> [String; 7] {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    [
        row.config.clone(),
        f(row.lambda_speech),
        f(row.lambda_text),
        f(row.lambda_image),
        row.steps.map(|s| s.to_string()).unwrap_or_default(),
        f(row.final_loss),
        f(row.dev_metric),
    ]
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for row in rows {
        let line: Vec<String> = cells(row).iter().map(|c| csv_field(c)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Parses CSV written by [`to_csv`].
pub fn from_csv(text: &str) -> Result<Vec<Row>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty CSV")?;
    if header != COLUMNS.join(",") {
        return Err(format!("unexpected header {header:?}"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f = split_csv_line(line);
            if f.len() != COLUMNS.len() {
                return Err(format!("line {}: expected {} fields", i + 2, COLUMNS.len()));
            }
            let num = |s: &str| -> Result<Option<f64>, String> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e| format!("line {}: {e}", i + 2))
                }
            };
            Ok(Row {
                config: f[0].clone(),
                lambda_speech: num(&f[1])?,
                lambda_text: num(&f[2])?,
                lambda_image: num(&f[3])?,
                steps: if f[4].is_empty() {
                    None
                } else {
                    Some(f[4].parse().map_err(|e| format!("line {}: {e}", i + 2))?)
                },
                final_loss: num(&f[5])?,
                dev_metric: num(&f[6])?,
            })
        })
        .collect()
}

/// Fixed-width text table with four decimals.
pub fn to_text(rows: &[Row]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.config.clone(),
                fmt(r.lambda_speech),
                fmt(r.lambda_text),
                fmt(r.lambda_image),
                r.steps.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                fmt(r.final_loss),
                fmt(r.dev_metric),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let render = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = render(COLUMNS.to_vec());
    out.push('\n');
    for r in &body {
        out.push_str(&render(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
