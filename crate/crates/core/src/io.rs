//! Plain-text file formats.
//!
//! * Embedding files: a header line `# N C` followed by `N` lines of `C`
//!   whitespace-separated reals. Values are written in shortest round-trip
//!   form, so a write/read cycle is lossless.
//! * Truth files: one line per query, `q: i j k`, listing database indices.
//! * Label files: one non-negative integer per line.
//! * Training-report CSV.
//!
//! Blank lines are ignored everywhere except inside an embedding body.

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::toy::ExperimentReport;
use crate::vpr::GroundTruth;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn format_embeddings(m: &Matrix) -> String {
    let mut out = format!("# {} {}\n", m.rows(), m.cols());
    for row in m.iter_rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parses embedding text; `name` is used in error messages.
pub fn parse_embeddings(text: &str, name: &str) -> Result<Matrix> {
    let mut lines = text.lines().enumerate();
    let (n, c) = loop {
        let Some((idx, line)) = lines.next() else {
            return Err(parse_err(name, 1, "missing '# N C' header"));
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["#", n, c] => {
                let n: usize = n
                    .parse()
                    .map_err(|_| parse_err(name, idx + 1, format!("bad row count '{n}'")))?;
                let c: usize = c
                    .parse()
                    .map_err(|_| parse_err(name, idx + 1, format!("bad column count '{c}'")))?;
                break (n, c);
            }
            _ => return Err(parse_err(name, idx + 1, "expected header '# N C'")),
        }
    };

    let mut data = Vec::with_capacity(n * c);
    let mut rows = 0;
    let mut last_line = 1;
    for (idx, line) in lines {
        let lineno = idx + 1;
        last_line = lineno;
        if line.trim().is_empty() {
            continue;
        }
        if rows == n {
            return Err(parse_err(name, lineno, format!("more than {n} rows")));
        }
        let start = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(name, lineno, format!("'{tok}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(name, lineno, format!("non-finite value '{tok}'")));
            }
            data.push(v);
        }
        let got = data.len() - start;
        if got != c {
            return Err(parse_err(name, lineno, format!("expected {c} values, found {got}")));
        }
        rows += 1;
    }
    if rows != n {
        return Err(parse_err(name, last_line, format!("expected {n} rows, found {rows}")));
    }
    Matrix::from_vec(n, c, data)
}

pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    parse_embeddings(&read_text(path)?, &path.display().to_string())
}

pub fn write_embeddings(path: &Path, m: &Matrix) -> Result<()> {
    write_text(path, &format_embeddings(m))
}

/// Parses a truth file for `num_queries` queries against a database of
/// `db_size` rows. Queries without a line get no positives.
pub fn parse_truth(text: &str, name: &str, num_queries: usize, db_size: usize) -> Result<GroundTruth> {
    let mut positives: Vec<Option<Vec<usize>>> = vec![None; num_queries];
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (q, rest) = line
            .split_once(':')
            .ok_or_else(|| parse_err(name, lineno, "expected 'q: i j k'"))?;
        let q: usize = q
            .trim()
            .parse()
            .map_err(|_| parse_err(name, lineno, format!("bad query index '{}'", q.trim())))?;
        if q >= num_queries {
            return Err(parse_err(
                name,
                lineno,
                format!("query index {q} out of range (have {num_queries} queries)"),
            ));
        }
        if positives[q].is_some() {
            return Err(parse_err(name, lineno, format!("query {q} listed twice")));
        }
        let mut list = Vec::new();
        for tok in rest.split_whitespace() {
            let d: usize = tok
                .parse()
                .map_err(|_| parse_err(name, lineno, format!("bad database index '{tok}'")))?;
            if d >= db_size {
                return Err(parse_err(
                    name,
                    lineno,
                    format!("database index {d} out of range (database has {db_size} rows)"),
                ));
            }
            list.push(d);
        }
        positives[q] = Some(list);
    }
    Ok(GroundTruth::new(
        positives.into_iter().map(Option::unwrap_or_default).collect(),
    ))
}

pub fn read_truth(path: &Path, num_queries: usize, db_size: usize) -> Result<GroundTruth> {
    parse_truth(&read_text(path)?, &path.display().to_string(), num_queries, db_size)
}

pub fn format_truth(truth: &GroundTruth) -> String {
    let mut out = String::new();
    for q in 0..truth.num_queries() {
        write!(out, "{q}:").unwrap();
        for d in truth.positives(q) {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_labels(text: &str, name: &str) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(
            line.parse()
                .map_err(|_| parse_err(name, idx + 1, format!("bad label '{line}'")))?,
        );
    }
    Ok(labels)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    parse_labels(&read_text(path)?, &path.display().to_string())
}

pub const REPORT_HEADER: &str = "variant,seed,epoch,task_loss,kd_s,kd_c,ar1,ar1pct";

/// One row per (run, epoch); recall columns are filled on the final epoch
/// row only.
pub fn format_report_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for run in &report.runs {
        let last = run.epochs.len().saturating_sub(1);
        for (k, e) in run.epochs.iter().enumerate() {
            write!(
                out,
                "{},{},{},{},{},{},",
                run.variant, run.seed, e.epoch, e.task_loss, e.kd_s, e.kd_c
            )
            .unwrap();
            if k == last {
                write!(out, "{},{}", run.recall.ar_at_1, run.recall.ar_at_1pct).unwrap();
            } else {
                out.push(',');
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_report_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    write_text(path, &format_report_csv(report))
}

/// `k,recall` rows for `k = 1..=curve.len()`.
pub fn format_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("k,recall\n");
    for (k, r) in curve.iter().enumerate() {
        writeln!(out, "{},{}", k + 1, r).unwrap();
    }
    out
}

pub fn write_curve_csv(path: &Path, curve: &[f64]) -> Result<()> {
    write_text(path, &format_curve_csv(curve))
}
