//! Matrix, label and index files.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use permcca_core::Mat;

use crate::error::CliError;

fn open(path: &Path) -> Result<String, CliError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(text)
}

/// Parses a finite decimal number; `NaN` and infinities are rejected.
fn parse_number(token: &str) -> Option<f64> {
    let v: f64 = token.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

/// Reads a rectangular numeric CSV. A first row containing any non-numeric
/// field is treated as a header.
pub fn read_matrix_csv(path: &Path) -> Result<Mat, CliError> {
    parse_matrix_csv(&open(path)?, &path.display().to_string())
}

pub fn parse_matrix_csv(text: &str, name: &str) -> Result<Mat, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Parse {
            path: name.to_string(),
            line: idx + 1,
            column: 0,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(idx + 1, |p| p.line() as usize);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<Option<f64>> = record.iter().map(parse_number).collect();
        if rows.is_empty() && width.is_none() && parsed.iter().any(Option::is_none) {
            let looks_like_header = record.iter().all(|f| f.parse::<f64>().is_err());
            if looks_like_header {
                width = Some(record.len());
                continue;
            }
        }
        if let Some(w) = width {
            if record.len() != w {
                return Err(CliError::RaggedRows {
                    path: name.to_string(),
                    line,
                    expected: w,
                    found: record.len(),
                });
            }
        }
        width = Some(record.len());
        let mut row = Vec::with_capacity(record.len());
        for (col, (value, field)) in parsed.into_iter().zip(record.iter()).enumerate() {
            match value {
                Some(v) => row.push(v),
                None => {
                    return Err(CliError::Parse {
                        path: name.to_string(),
                        line,
                        column: col + 1,
                        message: format!("`{field}` is not a finite number"),
                    })
                }
            }
        }
        rows.push(row);
    }
    let cols = width.unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(CliError::Validation(format!("{name}: no numeric data")));
    }
    Ok(Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Writes a matrix with the shortest decimal form that reads back exactly
/// (at most 17 significant digits).
pub fn format_matrix_csv(m: &Mat) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, m: &Mat) -> Result<(), CliError> {
    write_text(path, &format_matrix_csv(m))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// One integer block label per line.
pub fn read_labels(path: &Path) -> Result<Vec<i64>, CliError> {
    read_lines(path, |t| t.parse::<i64>().ok())
}

/// One zero-based index per line.
pub fn read_indices(path: &Path) -> Result<Vec<usize>, CliError> {
    read_lines(path, |t| t.parse::<usize>().ok())
}

fn read_lines<T>(path: &Path, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
    let text = open(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(parse(t).ok_or_else(|| CliError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            column: 1,
            message: format!("`{t}` is not a valid integer"),
        })?);
    }
    Ok(out)
}
