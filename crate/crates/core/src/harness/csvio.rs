//! Small CSV reader/writer for the harness schemas. No quoting — none of
//! the emitted fields ever contain commas. Malformed rows are rejected
//! with their line number.

use crate::error::{Error, Result};
use crate::metrics::RDPoint;
use std::path::Path;

/// Parse a CSV with a header line; returns (header, rows of fields).
pub(crate) fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) => h.split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(Error::data(format!("{}: empty file", path.display()))),
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows.push((
            i + 1,
            line.split(',').map(|s| s.trim().to_string()).collect(),
        ));
    }
    Ok((header, rows))
}

fn column_index(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| {
            Error::data(format!(
                "{}: missing column {name:?} (header: {})",
                path.display(),
                header.join(",")
            ))
        })
}

/// Extract one numeric column by header name.
pub fn parse_csv_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let (header, rows) = read_rows(path)?;
    let idx = column_index(&header, column, path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line_no, fields) in rows {
        if fields.len() != header.len() {
            return Err(Error::data(format!(
                "{}:{line_no}: expected {} fields, got {}",
                path.display(),
                header.len(),
                fields.len()
            )));
        }
        let v: f64 = fields[idx].parse().map_err(|_| {
            Error::data(format!(
                "{}:{line_no}: bad number {:?} in column {column}",
                path.display(),
                fields[idx]
            ))
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Per-curve schema: `label,bpp,quality`.
pub fn parse_curve_csv(path: &Path) -> Result<Vec<RDPoint>> {
    let (header, rows) = read_rows(path)?;
    let li = column_index(&header, "label", path)?;
    let bi = column_index(&header, "bpp", path)?;
    let qi = column_index(&header, "quality", path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line_no, fields) in rows {
        if fields.len() != header.len() {
            return Err(Error::data(format!(
                "{}:{line_no}: expected {} fields, got {}",
                path.display(),
                header.len(),
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::data(format!(
                    "{}:{line_no}: bad {what} {s:?}",
                    path.display()
                ))
            })
        };
        out.push(RDPoint {
            label: fields[li].clone(),
            bpp: parse(&fields[bi], "bpp")?,
            quality: parse(&fields[qi], "quality")?,
        });
    }
    Ok(out)
}

pub fn write_curve_csv(path: &Path, points: &[RDPoint]) -> Result<()> {
    let mut text = String::from("label,bpp,quality\n");
    for p in points {
        text.push_str(&format!("{},{:.8},{:.6}\n", p.label, p.bpp, p.quality));
    }
    std::fs::write(path, text)?;
    Ok(())
}
