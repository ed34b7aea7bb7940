//! Minimal CSV reading/writing.
//!
//! All files carry a header row; fields never contain commas or quotes.
//! Floats are serialized with 17 significant digits so every f64
//! round-trips bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{LabError, Result};

/// 17 significant digits: enough to reproduce any f64 exactly on parse.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_f64(path: &Path, field: &str, s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| {
        LabError::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("field `{field}`: `{s}` is not a float"),
        }
    })
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Appends rows, creating the file (with header) if needed. An existing
/// file must carry the same header.
pub fn append_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let exists = path.exists();
    if exists {
        let (have, _) = read_csv(path)?;
        if have != header {
            return Err(LabError::invalid(format!(
                "{}: existing header {:?} does not match {:?}",
                path.display(),
                have,
                header
            )));
        }
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| LabError::io(path, e))?;
    let mut text = String::new();
    if !exists {
        text.push_str(&header.join(","));
        text.push('\n');
    }
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| LabError::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h.split(',').map(str::to_string).collect(),
        None => {
            return Err(LabError::Format {
                path: path.to_path_buf(),
                offset: 0,
                msg: "empty CSV".into(),
            })
        }
    };
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for line in text.lines().skip(1) {
        offset += 1;
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(LabError::Format {
                path: path.to_path_buf(),
                offset,
                msg: format!("row has {} fields, header has {}", row.len(), header.len()),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Index of a named column.
pub fn column(path: &Path, header: &[String], name: &str) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| {
        LabError::invalid(format!("{}: missing column `{name}`", path.display()))
    })
}
