//! Small helpers for the crate's text formats.
//!
//! Every text output starts with an optional `#`-prefixed metadata line;
//! readers skip any number of comment lines before the column header.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Read a comma-separated table: returns the header fields and the data rows.
/// Comment lines (`#`) and blank lines are skipped anywhere in the file.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let file = File::open(path).map_err(|e| format_err(path, e.to_string()))?;
    let mut lines = BufReader::new(file).lines();
    let header = loop {
        match lines.next() {
            Some(line) => {
                let line = line?;
                let trimmed = line.trim();
                if trimmed.is_empty() || trimmed.starts_with('#') {
                    continue;
                }
                break split_csv(trimmed);
            }
            None => return Err(format_err(path, "missing header row")),
        }
    };
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = split_csv(trimmed);
        if fields.len() != header.len() {
            return Err(format_err(
                path,
                format!(
                    "row has {} fields, header has {}",
                    fields.len(),
                    header.len()
                ),
            ));
        }
        rows.push(fields);
    }
    Ok((header, rows))
}

fn split_csv(line: &str) -> Vec<String> {
    line.split(',').map(|f| f.trim().to_string()).collect()
}

pub fn parse_f64(path: &Path, field: &str, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| format_err(path, format!("cannot parse {what} from {field:?}")))
}

pub fn parse_u64(path: &Path, field: &str, what: &str) -> Result<u64> {
    field
        .parse::<u64>()
        .map_err(|_| format_err(path, format!("cannot parse {what} from {field:?}")))
}

pub fn parse_usize(path: &Path, field: &str, what: &str) -> Result<usize> {
    field
        .parse::<usize>()
        .map_err(|_| format_err(path, format!("cannot parse {what} from {field:?}")))
}

/// Write a text table with an optional metadata comment line.
pub fn write_table(
    path: &Path,
    meta: Option<&str>,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    if let Some(meta) = meta {
        writeln!(w, "# {meta}")?;
    }
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Compact float formatting that round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    let mut buffer = ryu_like(v);
    if buffer == "-0" {
        buffer = "0".to_string();
    }
    buffer
}

fn ryu_like(v: f64) -> String {
    // `{:?}` on f64 produces the shortest representation that round-trips.
    format!("{v:?}")
}
