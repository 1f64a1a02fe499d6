//! Deterministic file emission: fixed-precision floats, stable column
//! order, and byte-identical output across repeated runs.

use std::fs;
use std::path::{Path, PathBuf};

use switchdiff::{Error, Result};

/// Attach the offending path to an I/O error.
fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

/// Environment variable overriding the output directory of every command
/// that writes files.
pub const OUT_DIR_ENV: &str = "SWITCHDIFF_OUT";

/// Format a float with 17 significant digits, enough to round-trip f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Resolve an output path: an absolute path is used as is; a relative path
/// is placed under `SWITCHDIFF_OUT` when that variable is set.
pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// Write text to a file, creating parent directories as needed.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_at(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| io_at(path, e))
}

/// Read a file to a string with a path-carrying error.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_at(path, e))
}

/// A numeric table with named columns, rendered to CSV or JSON with the
/// same values and the same column order.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Table {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// JSON rendering with the numbers written at the same precision as the
    /// CSV, so both forms parse to identical values.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n  \"columns\": [");
        for (i, c) in self.columns.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push('"');
            out.push_str(c);
            out.push('"');
        }
        out.push_str("],\n  \"rows\": [\n");
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str("    [");
            for (j, &x) in row.iter().enumerate() {
                if j > 0 {
                    out.push_str(", ");
                }
                out.push_str(&fmt_f64(x));
            }
            out.push(']');
            if i + 1 < self.rows.len() {
                out.push(',');
            }
            out.push('\n');
        }
        out.push_str("  ]\n}\n");
        out
    }
}

/// Serialize a value as pretty JSON with a trailing newline.
pub fn to_json_pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(std::io::Error::other(format!("serializing JSON: {e}"))))?;
    text.push('\n');
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_csv_and_json_agree_value_for_value() {
        let mut t = Table::new(vec!["a".into(), "b".into()]);
        t.push(vec![1.0 / 3.0, -2.5e-7]);
        t.push(vec![4.0, 5.0]);
        let csv = t.to_csv();
        let json: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "a,b");
        let rows = json["rows"].as_array().unwrap();
        for (line, row) in lines.zip(rows) {
            for (cell, val) in line.split(',').zip(row.as_array().unwrap()) {
                let from_csv: f64 = cell.parse().unwrap();
                assert_eq!(from_csv, val.as_f64().unwrap());
            }
        }
    }

    #[test]
    fn fmt_round_trips_f64_exactly() {
        for &x in &[std::f64::consts::PI, 1e-300, -7.25, 0.1 + 0.2] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, x);
        }
    }
}
