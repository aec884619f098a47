//! CSV input and output, atomic file writes and input digests.

use std::fs;
use std::io::Write;
use std::path::Path;

use clap::ValueEnum;
use sha2::{Digest, Sha256};
use tppca::nalgebra::DMatrix;
use tppca::wrapped_normal::{wrap_angle, AngleMatrix};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Unit {
    Rad,
    Deg,
}

impl Unit {
    pub fn to_radians(self, v: f64) -> f64 {
        match self {
            Unit::Rad => v,
            Unit::Deg => v.to_radians(),
        }
    }

    pub fn from_radians(self, v: f64) -> f64 {
        match self {
            Unit::Rad => v,
            Unit::Deg => v.to_degrees(),
        }
    }
}

/// A rectangular numeric table with a header row.
#[derive(Debug, Clone)]
pub struct Table {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn parse_error(
    path: &Path,
    line: Option<u64>,
    column: Option<String>,
    message: impl Into<String>,
) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

/// Parses a CSV with a header row and finite real entries.
pub fn parse_table(path: &Path, bytes: &[u8]) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(path, Some(1), None, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(parse_error(path, Some(1), None, "missing header row"));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line());
            parse_error(path, line, None, e.to_string())
        })?;
        let line = record.position().map(|p| p.line());
        for (c, field) in record.iter().enumerate() {
            let column = Some(format!("{} ({})", c + 1, names[c]));
            if field.is_empty() {
                return Err(parse_error(path, line, column, "missing value"));
            }
            let v: f64 = field.parse().map_err(|_| {
                parse_error(
                    path,
                    line,
                    column.clone(),
                    format!("'{field}' is not a number"),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_error(
                    path,
                    line,
                    column,
                    format!("'{field}' is not finite"),
                ));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_error(path, None, None, "no data rows"));
    }
    Ok(Table {
        values: DMatrix::from_row_slice(rows, names.len(), &data),
        names,
    })
}

/// Reads angles in the given unit and wraps them into [0, 2π) radians.
pub fn read_angles(path: &Path, unit: Unit) -> CliResult<(Table, AngleMatrix, String)> {
    let bytes = read_bytes(path)?;
    let digest = sha256_hex(&bytes);
    let table = parse_table(path, &bytes)?;
    let radians = table.values.map(|v| wrap_angle(unit.to_radians(v)));
    let angles = AngleMatrix::new(radians)?;
    Ok((table, angles, digest))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// CSV text of a matrix; numbers use the shortest decimal form that parses
/// back to the same value.
pub fn matrix_csv(names: &[String], m: &DMatrix<f64>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(names)
        .map_err(|e| CliError::Other(e.to_string()))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Other(e.to_string()))
}

/// Sends output to `path` atomically, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::io("<stdout>", e)),
    }
}
