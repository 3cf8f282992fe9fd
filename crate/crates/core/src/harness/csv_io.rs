use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::montecarlo::csv_error;
use super::synth::{Dataset, Provenance};
use crate::error::{Error, Result};

/// Parses a BOLD table: a header of region names, then one row per scan.
/// Line numbers in errors are 1-based and count the header.
pub fn parse_bold_csv(text: &str, t_r: f64, provenance: Provenance) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_error(1, e))?,
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
    };
    let names: Vec<String> = header.iter().map(str::to_owned).collect();
    if names.iter().any(String::is_empty) {
        return Err(Error::Parse { line: 1, msg: "empty region name in header".into() });
    }
    let n = names.len();
    let mut values = Vec::new();
    let mut rows = 0usize;
    for rec in records {
        let rec = rec.map_err(|e| parse_error(0, e))?;
        let line = rec.position().map_or(rows + 2, |p| p.line() as usize);
        if rec.len() != n {
            return Err(Error::Parse {
                line,
                msg: format!("{} fields, expected {n}", rec.len()),
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("row {}, column {} ({}): not a number: {cell:?}", rows + 1, col + 1, names[col]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("row {}, column {} ({}): non-finite value {cell}", rows + 1, col + 1, names[col]),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows < 2 {
        return Err(Error::Parse {
            line: rows + 1,
            msg: format!("{rows} data rows, at least 2 required"),
        });
    }
    if !(t_r > 0.0) {
        return Err(Error::Argument(format!("sampling interval must be positive, got {t_r}")));
    }
    Dataset::new(DMatrix::from_row_slice(rows, n, &values), t_r, names, provenance)
}

fn parse_error(line: usize, e: csv::Error) -> Error {
    let line = e.position().map_or(line, |p| p.line() as usize);
    Error::Parse { line, msg: e.to_string() }
}

pub fn load_bold_csv(path: &Path, t_r: f64) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_bold_csv(
        &text,
        t_r,
        Provenance::File {
            path: path.display().to_string(),
        },
    )
}

/// Writes values with round-trip precision.
pub fn write_bold_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(&data.region_names).map_err(csv_error)?;
    for row in data.y.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
