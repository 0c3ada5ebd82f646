//! CSV ingestion into a [`Dataset`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use vardecomp_core::{Column, Dataset};

/// Forced type of a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Numeric,
    Categorical,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: file is not valid UTF-8")]
    NonUtf8 { line: u64 },
    #[error("file is empty (no header row)")]
    Empty,
    #[error("file has a header but no data rows")]
    EmptyBody,
    #[error("line {line}: expected {expected} fields, found {found}")]
    Ragged {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("line {line}, column `{column}`: missing value")]
    Missing { line: u64, column: String },
    #[error("line {line}, column `{column}`: `{value}` is not a finite number")]
    NotNumeric {
        line: u64,
        column: String,
        value: String,
    },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Dataset(#[from] vardecomp_core::Error),
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || ["na", "nan", "null", "n/a"].contains(&t.to_ascii_lowercase().as_str())
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parse CSV text. Columns are typed by `hints`, else numeric when every cell
/// parses as a finite number, else categorical. Hints naming absent columns
/// are ignored.
pub fn parse_csv(
    bytes: &[u8],
    hints: &HashMap<String, ColumnType>,
) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let header = reader.byte_headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    if header.is_empty() {
        return Err(DataError::Empty);
    }
    let names: Vec<String> = header
        .iter()
        .map(|h| {
            std::str::from_utf8(h)
                .map(|s| s.trim().to_string())
                .map_err(|_| DataError::NonUtf8 { line: 1 })
        })
        .collect::<Result<_, _>>()?;

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    let mut lines: Vec<u64> = Vec::new();
    for record in reader.byte_records() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record.get(0).is_some_and(|f| f.is_empty()) {
            continue;
        }
        if record.len() != names.len() {
            return Err(DataError::Ragged {
                line,
                expected: names.len(),
                found: record.len(),
            });
        }
        for (j, field) in record.iter().enumerate() {
            let text = std::str::from_utf8(field).map_err(|_| DataError::NonUtf8 { line })?;
            if is_missing(text) {
                return Err(DataError::Missing {
                    line,
                    column: names[j].clone(),
                });
            }
            cells[j].push(text.trim().to_string());
        }
        lines.push(line);
    }
    if lines.is_empty() {
        return Err(DataError::EmptyBody);
    }

    let mut columns = Vec::with_capacity(names.len());
    for (name, values) in names.into_iter().zip(cells) {
        let column = match hints.get(&name) {
            Some(ColumnType::Categorical) => Column::categorical(&values),
            Some(ColumnType::Numeric) => {
                let mut out = Vec::with_capacity(values.len());
                for (v, line) in values.iter().zip(&lines) {
                    out.push(parse_number(v).ok_or_else(|| DataError::NotNumeric {
                        line: *line,
                        column: name.clone(),
                        value: v.clone(),
                    })?);
                }
                Column::Numeric(out)
            }
            None => match values.iter().map(|v| parse_number(v)).collect::<Option<Vec<_>>>() {
                Some(nums) => Column::Numeric(nums),
                None => Column::categorical(&values),
            },
        };
        columns.push((name, column));
    }
    Ok(Dataset::new(columns)?)
}

/// Read and parse a CSV file.
pub fn read_csv(
    path: impl AsRef<Path>,
    hints: &HashMap<String, ColumnType>,
) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(DataError::Empty);
    }
    parse_csv(&bytes, hints)
}
