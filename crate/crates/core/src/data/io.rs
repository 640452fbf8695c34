use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetMatrix};

const RAW_HEADER: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    RawF32,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "raw_f32" => Ok(Format::RawF32),
            other => Err(format!("unknown data format `{other}` (expected csv or raw_f32)")),
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_matrix(path: impl AsRef<Path>, format: Format) -> Result<DatasetMatrix, DataError> {
    let path = path.as_ref();
    match format {
        Format::Csv => parse_csv(&fs::read_to_string(path).map_err(|e| io_error(path, e))?),
        Format::RawF32 => parse_raw_f32(&fs::read(path).map_err(|e| io_error(path, e))?),
    }
}

/// Comma-separated decimal floats. A first line that does not parse as
/// numbers is taken as the column header. Blank lines are skipped.
pub fn parse_csv(text: &str) -> Result<DatasetMatrix, DataError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();
    let mut names = None;
    if let Some(&(_, first)) = lines.peek() {
        if first.split(',').any(|f| f.trim().parse::<f64>().is_err()) {
            names = Some(first.split(',').map(|f| f.trim().to_string()).collect::<Vec<_>>());
            lines.next();
        }
    }
    let mut cols = names.as_ref().map(Vec::len);
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, text) in lines {
        let fields: Vec<&str> = text.split(',').collect();
        let expected = *cols.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(DataError::Parse {
                location: format!("row {} (line {line})", rows + 1),
                message: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        for (c, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| DataError::Parse {
                location: format!("row {} (line {line}), column {}", rows + 1, c + 1),
                message: format!("`{}` is not a number", f.trim()),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite { row: rows });
            }
            data.push(v);
        }
        rows += 1;
    }
    let m = DatasetMatrix::new(rows, cols.unwrap_or(0), data)?;
    match names {
        Some(n) => m.with_names(n),
        None => Ok(m),
    }
}

/// 16-byte header (`u64` rows, `u64` cols, little-endian) followed by
/// row-major little-endian `f32` values.
pub fn parse_raw_f32(bytes: &[u8]) -> Result<DatasetMatrix, DataError> {
    if bytes.len() < RAW_HEADER {
        return Err(DataError::Parse {
            location: "header".into(),
            message: format!("truncated: {} of {RAW_HEADER} header bytes", bytes.len()),
        });
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(0), word(1));
    if rows == 0 || cols == 0 {
        return Err(DataError::Empty);
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| DataError::Parse {
            location: "header".into(),
            message: format!("{rows}×{cols} is too large"),
        })?;
    let body = &bytes[RAW_HEADER..];
    if body.len() != expected {
        return Err(DataError::Parse {
            location: format!("byte {}", RAW_HEADER + body.len().min(expected)),
            message: format!("expected {expected} data bytes for {rows}×{cols}, found {}", body.len()),
        });
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    DatasetMatrix::new(rows as usize, cols as usize, data)
}

/// Encode as raw_f32. Values are narrowed to `f32`.
pub fn to_raw_f32(m: &DatasetMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER + 4 * m.data().len());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn save_raw_f32(m: &DatasetMatrix, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, to_raw_f32(m)).map_err(|e| io_error(path, e))
}

/// Write with a header line when column names are known. Floats use the
/// shortest representation that round-trips.
pub fn save_csv(m: &DatasetMatrix, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut text = String::new();
    if let Some(names) = m.names() {
        text.push_str(&names.join(","));
        text.push('\n');
    }
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                text.push(',');
            }
            write!(text, "{v}").expect("write to string");
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}
