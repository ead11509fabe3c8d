//! Version-stamped CSV and JSON artifacts.

use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const CSV_VERSION: u32 = 1;

/// First line of every CSV: `# residual-probe <schema> v<version>`.
pub fn csv_stamp(schema: &str) -> String {
    format!("# residual-probe {schema} v{CSV_VERSION}")
}

pub fn fmt_f64(v: f64) -> String {
    v.to_string()
}

pub fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_csv(path: &Path, schema: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(csv_stamp(schema).as_bytes());
    buf.push(b'\n');
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a CSV written by [`write_csv`], skipping the stamp line.
pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}
