//! Artifact writers: schema-versioned CSV and snake_case JSON documents.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::CliError;

/// First line of every CSV artifact.
pub const SCHEMA_LINE: &str = "# rdp-kit schema v1";

/// 12 significant digits, scientific notation, `.` decimal separator.
pub fn sig(x: f64) -> String {
    format!("{x:.11e}")
}

/// Assemble a CSV document: schema comment, header row, data rows.
pub fn csv_document(header: &str, rows: &[String]) -> String {
    let mut doc = String::with_capacity(rows.len() * 64 + 64);
    doc.push_str(SCHEMA_LINE);
    doc.push('\n');
    doc.push_str(header);
    doc.push('\n');
    for row in rows {
        doc.push_str(row);
        doc.push('\n');
    }
    doc
}

/// Write to the path (creating parent directories) or to standard output
/// when no path is given.
pub fn emit(path: Option<&Path>, content: &str) -> Result<(), CliError> {
    match path {
        None => {
            std::io::stdout().write_all(content.as_bytes()).map_err(CliError::from)
        }
        Some(path) => write_text(path, content),
    }
}

pub fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, content)
        .map_err(|err| CliError::Config(format!("cannot write {}: {err}", path.display())))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|err| CliError::Config(format!("json encoding: {err}")))?;
    text.push('\n');
    write_text(path, &text)
}
