//! Headered JSON-lines files.
//!
//! Every stage output starts with a `{"header": {...}}` line recording the
//! run parameters and content hashes that produced it; data rows follow one
//! per line. Writing is atomic (write-then-rename).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Write a headered JSON-lines file atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, header: &serde_json::Value, rows: &[T]) -> Result<()> {
    let mut body = String::new();
    body.push_str(&serde_json::json!({ "header": header }).to_string());
    body.push('\n');
    for row in rows {
        body.push_str(&serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?);
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub struct JsonlFile<T> {
    pub header: serde_json::Value,
    pub rows: Vec<T>,
}

/// Read a headered JSON-lines file. The first line must carry a `header`
/// object; malformed data rows are data-format errors.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<JsonlFile<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut header = None;
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 0 {
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{}: malformed header line: {e}", path.display()))
            })?;
            match value.get("header") {
                Some(h) => header = Some(h.clone()),
                None => {
                    return Err(Error::Format(format!(
                        "{}: first line lacks a header object",
                        path.display()
                    )))
                }
            }
            continue;
        }
        let row: T = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: malformed row: {e}", path.display(), lineno + 1))
        })?;
        rows.push(row);
    }
    let header = header.ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    Ok(JsonlFile { header, rows })
}

/// sha256 of a file's bytes, hex-encoded. Used for manifest digest chains.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
