//! Atomic file writes and JSONL helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CoreError, Result};

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(rows)?)
}

/// Parses one value per non-empty line; errors carry the byte offset of
/// the offending line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read(path)?;
    let mut rows = Vec::new();
    let mut offset = 0;
    for line in text.split(|&b| b == b'\n') {
        if !line.iter().all(u8::is_ascii_whitespace) {
            let row = serde_json::from_slice(line).map_err(|e| CoreError::Format {
                file: path.to_path_buf(),
                offset: offset + e.column().saturating_sub(1),
                msg: e.to_string(),
            })?;
            rows.push(row);
        }
        offset += line.len() + 1;
    }
    Ok(rows)
}
