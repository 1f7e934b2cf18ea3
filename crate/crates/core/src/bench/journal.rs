//! Append-only progress journal for resumable matrix runs.
//!
//! The first line is a header holding the serialized matrix; every later line
//! is one finished `(cell, item, run)` unit. A torn final line, left by a
//! crash mid-write, is ignored on reload.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::matrix::{ArchiveRecord, MatrixError};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    matrix: Value,
}

pub(crate) type UnitKey = (String, String, u32);

pub(crate) fn unit_key(record: &ArchiveRecord) -> UnitKey {
    (record.cell.to_string(), record.item_id.clone(), record.run)
}

/// Units already recorded, keyed by `(cell, item, run)`.
pub(crate) struct Journal {
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
}

impl Journal {
    /// Opens `path`, returning the recorded units. A missing or empty file
    /// starts a fresh journal; a header for a different matrix is an error.
    pub(crate) fn open(
        path: &Path,
        matrix: &Value,
    ) -> Result<(Self, BTreeMap<UnitKey, ArchiveRecord>), MatrixError> {
        let io = |e: std::io::Error| MatrixError::Journal(format!("{}: {e}", path.display()));
        let mut done = BTreeMap::new();
        let mut has_header = false;
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            let mut lines = reader.lines();
            if let Some(first) = lines.next() {
                let first = first.map_err(io)?;
                if !first.trim().is_empty() {
                    let header: Header = serde_json::from_str(&first).map_err(|e| {
                        MatrixError::Journal(format!("{}: bad header: {e}", path.display()))
                    })?;
                    if &header.matrix != matrix {
                        return Err(MatrixError::Journal(format!(
                            "{} was written for a different run matrix",
                            path.display()
                        )));
                    }
                    has_header = true;
                }
            }
            for line in lines {
                let line = line.map_err(io)?;
                match serde_json::from_str::<ArchiveRecord>(&line) {
                    Ok(record) => {
                        done.insert(unit_key(&record), record);
                    }
                    Err(e) => log::warn!("skipping unreadable journal line: {e}"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        let mut writer = BufWriter::new(file);
        if !has_header {
            // A torn header means nothing usable was recorded.
            if path.metadata().map_err(io)?.len() > 0 {
                writer.get_mut().set_len(0).map_err(io)?;
            }
            let header = serde_json::to_string(&Header { matrix: matrix.clone() })
                .map_err(|e| MatrixError::Journal(e.to_string()))?;
            writeln!(writer, "{header}").map_err(io)?;
            writer.flush().map_err(io)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                writer: Mutex::new(writer),
            },
            done,
        ))
    }

    pub(crate) fn append(&self, record: &ArchiveRecord) -> Result<(), MatrixError> {
        let line = serde_json::to_string(record).map_err(|e| MatrixError::Journal(e.to_string()))?;
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        writeln!(w, "{line}")
            .and_then(|()| w.flush())
            .map_err(|e| MatrixError::Journal(format!("{}: {e}", self.path.display())))
    }
}
