//! Line-delimited JSON record stores.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum RecordIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Parse every non-blank line of `reader` as one record.
pub fn parse_jsonl<T: DeserializeOwned>(
    reader: impl BufRead,
    origin: &Path,
) -> Result<Vec<T>, RecordIoError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| RecordIoError::Io {
            path: origin.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| RecordIoError::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, RecordIoError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| RecordIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(BufReader::new(file), path)
}

/// Serialize records to JSONL bytes, one object per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>, RecordIoError> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(
    path: impl AsRef<Path>,
    records: &[T],
) -> Result<(), RecordIoError> {
    let path = path.as_ref();
    let bytes = to_jsonl(records)?;
    std::fs::write(path, bytes).map_err(|source| RecordIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Append-only JSONL writer that can be shared between workers.
pub struct JsonlAppender {
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
}

impl JsonlAppender {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, RecordIoError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|source| RecordIoError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(Self {
            path,
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), RecordIoError> {
        let line = serde_json::to_string(record)?;
        let mut writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(writer, "{line}").map_err(|source| RecordIoError::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn flush(&self) -> Result<(), RecordIoError> {
        let mut writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        writer.flush().map_err(|source| RecordIoError::Io {
            path: self.path.clone(),
            source,
        })
    }
}
