//! Newline-delimited JSON logs: one record per line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::env::{EpisodeLog, LOG_SCHEMA};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: schema {found} not supported (expected {expected})")]
    Schema { line: usize, found: u32, expected: u32 },
}

pub fn write_ndjson<T: Serialize>(w: impl Write, records: &[T]) -> Result<(), LogError> {
    let mut w = BufWriter::new(w);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| LogError::Parse { line: 0, msg: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Blank lines are skipped.
pub fn read_ndjson<T: DeserializeOwned>(r: impl std::io::Read) -> Result<Vec<T>, LogError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LogError::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

pub fn save_episodes(path: &Path, logs: &[EpisodeLog]) -> Result<(), LogError> {
    write_ndjson(std::fs::File::create(path)?, logs)
}

pub fn load_episodes(path: &Path) -> Result<Vec<EpisodeLog>, LogError> {
    let logs: Vec<EpisodeLog> = read_ndjson(std::fs::File::open(path)?)?;
    for (i, l) in logs.iter().enumerate() {
        if l.schema != LOG_SCHEMA {
            return Err(LogError::Schema { line: i + 1, found: l.schema, expected: LOG_SCHEMA });
        }
    }
    Ok(logs)
}
