use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ServiceError, TrialSpec};
use crate::engine::AllocationDecision;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEvent {
    Created {
        version: u32,
        trial_id: String,
        spec: TrialSpec,
        lambda: f64,
        seed: u64,
        created_ms: u64,
    },
    Enrolled {
        seq: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        event_key: Option<String>,
        covariates: Vec<f64>,
        decision: AllocationDecision,
        timestamp_ms: u64,
    },
}

/// Append-only JSON-lines file. Every append is flushed to stable storage
/// before returning.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    pub fn create(path: &Path) -> Result<Self, ServiceError> {
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)
            .map_err(|e| storage(path, e))?;
        if let Some(dir) = path.parent() {
            // make the new directory entry durable as well
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Reads every complete event. A trailing partial line (a write cut
    /// short by a crash) is truncated away; its decision was never returned.
    pub fn open(path: &Path) -> Result<(Self, Vec<LogEvent>), ServiceError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .open(path)
            .map_err(|e| storage(path, e))?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(|e| storage(path, e))?;
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            file.set_len(complete as u64).map_err(|e| storage(path, e))?;
            file.seek(SeekFrom::End(0)).map_err(|e| storage(path, e))?;
            file.sync_all().map_err(|e| storage(path, e))?;
        }
        let mut events = Vec::new();
        for (i, line) in text[..complete].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ev = serde_json::from_str(line)
                .map_err(|e| ServiceError::Corrupt(format!("{} line {}: {e}", path.display(), i + 1)))?;
            events.push(ev);
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn append(&mut self, event: &LogEvent) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(event).map_err(|e| ServiceError::Corrupt(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| storage(&self.path, e))?;
        self.file.sync_data().map_err(|e| storage(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn storage(path: &Path, e: io::Error) -> ServiceError {
    ServiceError::Storage(format!("{}: {e}", path.display()))
}
