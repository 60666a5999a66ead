//! Append-only JSON-lines event log. State is rebuilt by replaying it.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::definition::StudyDefinition;
use crate::error::{Result, StudyError};
use crate::service::Side;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    StudyCreated {
        study_id: String,
        definition: StudyDefinition,
        at_ms: u64,
    },
    SessionCreated {
        session_id: String,
        study_id: String,
        rater_id: String,
        seed: u64,
        at_ms: u64,
        expires_at_ms: u64,
    },
    VoteCast {
        session_id: String,
        pair_token: String,
        side: Side,
        likert: Option<u8>,
        latency_ms: Option<u64>,
        at_ms: u64,
    },
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Opens (creating if needed) the log and returns its events. A final
    /// line without a terminating newline is an interrupted write; it is
    /// discarded and truncated away.
    pub fn open(path: &Path) -> Result<(EventLog, Vec<Event>)> {
        let io = |source| StudyError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io)?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(io)?;
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            file.set_len(complete as u64).map_err(io)?;
        }
        let mut events = Vec::new();
        for (i, line) in text[..complete].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ev = serde_json::from_str(line).map_err(|e| StudyError::Replay {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })?;
            events.push(ev);
        }
        Ok((
            EventLog {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one event as a single line and syncs it to disk.
    pub fn append(&mut self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(event).map_err(|e| StudyError::Replay {
            path: self.path.clone(),
            line: 0,
            detail: e.to_string(),
        })?;
        line.push(b'\n');
        let io = |source| StudyError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(&line).map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}
