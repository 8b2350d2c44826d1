//! Append-only event journal. State is rebuilt by replaying it.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{StudySettings, TaskAssignment};
use crate::domain::{MosTable, Sequence, Stage, StageConfig, Submission, ValidationIssue, WorkerId, WorkerProfile};
use crate::error::StudyError;
use crate::stats::FilterOutcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Init {
        settings: StudySettings,
        stages: Vec<StageConfig>,
        catalog: Vec<Sequence>,
    },
    SubjectSeen {
        worker_id: WorkerId,
        profile: WorkerProfile,
    },
    Assigned {
        assignment: TaskAssignment,
    },
    Submitted {
        token: String,
        submission: Submission,
        completion_code: Option<String>,
        issues: Vec<ValidationIssue>,
    },
    Filtered {
        stage: Stage,
        outcomes: Vec<FilterOutcome>,
        mos: MosTable,
    },
    Qualified {
        workers: Vec<WorkerId>,
    },
}

pub(crate) struct Journal {
    path: Option<PathBuf>,
    out: Option<BufWriter<File>>,
}

fn store_err(path: &Path, e: impl std::fmt::Display) -> StudyError {
    StudyError::Store(format!("{}: {e}", path.display()))
}

impl Journal {
    pub fn memory() -> Self {
        Journal { path: None, out: None }
    }

    /// Opens `path` for appending and returns the events already in it.
    pub fn open(path: &Path) -> Result<(Self, Vec<Event>), StudyError> {
        let mut events = Vec::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| store_err(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| store_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev = serde_json::from_str(&line).map_err(|e| store_err(path, format!("line {}: {e}", i + 1)))?;
                events.push(ev);
            }
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| store_err(path, e))?;
        Ok((
            Journal {
                path: Some(path.to_owned()),
                out: Some(BufWriter::new(f)),
            },
            events,
        ))
    }

    pub fn append(&mut self, ev: &Event) -> Result<(), StudyError> {
        let (Some(out), Some(path)) = (self.out.as_mut(), self.path.as_ref()) else {
            return Ok(());
        };
        serde_json::to_writer(&mut *out, ev).map_err(|e| store_err(path, e))?;
        out.write_all(b"\n").map_err(|e| store_err(path, e))?;
        out.flush().map_err(|e| store_err(path, e))
    }
}
