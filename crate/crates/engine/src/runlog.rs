//! Line-delimited JSON run log.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use recast_core::{ArtifactId, Error, Result};
use serde::{Deserialize, Serialize};

use crate::pipeline::StageKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StageStart,
    StageDone,
    CacheHit,
    StageFailed,
    VerifyOk,
    VerifyMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub event: EventKind,
    pub stage: StageKind,
    /// Wall time of the stage for `stage_done`, lookup time for
    /// `cache_hit`, time since run start otherwise.
    pub ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<ArtifactId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

pub type Observer = Arc<dyn Fn(&RunEvent) + Send + Sync>;

pub(crate) struct RunLog {
    file: Option<File>,
    events: Vec<RunEvent>,
    observer: Option<Observer>,
}

impl RunLog {
    pub(crate) fn open(path: Option<&Path>, observer: Option<Observer>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::Io {
                        path: dir.to_path_buf(),
                        source: e,
                    })?;
                }
                Some(
                    File::options()
                        .create(true)
                        .append(true)
                        .open(p)
                        .map_err(|e| Error::Io {
                            path: p.to_path_buf(),
                            source: e,
                        })?,
                )
            }
            None => None,
        };
        Ok(Self {
            file,
            events: Vec::new(),
            observer,
        })
    }

    pub(crate) fn emit(&mut self, ev: RunEvent) {
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_string(&ev).expect("events serialize");
            line.push('\n');
            let _ = f.write_all(line.as_bytes()).and_then(|_| f.flush());
        }
        if let Some(obs) = &self.observer {
            obs(&ev);
        }
        self.events.push(ev);
    }

    pub(crate) fn take_events(&mut self) -> Vec<RunEvent> {
        std::mem::take(&mut self.events)
    }
}

pub(crate) type SharedLog = Mutex<RunLog>;

/// Parse a run log written by [`crate::run`].
pub fn read_run_log(path: &Path) -> Result<Vec<RunEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn default_log_path(root: &Path) -> PathBuf {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    root.join("logs").join(format!("run-{stamp}-{}.jsonl", std::process::id()))
}
