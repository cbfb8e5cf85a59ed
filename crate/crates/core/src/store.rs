//! Layout of run artifacts under `runs/<job_id>/`.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// One job state transition, as appended to `events.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobEvent {
    pub t_ms: u64,
    pub job_id: String,
    pub from: Option<String>,
    pub to: String,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, job_id: &str) -> PathBuf {
        self.root.join(job_id)
    }

    pub fn events_path(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join("events.jsonl")
    }

    pub fn history_path(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join("history.json")
    }

    pub fn metrics_path(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join("metrics.jsonl")
    }

    pub fn bridge_path(&self, job_id: &str, site: &str) -> PathBuf {
        self.job_dir(job_id).join(site).join("bridge.jsonl")
    }

    pub fn trace_path(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join("trace.jsonl")
    }

    /// Starts a fresh directory for `job_id`, removing old artifacts.
    pub fn reset_job(&self, job_id: &str) -> io::Result<()> {
        let dir = self.job_dir(job_id);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(dir)
    }

    pub fn append_event(&self, ev: &JobEvent) -> io::Result<()> {
        let path = self.events_path(&ev.job_id);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut line = serde_json::to_vec(ev)?;
        line.push(b'\n');
        f.write_all(&line)
    }

    /// `None` when the job has no event log.
    pub fn read_events(&self, job_id: &str) -> io::Result<Option<Vec<JobEvent>>> {
        let path = self.events_path(job_id);
        if !path.is_file() {
            return Ok(None);
        }
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
            }
        }
        Ok(Some(out))
    }

    pub fn write_bytes(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)
    }
}
