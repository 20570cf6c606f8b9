//! Append-only run registry.
//!
//! Each run owns `<root>/<id>/` holding `config.json` (written once, at
//! creation), `run.json` (the record) and the artifact files. A record moves
//! from `running` to `completed` or `failed` exactly once; after that nothing
//! in the directory is rewritten.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Flow,
    Deactivate,
    Steer,
    Sweep,
    Stats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub kind: RunKind,
    pub config_hash: String,
    pub status: RunStatus,
    /// Artifact file names, relative to the run directory.
    pub artifacts: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("run `{0}` already exists")]
    Conflict(String),
    #[error("run `{0}` not found")]
    NotFound(String),
    #[error("run `{0}` is already finished")]
    Finished(String),
    #[error("invalid run id `{0}`")]
    InvalidId(String),
    #[error("run registry i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("run registry json: {0}")]
    Json(#[from] serde_json::Error),
}

/// First 8 bytes of the SHA-256 of the config's canonical JSON, as hex.
pub fn config_hash(config: &serde_json::Value) -> String {
    // serde_json maps are sorted, so to_vec is canonical for our purposes
    let bytes = serde_json::to_vec(config).expect("a Value always serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Single writer (a mutex around every mutation), any number of readers.
#[derive(Debug)]
pub struct RunRegistry {
    root: PathBuf,
    write: Mutex<()>,
}

impl RunRegistry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RunError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            write: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Register a new run. A caller-chosen id that already exists is a
    /// conflict; without one a fresh UUID is used.
    pub fn create(
        &self,
        kind: RunKind,
        id: Option<&str>,
        config: &serde_json::Value,
    ) -> Result<RunRecord, RunError> {
        let id = match id {
            Some(id) if !valid_id(id) => return Err(RunError::InvalidId(id.to_owned())),
            Some(id) => id.to_owned(),
            None => uuid::Uuid::new_v4().to_string(),
        };
        let _guard = self.write.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.run_dir(&id);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(RunError::Conflict(id))
            }
            Err(e) => return Err(e.into()),
        }
        write_new(&dir.join("config.json"), &serde_json::to_vec_pretty(config)?)?;
        let record = RunRecord {
            id,
            kind,
            config_hash: config_hash(config),
            status: RunStatus::Running,
            artifacts: Vec::new(),
            created_at: Utc::now(),
            finished_at: None,
            error: None,
        };
        fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&record)?)?;
        Ok(record)
    }

    /// Write the artifacts and mark the run completed.
    pub fn complete(&self, id: &str, artifacts: &[(&str, &[u8])]) -> Result<RunRecord, RunError> {
        self.finish(id, |dir, rec| {
            for (name, bytes) in artifacts {
                write_new(&dir.join(name), bytes)?;
                rec.artifacts.push((*name).to_owned());
            }
            rec.status = RunStatus::Completed;
            Ok(())
        })
    }

    pub fn fail(&self, id: &str, message: &str) -> Result<RunRecord, RunError> {
        self.finish(id, |_, rec| {
            rec.status = RunStatus::Failed;
            rec.error = Some(message.to_owned());
            Ok(())
        })
    }

    fn finish(
        &self,
        id: &str,
        update: impl FnOnce(&Path, &mut RunRecord) -> Result<(), RunError>,
    ) -> Result<RunRecord, RunError> {
        let _guard = self.write.lock().unwrap_or_else(|e| e.into_inner());
        let mut rec = self.get(id)?;
        if rec.status != RunStatus::Running {
            return Err(RunError::Finished(id.to_owned()));
        }
        let dir = self.run_dir(id);
        update(&dir, &mut rec)?;
        rec.finished_at = Some(Utc::now());
        // write-then-rename so readers never see a half-written record
        let tmp = dir.join("run.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&rec)?)?;
        fs::rename(&tmp, dir.join("run.json"))?;
        Ok(rec)
    }

    pub fn get(&self, id: &str) -> Result<RunRecord, RunError> {
        if !valid_id(id) {
            return Err(RunError::NotFound(id.to_owned()));
        }
        let path = self.run_dir(id).join("run.json");
        match fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(RunError::NotFound(id.to_owned()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn config(&self, id: &str) -> Result<serde_json::Value, RunError> {
        self.get(id)?;
        Ok(serde_json::from_slice(&fs::read(
            self.run_dir(id).join("config.json"),
        )?)?)
    }

    /// Every run, oldest first (ties broken by id).
    pub fn list(&self) -> Result<Vec<RunRecord>, RunError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let Some(id) = entry.file_name().to_str().map(str::to_owned) else {
                continue;
            };
            match self.get(&id) {
                Ok(r) => out.push(r),
                // a directory mid-creation has no record yet
                Err(RunError::NotFound(_)) => {}
                Err(e) => return Err(e),
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }
}

fn write_new(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)?;
    f.write_all(bytes)
}
