//! Append-only response log.
//!
//! Each acknowledged response is one JSON line, flushed to disk before the
//! append returns. A crash can leave at most a torn final line, which replay
//! drops and compaction removes.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::model::AnnotationResponse;
use crate::ServiceError;

#[derive(Debug)]
pub struct ResponseStore {
    path: PathBuf,
    file: File,
    appended_since_compaction: usize,
    compact_every: usize,
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Core(memecap_core::Error::io(path, e))
}

/// Parses a log; the second value is true when a torn final line was dropped.
pub fn replay(path: &Path) -> Result<(Vec<AnnotationResponse>, bool), ServiceError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), false)),
        Err(e) => return Err(io_err(path, e)),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    let mut torn = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => {
                log::warn!("{}: dropping torn final line", path.display());
                torn = true;
            }
            Err(e) => return Err(ServiceError::Validation(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok((out, torn))
}

impl ResponseStore {
    /// Opens the log, replays it and compacts it if a torn line was found.
    pub fn open(path: impl Into<PathBuf>, compact_every: usize) -> Result<(ResponseStore, Vec<AnnotationResponse>), ServiceError> {
        let path = path.into();
        let (responses, torn) = replay(&path)?;
        if torn {
            write_atomically(&path, &responses)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io_err(&path, e))?;
        Ok((ResponseStore { path, file, appended_since_compaction: 0, compact_every: compact_every.max(1) }, responses))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Returns once the line is on disk.
    pub fn append(&mut self, r: &AnnotationResponse) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(r).map_err(|e| ServiceError::Core(e.into()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| io_err(&self.path, e))?;
        self.file.sync_data().map_err(|e| io_err(&self.path, e))?;
        self.appended_since_compaction += 1;
        Ok(())
    }

    pub fn due_for_compaction(&self) -> bool {
        self.appended_since_compaction >= self.compact_every
    }

    /// Rewrites the log from `responses` through a temporary file and rename.
    pub fn compact(&mut self, responses: &[AnnotationResponse]) -> Result<(), ServiceError> {
        write_atomically(&self.path, responses)?;
        self.file = OpenOptions::new().append(true).open(&self.path).map_err(|e| io_err(&self.path, e))?;
        self.appended_since_compaction = 0;
        Ok(())
    }
}

fn write_atomically(path: &Path, responses: &[AnnotationResponse]) -> Result<(), ServiceError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        for r in responses {
            let mut line = serde_json::to_string(r).map_err(|e| ServiceError::Core(e.into()))?;
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| io_err(&tmp, e))?;
        }
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}
