//! Artifact layout and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use memecap_core::params::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::{Config, PipelineError, Result, Stage};

/// Where a run keeps its artifacts, plus the settings every stage shares.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    pub config: Config,
    hash: String,
    pub workers: usize,
    /// Stages whose artifacts live somewhere other than `<root>/<stage>`.
    overrides: BTreeMap<Stage, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub stage_seed: u64,
    /// Relative path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Core(memecap_core::Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

impl Workspace {
    /// Artifacts under [`Config::data_root`].
    pub fn new(config: Config, workers: usize) -> Workspace {
        let root = config.data_root();
        Workspace::at(config, root, workers)
    }

    pub fn at(config: Config, root: impl Into<PathBuf>, workers: usize) -> Workspace {
        let hash = config.hash();
        Workspace { root: root.into(), config, hash, workers: workers.max(1), overrides: BTreeMap::new() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// Reads `stage` artifacts from (and writes them to) `dir`.
    pub fn with_stage_dir(mut self, stage: Stage, dir: impl Into<PathBuf>) -> Workspace {
        self.overrides.insert(stage, dir.into());
        self
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.overrides.get(&stage).cloned().unwrap_or_else(|| self.root.join(stage.as_str()))
    }

    /// Path of a `producer` artifact that `stage` cannot run without.
    pub fn require(&self, stage: Stage, producer: Stage, name: &str) -> Result<PathBuf> {
        let path = self.dir(producer).join(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact { stage, run_first: producer, path })
        }
    }

    /// Per-stage seed derived from the run seed.
    pub fn seed_for(&self, stage: Stage) -> u64 {
        let digest = sha256_hex(format!("{}:{}", self.config.seed, stage.as_str()).as_bytes());
        u64::from_str_radix(&digest[..16], 16).expect("hex digest")
    }

    /// Manifest key: relative to the root when below it.
    fn key(&self, path: &Path) -> String {
        match path.strip_prefix(&self.root) {
            Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
            Err(_) => format!("external/{}", path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()),
        }
    }
}

/// Bookkeeping for one stage execution.
pub struct StageRun<'w> {
    pub ws: &'w Workspace,
    pub stage: Stage,
    pub dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'w> StageRun<'w> {
    /// With `clear`, stale outputs of an earlier run are removed first.
    pub fn begin(ws: &'w Workspace, stage: Stage, clear: bool) -> Result<StageRun<'w>> {
        let dir = ws.dir(stage);
        if clear && dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        log::info!("{stage}: writing to {}", dir.display());
        Ok(StageRun { ws, stage, dir, inputs: BTreeMap::new(), outputs: BTreeMap::new() })
    }

    pub fn input(&mut self, producer: Stage, name: &str) -> Result<PathBuf> {
        let path = self.ws.require(self.stage, producer, name)?;
        self.inputs.insert(self.ws.key(&path), file_hash(&path)?);
        Ok(path)
    }

    pub fn optional_input(&mut self, producer: Stage, name: &str) -> Result<Option<PathBuf>> {
        let path = self.ws.dir(producer).join(name);
        if !path.exists() {
            return Ok(None);
        }
        self.inputs.insert(self.ws.key(&path), file_hash(&path)?);
        Ok(Some(path))
    }

    /// A user-supplied file outside the artifact tree.
    pub fn external_input(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(PipelineError::Config(format!("{} does not exist", path.display())));
        }
        self.inputs.insert(self.ws.key(path), file_hash(path)?);
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.outputs.insert(self.ws.key(&path), sha256_hex(bytes));
        Ok(path)
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }

    /// Registers a file something else wrote into the stage directory.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(self.ws.key(path), file_hash(path)?);
        Ok(())
    }

    /// Registers every file below the stage directory not yet listed.
    pub fn record_all(&mut self) -> Result<()> {
        let mut stack = vec![self.dir.clone()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).map_err(|e| io_err(&d, e))? {
                let p = entry.map_err(|e| io_err(&d, e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().is_some_and(|n| n != "run.json") && !self.outputs.contains_key(&self.ws.key(&p)) {
                    self.record(&p)?;
                }
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "config_hash": self.ws.config_hash(), "stage": self.stage.as_str() })
    }

    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            stage: self.stage.as_str().into(),
            config_hash: self.ws.config_hash().into(),
            seed: self.ws.config.seed,
            stage_seed: self.ws.seed_for(self.stage),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = self.dir.join("run.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        log::info!("{}: done, {} outputs", self.stage, manifest.outputs.len());
        Ok(manifest)
    }
}

/// Runs `f` over `items` on up to `workers` threads; results keep item order.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| s.spawn(move || part.iter().enumerate().map(|(j, t)| f(c * chunk + j, t)).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    })
}
