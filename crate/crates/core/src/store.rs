//! Run directories and the JSONL files in them.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PaaceConfig;
use crate::model::{Trajectory, Workflow};
use crate::pipeline::Strategy;
use crate::scoring::SuccessLabel;
use crate::synth::{generate_workflow, GeneratorConfig, GeneratorError, WorldState};

pub const STORE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error("{path}: schema version {found}, expected {STORE_SCHEMA_VERSION}")]
    Version { path: String, found: u32 },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One workflow of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub schema_version: u32,
    pub corpus_id: String,
    pub seed: u64,
    pub workflow: Workflow,
    pub world: WorldState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub corpus_id: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub plan_len: usize,
    pub gold: Option<String>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub workflow_id: String,
    pub label: SuccessLabel,
    pub tuples: usize,
}

/// Content id of a corpus: generator settings plus the seed range.
pub fn corpus_id(gen: &GeneratorConfig, seed: u64, count: usize) -> String {
    let json = serde_json::to_string(&(gen, seed, count)).expect("generator config serializes");
    use sha2::{Digest, Sha256};
    format!("corpus-{}", hex::encode(&Sha256::digest(json.as_bytes())[..6]))
}

/// Workflows for seeds `seed .. seed + count`.
pub fn synth_corpus(gen: &GeneratorConfig, seed: u64, count: usize) -> Result<Vec<CorpusRecord>, StoreError> {
    let id = corpus_id(gen, seed, count);
    (seed..seed + count as u64)
        .map(|s| {
            let (workflow, world) = generate_workflow(s, gen)?;
            Ok(CorpusRecord { schema_version: STORE_SCHEMA_VERSION, corpus_id: id.clone(), seed: s, workflow, world })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

/// Writes a whole JSONL file atomically (temp file plus rename).
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_jsonl(records))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

fn parse_line<T: DeserializeOwned>(path: &Path, n: usize, line: &str) -> Result<T, StoreError> {
    let err = |message: String| StoreError::Record { path: path.display().to_string(), line: n, message };
    let probe: VersionProbe = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    if probe.schema_version != STORE_SCHEMA_VERSION {
        return Err(StoreError::Version { path: path.display().to_string(), found: probe.schema_version });
    }
    serde_json::from_str(line).map_err(|e| err(e.to_string()))
}

/// Reads every record; blank lines are skipped and any bad line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(parse_line(path, i + 1, &line)?);
        }
    }
    Ok(out)
}

/// Reads the valid prefix of an append-only log and cuts off a torn tail,
/// as left by a crash mid-write. Returns the records kept.
pub fn recover_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut good_len = 0usize;
    let mut offset = 0usize;
    for (i, chunk) in text.split_inclusive('\n').enumerate() {
        offset += chunk.len();
        if !chunk.ends_with('\n') {
            break;
        }
        let line = chunk.trim_end();
        if line.is_empty() {
            good_len = offset;
            continue;
        }
        match parse_line(path, i + 1, line) {
            Ok(r) => {
                out.push(r);
                good_len = offset;
            }
            Err(e @ StoreError::Version { .. }) => return Err(e),
            Err(e) => {
                tracing::warn!(error = %e, "dropping unreadable tail of log");
                break;
            }
        }
    }
    if good_len < text.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(good_len as u64)?;
    }
    Ok(out)
}

/// Serialized appender: one writer per file, one flushed line per record.
pub struct JsonlAppender {
    file: Mutex<File>,
}

impl JsonlAppender {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        file.seek(SeekFrom::End(0))?;
        Ok(JsonlAppender { file: Mutex::new(file) })
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record).map_err(std::io::Error::from)?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(&line)?;
        f.flush()?;
        Ok(())
    }
}

/// Logged trajectories and the (strategy, seed) pairs they cover.
pub type Completed = (Vec<TrajectoryRecord>, BTreeSet<(Strategy, u64)>);

/// Layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    pub fn trajectories(&self) -> PathBuf {
        self.root.join("trajectories.jsonl")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.jsonl")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }
    pub fn archive_summary(&self) -> PathBuf {
        self.root.join("archive_summary.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    /// Creates the directory and writes the config snapshot. An existing
    /// snapshot must match, so a resumed run cannot silently change settings.
    pub fn init(&self, cfg: &PaaceConfig) -> Result<(), StoreError> {
        fs::create_dir_all(&self.root)?;
        let snapshot = cfg.to_toml();
        let path = self.config();
        if path.exists() {
            let old = PaaceConfig::from_toml(&fs::read_to_string(&path)?)
                .map_err(|e| StoreError::Mismatch(format!("{}: {e}", path.display())))?;
            if old != *cfg {
                return Err(StoreError::Mismatch(format!(
                    "{} holds a different configuration; use a fresh run directory",
                    path.display()
                )));
            }
            return Ok(());
        }
        fs::write(path, snapshot)?;
        Ok(())
    }

    pub fn load_config(&self) -> Result<PaaceConfig, StoreError> {
        let path = self.config();
        PaaceConfig::from_toml(&fs::read_to_string(&path)?)
            .map_err(|e| StoreError::Mismatch(format!("{}: {e}", path.display())))
    }

    /// Run id derived from the directory name.
    pub fn run_id(&self) -> String {
        self.root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
    }

    /// Recovered trajectory log and the (strategy, seed) pairs already done.
    pub fn completed(&self) -> Result<Completed, StoreError> {
        let recs: Vec<TrajectoryRecord> = recover_jsonl(&self.trajectories())?;
        let done = recs.iter().map(|r| (r.strategy, r.seed)).collect();
        Ok((recs, done))
    }
}
