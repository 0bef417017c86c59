//! Training tuples from successful compressed runs, and the JSONL dataset the
//! student trainer reads.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{compression_input, fnv1a64};
use crate::scoring::{SuccessLabel, TrajectoryPair};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: schema version {found}, expected {SCHEMA_VERSION}")]
    Version { line: usize, found: u32 },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: tuple violates dataset invariants: {message}")]
    Invalid { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisionTuple {
    pub schema_version: u32,
    pub run_id: String,
    pub workflow_id: String,
    pub step: usize,
    pub k: usize,
    pub plan_slice: String,
    /// Rendered context before compression.
    pub context: String,
    /// Rendered compressed context.
    pub target: String,
    pub ratio: f64,
    /// Equivalence of the parent trajectory.
    pub s: f64,
    pub prompt_id: String,
}

impl SupervisionTuple {
    /// Student input: the slice, then the context, under fixed delimiters.
    pub fn student_input(&self) -> String {
        compression_input(&self.plan_slice, &self.context)
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(format!("ratio {} outside (0, 1)", self.ratio));
        }
        if self.target.trim().is_empty() {
            return Err("empty target".into());
        }
        Ok(())
    }
}

/// One tuple per compression step of a successful, clean run; nothing otherwise.
pub fn extract_tuples(run_id: &str, pair: &TrajectoryPair, label: &SuccessLabel) -> Vec<SupervisionTuple> {
    let comp = &pair.compressed;
    if !label.success || !comp.is_clean() || !pair.full.is_clean() {
        return Vec::new();
    }
    // a single degenerate step poisons the whole run
    if comp.compression_records.iter().any(|r| !r.check_valid()) {
        return Vec::new();
    }
    comp.compression_records
        .iter()
        .map(|r| SupervisionTuple {
            schema_version: SCHEMA_VERSION,
            run_id: run_id.to_string(),
            workflow_id: comp.workflow_id.clone(),
            step: r.step,
            k: r.k,
            plan_slice: r.plan_slice.clone(),
            context: r.original_text.clone(),
            target: r.compressed_text.clone(),
            ratio: r.ratio,
            s: label.equivalence_s,
            prompt_id: r.prompt_id.clone(),
        })
        .collect()
}

/// Drops exact (plan_slice, context, target) repeats, keeping the highest-s
/// instance in its own position.
pub fn dedup_tuples(tuples: Vec<SupervisionTuple>) -> Vec<SupervisionTuple> {
    let mut best: HashMap<(&str, &str, &str), usize> = HashMap::new();
    for (i, t) in tuples.iter().enumerate() {
        let key = (t.plan_slice.as_str(), t.context.as_str(), t.target.as_str());
        match best.get(&key) {
            Some(&j) if tuples[j].s >= t.s => {}
            _ => {
                best.insert(key, i);
            }
        }
    }
    let keep: BTreeSet<usize> = best.into_values().collect();
    tuples.into_iter().enumerate().filter(|(i, _)| keep.contains(i)).map(|(_, t)| t).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub count: usize,
    pub mean_ratio: Option<f64>,
    pub mean_equivalence: Option<f64>,
    pub k_distribution: BTreeMap<usize, usize>,
    pub run_ids: Vec<String>,
}

impl DatasetManifest {
    pub fn describe(tuples: &[SupervisionTuple]) -> Self {
        let n = tuples.len();
        let mean = |f: fn(&SupervisionTuple) -> f64| (n > 0).then(|| tuples.iter().map(f).sum::<f64>() / n as f64);
        let mut k_distribution = BTreeMap::new();
        for t in tuples {
            *k_distribution.entry(t.k).or_insert(0) += 1;
        }
        let run_ids: BTreeSet<&str> = tuples.iter().map(|t| t.run_id.as_str()).collect();
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            count: n,
            mean_ratio: mean(|t| t.ratio),
            mean_equivalence: mean(|t| t.s),
            k_distribution,
            run_ids: run_ids.into_iter().map(String::from).collect(),
        }
    }
}

/// `dataset.jsonl` → `dataset.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Writes the tuples as JSONL plus a sibling manifest.
pub fn write_dataset(tuples: &[SupervisionTuple], path: &Path) -> Result<DatasetManifest, DatasetError> {
    for (i, t) in tuples.iter().enumerate() {
        t.check().map_err(|message| DatasetError::Invalid { line: i + 1, message })?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in tuples {
        serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let manifest = DatasetManifest::describe(tuples);
    let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::from)?;
    fs::write(manifest_path(path), json + "\n")?;
    Ok(manifest)
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

/// Reads a dataset file. Blank lines are skipped; every other line must be a
/// tuple of the current schema version.
pub fn read_dataset(path: &Path) -> Result<Vec<SupervisionTuple>, DatasetError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let probe: VersionProbe =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed { line: n, message: e.to_string() })?;
        if probe.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::Version { line: n, found: probe.schema_version });
        }
        let t: SupervisionTuple =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed { line: n, message: e.to_string() })?;
        t.check().map_err(|message| DatasetError::Invalid { line: n, message })?;
        out.push(t);
    }
    Ok(out)
}

/// Seeded split by workflow: all tuples of one workflow land on the same side.
pub fn split_by_workflow(
    tuples: Vec<SupervisionTuple>,
    holdout_fraction: f64,
    seed: u64,
) -> (Vec<SupervisionTuple>, Vec<SupervisionTuple>) {
    let threshold = (holdout_fraction.clamp(0.0, 1.0) * 10_000.0).round() as u64;
    tuples.into_iter().partition(|t| {
        let h = fnv1a64(format!("{seed}:{}", t.workflow_id).as_bytes());
        h % 10_000 >= threshold
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn tuple(i: usize, ratio: f64, s: f64) -> SupervisionTuple {
        SupervisionTuple {
            schema_version: SCHEMA_VERSION,
            run_id: "r1".into(),
            workflow_id: format!("wf-{}", i % 7),
            step: i % 30 + 1,
            k: 1 + i % 3,
            plan_slice: format!("{}. [lookup] lookup key_{i}", i % 30 + 1),
            context: format!("## INPUT\nkey_{i} = {i}\nnoise"),
            target: format!("## INPUT\nkey_{i} = {i}"),
            ratio,
            s,
            prompt_id: "p0000".into(),
        }
    }

    #[test]
    fn round_trip_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        let ts = vec![tuple(1, 0.2, 0.9), tuple(2, 0.4, 1.0)];
        let m = write_dataset(&ts, &path).unwrap();
        assert_abs_diff_eq!(m.mean_ratio.unwrap(), 0.3, epsilon = 1e-12);
        assert_eq!(m.count, 2);
        assert_eq!(read_dataset(&path).unwrap(), ts);
        let on_disk: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
        assert_eq!(on_disk, m);

        let empty = dir.path().join("empty.jsonl");
        let m = write_dataset(&[], &empty).unwrap();
        assert_eq!(m.count, 0);
        assert_eq!(m.mean_ratio, None);
        assert_eq!(fs::read_to_string(&empty).unwrap(), "");
    }

    #[test]
    fn version_and_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&[tuple(1, 0.5, 0.9)], &path).unwrap();
        let good = fs::read_to_string(&path).unwrap();
        fs::write(&path, format!("{good}\n{}", good.replace("\"schema_version\":1", "\"schema_version\":2"))).unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::Version { line: 3, found: 2 })));
        fs::write(&path, format!("{good}{{not json\n")).unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::Malformed { line: 2, .. })));
        assert!(write_dataset(&[tuple(1, 1.0, 0.9)], &path).is_err());
    }

    #[test]
    fn dedup_keeps_best_instance() {
        let a = tuple(1, 0.5, 0.9);
        let b = SupervisionTuple { s: 0.95, run_id: "r2".into(), ..a.clone() };
        let c = tuple(2, 0.5, 0.9);
        let out = dedup_tuples(vec![a.clone(), c.clone(), b.clone()]);
        assert_eq!(out, vec![c.clone(), b]);
        assert_eq!(dedup_tuples(vec![a.clone(), c.clone()]), vec![a, c]);
    }

    #[test]
    fn split_keeps_workflows_together() {
        let ts: Vec<_> = (0..70).map(|i| tuple(i, 0.5, 0.9)).collect();
        let (train, hold) = split_by_workflow(ts, 0.3, 5);
        assert_eq!(train.len() + hold.len(), 70);
        let a: BTreeSet<_> = train.iter().map(|t| &t.workflow_id).collect();
        let b: BTreeSet<_> = hold.iter().map(|t| &t.workflow_id).collect();
        assert!(a.is_disjoint(&b));
    }
}
