//! On-disk compressed replay buffer.
//!
//! Layout under the buffer directory:
//!
//! ```text
//! manifest.json
//! <phase>/<class>/<id>.bin
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compression::{
    interleave_rankings, try_pack_for_quality, BudgetScope, CompressionError, Compressor, StorageBudget,
};
use crate::features::DatasetManifest;
use crate::fsutil;
use crate::selection::ClassRanking;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("entry {id:?}: blob has {found} bytes on disk, manifest says {expected}")]
    Tampered { id: String, expected: u64, found: u64 },
    #[error("entry {id:?}: blob {path} is missing")]
    MissingBlob { id: String, path: PathBuf },
    #[error("scope {key:?} uses {used} bytes, budget is {budget}")]
    BudgetViolation { key: String, used: u64, budget: u64 },
    #[error("manifest invariant violated: {0}")]
    Invariant(String),
    #[error("{0:?} cannot be used as a path component")]
    InvalidName(String),
    #[error("sample {id:?}: {source}")]
    Compression {
        id: String,
        #[source]
        source: CompressionError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BufferError + '_ {
    move |source| BufferError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub id: String,
    pub class: String,
    pub phase: usize,
    pub rank: usize,
    pub quality: u8,
    pub bytes: u64,
    /// Blob location relative to the buffer directory, `/`-separated.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferManifest {
    pub version: u32,
    pub budget: StorageBudget,
    pub chosen_quality: u8,
    pub entries: Vec<BufferEntry>,
    pub totals: BTreeMap<String, u64>,
}

impl BufferManifest {
    fn scope_key(&self, e: &BufferEntry) -> String {
        StorageBudget::key_for(self.budget.scope, &e.class, e.phase)
    }

    fn recompute_totals(&mut self) {
        let mut totals: BTreeMap<String, u64> = self.budget.resolved_bytes.keys().map(|k| (k.clone(), 0)).collect();
        for e in &self.entries {
            *totals.entry(self.scope_key(e)).or_default() += e.bytes;
        }
        self.totals = totals;
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn count_per_class(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.class.as_str()).or_default() += 1;
        }
        out
    }

    /// Checks totals, budget safety and gap-free ranks.
    pub fn validate(&self) -> Result<(), BufferError> {
        if self.version != MANIFEST_VERSION {
            return Err(BufferError::Version(self.version));
        }
        let mut sums: BTreeMap<String, u64> = BTreeMap::new();
        let mut ranks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for e in &self.entries {
            *sums.entry(self.scope_key(e)).or_default() += e.bytes;
            ranks.entry(e.class.as_str()).or_default().push(e.rank);
        }
        for (key, used) in &sums {
            if self.totals.get(key) != Some(used) {
                return Err(BufferError::Invariant(format!(
                    "totals[{key:?}] = {:?}, entries sum to {used}",
                    self.totals.get(key)
                )));
            }
        }
        for (key, &total) in &self.totals {
            if total != sums.get(key).copied().unwrap_or(0) {
                return Err(BufferError::Invariant(format!(
                    "totals[{key:?}] = {total} has no matching entries"
                )));
            }
            let budget = self
                .budget
                .bytes_for(key)
                .ok_or_else(|| BufferError::Invariant(format!("no budget for scope key {key:?}")))?;
            if total > budget {
                return Err(BufferError::BudgetViolation {
                    key: key.clone(),
                    used: total,
                    budget,
                });
            }
        }
        for (class, mut r) in ranks {
            r.sort_unstable();
            if r.iter().enumerate().any(|(i, &rank)| i != rank) {
                return Err(BufferError::Invariant(format!("ranks of class {class:?} are not 0..n")));
            }
        }
        Ok(())
    }

    fn sort_entries(&mut self) {
        self.entries
            .sort_by(|a, b| (a.phase, &a.class, a.rank).cmp(&(b.phase, &b.class, b.rank)));
    }
}

fn path_component(name: &str) -> Result<&str, BufferError> {
    if name.is_empty() || name == "." || name == ".." || name.contains(['/', '\\']) {
        Err(BufferError::InvalidName(name.to_string()))
    } else {
        Ok(name)
    }
}

/// Compresses the selected prefix of every class at `quality`, writes the
/// blobs and `manifest.json`, and returns the manifest.
pub fn build_buffer(
    quality: u8,
    dataset: &DatasetManifest,
    rankings: &[ClassRanking],
    backend: &dyn Compressor,
    budget: &StorageBudget,
    out_dir: &Path,
) -> Result<BufferManifest, BufferError> {
    let samples: HashMap<&str, _> = dataset.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let class_phase = |r: &ClassRanking| -> usize {
        r.ranked_ids
            .first()
            .and_then(|id| samples.get(id.as_str()))
            .map(|s| s.phase_index)
            .unwrap_or_default()
    };

    let mut groups: BTreeMap<String, Vec<&ClassRanking>> = BTreeMap::new();
    for r in rankings {
        groups
            .entry(StorageBudget::key_for(budget.scope, &r.class_label, class_phase(r)))
            .or_default()
            .push(r);
    }

    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let mut entries = Vec::new();
    for (key, members) in &groups {
        let ranked: Vec<String> = match budget.scope {
            BudgetScope::PerClass => members.iter().flat_map(|r| r.ranked_ids.iter().cloned()).collect(),
            BudgetScope::PerPhase => interleave_rankings(&members.iter().map(|r| (*r).clone()).collect::<Vec<_>>()),
        };
        let bytes = budget
            .bytes_for(key)
            .ok_or_else(|| BufferError::Invariant(format!("no budget for scope key {key:?}")))?;
        let packed = try_pack_for_quality(&ranked, quality, bytes, |id| {
            if let Some(b) = blobs.get(id) {
                return Ok(b.len() as u64);
            }
            let sample = samples.get(id).ok_or_else(|| BufferError::Compression {
                id: id.to_string(),
                source: CompressionError::UnknownSample(id.to_string()),
            })?;
            let path = dataset.payload_path(sample);
            let payload = fs::read(&path).map_err(io_err(&path))?;
            let blob = backend
                .compress(&payload, quality)
                .map_err(|source| BufferError::Compression {
                    id: id.to_string(),
                    source,
                })?;
            let len = blob.len() as u64;
            blobs.insert(id.to_string(), blob);
            Ok(len)
        })?;
        let mut next_rank: HashMap<&str, usize> = HashMap::new();
        for id in &packed.selected_ids {
            let s = samples[id.as_str()];
            let rank = next_rank.entry(s.class_label.as_str()).or_default();
            entries.push(BufferEntry {
                id: id.clone(),
                class: s.class_label.clone(),
                phase: s.phase_index,
                rank: *rank,
                quality,
                bytes: blobs[id].len() as u64,
                path: format!(
                    "{}/{}/{}.bin",
                    s.phase_index,
                    path_component(&s.class_label)?,
                    path_component(id)?
                ),
            });
            *rank += 1;
        }
    }

    let mut manifest = BufferManifest {
        version: MANIFEST_VERSION,
        budget: budget.clone(),
        chosen_quality: quality,
        entries,
        totals: BTreeMap::new(),
    };
    manifest.sort_entries();
    manifest.recompute_totals();
    manifest.validate()?;

    for e in &manifest.entries {
        let path = out_dir.join(&e.path);
        fsutil::write_atomic(&path, &blobs[&e.id]).map_err(io_err(&path))?;
    }
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &BufferManifest, path: &Path) -> Result<(), BufferError> {
    fsutil::write_atomic(path, &fsutil::to_json_bytes(manifest)).map_err(io_err(path))
}

/// A validated buffer ready for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySet {
    pub root: PathBuf,
    pub manifest: BufferManifest,
}

impl ReplaySet {
    pub fn blob_path(&self, entry: &BufferEntry) -> PathBuf {
        self.root.join(&entry.path)
    }
}

pub fn load_buffer(manifest_path: &Path) -> Result<ReplaySet, BufferError> {
    let raw = fs::read(manifest_path).map_err(io_err(manifest_path))?;
    let value: serde_json::Value = serde_json::from_slice(&raw).map_err(|source| BufferError::Json {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    if let Some(v) = value.get("version").and_then(|v| v.as_u64()) {
        if v != MANIFEST_VERSION as u64 {
            return Err(BufferError::Version(v as u32));
        }
    }
    let manifest: BufferManifest = serde_json::from_value(value).map_err(|source| BufferError::Json {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    manifest.validate()?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    for e in &manifest.entries {
        let path = root.join(&e.path);
        let found = match fs::metadata(&path) {
            Ok(m) => m.len(),
            Err(_) => return Err(BufferError::MissingBlob { id: e.id.clone(), path }),
        };
        if found != e.bytes {
            return Err(BufferError::Tampered {
                id: e.id.clone(),
                expected: e.bytes,
                found,
            });
        }
    }
    Ok(ReplaySet { root, manifest })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkSummary {
    pub bytes_before: u64,
    pub bytes_after: u64,
    /// `bytes_after / bytes_before`, 1 for an empty buffer.
    pub stored_fraction: f64,
    /// Classes that kept every entry because they held fewer than requested.
    pub clamped_classes: Vec<String>,
}

fn retain_prefixes(manifest: &BufferManifest, keep: impl Fn(&str) -> usize) -> (BufferManifest, ShrinkSummary) {
    let counts = manifest.count_per_class();
    let clamped_classes = counts
        .iter()
        .filter(|(class, &n)| n < keep(class))
        .map(|(class, _)| class.to_string())
        .collect();
    let mut out = manifest.clone();
    out.entries.retain(|e| e.rank < keep(&e.class));
    out.recompute_totals();
    let bytes_before = manifest.total_bytes();
    let bytes_after = out.total_bytes();
    let stored_fraction = if bytes_before == 0 {
        1.0
    } else {
        bytes_after as f64 / bytes_before as f64
    };
    (
        out,
        ShrinkSummary {
            bytes_before,
            bytes_after,
            stored_fraction,
            clamped_classes,
        },
    )
}

/// Keeps the `keep_per_class` best-ranked entries of every class.
pub fn shrink_buffer(manifest: &BufferManifest, keep_per_class: usize) -> (BufferManifest, ShrinkSummary) {
    retain_prefixes(manifest, |_| keep_per_class)
}

/// Splits `total_bytes` equally over the classes present and keeps, per
/// class, the longest rank prefix that fits its share.
pub fn rebalance_equal(manifest: &BufferManifest, total_bytes: u64) -> (BufferManifest, ShrinkSummary) {
    let mut by_class: BTreeMap<&str, Vec<&BufferEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        by_class.entry(e.class.as_str()).or_default().push(e);
    }
    let share = if by_class.is_empty() {
        0
    } else {
        total_bytes / by_class.len() as u64
    };
    let keep: HashMap<String, usize> = by_class
        .into_iter()
        .map(|(class, mut entries)| {
            entries.sort_by_key(|e| e.rank);
            let mut used = 0u64;
            let n = entries
                .iter()
                .take_while(|e| {
                    used += e.bytes;
                    used <= share
                })
                .count();
            (class.to_string(), n)
        })
        .collect();
    let (out, mut summary) = retain_prefixes(manifest, |c| keep.get(c).copied().unwrap_or(0));
    summary.clamped_classes.clear();
    (out, summary)
}

/// Deletes blobs listed in `before` but not in `after`.
pub fn remove_dropped_blobs(
    root: &Path,
    before: &BufferManifest,
    after: &BufferManifest,
) -> Result<usize, BufferError> {
    let kept: std::collections::HashSet<&str> = after.entries.iter().map(|e| e.path.as_str()).collect();
    let mut removed = 0;
    for e in before.entries.iter().filter(|e| !kept.contains(e.path.as_str())) {
        let path = root.join(&e.path);
        match fs::remove_file(&path) {
            Ok(()) => removed += 1,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => {}
            Err(err) => return Err(BufferError::Io { path, source: err }),
        }
    }
    Ok(removed)
}
