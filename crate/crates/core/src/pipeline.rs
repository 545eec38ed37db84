//! File-backed orchestration: load a dataset manifest and its feature files,
//! rank, evaluate candidates, select a quality and build the buffer.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::buffer::{build_buffer, load_buffer, BufferManifest, MANIFEST_FILE};
use crate::compression::{
    backend_by_name, quantity_curve, sample_compressed_size, BudgetScope, CompressionError, Compressor, PackingResult,
    StorageBudget,
};
use crate::features::{
    load_dataset_manifest, read_feature_matrix, write_dataset_manifest, write_feature_matrix, DatasetManifest,
    FeatureIoError, FeatureMatrix, PhaseDescriptor,
};
use crate::fsutil;
use crate::harness::{SyntheticDataset, PAYLOAD_BYTES};
use crate::selection::{rank_all_classes, ClassRanking};
use crate::selector::{
    decide_across_phases, evaluate_candidates, PhaseInput, PhaseReports, QualityCandidateSet, QualityDecision,
    SelectorError,
};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePaths {
    pub original: PathBuf,
    /// Quality -> feature file of the compressed samples.
    #[serde(default)]
    pub qualities: BTreeMap<u8, PathBuf>,
}

/// Pipeline configuration as stored in a JSON config file. Relative paths
/// are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub features: FeaturePaths,
    pub backend: String,
    pub qualities: Vec<u8>,
    pub epsilon: f64,
    pub budget_k: u64,
    pub budget_scope: BudgetScope,
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, FeatureIoError> {
        let raw = fs::read(path).map_err(|e| FeatureIoError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_slice(&raw).map_err(|source| FeatureIoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.features.original);
        self.features.qualities.values_mut().for_each(fix);
        fix(&mut self.out);
    }
}

/// Loaded inputs for one dataset.
pub struct Workspace {
    pub manifest: DatasetManifest,
    pub original: FeatureMatrix,
    pub compressed: BTreeMap<u8, FeatureMatrix>,
    pub backend: Box<dyn Compressor>,
    pub candidates: QualityCandidateSet,
    pub budget: StorageBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub decision: QualityDecision,
    pub phases: Vec<PhaseReports>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeCurve {
    pub scope_key: String,
    pub results: Vec<PackingResult>,
}

impl Workspace {
    /// Loads the manifest and original features; compressed feature files
    /// are read for every candidate unless the backend preserves features.
    pub fn load(cfg: &RunConfig) -> Result<Self, Error> {
        let backend = backend_by_name(&cfg.backend)?;
        let candidates = QualityCandidateSet::new(cfg.qualities.clone(), cfg.epsilon, backend.quality_range())?;
        if cfg.budget_k == 0 {
            return Err(SelectorError::InvalidCandidates("budget_k must be positive".into()).into());
        }
        let manifest = load_dataset_manifest(&cfg.manifest)?;
        let original = read_feature_matrix(&cfg.features.original)?;
        let mut compressed = BTreeMap::new();
        for &q in &candidates.candidates {
            let m = if backend.preserves_features() {
                original.clone()
            } else {
                let path = cfg
                    .features
                    .qualities
                    .get(&q)
                    .ok_or(SelectorError::MissingFeatures(q))?;
                read_feature_matrix(path)?
            };
            compressed.insert(q, m);
        }
        let budget = StorageBudget::resolve(&manifest, cfg.budget_k, cfg.budget_scope);
        Ok(Workspace {
            manifest,
            original,
            compressed,
            backend,
            candidates,
            budget,
        })
    }

    pub fn rankings(&self) -> Result<Vec<ClassRanking>, Error> {
        Ok(rank_all_classes(&self.manifest, &self.original)?)
    }

    fn phase_rankings(&self, rankings: &[ClassRanking], phase: &PhaseDescriptor) -> Vec<ClassRanking> {
        rankings
            .iter()
            .filter(|r| phase.classes.contains(&r.class_label))
            .cloned()
            .collect()
    }

    fn sizer(&self) -> impl FnMut(&str, u8) -> Result<u64, CompressionError> + '_ {
        let mut cache: HashMap<(String, u8), u64> = HashMap::new();
        move |id: &str, q: u8| {
            if let Some(&s) = cache.get(&(id.to_string(), q)) {
                return Ok(s);
            }
            let s = sample_compressed_size(self.backend.as_ref(), &self.manifest, id, q)?;
            cache.insert((id.to_string(), q), s);
            Ok(s)
        }
    }

    /// Candidate reports for every phase that has ranked classes.
    pub fn evaluate(&self, rankings: &[ClassRanking]) -> Result<Vec<PhaseReports>, Error> {
        let mut sizer = self.sizer();
        let mut out = Vec::new();
        for phase in &self.manifest.phases {
            let phase_rankings = self.phase_rankings(rankings, phase);
            if phase_rankings.is_empty() {
                continue;
            }
            let input = PhaseInput {
                phase_index: phase.index,
                rankings: &phase_rankings,
                original: &self.original,
                compressed: &self.compressed,
            };
            let reports = evaluate_candidates(&input, &self.candidates, &self.budget, &mut sizer)?;
            out.push(PhaseReports {
                phase: phase.index,
                reports,
            });
        }
        Ok(out)
    }

    pub fn select(&self, rankings: &[ClassRanking]) -> Result<SelectionReport, Error> {
        let phases = self.evaluate(rankings)?;
        let decision = decide_across_phases(&phases, &self.candidates)?;
        Ok(SelectionReport { decision, phases })
    }

    /// Quantity curve per scope key (class label or phase index).
    pub fn packing_curves(&self, rankings: &[ClassRanking]) -> Result<Vec<ScopeCurve>, Error> {
        let mut sizer = self.sizer();
        let mut groups: BTreeMap<String, Vec<ClassRanking>> = BTreeMap::new();
        for phase in &self.manifest.phases {
            for r in self.phase_rankings(rankings, phase) {
                let key = StorageBudget::key_for(self.budget.scope, &r.class_label, phase.index);
                groups.entry(key).or_default().push(r);
            }
        }
        let mut out = Vec::with_capacity(groups.len());
        for (key, members) in groups {
            let ranked = match self.budget.scope {
                BudgetScope::PerClass => members[0].ranked_ids.clone(),
                BudgetScope::PerPhase => crate::compression::interleave_rankings(&members),
            };
            let bytes = self
                .budget
                .bytes_for(&key)
                .ok_or_else(|| SelectorError::MissingBudget(key.clone()))?;
            let results = quantity_curve(&ranked, &self.candidates.candidates, bytes, &mut sizer)?;
            out.push(ScopeCurve {
                scope_key: key,
                results,
            });
        }
        Ok(out)
    }

    /// Builds the buffer at `quality` under `out_dir` and reloads it to check
    /// the stored blobs against the manifest.
    pub fn build_buffer(
        &self,
        rankings: &[ClassRanking],
        quality: u8,
        out_dir: &Path,
    ) -> Result<BufferManifest, Error> {
        self.backend.quality_range().check(quality)?;
        let manifest = build_buffer(
            quality,
            &self.manifest,
            rankings,
            self.backend.as_ref(),
            &self.budget,
            out_dir,
        )?;
        load_buffer(&out_dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }
}

/// Deterministic stand-in payload of `PAYLOAD_BYTES` bytes for a synthetic sample.
pub fn synthetic_payload(id: &str) -> Vec<u8> {
    let seed = id.bytes().fold(17u32, |h, b| h.wrapping_mul(31).wrapping_add(b as u32));
    (0..PAYLOAD_BYTES as u32)
        .map(|i| (seed.wrapping_add(i.wrapping_mul(2654435761)) >> 24) as u8)
        .collect()
}

/// Writes a synthetic dataset as on-disk inputs under `dir`: manifest,
/// payloads, original and per-quality feature files, test features and a
/// `config.json` for the CLI. Returns the config path.
pub fn write_synthetic_fixture(
    ds: &SyntheticDataset,
    dir: &Path,
    candidates: &QualityCandidateSet,
    budget_k: u64,
) -> Result<PathBuf, Error> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| FeatureIoError::io(&p, e)
    };
    for s in &ds.manifest.samples {
        let path = dir.join(&s.payload_path);
        fsutil::write_atomic(&path, &synthetic_payload(&s.id)).map_err(io(&path))?;
    }
    let mut manifest = ds.manifest.clone();
    manifest.base_dir = dir.to_path_buf();
    write_dataset_manifest(&manifest, &dir.join("manifest.json"))?;

    let features = dir.join("features");
    write_feature_matrix(&ds.original, &features.join("original.fmx"))?;
    write_feature_matrix(&ds.test, &features.join("test.fmx"))?;
    let labels = fsutil::to_json_bytes(&ds.test_labels);
    let labels_path = features.join("test.labels.json");
    fsutil::write_atomic(&labels_path, &labels).map_err(io(&labels_path))?;
    let mut qualities = BTreeMap::new();
    for &q in &candidates.candidates {
        let rel = PathBuf::from(format!("features/q{q:03}.fmx"));
        write_feature_matrix(&ds.compressed_at(q), &dir.join(&rel))?;
        qualities.insert(q, rel);
    }
    let cfg = RunConfig {
        manifest: "manifest.json".into(),
        features: FeaturePaths {
            original: "features/original.fmx".into(),
            qualities,
        },
        backend: "synthetic".into(),
        qualities: candidates.candidates.clone(),
        epsilon: candidates.epsilon,
        budget_k,
        budget_scope: BudgetScope::PerClass,
        out: "out".into(),
        seed: ds.config.seed,
    };
    let path = dir.join("config.json");
    fsutil::write_atomic(&path, &fsutil::to_json_bytes(&cfg)).map_err(io(&path))?;
    let synth_path = dir.join("synthetic.json");
    fsutil::write_atomic(&synth_path, &fsutil::to_json_bytes(&ds.config)).map_err(io(&synth_path))?;
    Ok(path)
}
