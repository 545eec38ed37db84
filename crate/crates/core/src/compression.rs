//! Compression backends, storage budgets and budget packing.
//!
//! A backend maps a payload and a quality `q` to compressed bytes. Packing
//! walks a mean-of-feature ranking in order and keeps every sample whose
//! compressed size still fits the remaining budget, stopping at the first
//! one that does not: `g(q)` is the length of that prefix.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::DatasetManifest;
use crate::selection::ClassRanking;

/// Uncompressed reference quality; `N^mb` is the packed count at this quality.
pub const Q_MAX: u8 = 100;

#[derive(Debug, Error)]
pub enum CompressionError {
    #[error("quality {q} outside backend range [{min}, {max}]")]
    QualityOutOfRange { q: u8, min: u8, max: u8 },
    #[error("undecodable payload: {0}")]
    Undecodable(String),
    #[error("unknown backend {0:?} (expected jpeg, synthetic or identity)")]
    UnknownBackend(String),
    #[error("unknown sample id {0:?}")]
    UnknownSample(String),
    #[error("cannot read payload {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityRange {
    pub min: u8,
    pub max: u8,
}

impl QualityRange {
    pub fn contains(&self, q: u8) -> bool {
        (self.min..=self.max).contains(&q)
    }

    pub fn check(&self, q: u8) -> Result<(), CompressionError> {
        if self.contains(q) {
            Ok(())
        } else {
            Err(CompressionError::QualityOutOfRange {
                q,
                min: self.min,
                max: self.max,
            })
        }
    }
}

/// The compression function `F_q^c`.
///
/// Implementations must be deterministic: the same payload at the same
/// quality always produces the same bytes.
pub trait Compressor: Send + Sync {
    fn name(&self) -> &'static str;

    fn quality_range(&self) -> QualityRange {
        QualityRange { min: 1, max: Q_MAX }
    }

    fn compress(&self, payload: &[u8], q: u8) -> Result<Vec<u8>, CompressionError>;

    /// Compressed size predicted from the original size alone, for backends
    /// with a closed-form size model. `None` means the payload must be encoded.
    fn size_model(&self, _original_bytes: u64, _q: u8) -> Option<u64> {
        None
    }

    /// True when compressed samples decode to features identical to the originals.
    fn preserves_features(&self) -> bool {
        false
    }
}

/// `max(1, round(s0 * q / 100))`, the linear synthetic size model.
pub fn linear_size(original_bytes: u64, q: u8) -> u64 {
    let scaled = (original_bytes as f64 * q as f64 / 100.0).round() as u64;
    scaled.max(1)
}

fn truncate_cycle(payload: &[u8], q: u8) -> Result<Vec<u8>, CompressionError> {
    if payload.is_empty() {
        return Err(CompressionError::Undecodable("empty payload".into()));
    }
    let len = linear_size(payload.len() as u64, q) as usize;
    Ok(payload.iter().cycle().take(len).copied().collect())
}

/// Degradation stand-in whose output length follows [`linear_size`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticBackend;

impl Compressor for SyntheticBackend {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn compress(&self, payload: &[u8], q: u8) -> Result<Vec<u8>, CompressionError> {
        self.quality_range().check(q)?;
        truncate_cycle(payload, q)
    }

    fn size_model(&self, original_bytes: u64, q: u8) -> Option<u64> {
        Some(linear_size(original_bytes, q))
    }
}

/// Idealized codec: sizes follow the linear model but features are untouched,
/// so every volume ratio is exactly one.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityBackend;

impl Compressor for IdentityBackend {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn compress(&self, payload: &[u8], q: u8) -> Result<Vec<u8>, CompressionError> {
        self.quality_range().check(q)?;
        truncate_cycle(payload, q)
    }

    fn size_model(&self, original_bytes: u64, q: u8) -> Option<u64> {
        Some(linear_size(original_bytes, q))
    }

    fn preserves_features(&self) -> bool {
        true
    }
}

/// Baseline JPEG via the `image` crate. At `q = 100` a payload that is
/// already JPEG is stored as-is.
#[derive(Debug, Clone, Copy, Default)]
pub struct JpegBackend;

impl Compressor for JpegBackend {
    fn name(&self) -> &'static str {
        "jpeg"
    }

    fn compress(&self, payload: &[u8], q: u8) -> Result<Vec<u8>, CompressionError> {
        self.quality_range().check(q)?;
        let format = image::guess_format(payload).map_err(|e| CompressionError::Undecodable(e.to_string()))?;
        if q == Q_MAX && format == ImageFormat::Jpeg {
            return Ok(payload.to_vec());
        }
        let img = image::load_from_memory_with_format(payload, format)
            .map_err(|e| CompressionError::Undecodable(e.to_string()))?;
        let img = match img {
            DynamicImage::ImageLuma8(_) => img,
            other => DynamicImage::ImageRgb8(other.to_rgb8()),
        };
        let mut out = Cursor::new(Vec::new());
        JpegEncoder::new_with_quality(&mut out, q)
            .encode_image(&img)
            .map_err(|e| CompressionError::Undecodable(e.to_string()))?;
        Ok(out.into_inner())
    }
}

pub fn backend_by_name(name: &str) -> Result<Box<dyn Compressor>, CompressionError> {
    match name {
        "jpeg" => Ok(Box::new(JpegBackend)),
        "synthetic" => Ok(Box::new(SyntheticBackend)),
        "identity" => Ok(Box::new(IdentityBackend)),
        other => Err(CompressionError::UnknownBackend(other.to_string())),
    }
}

/// Byte size of sample `id` compressed at `q`, read from the manifest when
/// the backend has a size model and by encoding the payload otherwise.
pub fn sample_compressed_size(
    backend: &dyn Compressor,
    manifest: &DatasetManifest,
    id: &str,
    q: u8,
) -> Result<u64, CompressionError> {
    backend.quality_range().check(q)?;
    let sample = manifest
        .sample(id)
        .ok_or_else(|| CompressionError::UnknownSample(id.to_string()))?;
    if let Some(size) = backend.size_model(sample.original_byte_size, q) {
        return Ok(size);
    }
    let path = manifest.payload_path(sample);
    let payload = std::fs::read(&path).map_err(|source| CompressionError::Io { path, source })?;
    Ok(backend.compress(&payload, q)?.len() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetScope {
    PerClass,
    PerPhase,
}

impl fmt::Display for BudgetScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BudgetScope::PerClass => "per_class",
            BudgetScope::PerPhase => "per_phase",
        })
    }
}

/// Storage budget expressed as `K` equivalent original samples per scope key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageBudget {
    pub scope: BudgetScope,
    pub equivalent_originals: u64,
    pub resolved_bytes: BTreeMap<String, u64>,
}

impl StorageBudget {
    /// Resolves `K x mean original size` for every class (or phase) that has samples.
    pub fn resolve(manifest: &DatasetManifest, equivalent_originals: u64, scope: BudgetScope) -> Self {
        let mut sums: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for s in &manifest.samples {
            let e = sums
                .entry(Self::key_for(scope, &s.class_label, s.phase_index))
                .or_default();
            e.0 += s.original_byte_size;
            e.1 += 1;
        }
        let resolved_bytes = sums
            .into_iter()
            .map(|(k, (total, n))| {
                let mean = total as f64 / n as f64;
                let bytes = (equivalent_originals as f64 * mean).round() as u64;
                (k, bytes.max(1))
            })
            .collect();
        StorageBudget {
            scope,
            equivalent_originals,
            resolved_bytes,
        }
    }

    pub fn key_for(scope: BudgetScope, class_label: &str, phase_index: usize) -> String {
        match scope {
            BudgetScope::PerClass => class_label.to_string(),
            BudgetScope::PerPhase => phase_index.to_string(),
        }
    }

    pub fn bytes_for(&self, key: &str) -> Option<u64> {
        self.resolved_bytes.get(key).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingResult {
    pub quality: u8,
    pub selected_ids: Vec<String>,
    pub n_q_mb: usize,
    pub bytes_used: u64,
    /// `r_q = n_q_mb / N^mb`; `None` when nothing fits uncompressed.
    pub compression_rate: Option<f64>,
}

impl PackingResult {
    pub fn set_reference(&mut self, n_uncompressed: usize) {
        self.compression_rate = compression_rate(self.n_q_mb, n_uncompressed);
    }
}

pub fn compression_rate(n_q: usize, n_uncompressed: usize) -> Option<f64> {
    (n_uncompressed > 0).then(|| n_q as f64 / n_uncompressed as f64)
}

/// Greedy prefix packing with a fallible sizer. The sizer is only called for
/// the accepted prefix plus the first rejected id.
pub fn try_pack_for_quality<S, E, F>(
    ranked_ids: &[S],
    q: u8,
    budget_bytes: u64,
    mut sizer: F,
) -> Result<PackingResult, E>
where
    S: AsRef<str>,
    F: FnMut(&str) -> Result<u64, E>,
{
    let mut used = 0u64;
    let mut selected = Vec::new();
    for id in ranked_ids {
        let id = id.as_ref();
        let size = sizer(id)?;
        match used.checked_add(size) {
            Some(total) if total <= budget_bytes => {
                used = total;
                selected.push(id.to_string());
            }
            _ => break,
        }
    }
    Ok(PackingResult {
        quality: q,
        n_q_mb: selected.len(),
        selected_ids: selected,
        bytes_used: used,
        compression_rate: None,
    })
}

pub fn pack_for_quality<S: AsRef<str>>(
    ranked_ids: &[S],
    q: u8,
    budget_bytes: u64,
    mut sizer: impl FnMut(&str) -> u64,
) -> PackingResult {
    let r: Result<_, std::convert::Infallible> = try_pack_for_quality(ranked_ids, q, budget_bytes, |id| Ok(sizer(id)));
    match r {
        Ok(p) => p,
        Err(never) => match never {},
    }
}

/// Packs once per candidate quality (ascending) and fills in `r_q` against
/// the packing at [`Q_MAX`].
pub fn quantity_curve<S, E, F>(
    ranked_ids: &[S],
    qualities: &[u8],
    budget_bytes: u64,
    mut sizer: F,
) -> Result<Vec<PackingResult>, E>
where
    S: AsRef<str>,
    F: FnMut(&str, u8) -> Result<u64, E>,
{
    let reference = try_pack_for_quality(ranked_ids, Q_MAX, budget_bytes, |id| sizer(id, Q_MAX))?;
    qualities
        .iter()
        .map(|&q| {
            let mut p = try_pack_for_quality(ranked_ids, q, budget_bytes, |id| sizer(id, q))?;
            p.set_reference(reference.n_q_mb);
            Ok(p)
        })
        .collect()
}

/// Merges per-class rankings for a per-phase budget: rank 0 of every class
/// (in class-label order), then rank 1, and so on. Any prefix of the result
/// restricted to one class is a prefix of that class's ranking.
pub fn interleave_rankings(rankings: &[ClassRanking]) -> Vec<String> {
    let mut sorted: Vec<&ClassRanking> = rankings.iter().collect();
    sorted.sort_by(|a, b| a.class_label.cmp(&b.class_label));
    let longest = sorted.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(sorted.iter().map(|r| r.len()).sum());
    for rank in 0..longest {
        for r in &sorted {
            if let Some(id) = r.ranked_ids.get(rank) {
                out.push(id.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn sized(sizes: &[u64]) -> impl Fn(&str) -> u64 + '_ {
        move |id: &str| sizes[id[1..].parse::<usize>().unwrap()]
    }

    #[test]
    fn synthetic_formula_cases() {
        let payload = vec![7u8; 1000];
        assert_eq!(SyntheticBackend.compress(&payload, 50).unwrap().len(), 500);
        assert_eq!(SyntheticBackend.compress(&payload, 100).unwrap(), payload);
        assert_eq!(linear_size(3, 10), 1);
        assert_eq!(linear_size(1000, 25), 250);
    }

    #[test]
    fn out_of_range_quality() {
        let err = SyntheticBackend.compress(b"abc", 0).unwrap_err();
        assert!(matches!(err, CompressionError::QualityOutOfRange { q: 0, .. }));
        assert!(JpegBackend.compress(b"abc", 101).is_err());
    }

    #[test]
    fn jpeg_rejects_garbage() {
        assert!(matches!(
            JpegBackend.compress(b"definitely not an image", 50),
            Err(CompressionError::Undecodable(_))
        ));
    }

    #[test]
    fn packing_examples() {
        let sizes = [4, 3, 3, 2];
        let p = pack_for_quality(&ids(4), 50, 10, sized(&sizes));
        assert_eq!((p.n_q_mb, p.bytes_used), (3, 10));
        assert_eq!(p.selected_ids, vec!["s0", "s1", "s2"]);

        let p = pack_for_quality(&ids(4), 50, 9, sized(&sizes));
        assert_eq!((p.n_q_mb, p.bytes_used), (2, 7));

        let p = pack_for_quality(&ids(4), 50, 3, sized(&sizes));
        assert_eq!((p.n_q_mb, p.bytes_used), (0, 0));
        assert!(p.selected_ids.is_empty());
    }

    #[test]
    fn packing_stops_at_first_misfit() {
        // the fourth id would fit on its own but packing is a prefix
        let sizes = [4, 3, 5, 1];
        let p = pack_for_quality(&ids(4), 50, 10, sized(&sizes));
        assert_eq!(p.n_q_mb, 2);
    }

    #[test]
    fn synthetic_quantity_curve() {
        let ranked = ids(200);
        let curve: Result<_, std::convert::Infallible> =
            quantity_curve(&ranked, &[10, 50, 100], 1000, |_, q| Ok(linear_size(100, q)));
        let curve = curve.unwrap();
        let ns: Vec<usize> = curve.iter().map(|p| p.n_q_mb).collect();
        assert_eq!(ns, vec![100, 20, 10]);
        assert_eq!(curve[2].compression_rate, Some(1.0));
        assert_eq!(curve[0].compression_rate, Some(10.0));
    }

    #[test]
    fn compression_rate_on_reference_counts() {
        // 20 originals per class, 85 compressed samples at q = 50
        assert_eq!(compression_rate(85, 20), Some(4.25));
        assert_eq!(compression_rate(20, 20), Some(1.0));
        assert_eq!(compression_rate(3, 0), None);
        // quantities for q = 90, 50, 10 decrease with quality
        let ns = [(10, 200), (50, 85), (90, 37)];
        assert!(ns.windows(2).all(|w| w[0].1 > w[1].1));
    }

    #[test]
    fn interleave_keeps_class_prefixes() {
        let r = |c: &str, ids: &[&str]| ClassRanking {
            class_label: c.into(),
            ranked_ids: ids.iter().map(|s| s.to_string()).collect(),
            distances: vec![0.0; ids.len()],
        };
        let merged = interleave_rankings(&[r("b", &["b0", "b1"]), r("a", &["a0", "a1", "a2"])]);
        assert_eq!(merged, vec!["a0", "b0", "a1", "b1", "a2"]);
    }

    #[test]
    fn budget_resolution_uses_mean_size() {
        use crate::features::{PhaseDescriptor, SampleRecord};
        let rec = |id: &str, class: &str, phase: usize, bytes: u64| SampleRecord {
            id: id.into(),
            class_label: class.into(),
            phase_index: phase,
            payload_path: format!("{id}.bin").into(),
            original_byte_size: bytes,
        };
        let m = DatasetManifest {
            phases: vec![
                PhaseDescriptor {
                    index: 0,
                    classes: vec!["a".into()],
                },
                PhaseDescriptor {
                    index: 1,
                    classes: vec!["b".into()],
                },
            ],
            samples: vec![rec("x", "a", 0, 100), rec("y", "a", 0, 101), rec("z", "b", 1, 7)],
            base_dir: Default::default(),
        };
        let b = StorageBudget::resolve(&m, 20, BudgetScope::PerClass);
        assert_eq!(b.bytes_for("a"), Some(2010));
        assert_eq!(b.bytes_for("b"), Some(140));
        let b = StorageBudget::resolve(&m, 3, BudgetScope::PerPhase);
        assert_eq!(b.bytes_for("0"), Some(302));
        assert_eq!(b.bytes_for("1"), Some(21));
    }
}
