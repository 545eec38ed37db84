//! Feature matrices and dataset manifests.
//!
//! Feature files use a fixed-stride binary layout:
//!
//! ```text
//! bytes 0..4   "FMX1"
//! bytes 4..8   dim   (u32, little-endian)
//! bytes 8..12  count (u32, little-endian)
//! body         dim * count f32 values, little-endian, column-major
//! ```
//!
//! Sample ids live next to the binary file in `<path>.ids.json`, a JSON
//! array with exactly `count` strings.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil;

pub const FMX_MAGIC: &[u8; 4] = b"FMX1";
pub const FMX_HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FeatureIoError {
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("dimension overflow: dim {dim} x count {count} does not fit in memory")]
    DimensionOverflow { dim: u64, count: u64 },
    #[error("body size mismatch: expected {expected} bytes, found {found}")]
    BodySize { expected: u64, found: u64 },
    #[error("non-finite value at column {column}")]
    NonFinite { column: usize },
    #[error("id count mismatch: header says {expected}, sidecar has {found}")]
    IdCountMismatch { expected: usize, found: usize },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("values length {len} is not dim {dim} x count {count}")]
    Shape { dim: usize, count: usize, len: usize },
    #[error("feature dimension must be positive")]
    ZeroDim,
    #[error("unknown sample id {0:?}")]
    UnknownId(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl FeatureIoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        FeatureIoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A `dim x count` matrix of embedding vectors, one column per sample.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    dim: usize,
    values: Vec<f32>,
    sample_ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for FeatureMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.sample_ids == other.sample_ids
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FeatureMatrix {
    pub fn new(dim: usize, values: Vec<f32>, sample_ids: Vec<String>) -> Result<Self, FeatureIoError> {
        if dim == 0 {
            return Err(FeatureIoError::ZeroDim);
        }
        let count = sample_ids.len();
        if dim.checked_mul(count) != Some(values.len()) {
            return Err(FeatureIoError::Shape {
                dim,
                count,
                len: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureIoError::NonFinite { column: pos / dim });
        }
        let mut index = HashMap::with_capacity(count);
        for (j, id) in sample_ids.iter().enumerate() {
            if index.insert(id.clone(), j).is_some() {
                return Err(FeatureIoError::DuplicateId(id.clone()));
            }
        }
        Ok(FeatureMatrix {
            dim,
            values,
            sample_ids,
            index,
        })
    }

    pub fn empty(dim: usize) -> Result<Self, FeatureIoError> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    /// Builds a matrix from columns given as `f64` vectors (rounded to `f32`).
    pub fn from_columns<S: Into<String>>(
        dim: usize,
        columns: impl IntoIterator<Item = (S, Vec<f64>)>,
    ) -> Result<Self, FeatureIoError> {
        let mut values = Vec::new();
        let mut ids = Vec::new();
        for (id, col) in columns {
            let id = id.into();
            if col.len() != dim {
                return Err(FeatureIoError::Shape {
                    dim,
                    count: ids.len() + 1,
                    len: values.len() + col.len(),
                });
            }
            values.extend(col.iter().map(|&v| v as f32));
            ids.push(id);
        }
        Self::new(dim, values, ids)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn column(&self, j: usize) -> &[f32] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn column_of(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&j| self.column(j))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.sample_ids
            .iter()
            .map(String::as_str)
            .zip(self.values.chunks_exact(self.dim))
    }

    /// Returns the columns for `ids`, in the order given.
    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<FeatureMatrix, FeatureIoError> {
        let mut values = Vec::with_capacity(ids.len() * self.dim);
        let mut out_ids = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            let col = self
                .column_of(id)
                .ok_or_else(|| FeatureIoError::UnknownId(id.to_string()))?;
            values.extend_from_slice(col);
            out_ids.push(id.to_string());
        }
        FeatureMatrix::new(self.dim, values, out_ids)
    }
}

pub fn ids_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

/// Parses the binary part of an FMX1 file and attaches `ids`.
pub fn decode_feature_matrix(bytes: &[u8], ids: Vec<String>, path: &Path) -> Result<FeatureMatrix, FeatureIoError> {
    let malformed = |reason: &str| FeatureIoError::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < FMX_HEADER_LEN {
        return Err(malformed("file shorter than 12-byte header"));
    }
    if &bytes[0..4] != FMX_MAGIC {
        return Err(malformed("missing FMX1 magic"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    if dim == 0 {
        return Err(malformed("dim must be positive"));
    }
    let expected = dim
        .checked_mul(count)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(FeatureIoError::DimensionOverflow { dim, count })?;
    let body = &bytes[FMX_HEADER_LEN..];
    if body.len() as u64 != expected {
        return Err(FeatureIoError::BodySize {
            expected,
            found: body.len() as u64,
        });
    }
    let dim = dim as usize;
    let count = count as usize;
    let mut values = Vec::with_capacity(dim * count);
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FeatureIoError::NonFinite { column: k / dim });
        }
        values.push(v);
    }
    if ids.len() != count {
        return Err(FeatureIoError::IdCountMismatch {
            expected: count,
            found: ids.len(),
        });
    }
    FeatureMatrix::new(dim, values, ids)
}

pub fn encode_feature_matrix(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FMX_HEADER_LEN + 4 * m.values.len());
    out.extend_from_slice(FMX_MAGIC);
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    out.extend_from_slice(&(m.count() as u32).to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_feature_matrix(path: &Path) -> Result<FeatureMatrix, FeatureIoError> {
    let bytes = fs::read(path).map_err(|e| FeatureIoError::io(path, e))?;
    let sidecar = ids_sidecar_path(path);
    let raw = fs::read(&sidecar).map_err(|e| FeatureIoError::io(&sidecar, e))?;
    let ids: Vec<String> = serde_json::from_slice(&raw).map_err(|e| FeatureIoError::Json {
        path: sidecar.clone(),
        source: e,
    })?;
    decode_feature_matrix(&bytes, ids, path)
}

pub fn write_feature_matrix(m: &FeatureMatrix, path: &Path) -> Result<(), FeatureIoError> {
    if m.dim > u32::MAX as usize || m.count() > u32::MAX as usize {
        return Err(FeatureIoError::DimensionOverflow {
            dim: m.dim as u64,
            count: m.count() as u64,
        });
    }
    fsutil::write_atomic(path, &encode_feature_matrix(m)).map_err(|e| FeatureIoError::io(path, e))?;
    let sidecar = ids_sidecar_path(path);
    let ids = serde_json::to_vec(&m.sample_ids).expect("string list serializes");
    fsutil::write_atomic(&sidecar, &ids).map_err(|e| FeatureIoError::io(&sidecar, e))
}

/// One training sample as listed in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(rename = "class")]
    pub class_label: String,
    #[serde(rename = "phase")]
    pub phase_index: usize,
    #[serde(rename = "payload")]
    pub payload_path: PathBuf,
    #[serde(rename = "bytes")]
    pub original_byte_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseDescriptor {
    pub index: usize,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub phases: Vec<PhaseDescriptor>,
    pub samples: Vec<SampleRecord>,
    /// Directory relative payload paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), FeatureIoError> {
        let bad = |msg: String| Err(FeatureIoError::Manifest(msg));
        let mut class_phase: HashMap<&str, usize> = HashMap::new();
        let mut seen_index = HashSet::new();
        for phase in &self.phases {
            if !seen_index.insert(phase.index) {
                return bad(format!("phase index {} listed twice", phase.index));
            }
            for class in &phase.classes {
                if let Some(prev) = class_phase.insert(class, phase.index) {
                    return bad(format!("class {class:?} assigned to phases {prev} and {}", phase.index));
                }
            }
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(FeatureIoError::DuplicateId(s.id.clone()));
            }
            match class_phase.get(s.class_label.as_str()) {
                None => {
                    return bad(format!(
                        "sample {:?} has class {:?} not in any phase",
                        s.id, s.class_label
                    ))
                }
                Some(&p) if p != s.phase_index => {
                    return bad(format!(
                        "sample {:?} declares phase {} but class {:?} belongs to phase {p}",
                        s.id, s.phase_index, s.class_label
                    ))
                }
                _ => {}
            }
            if s.original_byte_size == 0 {
                return bad(format!("sample {:?} has zero byte size", s.id));
            }
            let payload = self.payload_path(s);
            if let Ok(meta) = fs::metadata(&payload) {
                if meta.is_file() && meta.len() != s.original_byte_size {
                    return bad(format!(
                        "sample {:?} declares {} bytes but {} has {}",
                        s.id,
                        s.original_byte_size,
                        payload.display(),
                        meta.len()
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn payload_path(&self, sample: &SampleRecord) -> PathBuf {
        if sample.payload_path.is_absolute() {
            sample.payload_path.clone()
        } else {
            self.base_dir.join(&sample.payload_path)
        }
    }

    pub fn phase(&self, index: usize) -> Option<&PhaseDescriptor> {
        self.phases.iter().find(|p| p.index == index)
    }

    /// Samples grouped by class label; classes in label order, samples in manifest order.
    pub fn samples_by_class(&self) -> BTreeMap<&str, Vec<&SampleRecord>> {
        let mut out: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.class_label.as_str()).or_default().push(s);
        }
        out
    }

    pub fn sample(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub fn load_dataset_manifest(path: &Path) -> Result<DatasetManifest, FeatureIoError> {
    let raw = fs::read(path).map_err(|e| FeatureIoError::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_slice(&raw).map_err(|e| FeatureIoError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_dataset_manifest(m: &DatasetManifest, path: &Path) -> Result<(), FeatureIoError> {
    let bytes = fsutil::to_json_bytes(m);
    fsutil::write_atomic(path, &bytes).map_err(|e| FeatureIoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn empty_matrix_roundtrip_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.fmx");
        let m = FeatureMatrix::empty(2).unwrap();
        write_feature_matrix(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"FMX1");
        assert_eq!(fs::read_to_string(ids_sidecar_path(&path)).unwrap(), "[]");
        let back = read_feature_matrix(&path).unwrap();
        assert_eq!(back.dim(), 2);
        assert_eq!(back.count(), 0);
    }

    #[test]
    fn unit_columns_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fmx");
        let m = FeatureMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0], ids(2)).unwrap();
        write_feature_matrix(&m, &path).unwrap();
        assert_eq!(read_feature_matrix(&path).unwrap(), m);
    }

    #[test]
    fn nan_in_body_is_rejected_with_column() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FMX1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 0.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        // quiet NaN, little-endian 0x7fc00000
        bytes.extend_from_slice(&[0x00, 0x00, 0xc0, 0x7f]);
        let err = decode_feature_matrix(&bytes, ids(2), Path::new("x")).unwrap_err();
        assert!(matches!(err, FeatureIoError::NonFinite { column: 1 }));
        assert_eq!(err.to_string(), "non-finite value at column 1");
    }

    #[test]
    fn header_errors_are_distinct() {
        let p = Path::new("x");
        let err = decode_feature_matrix(b"FMX", vec![], p).unwrap_err();
        assert!(matches!(err, FeatureIoError::MalformedHeader { .. }));

        let mut bad_magic = b"FMX2".to_vec();
        bad_magic.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(
            decode_feature_matrix(&bad_magic, vec![], p).unwrap_err(),
            FeatureIoError::MalformedHeader { .. }
        ));

        let mut huge = b"FMX1".to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_feature_matrix(&huge, vec![], p).unwrap_err();
        assert!(
            matches!(
                err,
                FeatureIoError::DimensionOverflow { .. } | FeatureIoError::BodySize { .. }
            ),
            "{err:?}"
        );

        let mut short = b"FMX1".to_vec();
        short.extend_from_slice(&2u32.to_le_bytes());
        short.extend_from_slice(&1u32.to_le_bytes());
        short.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(matches!(
            decode_feature_matrix(&short, ids(1), p).unwrap_err(),
            FeatureIoError::BodySize { expected: 8, found: 4 }
        ));

        let mut ok = b"FMX1".to_vec();
        ok.extend_from_slice(&1u32.to_le_bytes());
        ok.extend_from_slice(&1u32.to_le_bytes());
        ok.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(matches!(
            decode_feature_matrix(&ok, ids(2), p).unwrap_err(),
            FeatureIoError::IdCountMismatch { expected: 1, found: 2 }
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = FeatureMatrix::new(1, vec![0.0, 1.0], vec!["a".into(), "a".into()]).unwrap_err();
        assert!(matches!(err, FeatureIoError::DuplicateId(id) if id == "a"));
    }

    #[test]
    fn select_preserves_requested_order() {
        let m = FeatureMatrix::new(1, vec![0.0, 1.0, 2.0], ids(3)).unwrap();
        let s = m.select(&["s2", "s0"]).unwrap();
        assert_eq!(s.values(), &[2.0, 0.0]);
        assert!(matches!(m.select(&["zz"]), Err(FeatureIoError::UnknownId(_))));
    }

    fn manifest_json(extra_phase_class: bool, samples: &str) -> String {
        let second = if extra_phase_class { r#","a""# } else { "" };
        format!(
            r#"{{"phases":[{{"index":0,"classes":["a","b"]}},{{"index":1,"classes":["c","d"{second}]}}],"samples":[{samples}]}}"#
        )
    }

    #[test]
    fn manifest_two_phases_twelve_samples() {
        let mut samples = Vec::new();
        for (class, phase) in [("a", 0), ("b", 0), ("c", 1), ("d", 1)] {
            for i in 0..3 {
                samples.push(format!(
                    r#"{{"id":"{class}{i}","class":"{class}","phase":{phase},"payload":"p/{class}{i}.bin","bytes":100}}"#
                ));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, manifest_json(false, &samples.join(","))).unwrap();
        let m = load_dataset_manifest(&path).unwrap();
        assert_eq!(m.samples.len(), 12);
        assert_eq!(m.phases.len(), 2);
        assert_eq!(m.phases[1].classes, vec!["c", "d"]);
    }

    #[test]
    fn manifest_class_in_two_phases_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, manifest_json(true, "")).unwrap();
        assert!(matches!(load_dataset_manifest(&path), Err(FeatureIoError::Manifest(_))));
    }

    #[test]
    fn manifest_empty_samples_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, manifest_json(false, "")).unwrap();
        let m = load_dataset_manifest(&path).unwrap();
        assert!(m.samples.is_empty());
    }

    #[test]
    fn manifest_duplicate_id_and_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let s = r#"{"id":"x","class":"a","phase":0,"payload":"x.bin","bytes":3}"#;
        fs::write(&path, manifest_json(false, &format!("{s},{s}"))).unwrap();
        assert!(matches!(
            load_dataset_manifest(&path),
            Err(FeatureIoError::DuplicateId(_))
        ));

        fs::write(dir.path().join("x.bin"), [0u8; 5]).unwrap();
        fs::write(&path, manifest_json(false, s)).unwrap();
        assert!(matches!(load_dataset_manifest(&path), Err(FeatureIoError::Manifest(_))));
        fs::write(dir.path().join("x.bin"), [0u8; 3]).unwrap();
        load_dataset_manifest(&path).unwrap();
    }
}
