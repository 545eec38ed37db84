//! Gram log-volumes of L2-normalized feature columns and the volume ratio `R_q`.
//!
//! For unit columns `M`, `Vol^2 = det(M^T M)`. Log-volumes come from a
//! Cholesky factorization of the Gram matrix, so determinants are never
//! formed directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;

/// Diagonal jitter levels tried in order until the Gram factorizes.
pub const JITTER_LEVELS: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Original,
    Compressed,
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("zero column for sample {0:?}")]
    ZeroColumn(String),
    #[error("empty subset")]
    Empty,
    #[error("rank deficient: {count} columns in dimension {dim}")]
    RankDeficient { count: usize, dim: usize },
    #[error("gram matrix not positive definite after jitter {tried:?}")]
    NearSingular { tried: Vec<f64> },
    #[error("misaligned matrices: {0}")]
    Misaligned(String),
    #[error("{side:?} side: {source}")]
    Side {
        side: Side,
        #[source]
        source: Box<VolumeError>,
    },
    #[error("cannot aggregate an empty report list")]
    NoReports,
    #[error("mixed qualities in aggregation: {0} and {1}")]
    MixedQualities(u8, u8),
}

/// L2-normalized columns in `f64`, column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitColumns {
    dim: usize,
    values: Vec<f64>,
    sample_ids: Vec<String>,
}

impl UnitColumns {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn gram(&self) -> Vec<f64> {
        let n = self.count();
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = self.column(i).iter().zip(self.column(j)).map(|(a, b)| a * b).sum();
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
        g
    }
}

pub fn normalize_columns(m: &FeatureMatrix) -> Result<UnitColumns, VolumeError> {
    UnitColumns::normalize(
        m.dim(),
        m.columns()
            .map(|(id, col)| (id.to_string(), col.iter().map(|&v| v as f64).collect())),
    )
}

impl UnitColumns {
    /// Normalizes `f64` columns directly, skipping the `f32` storage of
    /// [`FeatureMatrix`]. Columns must all have length `dim`.
    pub fn normalize(dim: usize, columns: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self, VolumeError> {
        let mut values = Vec::new();
        let mut sample_ids = Vec::new();
        for (id, col) in columns {
            if col.len() != dim {
                return Err(VolumeError::Misaligned(format!(
                    "column {id:?} has length {}, expected {dim}",
                    col.len()
                )));
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(VolumeError::ZeroColumn(id));
            }
            values.extend(col.iter().map(|v| v / norm));
            sample_ids.push(id);
        }
        Ok(UnitColumns {
            dim,
            values,
            sample_ids,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogVolume {
    /// `0.5 * ln det(M^T M + jitter * I)`
    pub value: f64,
    pub jitter: f64,
}

/// Sum of `ln L_ii` for the Cholesky factor of `a + jitter*I`, or `None` if a
/// pivot is not strictly positive.
fn cholesky_half_logdet(a: &[f64], n: usize, jitter: f64) -> Option<f64> {
    let mut l = vec![0.0f64; n * n];
    let mut half_logdet = 0.0;
    for j in 0..n {
        let mut diag = a[j * n + j] + jitter;
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !diag.is_finite() || diag <= 0.0 {
            return None;
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        half_logdet += ljj.ln();
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some(half_logdet)
}

fn check_rank(m: &UnitColumns) -> Result<(), VolumeError> {
    if m.count() == 0 {
        return Err(VolumeError::Empty);
    }
    if m.count() > m.dim() {
        return Err(VolumeError::RankDeficient {
            count: m.count(),
            dim: m.dim(),
        });
    }
    Ok(())
}

pub fn log_volume_with_jitter(m: &UnitColumns, jitter: f64) -> Result<f64, VolumeError> {
    check_rank(m)?;
    cholesky_half_logdet(&m.gram(), m.count(), jitter).ok_or(VolumeError::NearSingular { tried: vec![jitter] })
}

/// Half log-determinant of the Gram of unit columns, escalating through
/// [`JITTER_LEVELS`] when the factorization fails.
pub fn log_volume(m: &UnitColumns) -> Result<LogVolume, VolumeError> {
    check_rank(m)?;
    let gram = m.gram();
    for &jitter in &JITTER_LEVELS {
        if let Some(value) = cholesky_half_logdet(&gram, m.count(), jitter) {
            return Ok(LogVolume { value, jitter });
        }
    }
    Err(VolumeError::NearSingular {
        tried: JITTER_LEVELS.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub quality: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<String>,
    pub n: usize,
    pub log_vol_original: f64,
    pub log_vol_compressed: f64,
    pub log_ratio: f64,
    pub ratio: f64,
    pub jitter: f64,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class: Option<Vec<VolumeReport>>,
}

/// `R_q = Vol(compressed) / Vol(original)` for column-aligned matrices.
///
/// Both sides are factorized at the same jitter level: the smallest level at
/// which both Grams are positive definite.
pub fn volume_ratio(
    compressed: &FeatureMatrix,
    original: &FeatureMatrix,
    quality: u8,
) -> Result<VolumeReport, VolumeError> {
    if compressed.count() != original.count() {
        return Err(VolumeError::Misaligned(format!(
            "compressed has {} columns, original has {}",
            compressed.count(),
            original.count()
        )));
    }
    if compressed.dim() != original.dim() {
        return Err(VolumeError::Misaligned(format!(
            "compressed dim {}, original dim {}",
            compressed.dim(),
            original.dim()
        )));
    }
    if let Some((c, o)) = compressed
        .sample_ids()
        .iter()
        .zip(original.sample_ids())
        .find(|(c, o)| c != o)
    {
        return Err(VolumeError::Misaligned(format!("column id {c:?} vs {o:?}")));
    }
    let side = |side: Side| {
        move |e: VolumeError| VolumeError::Side {
            side,
            source: Box::new(e),
        }
    };
    let orig = normalize_columns(original).map_err(side(Side::Original))?;
    let comp = normalize_columns(compressed).map_err(side(Side::Compressed))?;
    unit_volume_ratio(&comp, &orig, quality)
}

/// [`volume_ratio`] on already-normalized, column-aligned inputs.
pub fn unit_volume_ratio(
    compressed: &UnitColumns,
    original: &UnitColumns,
    quality: u8,
) -> Result<VolumeReport, VolumeError> {
    if compressed.count() != original.count() || compressed.dim() != original.dim() {
        return Err(VolumeError::Misaligned(format!(
            "compressed is {}x{}, original is {}x{}",
            compressed.dim(),
            compressed.count(),
            original.dim(),
            original.count()
        )));
    }
    let side = |side: Side| {
        move |e: VolumeError| VolumeError::Side {
            side,
            source: Box::new(e),
        }
    };
    let (orig, comp) = (original, compressed);
    check_rank(orig).map_err(side(Side::Original))?;
    let (g_orig, g_comp) = (orig.gram(), comp.gram());
    let n = orig.count();
    let mut last_failure = Side::Original;
    for &jitter in &JITTER_LEVELS {
        let lo = cholesky_half_logdet(&g_orig, n, jitter);
        let lc = cholesky_half_logdet(&g_comp, n, jitter);
        match (lo, lc) {
            (Some(lo), Some(lc)) => {
                let log_ratio = lc - lo;
                return Ok(VolumeReport {
                    quality,
                    label: None,
                    n,
                    log_vol_original: lo,
                    log_vol_compressed: lc,
                    log_ratio,
                    ratio: log_ratio.exp(),
                    jitter,
                    truncated: false,
                    per_class: None,
                });
            }
            (None, _) => last_failure = Side::Original,
            (Some(_), None) => last_failure = Side::Compressed,
        }
    }
    Err(VolumeError::Side {
        side: last_failure,
        source: Box::new(VolumeError::NearSingular {
            tried: JITTER_LEVELS.to_vec(),
        }),
    })
}

/// Aggregates per-class reports into one phase report whose log-ratio is the
/// mean of the per-class log-ratios (a geometric mean of ratios).
pub fn phase_ratio(per_class: Vec<VolumeReport>) -> Result<VolumeReport, VolumeError> {
    let first = per_class.first().ok_or(VolumeError::NoReports)?;
    let quality = first.quality;
    if let Some(r) = per_class.iter().find(|r| r.quality != quality) {
        return Err(VolumeError::MixedQualities(quality, r.quality));
    }
    let k = per_class.len() as f64;
    let mean = |f: fn(&VolumeReport) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    let log_vol_original = mean(|r| r.log_vol_original);
    let log_vol_compressed = mean(|r| r.log_vol_compressed);
    let log_ratio = mean(|r| r.log_ratio);
    Ok(VolumeReport {
        quality,
        label: None,
        n: per_class.iter().map(|r| r.n).sum(),
        log_vol_original,
        log_vol_compressed,
        log_ratio,
        ratio: log_ratio.exp(),
        jitter: per_class.iter().map(|r| r.jitter).fold(0.0, f64::max),
        truncated: per_class.iter().any(|r| r.truncated),
        per_class: Some(per_class),
    })
}

/// Arithmetic mean of the phase ratios for one quality.
pub fn averaged_ratio(phase_reports: &[VolumeReport]) -> Result<f64, VolumeError> {
    if phase_reports.is_empty() {
        return Err(VolumeError::NoReports);
    }
    Ok(phase_reports.iter().map(|r| r.ratio).sum::<f64>() / phase_reports.len() as f64)
}
