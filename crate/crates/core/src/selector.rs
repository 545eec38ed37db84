//! Quality selection: among the candidate qualities, pick the one that packs
//! the most samples while the feature-volume ratio stays within
//! `|R_q - 1| < epsilon`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compression::{
    compression_rate, interleave_rankings, try_pack_for_quality, BudgetScope, CompressionError, PackingResult,
    QualityRange, StorageBudget, Q_MAX,
};
use crate::features::{FeatureIoError, FeatureMatrix};
use crate::selection::ClassRanking;
use crate::volume::{averaged_ratio, phase_ratio, volume_ratio, VolumeError, VolumeReport};

pub const DEFAULT_QUALITIES: [u8; 5] = [10, 25, 50, 75, 90];
pub const DEFAULT_EPSILON: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("invalid candidate set: {0}")]
    InvalidCandidates(String),
    #[error("no feature matrix for quality {0}")]
    MissingFeatures(u8),
    #[error("no budget for scope key {0:?}")]
    MissingBudget(String),
    #[error("quality {q}: {source}")]
    Packing {
        q: u8,
        #[source]
        source: CompressionError,
    },
    #[error("quality {q}: {source}")]
    Features {
        q: u8,
        #[source]
        source: FeatureIoError,
    },
    #[error("quality {q}: {source}")]
    Volume {
        q: u8,
        #[source]
        source: VolumeError,
    },
    #[error("quality {0}: no class packed a single sample")]
    EmptySubset(u8),
    #[error("reports do not cover the candidates: {0}")]
    Coverage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityCandidateSet {
    pub candidates: Vec<u8>,
    pub epsilon: f64,
}

impl Default for QualityCandidateSet {
    fn default() -> Self {
        QualityCandidateSet {
            candidates: DEFAULT_QUALITIES.to_vec(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl QualityCandidateSet {
    pub fn new(candidates: Vec<u8>, epsilon: f64, range: QualityRange) -> Result<Self, SelectorError> {
        let bad = |m: String| Err(SelectorError::InvalidCandidates(m));
        if candidates.is_empty() {
            return bad("no candidates".into());
        }
        if candidates.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("{candidates:?} is not strictly increasing"));
        }
        if let Some(q) = candidates.iter().find(|&&q| !range.contains(q)) {
            return bad(format!("quality {q} outside [{}, {}]", range.min, range.max));
        }
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return bad(format!("epsilon must be positive, got {epsilon}"));
        }
        Ok(QualityCandidateSet { candidates, epsilon })
    }

    pub fn is_feasible(&self, ratio: f64) -> bool {
        (ratio - 1.0).abs() < self.epsilon
    }

    pub fn max_quality(&self) -> u8 {
        *self.candidates.last().expect("candidate set is non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub quality: u8,
    pub n_q_mb: usize,
    pub ratio: f64,
    pub feasible: bool,
    pub volume: VolumeReport,
    pub packing: PackingResult,
}

/// Everything the selector needs to know about one incremental phase.
pub struct PhaseInput<'a> {
    pub phase_index: usize,
    /// Rankings of the classes introduced in this phase.
    pub rankings: &'a [ClassRanking],
    pub original: &'a FeatureMatrix,
    /// Features of the compressed samples, keyed by quality, column ids
    /// matching `original`.
    pub compressed: &'a BTreeMap<u8, FeatureMatrix>,
}

struct Group<'a> {
    key: String,
    ranked: Vec<String>,
    classes: Vec<&'a ClassRanking>,
}

fn groups<'a>(phase: &PhaseInput<'a>, scope: BudgetScope) -> Vec<Group<'a>> {
    let mut sorted: Vec<&ClassRanking> = phase.rankings.iter().collect();
    sorted.sort_by(|a, b| a.class_label.cmp(&b.class_label));
    match scope {
        BudgetScope::PerClass => sorted
            .into_iter()
            .map(|r| Group {
                key: r.class_label.clone(),
                ranked: r.ranked_ids.clone(),
                classes: vec![r],
            })
            .collect(),
        BudgetScope::PerPhase => vec![Group {
            key: phase.phase_index.to_string(),
            ranked: interleave_rankings(phase.rankings),
            classes: sorted,
        }],
    }
}

/// Packs and measures `R_q` for every candidate of one phase. Reports come
/// back in ascending quality.
pub fn evaluate_candidates(
    phase: &PhaseInput<'_>,
    config: &QualityCandidateSet,
    budget: &StorageBudget,
    sizer: &mut dyn FnMut(&str, u8) -> Result<u64, CompressionError>,
) -> Result<Vec<QualityReport>, SelectorError> {
    let groups = groups(phase, budget.scope);
    let mut budgets = Vec::with_capacity(groups.len());
    let mut n_reference = 0usize;
    for g in &groups {
        let bytes = budget
            .bytes_for(&g.key)
            .ok_or_else(|| SelectorError::MissingBudget(g.key.clone()))?;
        let reference = try_pack_for_quality(&g.ranked, Q_MAX, bytes, |id| sizer(id, Q_MAX))
            .map_err(|source| SelectorError::Packing { q: Q_MAX, source })?;
        n_reference += reference.n_q_mb;
        budgets.push(bytes);
    }

    let mut reports = Vec::with_capacity(config.candidates.len());
    for &q in &config.candidates {
        let compressed = phase.compressed.get(&q).ok_or(SelectorError::MissingFeatures(q))?;
        let mut selected_ids = Vec::new();
        let mut bytes_used = 0;
        let mut class_reports = Vec::new();
        for (g, &bytes) in groups.iter().zip(&budgets) {
            let packed = try_pack_for_quality(&g.ranked, q, bytes, |id| sizer(id, q))
                .map_err(|source| SelectorError::Packing { q, source })?;
            bytes_used += packed.bytes_used;
            let chosen: std::collections::HashSet<&str> = packed.selected_ids.iter().map(String::as_str).collect();
            for class in &g.classes {
                let prefix: Vec<&str> = class
                    .ranked_ids
                    .iter()
                    .map(String::as_str)
                    .filter(|id| chosen.contains(id))
                    .collect();
                if let Some(report) = class_volume(class, &prefix, phase.original, compressed, q)? {
                    class_reports.push(report);
                }
            }
            selected_ids.extend(packed.selected_ids);
        }
        if class_reports.is_empty() {
            return Err(SelectorError::EmptySubset(q));
        }
        let volume = phase_ratio(class_reports).map_err(|source| SelectorError::Volume { q, source })?;
        let n_q_mb = selected_ids.len();
        reports.push(QualityReport {
            quality: q,
            n_q_mb,
            ratio: volume.ratio,
            feasible: config.is_feasible(volume.ratio),
            volume,
            packing: PackingResult {
                quality: q,
                selected_ids,
                n_q_mb,
                bytes_used,
                compression_rate: compression_rate(n_q_mb, n_reference),
            },
        });
    }
    Ok(reports)
}

/// Volume ratio for one class prefix; prefixes longer than the feature
/// dimension are cut to `dim` columns and flagged.
fn class_volume(
    class: &ClassRanking,
    prefix: &[&str],
    original: &FeatureMatrix,
    compressed: &FeatureMatrix,
    q: u8,
) -> Result<Option<VolumeReport>, SelectorError> {
    if prefix.is_empty() {
        return Ok(None);
    }
    let truncated = prefix.len() > original.dim();
    let prefix = &prefix[..prefix.len().min(original.dim())];
    let orig = original
        .select(prefix)
        .map_err(|source| SelectorError::Features { q, source })?;
    let comp = compressed
        .select(prefix)
        .map_err(|source| SelectorError::Features { q, source })?;
    let mut report = volume_ratio(&comp, &orig, q).map_err(|source| SelectorError::Volume { q, source })?;
    report.label = Some(class.class_label.clone());
    report.truncated = truncated;
    Ok(Some(report))
}

/// The `(q, n_q_mb, R_q)` triple the decision is made from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub quality: u8,
    pub n_q_mb: usize,
    pub ratio: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDecision {
    pub phase: usize,
    pub chosen_quality: u8,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityDecision {
    pub chosen_quality: u8,
    pub chosen_n: usize,
    pub epsilon: f64,
    pub feasible_set: Vec<u8>,
    pub fallback_used: bool,
    pub rows: Vec<DecisionRow>,
    /// Per-phase choices, for drift inspection only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phase_decisions: Vec<PhaseDecision>,
}

fn check_coverage(qualities: impl Iterator<Item = u8>, config: &QualityCandidateSet) -> Result<(), SelectorError> {
    let got: Vec<u8> = qualities.collect();
    let unique: BTreeSet<u8> = got.iter().copied().collect();
    if unique.len() != got.len() {
        return Err(SelectorError::Coverage(format!("duplicate qualities in {got:?}")));
    }
    let want: BTreeSet<u8> = config.candidates.iter().copied().collect();
    if unique != want {
        return Err(SelectorError::Coverage(format!(
            "got {:?}, expected {:?}",
            unique, config.candidates
        )));
    }
    Ok(())
}

/// Solves `max n_q s.t. |R_q - 1| < epsilon` over already-evaluated rows.
/// Ties in `n` go to the larger quality; an empty feasible set falls back to
/// the largest candidate.
pub fn select_rows(rows: &[DecisionRow], config: &QualityCandidateSet) -> Result<QualityDecision, SelectorError> {
    check_coverage(rows.iter().map(|r| r.quality), config)?;
    let mut rows: Vec<DecisionRow> = rows
        .iter()
        .map(|r| DecisionRow {
            feasible: config.is_feasible(r.ratio),
            ..r.clone()
        })
        .collect();
    rows.sort_by_key(|r| r.quality);
    let feasible_set: Vec<u8> = rows.iter().filter(|r| r.feasible).map(|r| r.quality).collect();
    let best = rows
        .iter()
        .filter(|r| r.feasible)
        .max_by(|a, b| a.n_q_mb.cmp(&b.n_q_mb).then(a.quality.cmp(&b.quality)));
    let (chosen, fallback_used) = match best {
        Some(r) => (r, false),
        None => {
            let top = config.max_quality();
            (rows.iter().find(|r| r.quality == top).expect("coverage checked"), true)
        }
    };
    Ok(QualityDecision {
        chosen_quality: chosen.quality,
        chosen_n: chosen.n_q_mb,
        epsilon: config.epsilon,
        feasible_set,
        fallback_used,
        rows,
        phase_decisions: Vec::new(),
    })
}

pub fn select_quality(
    reports: &[QualityReport],
    config: &QualityCandidateSet,
) -> Result<QualityDecision, SelectorError> {
    let rows: Vec<DecisionRow> = reports
        .iter()
        .map(|r| DecisionRow {
            quality: r.quality,
            n_q_mb: r.n_q_mb,
            ratio: r.ratio,
            feasible: r.feasible,
        })
        .collect();
    select_rows(&rows, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReports {
    pub phase: usize,
    pub reports: Vec<QualityReport>,
}

/// Averages `R_q` over phases per candidate, sums the packed counts, and
/// selects on the averaged rows. Per-phase decisions are attached for
/// reporting and never change the choice.
pub fn decide_across_phases(
    phases: &[PhaseReports],
    config: &QualityCandidateSet,
) -> Result<QualityDecision, SelectorError> {
    if phases.is_empty() {
        return Err(SelectorError::Coverage("no phases".into()));
    }
    let mut phase_decisions = Vec::with_capacity(phases.len());
    let mut by_quality: HashMap<u8, (usize, Vec<VolumeReport>)> = HashMap::new();
    for p in phases {
        check_coverage(p.reports.iter().map(|r| r.quality), config)
            .map_err(|e| SelectorError::Coverage(format!("phase {}: {e}", p.phase)))?;
        let d = select_quality(&p.reports, config)?;
        phase_decisions.push(PhaseDecision {
            phase: p.phase,
            chosen_quality: d.chosen_quality,
            fallback_used: d.fallback_used,
        });
        for r in &p.reports {
            let e = by_quality.entry(r.quality).or_default();
            e.0 += r.n_q_mb;
            e.1.push(r.volume.clone());
        }
    }
    let mut rows = Vec::with_capacity(config.candidates.len());
    for &q in &config.candidates {
        let (n, vols) = &by_quality[&q];
        let ratio = averaged_ratio(vols).map_err(|source| SelectorError::Volume { q, source })?;
        rows.push(DecisionRow {
            quality: q,
            n_q_mb: *n,
            ratio,
            feasible: config.is_feasible(ratio),
        });
    }
    let mut decision = select_rows(&rows, config)?;
    decision.phase_decisions = phase_decisions;
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(cases: &[(u8, usize, f64)]) -> Vec<DecisionRow> {
        cases
            .iter()
            .map(|&(quality, n_q_mb, ratio)| DecisionRow {
                quality,
                n_q_mb,
                ratio,
                feasible: false,
            })
            .collect()
    }

    fn cfg(q: &[u8], eps: f64) -> QualityCandidateSet {
        QualityCandidateSet::new(q.to_vec(), eps, QualityRange { min: 1, max: 100 }).unwrap()
    }

    #[test]
    fn picks_smallest_feasible_quality() {
        let r = rows(&[
            (10, 200, 2.5),
            (25, 120, 1.8),
            (50, 85, 1.3),
            (75, 50, 1.1),
            (90, 37, 1.02),
        ]);
        let d = select_rows(&r, &QualityCandidateSet::default()).unwrap();
        assert_eq!(d.chosen_quality, 50);
        assert_eq!(d.chosen_n, 85);
        assert_eq!(d.feasible_set, vec![50, 75, 90]);
        assert!(!d.fallback_used);
    }

    #[test]
    fn all_feasible_takes_largest_quantity() {
        let r = rows(&[
            (10, 200, 1.0),
            (25, 120, 1.0),
            (50, 85, 1.0),
            (75, 50, 1.0),
            (90, 37, 1.0),
        ]);
        let d = select_rows(&r, &QualityCandidateSet::default()).unwrap();
        assert_eq!(d.chosen_quality, 10);
    }

    #[test]
    fn infeasible_falls_back_to_max_quality() {
        let r = rows(&[(10, 100, 3.0), (50, 20, 2.0), (90, 11, 1.8)]);
        let d = select_rows(&r, &cfg(&[10, 50, 90], 0.5)).unwrap();
        assert_eq!(d.chosen_quality, 90);
        assert!(d.fallback_used);
        assert!(d.feasible_set.is_empty());
    }

    #[test]
    fn boundary_is_infeasible() {
        let r = rows(&[(10, 100, 1.5), (90, 10, 1.0)]);
        let d = select_rows(&r, &cfg(&[10, 90], 0.5)).unwrap();
        assert_eq!(d.feasible_set, vec![90]);
    }

    #[test]
    fn equal_quantity_prefers_higher_quality() {
        let r = rows(&[(10, 20, 1.0), (25, 20, 1.0), (50, 16, 1.0)]);
        let d = select_rows(&r, &cfg(&[10, 25, 50], 0.5)).unwrap();
        assert_eq!(d.chosen_quality, 25);
    }

    #[test]
    fn coverage_errors() {
        let c = cfg(&[10, 50], 0.5);
        assert!(matches!(
            select_rows(&rows(&[(10, 1, 1.0)]), &c),
            Err(SelectorError::Coverage(_))
        ));
        assert!(matches!(
            select_rows(&rows(&[(10, 1, 1.0), (10, 1, 1.0), (50, 1, 1.0)]), &c),
            Err(SelectorError::Coverage(_))
        ));
        assert!(matches!(
            select_rows(&rows(&[(10, 1, 1.0), (90, 1, 1.0)]), &c),
            Err(SelectorError::Coverage(_))
        ));
    }

    #[test]
    fn candidate_set_validation() {
        let range = QualityRange { min: 1, max: 100 };
        assert!(QualityCandidateSet::new(vec![], 0.5, range).is_err());
        assert!(QualityCandidateSet::new(vec![50, 10], 0.5, range).is_err());
        assert!(QualityCandidateSet::new(vec![10, 10], 0.5, range).is_err());
        assert!(QualityCandidateSet::new(vec![0, 10], 0.5, range).is_err());
        assert!(QualityCandidateSet::new(vec![10], 0.0, range).is_err());
        assert!(QualityCandidateSet::new(vec![10], f64::NAN, range).is_err());
        assert_eq!(QualityCandidateSet::default().candidates, vec![10, 25, 50, 75, 90]);
    }
}
