//! Class-incremental replay with a nearest-class-mean classifier.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{averaged_forgetting, averaged_incremental_accuracy, MetricsError, PhaseMetrics};
use super::synthetic::SyntheticDataset;
use crate::compression::{pack_for_quality, BudgetScope, StorageBudget};
use crate::features::FeatureMatrix;
use crate::selection::{class_mean, rank_by_mean_of_feature, ClassRanking, SelectionError};
use crate::selector::{
    decide_across_phases, evaluate_candidates, PhaseInput, PhaseReports, QualityCandidateSet, QualityDecision,
    SelectorError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("phase {0} has no test samples")]
    EmptyTestSplit(usize),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// What old classes contribute to the classifier after their phase ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "quality")]
pub enum ReplayPlan {
    /// Old classes are dropped.
    NoReplay,
    /// Old classes keep the exemplars packed at this quality under a
    /// per-class budget of `budget_k` originals.
    Quality(u8),
    /// Every original training sample is replayed.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualRun {
    pub metrics: PhaseMetrics,
    /// Replayed exemplar count per class, over classes whose phase has ended.
    pub mean_replayed_per_class: f64,
}

fn nearest<'a>(means: &'a BTreeMap<String, Vec<f64>>, x: &[f32]) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for (label, m) in means {
        let d: f64 = m
            .iter()
            .zip(x)
            .map(|(a, &b)| {
                let t = a - b as f64;
                t * t
            })
            .sum();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((label, d));
        }
    }
    best.map(|(l, _)| l)
}

pub fn rank_phase(ds: &SyntheticDataset, phase: usize) -> Result<Vec<ClassRanking>, HarnessError> {
    ds.phase_classes(phase)
        .iter()
        .map(|class| {
            let sub = ds.original.select(&ds.class_ids(class)).map_err(SelectionError::from)?;
            Ok(rank_by_mean_of_feature(class, &sub)?)
        })
        .collect()
}

/// Runs every phase in order. Class means for the current phase come from
/// all of its original training features; means of earlier classes come
/// from whatever the plan replays. After each phase, accuracy is measured
/// over the test samples of all classes seen so far with one shared head.
pub fn run_continual(ds: &SyntheticDataset, plan: ReplayPlan, budget_k: u64) -> Result<ContinualRun, HarnessError> {
    let budget_bytes = budget_k * super::synthetic::PAYLOAD_BYTES;
    let phase_of: BTreeMap<&str, usize> = ds
        .manifest
        .phases
        .iter()
        .flat_map(|p| p.classes.iter().map(move |c| (c.as_str(), p.index)))
        .collect();

    let mut replay_means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut replayed_counts = Vec::new();
    let mut per_phase_accuracy = Vec::with_capacity(ds.config.phases);
    let mut task_history: Vec<Vec<f64>> = Vec::with_capacity(ds.config.phases);

    for phase in 0..ds.config.phases {
        let rankings = rank_phase(ds, phase)?;
        let mut means = replay_means.clone();
        for r in &rankings {
            let sub = ds.original.select(&r.ranked_ids).map_err(SelectionError::from)?;
            means.insert(
                r.class_label.clone(),
                class_mean(&sub).expect("ranked class is non-empty"),
            );
        }

        let mut correct = vec![0usize; phase + 1];
        let mut total = vec![0usize; phase + 1];
        for ((_, x), label) in ds.test.columns().zip(&ds.test_labels) {
            let Some(&task) = phase_of.get(label.as_str()) else {
                continue;
            };
            if task > phase {
                continue;
            }
            total[task] += 1;
            if nearest(&means, x) == Some(label.as_str()) {
                correct[task] += 1;
            }
        }
        let seen: usize = total.iter().sum();
        if seen == 0 {
            return Err(HarnessError::EmptyTestSplit(phase));
        }
        per_phase_accuracy.push(correct.iter().sum::<usize>() as f64 / seen as f64);
        task_history.push(Vec::new());
        for task in 0..=phase {
            let acc = if total[task] == 0 {
                0.0
            } else {
                correct[task] as f64 / total[task] as f64
            };
            task_history[task].push(acc);
        }

        for r in &rankings {
            let kept: Option<FeatureMatrix> = match plan {
                ReplayPlan::NoReplay => None,
                ReplayPlan::Full => Some(ds.original.select(&r.ranked_ids).map_err(SelectionError::from)?),
                ReplayPlan::Quality(q) => {
                    let size = ds.payload_size(q);
                    let packed = pack_for_quality(&r.ranked_ids, q, budget_bytes, |_| size);
                    Some(ds.compressed_subset(q, &packed.selected_ids))
                }
            };
            let n = kept.as_ref().map_or(0, FeatureMatrix::count);
            replayed_counts.push(n);
            if let Some(mean) = kept.as_ref().and_then(class_mean) {
                replay_means.insert(r.class_label.clone(), mean);
            }
        }
    }

    let aic = averaged_incremental_accuracy(&per_phase_accuracy)?;
    // the final task has no later phase to forget in
    let forgetting_tasks = if task_history.len() > 1 {
        &task_history[..task_history.len() - 1]
    } else {
        &task_history[..]
    };
    let averaged_forgetting = averaged_forgetting(forgetting_tasks)?;
    let mean_replayed_per_class = if replayed_counts.is_empty() {
        0.0
    } else {
        replayed_counts.iter().sum::<usize>() as f64 / replayed_counts.len() as f64
    };
    Ok(ContinualRun {
        metrics: PhaseMetrics {
            per_phase_accuracy,
            aic,
            averaged_forgetting,
            task_history,
        },
        mean_replayed_per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub quality: u8,
    pub n_per_class: f64,
    pub aic: f64,
    pub forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_q: u8,
    pub rows: Vec<GridRow>,
}

/// Trains once per candidate quality and returns the AIC-maximizing one
/// (ties go to the larger quality).
pub fn grid_search(ds: &SyntheticDataset, qualities: &[u8], budget_k: u64) -> Result<GridResult, HarnessError> {
    let rows: Vec<GridRow> = qualities
        .par_iter()
        .map(|&q| {
            let run = run_continual(ds, ReplayPlan::Quality(q), budget_k)?;
            Ok(GridRow {
                quality: q,
                n_per_class: run.mean_replayed_per_class,
                aic: run.metrics.aic,
                forgetting: run.metrics.averaged_forgetting,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    let best = rows
        .iter()
        .max_by(|a, b| a.aic.total_cmp(&b.aic).then(a.quality.cmp(&b.quality)))
        .ok_or(HarnessError::Metrics(MetricsError::Empty))?;
    Ok(GridResult {
        best_q: best.quality,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRun {
    pub decision: QualityDecision,
    pub phases: Vec<PhaseReports>,
}

/// Runs the volume-ratio selector on every phase of the benchmark with a
/// per-class budget of `budget_k` originals.
pub fn select_on_synthetic(
    ds: &SyntheticDataset,
    config: &QualityCandidateSet,
    budget_k: u64,
) -> Result<SelectionRun, HarnessError> {
    let budget = StorageBudget::resolve(&ds.manifest, budget_k, BudgetScope::PerClass);
    let family = ds.compressed_family(&config.candidates);
    let mut phases = Vec::with_capacity(ds.config.phases);
    for phase in 0..ds.config.phases {
        let rankings = rank_phase(ds, phase)?;
        let input = PhaseInput {
            phase_index: phase,
            rankings: &rankings,
            original: &ds.original,
            compressed: &family,
        };
        let mut sizer = |_: &str, q: u8| Ok(ds.payload_size(q));
        let reports = evaluate_candidates(&input, config, &budget, &mut sizer)?;
        phases.push(PhaseReports { phase, reports });
    }
    let decision = decide_across_phases(&phases, config)?;
    Ok(SelectionRun { decision, phases })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub quality: u8,
    pub n_per_class: f64,
    pub ratio: f64,
    pub aic: f64,
    pub forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub selected_quality: u8,
    pub grid_best_quality: u8,
    pub fallback_used: bool,
    pub rows: Vec<BenchmarkRow>,
}

/// Selector and grid search side by side on one dataset.
pub fn benchmark(
    ds: &SyntheticDataset,
    config: &QualityCandidateSet,
    budget_k: u64,
) -> Result<BenchmarkReport, HarnessError> {
    let selection = select_on_synthetic(ds, config, budget_k)?;
    let grid = grid_search(ds, &config.candidates, budget_k)?;
    let rows = grid
        .rows
        .iter()
        .zip(&selection.decision.rows)
        .map(|(g, d)| BenchmarkRow {
            quality: g.quality,
            n_per_class: g.n_per_class,
            ratio: d.ratio,
            aic: g.aic,
            forgetting: g.forgetting,
        })
        .collect();
    Ok(BenchmarkReport {
        selected_quality: selection.decision.chosen_quality,
        grid_best_quality: grid.best_q,
        fallback_used: selection.decision.fallback_used,
        rows,
    })
}

/// CSV with header `quality,n_per_class,ratio,aic,forgetting`.
pub fn rows_to_csv(rows: &[BenchmarkRow]) -> String {
    let mut out = String::from("quality,n_per_class,ratio,aic,forgetting\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.quality, r.n_per_class, r.ratio, r.aic, r.forgetting
        ));
    }
    out
}
