//! Mean-of-feature exemplar ranking.
//!
//! Every sample of a class is ranked by its Euclidean distance to the class
//! mean of the original (uncompressed) features. The buffer for any quality
//! is then a prefix of this one ranking.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{DatasetManifest, FeatureIoError, FeatureMatrix};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("class {0:?} has no samples")]
    EmptyClass(String),
    #[error(transparent)]
    Features(#[from] FeatureIoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRanking {
    pub class_label: String,
    pub ranked_ids: Vec<String>,
    pub distances: Vec<f64>,
}

impl ClassRanking {
    pub fn len(&self) -> usize {
        self.ranked_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked_ids.is_empty()
    }
}

pub fn class_mean(features: &FeatureMatrix) -> Option<Vec<f64>> {
    if features.is_empty() {
        return None;
    }
    let mut mean = vec![0.0f64; features.dim()];
    for (_, col) in features.columns() {
        for (m, &v) in mean.iter_mut().zip(col) {
            *m += v as f64;
        }
    }
    let n = features.count() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Some(mean)
}

/// Ranks the columns of one class by ascending distance to the class mean.
/// Equal distances are ordered by sample id.
///
/// Columns are compared on `|n x - sum|^2` rather than `|x - mean|^2`, so
/// no division enters the comparison and exact ties stay exact.
pub fn rank_by_mean_of_feature(class_label: &str, features: &FeatureMatrix) -> Result<ClassRanking, SelectionError> {
    if features.is_empty() {
        return Err(SelectionError::EmptyClass(class_label.to_string()));
    }
    let n = features.count() as f64;
    let mut sum = vec![0.0f64; features.dim()];
    for (_, col) in features.columns() {
        for (s, &v) in sum.iter_mut().zip(col) {
            *s += v as f64;
        }
    }
    let mut scored: Vec<(f64, &str)> = features
        .columns()
        .map(|(id, col)| {
            let key: f64 = col
                .iter()
                .zip(&sum)
                .map(|(&v, s)| {
                    let d = n * v as f64 - s;
                    d * d
                })
                .sum();
            (key, id)
        })
        .collect();
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.cmp(b.1))
    });
    Ok(ClassRanking {
        class_label: class_label.to_string(),
        ranked_ids: scored.iter().map(|(_, id)| id.to_string()).collect(),
        distances: scored.iter().map(|(key, _)| key.sqrt() / n).collect(),
    })
}

/// Ranks every class of `manifest` that has samples, in class-label order.
pub fn rank_all_classes(
    manifest: &DatasetManifest,
    features: &FeatureMatrix,
) -> Result<Vec<ClassRanking>, SelectionError> {
    manifest
        .samples_by_class()
        .into_iter()
        .map(|(class, samples)| {
            let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
            let sub = features.select(&ids)?;
            rank_by_mean_of_feature(class, &sub)
        })
        .collect()
}
