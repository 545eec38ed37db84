use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no accuracies recorded")]
    Empty,
    #[error("task {0} has an empty accuracy history")]
    EmptyTask(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    /// `A_t`: accuracy on every class seen up to phase `t`.
    pub per_phase_accuracy: Vec<f64>,
    /// Mean of `A_1..A_T`.
    pub aic: f64,
    pub averaged_forgetting: f64,
    /// `task_history[k][j]`: accuracy on task `k`'s classes after phase `k + j`.
    pub task_history: Vec<Vec<f64>>,
}

/// Averaged incremental accuracy `AIC_T = (1/T) * sum A_t`.
pub fn averaged_incremental_accuracy(per_phase: &[f64]) -> Result<f64, MetricsError> {
    if per_phase.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(per_phase.iter().sum::<f64>() / per_phase.len() as f64)
}

/// Mean over tasks of (final accuracy - best accuracy in the history). Never positive.
pub fn averaged_forgetting(history: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if history.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    for (k, accs) in history.iter().enumerate() {
        let last = *accs.last().ok_or(MetricsError::EmptyTask(k))?;
        let best = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += last - best;
    }
    Ok(total / history.len() as f64)
}
