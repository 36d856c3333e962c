use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Quantile levels reported with every evaluation.
pub const CDF_LEVELS: [f64; 4] = [0.5, 0.67, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_samples: usize,
    /// `sqrt(mean ‖ŷ − y‖²)` in meters.
    pub rmse: f64,
    /// Mean Euclidean error in meters.
    pub mean_error: f64,
    /// Fraction of argmax-correct semantic predictions.
    pub accuracy: f64,
    /// Error quantiles at [`CDF_LEVELS`].
    pub quantiles: Vec<f64>,
    /// Sorted per-sample Euclidean errors.
    pub errors: Vec<f64>,
}

/// Linear interpolation between order statistics at position `q·(n − 1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn compute_metrics(pred: &[[f64; 3]], truth: &[[f64; 3]], pred_labels: &[usize], labels: &[usize]) -> Result<Metrics> {
    let n = truth.len();
    if n == 0 {
        return Err(invalid("evaluation needs at least one sample"));
    }
    if pred.len() != n || pred_labels.len() != n || labels.len() != n {
        return Err(invalid("prediction and ground-truth lengths differ"));
    }
    let mut errors: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (0..3).map(|a| (p[a] - t[a]).powi(2)).sum::<f64>().sqrt())
        .collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    let mean_error = errors.iter().sum::<f64>() / n as f64;
    let correct = pred_labels.iter().zip(labels).filter(|(a, b)| a == b).count();
    errors.sort_by(f64::total_cmp);
    Ok(Metrics {
        n_samples: n,
        rmse,
        mean_error,
        accuracy: correct as f64 / n as f64,
        quantiles: CDF_LEVELS.iter().map(|&q| quantile(&errors, q)).collect(),
        errors,
    })
}
