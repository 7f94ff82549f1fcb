//! Regression metrics over the four pose outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::OUTPUTS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: [f64; OUTPUTS],
    pub r2: [f64; OUTPUTS],
}

impl RegressionMetrics {
    /// Mean of the per-output MAEs.
    pub fn mae_total(&self) -> f64 {
        self.mae.iter().sum::<f64>() / OUTPUTS as f64
    }
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

/// `1 - sum (y - yhat)^2 / sum (y - ybar)^2`. A constant target gives 1 for a
/// perfect fit and 0 otherwise.
pub fn r2(pred: &[f64], truth: &[f64]) -> f64 {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

pub fn regression_metrics(pred: &[[f64; OUTPUTS]], truth: &[[f64; OUTPUTS]]) -> Result<RegressionMetrics> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty prediction/target lists ({} vs {})",
            pred.len(),
            truth.len()
        )));
    }
    let mut m = RegressionMetrics {
        mae: [0.0; OUTPUTS],
        r2: [0.0; OUTPUTS],
    };
    for k in 0..OUTPUTS {
        let p: Vec<f64> = pred.iter().map(|r| r[k]).collect();
        let t: Vec<f64> = truth.iter().map(|r| r[k]).collect();
        m.mae[k] = mae(&p, &t);
        m.r2[k] = r2(&p, &t);
    }
    Ok(m)
}
