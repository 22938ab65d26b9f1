//! Regression metrics for fused-surface evaluation.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// NaN when the truth is constant; see `constant_truth`.
    pub r2: f64,
    /// The coefficient of determination divides by the truth's variance,
    /// which a constant truth makes zero.
    pub constant_truth: bool,
}

pub fn evaluate_metrics(predictions: &[f64], truth: &[f64]) -> Result<Metrics> {
    if predictions.len() != truth.len() {
        return Err(CoreError::ShapeMismatch {
            op: "metrics",
            got: vec![predictions.len(), truth.len()],
            expected: "equal lengths".into(),
        });
    }
    let n = truth.len();
    if n < 2 {
        return Err(CoreError::invalid("metrics", "need at least two samples"));
    }
    let nf = n as f64;
    let mut ss_res = 0.0;
    let mut abs = 0.0;
    for (p, y) in predictions.iter().zip(truth) {
        let e = p - y;
        ss_res += e * e;
        abs += e.abs();
    }
    let mean = truth.iter().sum::<f64>() / nf;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();

    let rmse = (ss_res / nf).sqrt();
    let mae = abs / nf;
    let (r2, constant_truth) = if ss_tot == 0.0 {
        (f64::NAN, true)
    } else {
        (1.0 - ss_res / ss_tot, false)
    };
    Ok(Metrics {
        rmse,
        mae,
        r2,
        constant_truth,
    })
}
