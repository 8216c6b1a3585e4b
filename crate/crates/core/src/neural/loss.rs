//! Pinball (quantile) loss.

use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub(crate) fn check_level(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("quantile level {q} outside (0, 1)")))
    }
}

pub(crate) fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Invalid("no quantile levels".into()));
    }
    levels.iter().try_for_each(|&q| check_level(q))
}

/// `q·(y − ŷ)₊ + (1 − q)·(ŷ − y)₊`
pub fn quantile_loss(y: f64, yhat: f64, q: f64) -> Result<f64> {
    check_level(q)?;
    Ok(quantile_loss_grad(y, yhat, q).0)
}

/// Loss and its derivative in `ŷ`. The subgradient at `y == ŷ` is taken as 0.
pub(crate) fn quantile_loss_grad(y: f64, yhat: f64, q: f64) -> (f64, f64) {
    if y > yhat {
        (q * (y - yhat), -q)
    } else if yhat > y {
        ((1.0 - q) * (yhat - y), 1.0 - q)
    } else {
        (0.0, 0.0)
    }
}

/// Mean of the per-point quantile loss over levels and horizon steps,
/// averaged over the batch.
///
/// `targets` is `[batch × horizon]`; `predictions[b]` is `[horizon × levels]`.
pub fn total_loss(targets: &Tensor2, predictions: &[Tensor2], levels: &[f64]) -> Result<f64> {
    check_levels(levels)?;
    let (batch, horizon) = targets.shape();
    if predictions.len() != batch || batch == 0 {
        return Err(Error::Shape(format!(
            "{} prediction matrices for {batch} targets",
            predictions.len()
        )));
    }
    let mut sum = 0.0;
    for (b, pred) in predictions.iter().enumerate() {
        if pred.shape() != (horizon, levels.len()) {
            return Err(Error::Shape(format!(
                "prediction {b} is {:?}, expected ({horizon}, {})",
                pred.shape(),
                levels.len()
            )));
        }
        let mut per_sample = 0.0;
        for (qi, &q) in levels.iter().enumerate() {
            for k in 0..horizon {
                per_sample += quantile_loss_grad(targets.get(b, k), pred.get(k, qi), q).0;
            }
        }
        sum += per_sample / (levels.len() * horizon) as f64;
    }
    Ok(sum / batch as f64)
}
