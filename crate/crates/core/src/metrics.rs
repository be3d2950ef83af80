//! Pooled RMSE, bias and WMAPE over `[T×S]` cells.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub rmse: f64,
    pub bias: f64,
    /// Percent.
    pub wmape: f64,
}

fn check(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.len() != actual.len() {
        return Err(CoreError::Dimension(format!(
            "prediction has {} cells, actual {}",
            pred.len(),
            actual.len()
        )));
    }
    if pred.is_empty() {
        return Err(CoreError::Dimension("no cells to score".into()));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check(pred, actual)?;
    let sq: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Mean signed residual; negative means underestimation.
pub fn bias(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check(pred, actual)?;
    Ok(pred.iter().zip(actual).map(|(p, a)| p - a).sum::<f64>() / pred.len() as f64)
}

pub fn wmape(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check(pred, actual)?;
    let denom: f64 = actual.iter().map(|a| a.abs()).sum();
    if denom == 0.0 {
        return Err(CoreError::Metric("WMAPE of an all-zero actual series".into()));
    }
    Ok(100.0 * pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / denom)
}

pub fn evaluate(pred: &[f64], actual: &[f64]) -> Result<MetricResult> {
    Ok(MetricResult {
        rmse: rmse(pred, actual)?,
        bias: bias(pred, actual)?,
        wmape: wmape(pred, actual)?,
    })
}

/// Pools cells from many samples, then applies the formulas once.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    sq: f64,
    signed: f64,
    abs_err: f64,
    abs_actual: f64,
    n: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &[f64], actual: &[f64]) -> Result<()> {
        check(pred, actual)?;
        for (p, a) in pred.iter().zip(actual) {
            let r = p - a;
            self.sq += r * r;
            self.signed += r;
            self.abs_err += r.abs();
            self.abs_actual += a.abs();
        }
        self.n += pred.len();
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.sq += other.sq;
        self.signed += other.signed;
        self.abs_err += other.abs_err;
        self.abs_actual += other.abs_actual;
        self.n += other.n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Result<MetricResult> {
        if self.n == 0 {
            return Err(CoreError::Dimension("no cells to score".into()));
        }
        if self.abs_actual == 0.0 {
            return Err(CoreError::Metric("WMAPE of an all-zero actual series".into()));
        }
        let n = self.n as f64;
        Ok(MetricResult {
            rmse: (self.sq / n).sqrt(),
            bias: self.signed / n,
            wmape: 100.0 * self.abs_err / self.abs_actual,
        })
    }
}
