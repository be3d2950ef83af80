//! Blocked k-fold cross-validation with dependency gaps.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Index sets over sample positions `0..n_samples`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub gap: usize,
    pub n_samples: usize,
    pub folds: Vec<Fold>,
}

/// Contiguous test blocks, a validation block next to each (before it, or
/// after it for the first fold) and training positions farther than `gap`
/// from both.
pub fn blocked_kfold(n_samples: usize, k: usize, gap: usize) -> Result<FoldPlan> {
    if k < 2 {
        return Err(CoreError::Planning(format!("need at least 2 folds, got {k}")));
    }
    if n_samples < k.saturating_mul(gap + 1) {
        return Err(CoreError::Planning(format!(
            "{n_samples} samples cannot hold {k} folds separated by a gap of {gap}"
        )));
    }
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let lo = f * n_samples / k;
        let hi = (f + 1) * n_samples / k;
        let v = (((hi - lo) as f64 * 0.5).round() as usize).max(1);
        let (vlo, vhi) = if f == 0 { (hi, (hi + v).min(n_samples)) } else { (lo.saturating_sub(v), lo) };
        if vlo >= vhi {
            return Err(CoreError::Planning(format!("fold {f} has no room for validation")));
        }
        let (blo, bhi) = (lo.min(vlo), hi.max(vhi));
        let train: Vec<usize> = (0..n_samples)
            .filter(|&o| o + gap < blo || o > bhi - 1 + gap)
            .collect();
        if train.is_empty() {
            return Err(CoreError::Planning(format!("fold {f} leaves no training samples")));
        }
        folds.push(Fold {
            index: f,
            train,
            validation: (vlo..vhi).collect(),
            test: (lo..hi).collect(),
        });
    }
    Ok(FoldPlan {
        k,
        gap,
        n_samples,
        folds,
    })
}

impl FoldPlan {
    pub fn fold(&self, index: usize) -> Result<&Fold> {
        self.folds.get(index).ok_or_else(|| {
            CoreError::Usage(format!("fold {index} out of range; the plan has {} folds", self.k))
        })
    }

    /// Smallest |o − o'| between a train position and any test or validation
    /// position, over all folds, by exhaustive comparison.
    pub fn min_separation(&self) -> Option<usize> {
        self.folds
            .iter()
            .flat_map(|f| {
                f.train.iter().flat_map(move |&o| {
                    f.test.iter().chain(&f.validation).map(move |&p| o.abs_diff(p))
                })
            })
            .min()
    }
}
