use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{numel, Tensor};

/// Per-channel statistics of one training batch; `var` is the unbiased
/// estimate used for running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl Tape {
    /// Batch normalization over `[B×C×...]`, per channel `C`.
    ///
    /// With `running = None` the batch statistics are used (training mode)
    /// and returned; otherwise the supplied running mean/variance are used.
    /// `mask` marks the valid positions of the trailing dimensions; masked
    /// positions are excluded from statistics and produce zeros.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mask: Option<Arc<[bool]>>,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() < 2 {
            return dim_err("batch_norm", format!("expected [B,C,...], got {s:?}"));
        }
        let (b, c) = (s[0], s[1]);
        let rest = numel(&s[2..]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err(
                "batch_norm",
                format!(
                    "affine params {:?}/{:?} do not match {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        if let Some(m) = &mask {
            if m.len() != rest {
                return dim_err("batch_norm", format!("mask of {} for {rest} positions", m.len()));
            }
        }
        let valid = |p: usize| mask.as_ref().map_or(true, |m| m[p]);
        let n_valid = (0..rest).filter(|&p| valid(p)).count() * b;
        if n_valid == 0 {
            return dim_err("batch_norm", "no valid positions");
        }
        let data = tx.data();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return dim_err("batch_norm", "running statistics do not match channels");
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut sum = 0.0;
                    for bi in 0..b {
                        let plane = &data[(bi * c + ci) * rest..][..rest];
                        sum += (0..rest).filter(|&p| valid(p)).map(|p| plane[p]).sum::<f64>();
                    }
                    let m = sum / n_valid as f64;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        let plane = &data[(bi * c + ci) * rest..][..rest];
                        sq += (0..rest)
                            .filter(|&p| valid(p))
                            .map(|p| (plane[p] - m) * (plane[p] - m))
                            .sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = sq / n_valid as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if n_valid > 1 { v * n_valid as f64 / (n_valid - 1) as f64 } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                    count: n_valid,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * rest;
                for p in 0..rest {
                    if valid(p) {
                        let xh = (data[off + p] - mean[ci]) * inv_std[ci];
                        xhat[off + p] = xh;
                        out[off + p] = gv[ci] * xh + bv[ci];
                    }
                }
            }
        }
        let v = Tensor::new(s, out)?;
        let batch_stats = stats.is_some();
        let var_out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mask,
                batch_stats,
            },
        );
        Ok((var_out, stats))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    mask: Option<&[bool]>,
    batch_stats: bool,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let s = sink.value(x).shape();
    let (b, c) = (s[0], s[1]);
    let rest = numel(&s[2..]);
    let valid = |p: usize| mask.map_or(true, |m| m[p]);
    let n = ((0..rest).filter(|&p| valid(p)).count() * b) as f64;
    let gam = sink.value(gamma).data();

    // Per-channel sums of dy and dy·x̂.
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * rest;
            for p in (0..rest).filter(|&p| valid(p)) {
                sum_dy[ci] += g[off + p];
                sum_dy_xhat[ci] += g[off + p] * xhat[off + p];
            }
        }
    }
    if let Some(gg) = sink.get(gamma) {
        gg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &v)| *d += v);
    }
    if let Some(gb) = sink.get(beta) {
        gb.iter_mut().zip(&sum_dy).for_each(|(d, &v)| *d += v);
    }
    let Some(gx) = sink.get(x) else { return };
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * rest;
            let k = gam[ci] * inv_std[ci];
            for p in (0..rest).filter(|&p| valid(p)) {
                let i = off + p;
                gx[i] += if batch_stats {
                    k * (g[i] - sum_dy[ci] / n - xhat[i] * sum_dy_xhat[ci] / n)
                } else {
                    k * g[i]
                };
            }
        }
    }
}
