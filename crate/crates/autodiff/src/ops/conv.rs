//! 3×3 "same" convolution (stride 1, zero padding 1) via im2col.

use crate::error::{dim_err, Result};
use crate::ops::linalg::{gemm, Mat};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Normalizes `[C×H×W]` and `[B×C×H×W]` inputs to `(B, C, H, W)`.
fn dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((1, c, h, w)),
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

fn im2col(x: &[f64], b: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let row_len = c * TAPS;
    let mut cols = vec![0.0; b * h * w * row_len];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = &mut cols[((bi * h + y) * w + xx) * row_len..][..row_len];
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * h * w..][..h * w];
                    for ky in 0..KERNEL {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            row[ci * TAPS + ky * KERNEL + kx] = plane[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

impl Tape {
    /// Cross-correlation of `x` (`[C×H×W]` or `[B×C×H×W]`) with `kernel`
    /// `[K×C×3×3]` plus an optional per-output-channel bias `[K]`. Spatial
    /// extent is preserved.
    pub fn conv2d_same(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let Some((b, c, h, w)) = dims(tx.shape()) else {
            return dim_err("conv2d", format!("expected [C,H,W] or [B,C,H,W], got {:?}", tx.shape()));
        };
        let ks = tk.shape();
        if ks.len() != 4 || ks[2] != KERNEL || ks[3] != KERNEL {
            return dim_err("conv2d", format!("kernel must be [K,C,3,3], got {ks:?}"));
        }
        if ks[1] != c {
            return dim_err(
                "conv2d",
                format!("kernel expects {} input channels, input {:?} has {c}", ks[1], tx.shape()),
            );
        }
        let k = ks[0];
        if let Some(bv) = bias {
            if self.shape(bv) != [k] {
                return dim_err("conv2d", format!("bias must be [{k}], got {:?}", self.shape(bv)));
            }
        }
        let cols = im2col(tx.data(), b, c, h, w);
        let rows = b * h * w;
        let mut mat = vec![0.0; rows * k];
        gemm(
            Mat::new(&cols, rows, c * TAPS),
            Mat::new(tk.data(), k, c * TAPS).t(),
            &mut mat,
            0.0,
        );
        let bias_v = bias.map(|bv| self.value(bv).data().to_vec());
        let mut out = vec![0.0; b * k * h * w];
        for bi in 0..b {
            for p in 0..h * w {
                let src = &mat[(bi * h * w + p) * k..][..k];
                for ki in 0..k {
                    let bias_k = bias_v.as_ref().map_or(0.0, |bb| bb[ki]);
                    out[(bi * k + ki) * h * w + p] = src[ki] + bias_k;
                }
            }
        }
        let shape: Vec<usize> = if tx.ndim() == 3 {
            vec![k, h, w]
        } else {
            vec![b, k, h, w]
        };
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                kernel,
                bias,
                cols,
            },
        ))
    }
}

pub(crate) fn conv2d_backward(
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    cols: &[f64],
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let (b, c, h, w) = dims(sink.value(x).shape()).expect("validated in forward");
    let tk = sink.value(kernel);
    let k = tk.shape()[0];
    let rows = b * h * w;
    let row_len = c * TAPS;
    // Output gradient as a [rows × K] matrix.
    let mut gm = vec![0.0; rows * k];
    for bi in 0..b {
        for ki in 0..k {
            let plane = &g[(bi * k + ki) * h * w..][..h * w];
            for (p, &v) in plane.iter().enumerate() {
                gm[(bi * h * w + p) * k + ki] = v;
            }
        }
    }
    if let Some(bv) = bias {
        if let Some(gb) = sink.get(bv) {
            for row in gm.chunks_exact(k) {
                gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
            }
        }
    }
    if let Some(gk) = sink.get(kernel) {
        gemm(Mat::new(&gm, rows, k).t(), Mat::new(cols, rows, row_len), gk, 1.0);
    }
    if sink.wants(x) {
        let mut dcols = vec![0.0; rows * row_len];
        gemm(Mat::new(&gm, rows, k), Mat::new(tk.data(), k, row_len), &mut dcols, 0.0);
        let gx = sink.get(x).expect("wants grad");
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = &dcols[((bi * h + y) * w + xx) * row_len..][..row_len];
                    for ci in 0..c {
                        let plane = &mut gx[(bi * c + ci) * h * w..][..h * w];
                        for ky in 0..KERNEL {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..KERNEL {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                plane[sy as usize * w + sx as usize] += row[ci * TAPS + ky * KERNEL + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::nn::Conv2d;
    use crate::{AutodiffError, Tape, Tensor};

    #[test]
    fn zero_input_gives_zero_output() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 4, 5]));
        let k = t.constant(Tensor::full(&[3, 2, 3, 3], 0.7));
        let y = t.conv2d_same(x, k, None).unwrap();
        assert_eq!(t.value(y).shape(), &[3, 4, 5]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_input_center_and_corner() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d_same(x, k, Some(b)).unwrap();
        let v = t.value(y);
        assert_eq!(v.at(&[0, 1, 1]), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(v.at(&[0, r, c]), 4.0);
        }
        assert_eq!(v.at(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn kernel_size_five_is_rejected() {
        let err = Conv2d::new("c", 1, 1, 5).unwrap_err();
        assert!(matches!(err, AutodiffError::Contract(_)));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3, 3]));
        let k = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(t.conv2d_same(x, k, None), Err(AutodiffError::Dimension { .. })));
    }

    #[test]
    fn bias_is_added_per_output_channel() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 2, 2]));
        let k = t.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let b = t.constant(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let y = t.conv2d_same(x, k, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
    }
}
