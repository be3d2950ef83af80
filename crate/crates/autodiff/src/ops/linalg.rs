use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use crate::error::{dim_err, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// Row-major matrix view with an explicit row stride.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            trans: false,
        }
    }

    pub fn strided(data: &'a [f64], rows: usize, cols: usize, row_stride: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            trans: !self.trans,
            ..self
        }
    }

    fn view(&self) -> ArrayView2<'a, f64> {
        let v = ArrayView2::from_shape((self.rows, self.cols).strides((self.row_stride, 1)), self.data)
            .expect("matrix view");
        if self.trans {
            v.reversed_axes()
        } else {
            v
        }
    }
}

/// `c = beta * c + a · b` where `c` is a dense `m × n` row-major buffer.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    let av = a.view();
    let bv = b.view();
    let (m, n) = (av.nrows(), bv.ncols());
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("output view");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

impl Tape {
    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · bᵀ` for `b[n×k]`; the layout used by dense layer weights.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return dim_err("matmul", format!("expected matrices, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return dim_err(
                "matmul",
                format!("inner dimensions differ: {sa:?} × {}{sb:?}", if trans_b { "transposed " } else { "" }),
            );
        }
        let mut out = vec![0.0; m * n];
        let bm = Mat::new(tb.data(), sb[0], sb[1]);
        gemm(
            Mat::new(ta.data(), m, k),
            if trans_b { bm.t() } else { bm },
            &mut out,
            0.0,
        );
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul { a, b, trans_b }))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return dim_err("bmm", format!("incompatible shapes {sa:?} and {sb:?}"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                Mat::new(&ta.data()[i * m * k..(i + 1) * m * k], m, k),
                Mat::new(&tb.data()[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let v = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(v, Op::BatchMatMul(a, b)))
    }
}

pub(crate) fn matmul_backward(a: Var, b: Var, trans_b: bool, g: &[f64], sink: &mut GradSink<'_>) {
    let (ta, tb) = (sink.value(a), sink.value(b));
    let (m, k) = (ta.shape()[0], ta.shape()[1]);
    let n = if trans_b { tb.shape()[0] } else { tb.shape()[1] };
    let gm = Mat::new(g, m, n);
    let bm = Mat::new(tb.data(), tb.shape()[0], tb.shape()[1]);
    if let Some(ga) = sink.get(a) {
        // dA = G · Bᵀ (or G · B when b was used transposed)
        gemm(gm, if trans_b { bm } else { bm.t() }, ga, 1.0);
    }
    if let Some(gb) = sink.get(b) {
        let am = Mat::new(ta.data(), m, k);
        if trans_b {
            // b is n×k: dB = Gᵀ · A
            gemm(gm.t(), am, gb, 1.0);
        } else {
            gemm(am.t(), gm, gb, 1.0);
        }
    }
}

pub(crate) fn bmm_backward(a: Var, b: Var, g: &[f64], sink: &mut GradSink<'_>) {
    let (ta, tb) = (sink.value(a), sink.value(b));
    let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
    let n = tb.shape()[2];
    if let Some(ga) = sink.get(a) {
        for i in 0..bs {
            gemm(
                Mat::new(&g[i * m * n..(i + 1) * m * n], m, n),
                Mat::new(&tb.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                &mut ga[i * m * k..(i + 1) * m * k],
                1.0,
            );
        }
    }
    if let Some(gb) = sink.get(b) {
        for i in 0..bs {
            gemm(
                Mat::new(&ta.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                Mat::new(&g[i * m * n..(i + 1) * m * n], m, n),
                &mut gb[i * k * n..(i + 1) * k * n],
                1.0,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{AutodiffError, Tape, Tensor};

    #[test]
    fn identity_times_matrix() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = t.matmul(i, m).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1]);
        assert_eq!(t.value(y).data(), &[11.0]);
    }

    #[test]
    fn inner_dimension_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(matches!(err, AutodiffError::Dimension { .. }));
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_t_agrees_with_explicit_transpose() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = t.constant(Tensor::new(&[4, 3], (0..12).map(f64::from).collect()).unwrap());
        let bt = t.transpose(b).unwrap();
        let y1 = t.matmul(a, bt).unwrap();
        let y2 = t.matmul_t(a, b).unwrap();
        assert_eq!(t.value(y1), t.value(y2));
    }

    #[test]
    fn bmm_is_per_batch_matmul() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = t.constant(Tensor::new(&[2, 2, 1], vec![1., 1., 2., -1.]).unwrap());
        let y = t.bmm(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 2.0]);
    }
}
