use crate::error::{dim_err, shapes_err, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{split_axis, Tensor};

impl Tape {
    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return dim_err("softmax", format!("axis {axis} out of range for {:?}", t.shape()));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return dim_err("sum_axis", format!("axis {axis} out of range for {:?}", t.shape()));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::SumAxis { x, axis }))
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (a, b) = (self.value(pred), self.value(target));
        if a.shape() != b.shape() {
            return shapes_err("mse", a.shape(), b.shape());
        }
        let s = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target)))
    }
}

pub(crate) fn softmax_backward(x: Var, axis: usize, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    let Some(gx) = sink.get(x) else { return };
    let (outer, len, inner) = split_axis(out.shape(), axis);
    let y = out.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
            for j in 0..len {
                let k = base + j * inner;
                gx[k] += y[k] * (g[k] - dot);
            }
        }
    }
}

pub(crate) fn sum_backward(x: Var, g: f64, sink: &mut GradSink<'_>) {
    if let Some(gx) = sink.get(x) {
        gx.iter_mut().for_each(|v| *v += g);
    }
}

pub(crate) fn sum_axis_backward(x: Var, axis: usize, g: &[f64], sink: &mut GradSink<'_>) {
    let shape = sink.value(x).shape();
    let (outer, len, inner) = split_axis(shape, axis);
    let Some(gx) = sink.get(x) else { return };
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for j in 0..len {
            let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
    }
}

pub(crate) fn mse_backward(a: Var, b: Var, g: f64, sink: &mut GradSink<'_>) {
    let (ta, tb) = (sink.value(a), sink.value(b));
    let k = 2.0 * g / ta.len() as f64;
    if let Some(ga) = sink.get(a) {
        for ((d, &x), &y) in ga.iter_mut().zip(ta.data()).zip(tb.data()) {
            *d += k * (x - y);
        }
    }
    if let Some(gb) = sink.get(b) {
        for ((d, &x), &y) in gb.iter_mut().zip(ta.data()).zip(tb.data()) {
            *d -= k * (x - y);
        }
    }
}
