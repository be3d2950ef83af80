use crate::error::{shapes_err, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{numel, Tensor};

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for d in 0..nd {
        let da = if d < nd - a.len() { 1 } else { a[d - (nd - a.len())] };
        let db = if d < nd - b.len() { 1 } else { b[d - (nd - b.len())] };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the index space of `out`; broadcast
/// dimensions get stride 0.
fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let pad = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut s = 1;
    for d in (0..nd).rev() {
        let dim = if d < pad { 1 } else { shape[d - pad] };
        strides[d] = if dim == 1 && out[d] != 1 { 0 } else { s };
        s *= dim;
    }
    strides
}

/// Visits `(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = strides_in(a, out);
    let sb = strides_in(b, out);
    let nd = out.len();
    let total = numel(out);
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary(
    tape: &Tape,
    op: &'static str,
    a: Var,
    b: Var,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape() == tb.shape() {
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(ta.shape(), data);
    }
    let Some(out_shape) = broadcast_shape(ta.shape(), tb.shape()) else {
        return shapes_err(op, ta.shape(), tb.shape());
    };
    let mut data = vec![0.0; numel(&out_shape)];
    let (da, db) = (ta.data(), tb.data());
    for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |o, i, j| {
        data[o] = f(da[i], db[j]);
    });
    Tensor::new(&out_shape, data)
}

fn unary(tape: &Tape, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
    let t = tape.value(x);
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self, "add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self, "sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self, "mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = unary(self, x, |t| t * k);
        self.push(v, Op::Scale(x, k))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = unary(self, x, f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = unary(self, x, sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = unary(self, x, |t| t.max(0.0));
        self.push(v, Op::Relu(x))
    }
}

pub(crate) fn add_backward(a: Var, b: Var, out: &Tensor, g: &[f64], sign_b: f64, sink: &mut GradSink<'_>) {
    let sa = sink.value(a).shape();
    let sb = sink.value(b).shape();
    if let Some(ga) = sink.get(a) {
        if sa == out.shape() {
            ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
        } else {
            for_each_broadcast(out.shape(), sa, sb, |o, i, _| ga[i] += g[o]);
        }
    }
    if let Some(gb) = sink.get(b) {
        if sb == out.shape() {
            gb.iter_mut().zip(g).for_each(|(x, &y)| *x += sign_b * y);
        } else {
            for_each_broadcast(out.shape(), sa, sb, |o, _, j| gb[j] += sign_b * g[o]);
        }
    }
}

pub(crate) fn mul_backward(a: Var, b: Var, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    let ta = sink.value(a);
    let tb = sink.value(b);
    let same = ta.shape() == out.shape() && tb.shape() == out.shape();
    if let Some(ga) = sink.get(a) {
        if same {
            for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                *x += gy * bv;
            }
        } else {
            for_each_broadcast(out.shape(), ta.shape(), tb.shape(), |o, i, j| {
                ga[i] += g[o] * tb.data()[j]
            });
        }
    }
    if let Some(gb) = sink.get(b) {
        if same {
            for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ta.data()) {
                *x += gy * av;
            }
        } else {
            for_each_broadcast(out.shape(), ta.shape(), tb.shape(), |o, i, j| {
                gb[j] += g[o] * ta.data()[i]
            });
        }
    }
}

pub(crate) fn scale_backward(x: Var, k: f64, g: &[f64], sink: &mut GradSink<'_>) {
    if let Some(gx) = sink.get(x) {
        gx.iter_mut().zip(g).for_each(|(a, &b)| *a += k * b);
    }
}

pub(crate) fn tanh_backward(x: Var, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    if let Some(gx) = sink.get(x) {
        for ((a, &gy), &y) in gx.iter_mut().zip(g).zip(out.data()) {
            *a += gy * (1.0 - y * y);
        }
    }
}

pub(crate) fn sigmoid_backward(x: Var, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    if let Some(gx) = sink.get(x) {
        for ((a, &gy), &y) in gx.iter_mut().zip(g).zip(out.data()) {
            *a += gy * y * (1.0 - y);
        }
    }
}

pub(crate) fn relu_backward(x: Var, g: &[f64], sink: &mut GradSink<'_>) {
    let xv = sink.value(x).data();
    if let Some(gx) = sink.get(x) {
        for ((a, &gy), &v) in gx.iter_mut().zip(g).zip(xv) {
            if v > 0.0 {
                *a += gy;
            }
        }
    }
}
