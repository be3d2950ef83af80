use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{numel, split_axis, Tensor};

/// Index entry in a gather map that produces a zero instead of reading the
/// source.
pub const ZERO_FILL: usize = usize::MAX;

impl Tape {
    /// Concatenates tensors that agree on every dimension except `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return dim_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return dim_err("concat", format!("cannot join {base:?} with {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer = numel(&base[..axis]);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * numel(&t.shape()[axis + 1..]);
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return dim_err(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            );
        }
        let (outer, full, inner) = split_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// `out[i] = x.flat[index[i]]`, or zero where `index[i] == ZERO_FILL`.
    /// Covers permutations, broadcasts, scatters into padded layouts and
    /// gathers back out of them.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != index.len() {
            return dim_err(
                "gather",
                format!("index of length {} cannot fill shape {shape:?}", index.len()),
            );
        }
        if let Some(&bad) = index.iter().find(|&&i| i != ZERO_FILL && i >= t.len()) {
            return dim_err("gather", format!("index {bad} out of range for {:?}", t.shape()));
        }
        let src = t.data();
        let out = index
            .iter()
            .map(|&i| if i == ZERO_FILL { 0.0 } else { src[i] })
            .collect();
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Gather { x, index }))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return dim_err("transpose", format!("expected a matrix, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let index: Arc<[usize]> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(x, index, &[c, r])
    }
}

pub(crate) fn concat_backward(inputs: &[Var], axis: usize, g: &[f64], sink: &mut GradSink<'_>) {
    let shape = sink.value(inputs[0]).shape();
    let outer = numel(&shape[..axis]);
    let chunks: Vec<usize> = inputs
        .iter()
        .map(|&v| {
            let s = sink.value(v).shape();
            s[axis] * numel(&s[axis + 1..])
        })
        .collect();
    let row: usize = chunks.iter().sum();
    let mut offset = 0;
    for (&v, &chunk) in inputs.iter().zip(&chunks) {
        if let Some(gv) = sink.get(v) {
            for o in 0..outer {
                let src = &g[o * row + offset..o * row + offset + chunk];
                gv[o * chunk..(o + 1) * chunk]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, &s)| *d += s);
            }
        }
        offset += chunk;
    }
}

pub(crate) fn narrow_backward(
    x: Var,
    axis: usize,
    start: usize,
    out: &Tensor,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let (outer, full, inner) = split_axis(sink.value(x).shape(), axis);
    let len = out.shape()[axis];
    let Some(gx) = sink.get(x) else { return };
    for o in 0..outer {
        let from = (o * full + start) * inner;
        let src = &g[o * len * inner..(o + 1) * len * inner];
        gx[from..from + len * inner]
            .iter_mut()
            .zip(src)
            .for_each(|(d, &s)| *d += s);
    }
}

pub(crate) fn reshape_backward(x: Var, g: &[f64], sink: &mut GradSink<'_>) {
    if let Some(gx) = sink.get(x) {
        gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
    }
}

pub(crate) fn gather_backward(x: Var, index: &[usize], g: &[f64], sink: &mut GradSink<'_>) {
    if let Some(gx) = sink.get(x) {
        for (&i, &gv) in index.iter().zip(g) {
            if i != ZERO_FILL {
                gx[i] += gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::ZERO_FILL;
    use crate::{Tape, Tensor};

    #[test]
    fn concat_narrow_roundtrip() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(&[2, 1], vec![1., 2.]).unwrap());
        let b = t.constant(Tensor::new(&[2, 2], vec![3., 4., 5., 6.]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let n = t.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(t.value(n), t.value(b));
    }

    #[test]
    fn gather_fills_sentinel_with_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[3], vec![7., 8., 9.]).unwrap());
        let idx: Arc<[usize]> = Arc::from(vec![2, ZERO_FILL, 0, 0]);
        let y = t.gather(x, idx, &[2, 2]).unwrap();
        assert_eq!(t.value(y).data(), &[9., 0., 7., 7.]);
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = t.transpose(x).unwrap();
        assert_eq!(t.value(y).shape(), &[3, 2]);
        assert_eq!(t.value(y).data(), &[1., 4., 2., 5., 3., 6.]);
    }
}
