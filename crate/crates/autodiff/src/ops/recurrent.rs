//! Fused LSTM cell. The recurrent state is packed as `[B×2H] = [h | c]` so a
//! single node carries both outputs of a step.

use crate::error::{dim_err, Result};
use crate::ops::elementwise::sigmoid;
use crate::ops::linalg::{gemm, Mat};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// One LSTM step with gate order (input, forget, candidate, output):
    ///
    /// ```text
    /// z  = x·W_ihᵀ + h·W_hhᵀ + b
    /// c' = σ(z_f)∘c + σ(z_i)∘tanh(z_g)
    /// h' = σ(z_o)∘tanh(c')
    /// ```
    ///
    /// `x: [B×I]`, `state: [B×2H]`, `w_ih: [4H×I]`, `w_hh: [4H×H]`,
    /// `bias: [4H]`; returns the packed `[B×2H]` state `[h' | c']`.
    pub fn lstm_cell(&mut self, x: Var, state: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(state));
        let (sih, shh, sb) = (self.shape(w_ih), self.shape(w_hh), self.shape(bias));
        if sx.len() != 2 || ss.len() != 2 || ss[1] % 2 != 0 {
            return dim_err("lstm_cell", format!("input {sx:?} / state {ss:?}"));
        }
        let (b, input) = (sx[0], sx[1]);
        let hidden = ss[1] / 2;
        let ok = ss[0] == b
            && sih == [4 * hidden, input]
            && shh == [4 * hidden, hidden]
            && sb == [4 * hidden];
        if !ok {
            return dim_err(
                "lstm_cell",
                format!(
                    "x {sx:?}, state {ss:?}, w_ih {sih:?}, w_hh {shh:?}, bias {sb:?} are inconsistent with hidden size {hidden}"
                ),
            );
        }
        let sv = self.value(state).data();
        let mut z = vec![0.0; b * 4 * hidden];
        for row in z.chunks_exact_mut(4 * hidden) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(
            Mat::new(self.value(x).data(), b, input),
            Mat::new(self.value(w_ih).data(), 4 * hidden, input).t(),
            &mut z,
            1.0,
        );
        gemm(
            Mat::strided(sv, b, hidden, 2 * hidden),
            Mat::new(self.value(w_hh).data(), 4 * hidden, hidden).t(),
            &mut z,
            1.0,
        );
        let mut out = vec![0.0; b * 2 * hidden];
        let mut tanh_c = vec![0.0; b * hidden];
        for bi in 0..b {
            let gates = &mut z[bi * 4 * hidden..][..4 * hidden];
            for j in 0..hidden {
                gates[j] = sigmoid(gates[j]);
                gates[hidden + j] = sigmoid(gates[hidden + j]);
                gates[2 * hidden + j] = gates[2 * hidden + j].tanh();
                gates[3 * hidden + j] = sigmoid(gates[3 * hidden + j]);
                let c_prev = sv[bi * 2 * hidden + hidden + j];
                let c = gates[hidden + j] * c_prev + gates[j] * gates[2 * hidden + j];
                let tc = c.tanh();
                tanh_c[bi * hidden + j] = tc;
                out[bi * 2 * hidden + j] = gates[3 * hidden + j] * tc;
                out[bi * 2 * hidden + hidden + j] = c;
            }
        }
        let v = Tensor::new(&[b, 2 * hidden], out)?;
        Ok(self.push(
            v,
            Op::LstmCell {
                x,
                state,
                w_ih,
                w_hh,
                bias,
                gates: z,
                tanh_c,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward(
    x: Var,
    state: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    gates: &[f64],
    tanh_c: &[f64],
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let sv = sink.value(state).data();
    let b = sink.value(x).shape()[0];
    let input = sink.value(x).shape()[1];
    let hidden = tanh_c.len() / b;
    let h4 = 4 * hidden;

    let mut dz = vec![0.0; b * h4];
    let mut dc_prev = vec![0.0; b * hidden];
    for bi in 0..b {
        let gt = &gates[bi * h4..][..h4];
        let d = &mut dz[bi * h4..][..h4];
        for j in 0..hidden {
            let (i, f, cand, o) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
            let tc = tanh_c[bi * hidden + j];
            let dh = g[bi * 2 * hidden + j];
            let dc = g[bi * 2 * hidden + hidden + j] + dh * o * (1.0 - tc * tc);
            let c_prev = sv[bi * 2 * hidden + hidden + j];
            d[j] = dc * cand * i * (1.0 - i);
            d[hidden + j] = dc * c_prev * f * (1.0 - f);
            d[2 * hidden + j] = dc * i * (1.0 - cand * cand);
            d[3 * hidden + j] = dh * tc * o * (1.0 - o);
            dc_prev[bi * hidden + j] = dc * f;
        }
    }
    let xv = sink.value(x).data();
    let dzm = Mat::new(&dz, b, h4);
    if let Some(gb) = sink.get(bias) {
        for row in dz.chunks_exact(h4) {
            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
    }
    if let Some(gw) = sink.get(w_ih) {
        gemm(dzm.t(), Mat::new(xv, b, input), gw, 1.0);
    }
    if let Some(gw) = sink.get(w_hh) {
        gemm(dzm.t(), Mat::strided(sv, b, hidden, 2 * hidden), gw, 1.0);
    }
    if sink.wants(x) {
        let w = sink.value(w_ih).data();
        let gx = sink.get(x).expect("wants grad");
        gemm(dzm, Mat::new(w, h4, input), gx, 1.0);
    }
    if sink.wants(state) {
        let w = sink.value(w_hh).data();
        let mut dh_prev = vec![0.0; b * hidden];
        gemm(dzm, Mat::new(w, h4, hidden), &mut dh_prev, 0.0);
        let gs = sink.get(state).expect("wants grad");
        for bi in 0..b {
            for j in 0..hidden {
                gs[bi * 2 * hidden + j] += dh_prev[bi * hidden + j];
                gs[bi * 2 * hidden + hidden + j] += dc_prev[bi * hidden + j];
            }
        }
    }
}
