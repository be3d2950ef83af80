//! Forward definitions and backward rules of every primitive.

mod attention;
pub(crate) mod conv;
mod elementwise;
mod linalg;
mod norm;
mod recurrent;
mod reduce;
mod shape;

pub use norm::BatchStats;
pub use shape::ZERO_FILL;

use crate::tape::{GradSink, Node, Op};

pub(crate) fn backward(node: &Node, g: &[f64], sink: &mut GradSink<'_>) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => elementwise::add_backward(*a, *b, out, g, 1.0, sink),
        Op::Sub(a, b) => elementwise::add_backward(*a, *b, out, g, -1.0, sink),
        Op::Mul(a, b) => elementwise::mul_backward(*a, *b, out, g, sink),
        Op::Scale(x, k) => elementwise::scale_backward(*x, *k, g, sink),
        Op::Tanh(x) => elementwise::tanh_backward(*x, out, g, sink),
        Op::Sigmoid(x) => elementwise::sigmoid_backward(*x, out, g, sink),
        Op::Relu(x) => elementwise::relu_backward(*x, g, sink),
        Op::MatMul { a, b, trans_b } => linalg::matmul_backward(*a, *b, *trans_b, g, sink),
        Op::BatchMatMul(a, b) => linalg::bmm_backward(*a, *b, g, sink),
        Op::Softmax { x, axis } => reduce::softmax_backward(*x, *axis, out, g, sink),
        Op::Sum(x) => reduce::sum_backward(*x, g[0], sink),
        Op::Mean(x) => {
            let n = sink.value(*x).len() as f64;
            reduce::sum_backward(*x, g[0] / n, sink)
        }
        Op::SumAxis { x, axis } => reduce::sum_axis_backward(*x, *axis, g, sink),
        Op::Mse(a, b) => reduce::mse_backward(*a, *b, g[0], sink),
        Op::Concat { inputs, axis } => shape::concat_backward(inputs, *axis, g, sink),
        Op::Narrow { x, axis, start } => shape::narrow_backward(*x, *axis, *start, out, g, sink),
        Op::Reshape(x) => shape::reshape_backward(*x, g, sink),
        Op::Gather { x, index } => shape::gather_backward(*x, index, g, sink),
        Op::Conv2d {
            x,
            kernel,
            bias,
            cols,
        } => conv::conv2d_backward(*x, *kernel, *bias, cols, g, sink),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mask,
            batch_stats,
        } => norm::batch_norm_backward(
            *x,
            *gamma,
            *beta,
            xhat,
            inv_std,
            mask.as_deref(),
            *batch_stats,
            g,
            sink,
        ),
        Op::LstmCell {
            x,
            state,
            w_ih,
            w_hh,
            bias,
            gates,
            tanh_c,
        } => recurrent::lstm_backward(*x, *state, *w_ih, *w_hh, *bias, gates, tanh_c, g, sink),
        Op::AdditiveScores { enc, dec, w } => attention::additive_scores_backward(*enc, *dec, *w, g, sink),
    }
}
