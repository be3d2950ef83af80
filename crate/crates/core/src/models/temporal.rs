//! Encoder–decoder LSTM with additive attention over the encoder states,
//! forecasting the zone-mean series.

use crann_autodiff::nn::{Linear, Lstm};
use crann_autodiff::{xavier_uniform, Graph, Mode, ParamStore, Tensor, Var};
use rand::Rng;

use super::{ensure_finite, expect_shape};
use crate::error::{CoreError, Result};

const W_E: &str = "temporal.attn.w_e";
const W_D: &str = "temporal.attn.w_d";
const W_C: &str = "temporal.attn.w_c";

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalModule {
    pub lookback: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub attention_width: usize,
    pub teacher_forcing: bool,
    encoder: Lstm,
    decoder: Lstm,
    head: Linear,
}

pub struct TemporalOutput {
    /// `[B × horizon]`.
    pub prediction: Var,
    /// One `[B × lookback]` weight matrix per forecast step.
    pub attention: Vec<Var>,
}

impl TemporalModule {
    pub fn new(
        lookback: usize,
        horizon: usize,
        hidden: usize,
        attention_width: usize,
        teacher_forcing: bool,
    ) -> Result<Self> {
        if lookback == 0 || horizon == 0 || hidden == 0 || attention_width == 0 {
            return Err(CoreError::Config("temporal module sizes must be positive".into()));
        }
        Ok(Self {
            lookback,
            horizon,
            hidden,
            attention_width,
            teacher_forcing,
            encoder: Lstm::new("temporal.encoder", 1, hidden),
            // previous prediction and previous context vector
            decoder: Lstm::new("temporal.decoder", 1 + hidden, hidden),
            head: Linear::new("temporal.head", 2 * hidden, 1),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (a, h) = (self.attention_width, self.hidden);
        self.encoder.init(store, rng)?;
        self.decoder.init(store, rng)?;
        store.insert_param(W_E, xavier_uniform(&[a, h], rng)?);
        store.insert_param(W_D, xavier_uniform(&[a, h], rng)?);
        store.insert_param(W_C, xavier_uniform(&[1, a], rng)?.reshaped(&[a])?);
        self.head.init(store, rng)?;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params() + 2 * self.attention_width * self.hidden
            + self.attention_width
            + self.head.num_params()
    }

    /// Runs the encoder from a zero state over `series: [B × L]`; returns the
    /// stacked hidden states `[B × L × hidden]` and the final packed state.
    pub fn encode(&self, g: &mut Graph<'_>, series: Var) -> Result<(Var, Var)> {
        let sh = g.shape(series).to_vec();
        if sh.len() != 2 || sh[1] != self.lookback {
            return Err(CoreError::Dimension(format!(
                "temporal input: expected [B, {}], got {sh:?}",
                self.lookback
            )));
        }
        let b = sh[0];
        let mut state = self.encoder.zero_state(g, b);
        let mut states = Vec::with_capacity(self.lookback);
        for t in 0..self.lookback {
            let x = g.narrow(series, 1, t, 1)?;
            state = self.encoder.step(g, x, state)?;
            let h = self.encoder.hidden_of(g, state)?;
            states.push(g.reshape(h, &[b, 1, self.hidden])?);
        }
        let stacked = g.concat(&states, 1)?;
        ensure_finite(g, stacked, "temporal encoder")?;
        Ok((stacked, state))
    }

    /// Autoregressive decoding over the horizon. `target: [B × horizon]` is
    /// fed back instead of the predictions when teacher forcing is enabled
    /// and the graph is in training mode.
    pub fn forward(&self, g: &mut Graph<'_>, series: Var, target: Option<Var>) -> Result<TemporalOutput> {
        let (states, mut state) = self.encode(g, series)?;
        let b = g.shape(series)[0];
        let (l, h, a) = (self.lookback, self.hidden, self.attention_width);
        let w_e = g.param(W_E)?;
        let w_d = g.param(W_D)?;
        let w_c = g.param(W_C)?;
        let flat = g.reshape(states, &[b * l, h])?;
        let proj = g.matmul_t(flat, w_e)?;
        let enc_proj = g.reshape(proj, &[b, l, a])?;

        let forcing = match target {
            Some(t) if self.teacher_forcing && g.mode() == Mode::Train => {
                expect_shape("teacher-forcing target", g.shape(t), &[b, self.horizon])?;
                Some(t)
            }
            _ => None,
        };
        let mut prev = g.narrow(series, 1, l - 1, 1)?;
        let mut prev_ctx = g.constant(Tensor::zeros(&[b, h]));
        let mut preds = Vec::with_capacity(self.horizon);
        let mut attention = Vec::with_capacity(self.horizon);
        for i in 0..self.horizon {
            let input = g.concat(&[prev, prev_ctx], 1)?;
            state = self.decoder.step(g, input, state)?;
            let hi = self.decoder.hidden_of(g, state)?;
            let alpha = attention_weights(g, enc_proj, hi, w_d, w_c)?;
            let ctx = context(g, alpha, states)?;
            let joined = g.concat(&[ctx, hi], 1)?;
            let y = self.head.forward(g, joined)?;
            if !g.value(y).all_finite() || !g.value(alpha).all_finite() {
                return Err(CoreError::Numeric(format!("non-finite value at temporal decoder step {i}")));
            }
            preds.push(y);
            attention.push(alpha);
            prev = match forcing {
                Some(t) => g.narrow(t, 1, i, 1)?,
                None => y,
            };
            prev_ctx = ctx;
        }
        let prediction = g.concat(&preds, 1)?;
        Ok(TemporalOutput { prediction, attention })
    }
}

/// Attention weights `softmax_j(w_c · tanh(W_d·h + W_e·s_j))` given the
/// projected encoder states `enc_proj: [B × N × A]` and the decoder state
/// `h: [B × hidden]`.
pub fn attention_weights(g: &mut Graph<'_>, enc_proj: Var, h: Var, w_d: Var, w_c: Var) -> Result<Var> {
    let dec = g.matmul_t(h, w_d)?;
    let scores = g.additive_scores(enc_proj, dec, w_c)?;
    Ok(g.softmax(scores, 1)?)
}

/// Context vector `c = Σ_j α_j s_j` for `alpha: [B × N]`, `states: [B × N × H]`.
pub fn context(g: &mut Graph<'_>, alpha: Var, states: Var) -> Result<Var> {
    let (sa, ss) = (g.shape(alpha).to_vec(), g.shape(states).to_vec());
    if sa.len() != 2 || ss.len() != 3 || sa[0] != ss[0] || sa[1] != ss[1] {
        return Err(CoreError::Dimension(format!(
            "context: weights {sa:?} do not match states {ss:?}"
        )));
    }
    let (b, n, h) = (ss[0], ss[1], ss[2]);
    let a3 = g.reshape(alpha, &[b, 1, n])?;
    let c = g.bmm(a3, states)?;
    Ok(g.reshape(c, &[b, h])?)
}
