//! Comparison networks: a grid CNN, a stacked LSTM, a CNN feeding an LSTM
//! and an encoder–decoder LSTM.

use crann_autodiff::nn::{Linear, Lstm};
use crann_autodiff::rng::rng_for;
use crann_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use super::grid::{dims3, ConvStack, SensorGrid};
use super::{ensure_finite, expect_shape, Architecture, Forecaster, ModelKind};
use crate::dataset::{Batch, BatchNeeds, WindowConfig};
use crate::error::{CoreError, Result};

/// Stacked LSTM layers advanced one timestep at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedLstm {
    pub layers: Vec<Lstm>,
}

impl StackedLstm {
    pub fn new(prefix: &str, input: usize, hidden: usize, layers: usize) -> Result<Self> {
        if layers == 0 || hidden == 0 || input == 0 {
            return Err(CoreError::Config("recurrent stack sizes must be positive".into()));
        }
        Ok(Self {
            layers: (0..layers)
                .map(|i| Lstm::new(format!("{prefix}.l{i}"), if i == 0 { input } else { hidden }, hidden))
                .collect(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for l in &self.layers {
            l.init(store, rng)?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Lstm::num_params).sum()
    }

    pub fn zero_states(&self, g: &mut Graph<'_>, batch: usize) -> Vec<Var> {
        self.layers.iter().map(|l| l.zero_state(g, batch)).collect()
    }

    /// Feeds `x: [B × input]` through every layer; returns the top hidden state.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, states: &mut [Var]) -> Result<Var> {
        let mut input = x;
        for (layer, state) in self.layers.iter().zip(states.iter_mut()) {
            *state = layer.step(g, input, *state)?;
            input = layer.hidden_of(g, *state)?;
        }
        Ok(input)
    }

    /// Runs over `seq: [B × T × F]` from zero states; returns the top hidden
    /// state of every step and the final states.
    pub fn run(&self, g: &mut Graph<'_>, seq: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let (b, t, f) = dims3(g.shape(seq), "recurrent input")?;
        let mut states = self.zero_states(g, b);
        let mut tops = Vec::with_capacity(t);
        for i in 0..t {
            let xi = g.narrow(seq, 1, i, 1)?;
            let xi = g.reshape(xi, &[b, f])?;
            tops.push(self.step(g, xi, &mut states)?);
        }
        Ok((tops, states))
    }
}

fn recurrent_input<'a>(batch: &'a Batch, w: &WindowConfig, s: usize) -> Result<&'a Tensor> {
    let h = batch
        .history
        .as_ref()
        .ok_or_else(|| CoreError::Contract("batch lacks the per-sensor history".into()))?;
    expect_shape("history", h.shape(), &[batch.size, w.lookback, s])?;
    Ok(h)
}

/// Convolutions over the sensor grid with one channel per input lag and a
/// 3×3 head mapping to one channel per horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnBaseline {
    pub grid: SensorGrid,
    pub window: WindowConfig,
    stack: ConvStack,
}

impl CnnBaseline {
    pub fn new(grid: SensorGrid, window: &WindowConfig, widths: &[usize]) -> Result<Self> {
        let stack = ConvStack::new("cnn", window.spatial_lags, widths, window.horizon)?;
        Ok(Self {
            grid,
            window: *window,
            stack,
        })
    }
}

impl Forecaster for CnnBaseline {
    fn kind(&self) -> ModelKind {
        ModelKind::Cnn
    }

    fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.stack.init(&mut store, &mut rng_for(seed, "cnn"))?;
        Ok(store)
    }

    fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Var> {
        let x = g.constant(batch.spatial.clone());
        let gridded = self.grid.scatter(g, x)?;
        let y = self.stack.forward(g, &self.grid, gridded)?;
        let out = self.grid.gather(g, y)?;
        ensure_finite(g, out, "cnn output")?;
        Ok(out)
    }

    fn architecture(&self) -> Architecture {
        Architecture {
            kind: ModelKind::Cnn,
            convolutions: Some(self.stack.widths.clone()),
            recurrent_layers: None,
            hidden_units: None,
            dense_layers: None,
            lookback: self.window.spatial_lags,
            num_params: self.stack.num_params(),
        }
    }
}

/// Stacked LSTM over the per-sensor history; the last hidden state is
/// mapped to the whole `[horizon × S]` forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmBaseline {
    pub sensors: usize,
    pub window: WindowConfig,
    rnn: StackedLstm,
    head: Linear,
}

impl LstmBaseline {
    pub fn new(sensors: usize, window: &WindowConfig, layers: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            sensors,
            window: *window,
            rnn: StackedLstm::new("lstm", sensors, hidden, layers)?,
            head: Linear::new("lstm.head", hidden, window.horizon * sensors),
        })
    }
}

impl Forecaster for LstmBaseline {
    fn kind(&self) -> ModelKind {
        ModelKind::Lstm
    }

    fn needs(&self) -> BatchNeeds {
        BatchNeeds {
            history: true,
            weekly: false,
        }
    }

    fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "lstm");
        self.rnn.init(&mut store, &mut rng)?;
        self.head.init(&mut store, &mut rng)?;
        Ok(store)
    }

    fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Var> {
        let h = recurrent_input(batch, &self.window, self.sensors)?;
        let seq = g.constant(h.clone());
        let (tops, _) = self.rnn.run(g, seq)?;
        let last = *tops.last().expect("lookback is positive");
        let y = self.head.forward(g, last)?;
        ensure_finite(g, y, "lstm output")?;
        Ok(g.reshape(y, &[batch.size, self.window.horizon, self.sensors])?)
    }

    fn architecture(&self) -> Architecture {
        Architecture {
            kind: ModelKind::Lstm,
            convolutions: None,
            recurrent_layers: Some(self.rnn.layers.len()),
            hidden_units: Some(self.rnn.hidden()),
            dense_layers: None,
            lookback: self.window.lookback,
            num_params: self.rnn.num_params() + self.head.num_params(),
        }
    }
}

/// Grid convolutions keeping one channel per lag, read back per sensor and
/// fed lag by lag into a stacked LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnLstmBaseline {
    pub grid: SensorGrid,
    pub window: WindowConfig,
    stack: ConvStack,
    rnn: StackedLstm,
    head: Linear,
}

impl CnnLstmBaseline {
    pub fn new(grid: SensorGrid, window: &WindowConfig, widths: &[usize], layers: usize, hidden: usize) -> Result<Self> {
        let s = grid.n_sensors();
        let t = window.spatial_lags;
        Ok(Self {
            grid,
            window: *window,
            stack: ConvStack::new("cnn_lstm.cnn", t, widths, t)?,
            rnn: StackedLstm::new("cnn_lstm.rnn", s, hidden, layers)?,
            head: Linear::new("cnn_lstm.head", hidden, window.horizon * s),
        })
    }
}

impl Forecaster for CnnLstmBaseline {
    fn kind(&self) -> ModelKind {
        ModelKind::CnnLstm
    }

    fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.stack.init(&mut store, &mut rng_for(seed, "cnn_lstm.cnn"))?;
        let mut rng = rng_for(seed, "cnn_lstm.rnn");
        self.rnn.init(&mut store, &mut rng)?;
        self.head.init(&mut store, &mut rng)?;
        Ok(store)
    }

    fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Var> {
        let x = g.constant(batch.spatial.clone());
        let gridded = self.grid.scatter(g, x)?;
        let y = self.stack.forward(g, &self.grid, gridded)?;
        let conv = self.grid.gather(g, y)?;
        let (tops, _) = self.rnn.run(g, conv)?;
        let last = *tops.last().expect("spatial lags are positive");
        let out = self.head.forward(g, last)?;
        ensure_finite(g, out, "cnn_lstm output")?;
        Ok(g.reshape(out, &[batch.size, self.window.horizon, self.grid.n_sensors()])?)
    }

    fn architecture(&self) -> Architecture {
        Architecture {
            kind: ModelKind::CnnLstm,
            convolutions: Some(self.stack.widths.clone()),
            recurrent_layers: Some(self.rnn.layers.len()),
            hidden_units: Some(self.rnn.hidden()),
            dense_layers: None,
            lookback: self.window.spatial_lags,
            num_params: self.stack.num_params() + self.rnn.num_params() + self.head.num_params(),
        }
    }
}

/// Encoder–decoder LSTM. The decoder starts from the encoder's final states
/// and at every step reads its previous output together with the mean of
/// all top-layer encoder hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqBaseline {
    pub sensors: usize,
    pub window: WindowConfig,
    encoder: StackedLstm,
    decoder: StackedLstm,
    head: Linear,
}

impl Seq2SeqBaseline {
    pub fn new(sensors: usize, window: &WindowConfig, layers: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            sensors,
            window: *window,
            encoder: StackedLstm::new("seq2seq.enc", sensors, hidden, layers)?,
            decoder: StackedLstm::new("seq2seq.dec", sensors + hidden, hidden, layers)?,
            head: Linear::new("seq2seq.head", hidden, sensors),
        })
    }
}

impl Forecaster for Seq2SeqBaseline {
    fn kind(&self) -> ModelKind {
        ModelKind::Seq2seq
    }

    fn needs(&self) -> BatchNeeds {
        BatchNeeds {
            history: true,
            weekly: false,
        }
    }

    fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "seq2seq");
        self.encoder.init(&mut store, &mut rng)?;
        self.decoder.init(&mut store, &mut rng)?;
        self.head.init(&mut store, &mut rng)?;
        Ok(store)
    }

    fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Var> {
        let (b, s, l) = (batch.size, self.sensors, self.window.lookback);
        let h = recurrent_input(batch, &self.window, s)?;
        let seq = g.constant(h.clone());
        let (tops, mut states) = self.encoder.run(g, seq)?;
        let mut sum = tops[0];
        for &t in &tops[1..] {
            sum = g.add(sum, t)?;
        }
        let summary = g.scale(sum, 1.0 / l as f64);
        let last = g.narrow(seq, 1, l - 1, 1)?;
        let mut prev = g.reshape(last, &[b, s])?;
        let mut outs = Vec::with_capacity(self.window.horizon);
        for i in 0..self.window.horizon {
            let input = g.concat(&[prev, summary], 1)?;
            let top = self.decoder.step(g, input, &mut states)?;
            let y = self.head.forward(g, top)?;
            ensure_finite(g, y, &format!("seq2seq decoder step {i}"))?;
            outs.push(g.reshape(y, &[b, 1, s])?);
            prev = y;
        }
        Ok(g.concat(&outs, 1)?)
    }

    fn architecture(&self) -> Architecture {
        Architecture {
            kind: ModelKind::Seq2seq,
            convolutions: None,
            recurrent_layers: Some(self.encoder.layers.len()),
            hidden_units: Some(self.encoder.hidden()),
            dense_layers: None,
            lookback: self.window.lookback,
            num_params: self.encoder.num_params() + self.decoder.num_params() + self.head.num_params(),
        }
    }
}

#[cfg(test)]
mod tests {
    use crann_autodiff::gradcheck::{check_params, GradCheckOptions};
    use crann_autodiff::{AutodiffError, Mode};

    use super::*;
    use crate::models::test_util::{batch, sensors, tiny_window};
    use crate::models::{build_model, ModelConfig};

    const NEURAL: [ModelKind; 4] = [ModelKind::Cnn, ModelKind::Lstm, ModelKind::CnnLstm, ModelKind::Seq2seq];

    #[test]
    fn full_scale_parameter_counts() {
        let w = WindowConfig::default();
        let expect = [
            (ModelKind::Cnn, 131_928),
            (ModelKind::Lstm, 205_520),
            (ModelKind::CnnLstm, 328_168),
            (ModelKind::Seq2seq, 308_630),
        ];
        for (kind, n) in expect {
            let m = build_model(&ModelConfig::for_kind(kind), &w, &sensors(30)).unwrap();
            assert_eq!(m.architecture().num_params, n, "{kind}");
            assert_eq!(m.init_params(0).unwrap().num_params(), n, "{kind}");
        }
    }

    #[test]
    fn outputs_are_horizon_by_sensor() {
        let w = WindowConfig::default();
        let m = build_model(&ModelConfig::for_kind(ModelKind::Lstm), &w, &sensors(30)).unwrap();
        let store = m.init_params(0).unwrap();
        let b = batch(1, 30, &w, 0);
        let mut g = Graph::new(&store, Mode::Eval);
        let y = m.forward(&mut g, &b).unwrap();
        assert_eq!(g.shape(y), &[1, 24, 30]);

        let w = tiny_window();
        for kind in NEURAL {
            let mut cfg = ModelConfig::for_kind(kind);
            cfg.hidden = Some(3);
            cfg.conv_widths = Some(vec![2]);
            let m = build_model(&cfg, &w, &sensors(5)).unwrap();
            let store = m.init_params(1).unwrap();
            let mut g = Graph::new(&store, Mode::Eval);
            let y = m.forward(&mut g, &batch(2, 5, &w, 2)).unwrap();
            assert_eq!(g.shape(y), &[2, 6, 5], "{kind}");
        }
    }

    #[test]
    fn tiny_gradient_checks() {
        let w = tiny_window();
        for kind in NEURAL {
            let mut cfg = ModelConfig::for_kind(kind);
            cfg.hidden = Some(3);
            cfg.conv_widths = Some(vec![2, 2]);
            let m = build_model(&cfg, &w, &sensors(3)).unwrap();
            let store = m.init_params(11).unwrap();
            let b = batch(3, 3, &w, 12);
            let report = check_params(
                &store,
                |g| {
                    let y = m.forward(g, &b).map_err(|e| AutodiffError::Contract(e.to_string()))?;
                    let t = g.constant(b.target.clone());
                    g.mse(y, t)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "{kind}: {report:?}");
        }
    }

    #[test]
    fn recurrent_models_require_history() {
        let w = tiny_window();
        let mut cfg = ModelConfig::for_kind(ModelKind::Seq2seq);
        cfg.hidden = Some(2);
        let m = build_model(&cfg, &w, &sensors(2)).unwrap();
        assert!(m.needs().history);
        let store = m.init_params(0).unwrap();
        let mut b = batch(1, 2, &w, 0);
        b.history = None;
        let mut g = Graph::new(&store, Mode::Eval);
        assert!(matches!(m.forward(&mut g, &b), Err(CoreError::Contract(_))));
    }

    #[test]
    fn architectures_follow_the_hyperparameter_table() {
        let w = WindowConfig::default();
        let arch = |k| build_model(&ModelConfig::for_kind(k), &w, &sensors(30)).unwrap().architecture();
        let cnn = arch(ModelKind::Cnn);
        assert_eq!(cnn.convolutions, Some(vec![32, 32, 32, 64, 64, 64]));
        assert_eq!((cnn.lookback, cnn.recurrent_layers), (24, None));
        let lstm = arch(ModelKind::Lstm);
        assert_eq!((lstm.recurrent_layers, lstm.hidden_units, lstm.lookback), (Some(2), Some(100), 336));
        let cl = arch(ModelKind::CnnLstm);
        assert_eq!(cl.convolutions, Some(vec![32, 32, 64, 64, 64]));
        assert_eq!((cl.recurrent_layers, cl.hidden_units, cl.lookback), (Some(2), Some(100), 24));
        let s2s = arch(ModelKind::Seq2seq);
        assert_eq!((s2s.recurrent_layers, s2s.hidden_units, s2s.lookback), (Some(2), Some(100), 336));
    }
}
