//! Forecasting models sharing one batch interface: CRANN, the neural
//! baselines and the naive reference predictors.

pub mod baselines;
pub mod fusion;
pub mod grid;
pub mod naive;
pub mod spatial;
pub mod temporal;

use std::fmt;
use std::str::FromStr;

use crann_autodiff::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, BatchNeeds, SensorInfo, WindowConfig};
use crate::error::{CoreError, Result};

pub use baselines::{CnnBaseline, CnnLstmBaseline, LstmBaseline, Seq2SeqBaseline};
pub use fusion::{Branches, Crann, CrannOutput};
pub use grid::{build_grid, ConvStack, GridLayout, SensorGrid};
pub use naive::{Oracle, Persistence, SeasonalNaive};
pub use spatial::{SpatialMode, SpatialModule, SpatialOutput};
pub use temporal::{TemporalModule, TemporalOutput};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Crann,
    Cnn,
    Lstm,
    CnnLstm,
    Seq2seq,
    Persistence,
    Seasonal,
    /// Returns the target itself; exercises the evaluation pipeline.
    Oracle,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Crann,
        ModelKind::Cnn,
        ModelKind::Lstm,
        ModelKind::CnnLstm,
        ModelKind::Seq2seq,
        ModelKind::Persistence,
        ModelKind::Seasonal,
        ModelKind::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Crann => "crann",
            ModelKind::Cnn => "cnn",
            ModelKind::Lstm => "lstm",
            ModelKind::CnnLstm => "cnn_lstm",
            ModelKind::Seq2seq => "seq2seq",
            ModelKind::Persistence => "persistence",
            ModelKind::Seasonal => "seasonal",
            ModelKind::Oracle => "oracle",
        }
    }

    /// Whether the model has parameters to fit.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ModelKind::Persistence | ModelKind::Seasonal | ModelKind::Oracle)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::Usage(format!("unknown model `{s}`")))
    }
}

/// Layer configuration of an instantiated model, in the vocabulary of the
/// hyperparameter table: convolution widths, recurrent depth and width,
/// number of dense layers, total trainable scalars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub convolutions: Option<Vec<usize>>,
    pub recurrent_layers: Option<usize>,
    pub hidden_units: Option<usize>,
    pub dense_layers: Option<usize>,
    /// Hours of history consumed.
    pub lookback: usize,
    pub num_params: usize,
}

/// A partial objective used to fit a sub-network before joint training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainStage {
    pub name: &'static str,
    /// Parameter path prefixes updated during the stage.
    pub trainable: Vec<String>,
}

pub trait Forecaster: Send + Sync {
    fn kind(&self) -> ModelKind;

    fn needs(&self) -> BatchNeeds {
        BatchNeeds::default()
    }

    /// Freshly initialized parameters; identical for identical seeds.
    fn init_params(&self, seed: u64) -> Result<ParamStore>;

    /// Normalized predictions `[B × horizon × S]`.
    fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Var>;

    fn architecture(&self) -> Architecture;

    fn pretrain_stages(&self) -> Vec<PretrainStage> {
        Vec::new()
    }

    /// Loss of the named pretraining stage.
    fn stage_loss(&self, _g: &mut Graph<'_>, _batch: &Batch, stage: &str) -> Result<Var> {
        Err(CoreError::Contract(format!("{} has no pretraining stage `{stage}`", self.kind())))
    }

    fn as_crann(&self) -> Option<&Crann> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Recurrent width; `None` picks 100.
    pub hidden: Option<usize>,
    /// Additive-attention width; `None` matches `hidden`.
    pub attention_width: Option<usize>,
    /// Convolution widths; `None` picks the model's published stack.
    pub conv_widths: Option<Vec<usize>>,
    pub spatial_mode: SpatialMode,
    pub grid_layout: GridLayout,
    /// Feed ground truth to the temporal decoder during training.
    pub teacher_forcing: bool,
    pub branches: Branches,
    /// Fit the temporal and spatial modules on their own targets first.
    pub pretrain: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Crann,
            hidden: None,
            attention_width: None,
            conv_widths: None,
            spatial_mode: SpatialMode::PerHorizon,
            grid_layout: GridLayout::RowMajor,
            teacher_forcing: false,
            branches: Branches::default(),
            pretrain: false,
        }
    }
}

pub const DEFAULT_HIDDEN: usize = 100;
pub const CRANN_CONVOLUTIONS: [usize; 5] = [64; 5];
pub const CNN_CONVOLUTIONS: [usize; 6] = [32, 32, 32, 64, 64, 64];
pub const CNN_LSTM_CONVOLUTIONS: [usize; 5] = [32, 32, 64, 64, 64];
pub const BASELINE_LAYERS: usize = 2;

impl ModelConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    fn hidden_units(&self) -> Result<usize> {
        match self.hidden.unwrap_or(DEFAULT_HIDDEN) {
            0 => Err(CoreError::Config("hidden size must be positive".into())),
            h => Ok(h),
        }
    }

    fn widths(&self, default: &[usize]) -> Result<Vec<usize>> {
        let w = self.conv_widths.clone().unwrap_or_else(|| default.to_vec());
        if w.contains(&0) {
            return Err(CoreError::Config("convolution widths must be positive".into()));
        }
        Ok(w)
    }
}

/// Instantiates the configured model for a zone.
pub fn build_model(cfg: &ModelConfig, window: &WindowConfig, sensors: &[SensorInfo]) -> Result<Box<dyn Forecaster>> {
    window.validate()?;
    let s = sensors.len();
    if s == 0 {
        return Err(CoreError::Config("a model needs at least one sensor".into()));
    }
    Ok(match cfg.kind {
        ModelKind::Crann => {
            let hidden = cfg.hidden_units()?;
            let temporal = TemporalModule::new(
                window.lookback,
                window.horizon,
                hidden,
                cfg.attention_width.unwrap_or(hidden),
                cfg.teacher_forcing,
            )?;
            let grid = build_grid(sensors, cfg.grid_layout)?;
            let spatial = SpatialModule::new(
                grid,
                window.spatial_lags,
                window.horizon,
                &cfg.widths(&CRANN_CONVOLUTIONS)?,
                cfg.spatial_mode,
            )?;
            Box::new(Crann::new(temporal, spatial, *window, cfg.branches, cfg.pretrain)?)
        }
        ModelKind::Cnn => {
            let grid = build_grid(sensors, cfg.grid_layout)?;
            Box::new(CnnBaseline::new(grid, window, &cfg.widths(&CNN_CONVOLUTIONS)?)?)
        }
        ModelKind::Lstm => Box::new(LstmBaseline::new(s, window, BASELINE_LAYERS, cfg.hidden_units()?)?),
        ModelKind::CnnLstm => {
            let grid = build_grid(sensors, cfg.grid_layout)?;
            Box::new(CnnLstmBaseline::new(
                grid,
                window,
                &cfg.widths(&CNN_LSTM_CONVOLUTIONS)?,
                BASELINE_LAYERS,
                cfg.hidden_units()?,
            )?)
        }
        ModelKind::Seq2seq => Box::new(Seq2SeqBaseline::new(s, window, BASELINE_LAYERS, cfg.hidden_units()?)?),
        ModelKind::Persistence => Box::new(Persistence::new(s, window)),
        ModelKind::Seasonal => Box::new(SeasonalNaive::new(s, window)),
        ModelKind::Oracle => Box::new(Oracle::new(s, window)),
    })
}

/// Fails with a numeric error naming `what` if `v` holds a non-finite value.
pub(crate) fn ensure_finite(g: &Graph<'_>, v: Var, what: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(CoreError::Numeric(format!("non-finite value in {what}")))
    }
}

/// Checks that a batch tensor has the expected shape.
pub(crate) fn expect_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(CoreError::Dimension(format!("{what}: expected {want:?}, got {got:?}")))
    }
}
