//! The full network: temporal and spatial forecasts, autoregressive terms
//! and horizon-aligned weather fused by one affine dense layer.

use std::ops::Range;

use crann_autodiff::nn::Linear;
use crann_autodiff::rng::rng_for;
use crann_autodiff::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use super::spatial::{SpatialModule, SpatialOutput};
use super::temporal::{TemporalModule, TemporalOutput};
use super::{ensure_finite, expect_shape, Architecture, Forecaster, ModelKind, PretrainStage};
use crate::dataset::{Batch, WindowConfig, WEATHER_COLUMNS};
use crate::error::{CoreError, Result};

pub const DENSE: &str = "dense";

/// Which inputs reach the dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Branches {
    pub temporal: bool,
    pub spatial: bool,
    pub ar: bool,
    pub exog: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            temporal: true,
            spatial: true,
            ar: true,
            exog: true,
        }
    }
}

/// Position of each input block inside the flattened dense-layer input,
/// in the fixed order `[mean | spatial | ar | exog]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub horizon: usize,
    pub sensors: usize,
    pub ar_lags: usize,
    /// `[horizon]`.
    pub mean: Option<Range<usize>>,
    /// `[horizon × S]`, row-major.
    pub spatial: Option<Range<usize>>,
    /// `[ar_lags × S]`, row 0 is t−1.
    pub ar: Option<Range<usize>>,
    /// `[horizon × 8]`.
    pub exog: Option<Range<usize>>,
    pub len: usize,
}

impl FeatureLayout {
    pub fn new(window: &WindowConfig, sensors: usize, branches: Branches) -> Self {
        let (hz, a) = (window.horizon, window.ar_lags);
        let mut at = 0;
        let mut take = |on: bool, n: usize| {
            on.then(|| {
                at += n;
                at - n..at
            })
        };
        let mean = take(branches.temporal, hz);
        let spatial = take(branches.spatial, hz * sensors);
        let ar = take(branches.ar, a * sensors);
        let exog = take(branches.exog, hz * WEATHER_COLUMNS.len());
        Self {
            horizon: hz,
            sensors,
            ar_lags: a,
            mean,
            spatial,
            ar,
            exog,
            len: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crann {
    pub temporal: TemporalModule,
    pub spatial: SpatialModule,
    pub window: WindowConfig,
    pub branches: Branches,
    pub layout: FeatureLayout,
    pretrain: bool,
    dense: Linear,
}

pub struct CrannOutput {
    /// `[B × horizon × S]`.
    pub prediction: Var,
    /// Dense-layer input `[B × F]`.
    pub features: Var,
    pub temporal: Option<TemporalOutput>,
    pub spatial: Option<SpatialOutput>,
}

impl Crann {
    pub fn new(
        temporal: TemporalModule,
        spatial: SpatialModule,
        window: WindowConfig,
        branches: Branches,
        pretrain: bool,
    ) -> Result<Self> {
        if !(branches.temporal || branches.spatial || branches.ar || branches.exog) {
            return Err(CoreError::Config("at least one input branch must be enabled".into()));
        }
        if temporal.lookback != window.lookback
            || temporal.horizon != window.horizon
            || spatial.lags != window.spatial_lags
            || spatial.horizon != window.horizon
        {
            return Err(CoreError::Config("module windows disagree with the data window".into()));
        }
        let s = spatial.n_sensors();
        let layout = FeatureLayout::new(&window, s, branches);
        let dense = Linear::new(DENSE, layout.len, window.horizon * s);
        Ok(Self {
            temporal,
            spatial,
            window,
            branches,
            layout,
            pretrain,
            dense,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.spatial.n_sensors()
    }

    pub fn feature_len(&self) -> usize {
        self.layout.len
    }

    /// Runs every enabled branch and the dense layer.
    pub fn run(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<CrannOutput> {
        let (b, s, w) = (batch.size, self.n_sensors(), &self.window);
        expect_shape("target", batch.target.shape(), &[b, w.horizon, s])?;
        let temporal = if self.branches.temporal {
            let x = g.constant(batch.temporal.clone());
            let target_mean = if self.temporal.teacher_forcing {
                let t = g.constant(batch.target.clone());
                Some(zone_mean(g, t)?)
            } else {
                None
            };
            Some(self.temporal.forward(g, x, target_mean)?)
        } else {
            None
        };
        let spatial = if self.branches.spatial {
            let x = g.constant(batch.spatial.clone());
            Some(self.spatial.forward(g, x)?)
        } else {
            None
        };
        let ar = self.branches.ar.then(|| g.constant(batch.ar.clone()));
        let exog = self.branches.exog.then(|| g.constant(batch.exog.clone()));
        let features = self.assemble_features(
            g,
            temporal.as_ref().map(|t| t.prediction),
            spatial.as_ref().map(|o| o.prediction),
            ar,
            exog,
        )?;
        let prediction = self.dense_forward(g, features)?;
        Ok(CrannOutput {
            prediction,
            features,
            temporal,
            spatial,
        })
    }

    /// Flattens the enabled blocks into `[B × F]`; each block must be present
    /// exactly when its branch is enabled.
    pub fn assemble_features(
        &self,
        g: &mut Graph<'_>,
        mean: Option<Var>,
        spatial: Option<Var>,
        ar: Option<Var>,
        exog: Option<Var>,
    ) -> Result<Var> {
        let l = &self.layout;
        let blocks = [
            ("mean forecast", mean, &l.mean, vec![l.horizon]),
            ("spatial forecast", spatial, &l.spatial, vec![l.horizon, l.sensors]),
            ("autoregressive terms", ar, &l.ar, vec![l.ar_lags, l.sensors]),
            ("weather", exog, &l.exog, vec![l.horizon, WEATHER_COLUMNS.len()]),
        ];
        let mut parts = Vec::with_capacity(4);
        let mut batch = None;
        for (name, v, range, dims) in blocks {
            match (v, range) {
                (Some(v), Some(r)) => {
                    let sh = g.shape(v).to_vec();
                    let b = *batch.get_or_insert(sh.first().copied().unwrap_or(0));
                    let mut want = vec![b];
                    want.extend(&dims);
                    expect_shape(name, &sh, &want)?;
                    parts.push(g.reshape(v, &[b, r.len()])?);
                }
                (None, None) => {}
                _ => {
                    return Err(CoreError::Dimension(format!(
                        "{name} supplied inconsistently with the enabled branches"
                    )))
                }
            }
        }
        Ok(g.concat(&parts, 1)?)
    }

    /// Affine map `[B × F] → [B × horizon × S]`.
    pub fn dense_forward(&self, g: &mut Graph<'_>, features: Var) -> Result<Var> {
        let b = g.shape(features)[0];
        let y = self.dense.forward(g, features)?;
        ensure_finite(g, y, "dense output")?;
        Ok(g.reshape(y, &[b, self.window.horizon, self.n_sensors()])?)
    }

    /// Dense stage evaluated on plain feature rows, outside any graph.
    pub fn dense_eval(&self, store: &ParamStore, features: &[f64]) -> Result<Vec<f64>> {
        let f = self.feature_len();
        if features.len() != f {
            return Err(CoreError::Dimension(format!("expected {f} features, got {}", features.len())));
        }
        let w = store.param(&self.dense.weight_path())?;
        let bias = store.param(&self.dense.bias_path())?;
        Ok(w.data()
            .chunks(f)
            .zip(bias.data())
            .map(|(row, b)| b + row.iter().zip(features).map(|(a, x)| a * x).sum::<f64>())
            .collect())
    }

    pub fn dense_weight_path(&self) -> String {
        self.dense.weight_path()
    }

    pub fn dense_bias_path(&self) -> String {
        self.dense.bias_path()
    }
}

/// Mean over sensors: `[B × H × S] → [B × H]`.
fn zone_mean(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let s = g.shape(x)[2];
    let sum = g.sum_axis(x, 2)?;
    Ok(g.scale(sum, 1.0 / s as f64))
}

impl Forecaster for Crann {
    fn kind(&self) -> ModelKind {
        ModelKind::Crann
    }

    fn as_crann(&self) -> Option<&Crann> {
        Some(self)
    }

    fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        if self.branches.temporal {
            self.temporal.init(&mut store, &mut rng_for(seed, "crann.temporal"))?;
        }
        if self.branches.spatial {
            self.spatial.init(&mut store, &mut rng_for(seed, "crann.spatial"))?;
        }
        self.dense.init(&mut store, &mut rng_for(seed, "crann.dense"))?;
        Ok(store)
    }

    fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Var> {
        Ok(self.run(g, batch)?.prediction)
    }

    fn architecture(&self) -> Architecture {
        let mut n = self.dense.num_params();
        if self.branches.temporal {
            n += self.temporal.num_params();
        }
        if self.branches.spatial {
            n += self.spatial.num_params();
        }
        Architecture {
            kind: ModelKind::Crann,
            convolutions: Some(self.spatial.widths().to_vec()),
            recurrent_layers: Some(1),
            hidden_units: Some(self.temporal.hidden),
            dense_layers: Some(1),
            lookback: self.window.lookback,
            num_params: n,
        }
    }

    fn pretrain_stages(&self) -> Vec<PretrainStage> {
        if !self.pretrain {
            return Vec::new();
        }
        let mut stages = Vec::new();
        if self.branches.temporal {
            stages.push(PretrainStage {
                name: "temporal",
                trainable: vec!["temporal.".into()],
            });
        }
        if self.branches.spatial {
            stages.push(PretrainStage {
                name: "spatial",
                trainable: vec!["spatial.".into()],
            });
        }
        stages
    }

    fn stage_loss(&self, g: &mut Graph<'_>, batch: &Batch, stage: &str) -> Result<Var> {
        let target = g.constant(batch.target.clone());
        match stage {
            "temporal" if self.branches.temporal => {
                let x = g.constant(batch.temporal.clone());
                let mean = zone_mean(g, target)?;
                let out = self.temporal.forward(g, x, Some(mean))?;
                Ok(g.mse(out.prediction, mean)?)
            }
            "spatial" if self.branches.spatial => {
                let x = g.constant(batch.spatial.clone());
                let out = self.spatial.forward(g, x)?;
                Ok(g.mse(out.prediction, target)?)
            }
            _ => Err(CoreError::Contract(format!("crann has no pretraining stage `{stage}`"))),
        }
    }
}
