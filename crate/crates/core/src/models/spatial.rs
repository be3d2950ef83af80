//! Convolutional spatial module with the learnable spatio-temporal
//! attention tensor `W_att: [T × S × S]`.

use crann_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{dims3, ConvStack, SensorGrid};
use super::expect_shape;
use crate::error::{CoreError, Result};

pub const W_ATT: &str = "spatial.w_att";

/// How the attended `[T × S]` map becomes a `[horizon × S]` forecast.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    /// Row `i` of the attended map is horizon `i`; requires `T = horizon`.
    #[default]
    PerHorizon,
    /// The attended map is averaged over lags and repeated for every horizon.
    LagPooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialModule {
    pub lags: usize,
    pub horizon: usize,
    pub mode: SpatialMode,
    pub grid: SensorGrid,
    stack: ConvStack,
}

pub struct SpatialOutput {
    /// `[B × horizon × S]`.
    pub prediction: Var,
    /// `[B × T × S × S]`, softmax-normalized over the last axis.
    pub attention: Var,
    /// Conv stack output `[B × T × S]`.
    pub conv: Var,
}

impl SpatialModule {
    pub fn new(grid: SensorGrid, lags: usize, horizon: usize, widths: &[usize], mode: SpatialMode) -> Result<Self> {
        if lags == 0 || horizon == 0 {
            return Err(CoreError::Config("spatial module needs positive lags and horizon".into()));
        }
        if mode == SpatialMode::PerHorizon && lags != horizon {
            return Err(CoreError::Config(format!(
                "per-horizon spatial attention needs spatial_lags = horizon, got {lags} and {horizon}"
            )));
        }
        let stack = ConvStack::new("spatial.cnn", lags, widths, lags)?;
        Ok(Self {
            lags,
            horizon,
            mode,
            grid,
            stack,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.grid.n_sensors()
    }

    pub fn widths(&self) -> &[usize] {
        &self.stack.widths
    }

    /// Conv stack parameters are drawn from `rng`; `W_att` starts at zero so
    /// the initial attention is uniform.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.stack.init(store, rng)?;
        let s = self.n_sensors();
        store.insert_param(W_ATT, Tensor::zeros(&[self.lags, s, s]));
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let s = self.n_sensors();
        self.stack.num_params() + self.lags * s * s
    }

    /// `[B × T × S] → [B × T × S]` through the grid and the conv stack.
    pub fn conv_forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (b, t, s) = dims3(g.shape(x), "spatial input")?;
        expect_shape("spatial input", &[t, s], &[self.lags, self.n_sensors()])?;
        let gridded = self.grid.scatter(g, x)?;
        let y = self.stack.forward(g, &self.grid, gridded)?;
        let out = self.grid.gather(g, y)?;
        debug_assert_eq!(g.shape(out), &[b, t, s]);
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<SpatialOutput> {
        let conv = self.conv_forward(g, x)?;
        let w = g.param(W_ATT)?;
        let attention = st_attention(g, conv, w)?;
        let attended = attend_output(g, attention, conv)?;
        let prediction = match self.mode {
            SpatialMode::PerHorizon => attended,
            SpatialMode::LagPooled => {
                let (b, t, s) = dims3(g.shape(attended), "spatial output")?;
                let summed = g.sum_axis(attended, 1)?;
                let mean = g.scale(summed, 1.0 / t as f64);
                let m3 = g.reshape(mean, &[b, 1, s])?;
                let zeros = g.constant(Tensor::zeros(&[1, self.horizon, 1]));
                g.add(m3, zeros)?
            }
        };
        Ok(SpatialOutput {
            prediction,
            attention,
            conv,
        })
    }
}

/// `a[b,i,j,k] = softmax_k(x_conv[b,i,k] · W_att[i,j,k])`.
pub fn st_attention(g: &mut Graph<'_>, x_conv: Var, w_att: Var) -> Result<Var> {
    let (b, t, s) = dims3(g.shape(x_conv), "st_attention")?;
    expect_shape("attention tensor", g.shape(w_att), &[t, s, s])?;
    let x4 = g.reshape(x_conv, &[b, t, 1, s])?;
    let sigma = g.mul(x4, w_att)?;
    Ok(g.softmax(sigma, 3)?)
}

/// `x̃[b,i,j] = Σ_k a[b,i,j,k] · x_conv[b,i,k]`.
pub fn attend_output(g: &mut Graph<'_>, a: Var, x_conv: Var) -> Result<Var> {
    let (b, t, s) = dims3(g.shape(x_conv), "attend_output")?;
    expect_shape("attention", g.shape(a), &[b, t, s, s])?;
    let x4 = g.reshape(x_conv, &[b, t, 1, s])?;
    let weighted = g.mul(a, x4)?;
    Ok(g.sum_axis(weighted, 3)?)
}
