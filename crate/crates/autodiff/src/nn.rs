//! Parameterized layers. Each layer is a small descriptor holding its
//! parameter path and sizes; values live in a [`ParamStore`].

use std::sync::Arc;

use rand::Rng;

use crate::error::{dim_err, AutodiffError, Result};
use crate::init::xavier_uniform;
use crate::ops::conv::KERNEL;
use crate::params::{Graph, Mode, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

fn path(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Affine map `y = x·Wᵀ + b` with `W: [out×in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_path(&self) -> String {
        path(&self.name, "weight")
    }

    pub fn bias_path(&self) -> String {
        path(&self.name, "bias")
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.insert_param(self.weight_path(), xavier_uniform(&[self.out_dim, self.in_dim], rng)?);
        store.insert_param(self.bias_path(), Tensor::zeros(&[self.out_dim]));
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_path())?;
        let b = g.param(&self.bias_path())?;
        let y = g.matmul_t(x, w)?;
        g.add(y, b)
    }
}

/// Single-layer LSTM whose state is packed as `[B×2H] = [h | c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let h4 = 4 * self.hidden;
        store.insert_param(path(&self.name, "w_ih"), xavier_uniform(&[h4, self.input], rng)?);
        store.insert_param(path(&self.name, "w_hh"), xavier_uniform(&[h4, self.hidden], rng)?);
        store.insert_param(path(&self.name, "bias"), Tensor::zeros(&[h4]));
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden + 1)
    }

    pub fn zero_state(&self, g: &mut Graph<'_>, batch: usize) -> Var {
        g.constant(Tensor::zeros(&[batch, 2 * self.hidden]))
    }

    /// Advances the packed state by one input `[B×I]`.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, state: Var) -> Result<Var> {
        let w_ih = g.param(&path(&self.name, "w_ih"))?;
        let w_hh = g.param(&path(&self.name, "w_hh"))?;
        let b = g.param(&path(&self.name, "bias"))?;
        g.lstm_cell(x, state, w_ih, w_hh, b)
    }

    /// Hidden half `h` of a packed state.
    pub fn hidden_of(&self, g: &mut Graph<'_>, state: Var) -> Result<Var> {
        g.narrow(state, 1, 0, self.hidden)
    }

    /// Unpacked form of [`Lstm::step`]: `(x, h, c) -> (h', c')`.
    pub fn cell(&self, g: &mut Graph<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        if g.shape(h) != g.shape(c) || g.shape(h).get(1) != Some(&self.hidden) {
            return dim_err(
                "lstm_cell",
                format!("h {:?} / c {:?} vs hidden {}", g.shape(h), g.shape(c), self.hidden),
            );
        }
        let state = g.concat(&[h, c], 1)?;
        let next = self.step(g, x, state)?;
        let h2 = g.narrow(next, 1, 0, self.hidden)?;
        let c2 = g.narrow(next, 1, self.hidden, self.hidden)?;
        Ok((h2, c2))
    }
}

/// 3×3 same-padding convolution, with a bias unless built
/// [`Conv2d::without_bias`].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel_size: usize) -> Result<Self> {
        if kernel_size != KERNEL {
            return Err(AutodiffError::Contract(format!(
                "only {KERNEL}×{KERNEL} kernels are supported, got {kernel_size}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(AutodiffError::Contract("convolution needs at least one channel".into()));
        }
        Ok(Self {
            name: name.into(),
            in_channels,
            out_channels,
            bias: true,
        })
    }

    /// Drops the bias, e.g. when a batch norm follows and would cancel it.
    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let shape = [self.out_channels, self.in_channels, KERNEL, KERNEL];
        store.insert_param(path(&self.name, "kernel"), xavier_uniform(&shape, rng)?);
        if self.bias {
            store.insert_param(path(&self.name, "bias"), Tensor::zeros(&[self.out_channels]));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * (self.in_channels * KERNEL * KERNEL + usize::from(self.bias))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let k = g.param(&path(&self.name, "kernel"))?;
        let b = if self.bias {
            Some(g.param(&path(&self.name, "bias"))?)
        } else {
            None
        };
        g.conv2d_same(x, k, b)
    }
}

/// Batch normalization with learnable scale/shift and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self::with_constants(name, channels, Self::DEFAULT_MOMENTUM, Self::DEFAULT_EPS)
    }

    pub fn with_constants(name: impl Into<String>, channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            name: name.into(),
            channels,
            momentum,
            eps,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let c = self.channels;
        store.insert_param(path(&self.name, "gamma"), Tensor::full(&[c], 1.0));
        store.insert_param(path(&self.name, "beta"), Tensor::zeros(&[c]));
        store.insert_buffer(path(&self.name, "running_mean"), Tensor::zeros(&[c]));
        store.insert_buffer(path(&self.name, "running_var"), Tensor::full(&[c], 1.0));
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let gamma = g.param(&path(&self.name, "gamma"))?;
        let beta = g.param(&path(&self.name, "beta"))?;
        let rm_path = path(&self.name, "running_mean");
        let rv_path = path(&self.name, "running_var");
        let rm = g.buffer(&rm_path)?;
        let rv = g.buffer(&rv_path)?;
        match g.mode() {
            Mode::Eval => {
                let (y, _) = g.batch_norm(x, gamma, beta, self.eps, mask, Some((rm.data(), rv.data())))?;
                Ok(y)
            }
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, self.eps, mask, None)?;
                let stats = stats.expect("training mode yields batch statistics");
                let m = self.momentum;
                let mean: Vec<f64> = rm.data().iter().zip(&stats.mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                let var: Vec<f64> = rv.data().iter().zip(&stats.var).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                g.record_buffer(&rm_path, Tensor::new(&[self.channels], mean)?);
                g.record_buffer(&rv_path, Tensor::new(&[self.channels], var)?);
                Ok(y)
            }
        }
    }
}
