//! Sensor-to-grid embedding and the masked convolution stack shared by the
//! spatial module and the convolutional baselines.

use std::collections::HashSet;
use std::sync::Arc;

use crann_autodiff::nn::{BatchNorm, Conv2d};
use crann_autodiff::{Graph, ParamStore, Tensor, Var, ZERO_FILL};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SensorInfo;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridLayout {
    /// Near-square grid filled row-major in sensor-id order.
    #[default]
    RowMajor,
    /// Rows by descending latitude, columns by ascending longitude.
    Geographic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorGrid {
    pub rows: usize,
    pub cols: usize,
    /// Flat cell index of each sensor.
    pub cell_of: Vec<usize>,
    /// `true` for cells that hold a sensor.
    pub mask: Vec<bool>,
}

pub fn build_grid(sensors: &[SensorInfo], layout: GridLayout) -> Result<SensorGrid> {
    let s = sensors.len();
    if s == 0 {
        return Err(CoreError::Config("grid needs at least one sensor".into()));
    }
    let mut seen = HashSet::new();
    if let Some(d) = sensors.iter().find(|x| !seen.insert(x.id.as_str())) {
        return Err(CoreError::Config(format!("duplicate sensor id `{}`", d.id)));
    }
    let rows = (s as f64).sqrt().ceil() as usize;
    let cols = s.div_ceil(rows);
    let order: Vec<usize> = match layout {
        GridLayout::RowMajor => {
            let mut o: Vec<usize> = (0..s).collect();
            o.sort_by(|&a, &b| sensors[a].id.cmp(&sensors[b].id));
            o
        }
        GridLayout::Geographic => {
            let coord = |i: usize| -> Result<(f64, f64)> {
                match (sensors[i].latitude, sensors[i].longitude) {
                    (Some(la), Some(lo)) => Ok((la, lo)),
                    _ => Err(CoreError::Config(format!(
                        "geographic layout needs coordinates for sensor `{}`",
                        sensors[i].id
                    ))),
                }
            };
            let mut o: Vec<usize> = (0..s).collect();
            let coords: Vec<(f64, f64)> = (0..s).map(coord).collect::<Result<_>>()?;
            o.sort_by(|&a, &b| coords[b].0.total_cmp(&coords[a].0));
            for chunk in o.chunks_mut(cols) {
                chunk.sort_by(|&a, &b| coords[a].1.total_cmp(&coords[b].1));
            }
            o
        }
    };
    let mut cell_of = vec![0; s];
    let mut mask = vec![false; rows * cols];
    for (cell, &sensor) in order.iter().enumerate() {
        cell_of[sensor] = cell;
        mask[cell] = true;
    }
    Ok(SensorGrid {
        rows,
        cols,
        cell_of,
        mask,
    })
}

impl SensorGrid {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_sensors(&self) -> usize {
        self.cell_of.len()
    }

    pub fn masked_cells(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    pub fn mask_arc(&self) -> Arc<[bool]> {
        Arc::from(self.mask.clone())
    }

    /// `[B×C×S] → [B×C×rows×cols]`, unused cells zero.
    pub fn scatter(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (b, c, s) = dims3(g.shape(x), "scatter")?;
        if s != self.n_sensors() {
            return Err(CoreError::Dimension(format!("grid holds {} sensors, input has {s}", self.n_sensors())));
        }
        let hw = self.cells();
        let mut sensor_at = vec![ZERO_FILL; hw];
        for (sensor, &cell) in self.cell_of.iter().enumerate() {
            sensor_at[cell] = sensor;
        }
        let mut idx = Vec::with_capacity(b * c * hw);
        for bc in 0..b * c {
            idx.extend(sensor_at.iter().map(|&k| if k == ZERO_FILL { ZERO_FILL } else { bc * s + k }));
        }
        Ok(g.gather(x, Arc::from(idx), &[b, c, self.rows, self.cols])?)
    }

    /// `[B×C×rows×cols] → [B×C×S]`, reading sensor cells only.
    pub fn gather(&self, g: &mut Graph<'_>, y: Var) -> Result<Var> {
        let sh = g.shape(y).to_vec();
        if sh.len() != 4 || sh[2] != self.rows || sh[3] != self.cols {
            return Err(CoreError::Dimension(format!("expected [B,C,{},{}], got {sh:?}", self.rows, self.cols)));
        }
        let (b, c, hw, s) = (sh[0], sh[1], self.cells(), self.n_sensors());
        let mut idx = Vec::with_capacity(b * c * s);
        for bc in 0..b * c {
            idx.extend(self.cell_of.iter().map(|&cell| bc * hw + cell));
        }
        Ok(g.gather(y, Arc::from(idx), &[b, c, s])?)
    }

    /// Zeroes unused cells of a `[B×C×rows×cols]` tensor.
    pub fn apply_mask(&self, g: &mut Graph<'_>, y: Var) -> Result<Var> {
        if self.masked_cells() == 0 {
            return Ok(y);
        }
        let m = Tensor::new(
            &[self.rows, self.cols],
            self.mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )?;
        let m = g.constant(m);
        Ok(g.mul(y, m)?)
    }
}

pub(crate) fn dims3(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(CoreError::Dimension(format!("{op}: expected a 3-d tensor, got {shape:?}"))),
    }
}

/// Bias-free 3×3 convolutions each followed by masked batch norm and ReLU,
/// then a final biased 3×3 convolution to `out_channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm>,
    head: Conv2d,
}

impl ConvStack {
    pub fn new(prefix: &str, in_channels: usize, widths: &[usize], out_channels: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(format!("{prefix}.conv{i}"), c, w, 3)?.without_bias());
            norms.push(BatchNorm::new(format!("{prefix}.bn{i}"), w));
            c = w;
        }
        let head = Conv2d::new(format!("{prefix}.head"), c, out_channels, 3)?;
        Ok(Self {
            widths: widths.to_vec(),
            in_channels,
            out_channels,
            convs,
            norms,
            head,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for (c, n) in self.convs.iter().zip(&self.norms) {
            c.init(store, rng)?;
            n.init(store);
        }
        self.head.init(store, rng)?;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(Conv2d::num_params).sum::<usize>()
            + self.norms.iter().map(BatchNorm::num_params).sum::<usize>()
            + self.head.num_params()
    }

    /// Runs the stack on a gridded input; unused cells of the input are
    /// ignored and never influence sensor cells.
    pub fn forward(&self, g: &mut Graph<'_>, grid: &SensorGrid, x: Var) -> Result<Var> {
        let mask = (grid.masked_cells() > 0).then(|| grid.mask_arc());
        let mut h = grid.apply_mask(g, x)?;
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, h)?;
            h = bn.forward(g, h, mask.clone())?;
            h = g.relu(h);
        }
        Ok(self.head.forward(g, h)?)
    }
}
