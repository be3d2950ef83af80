use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::panel::{Panel, WEATHER_COLUMNS};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub min: f64,
    pub max: f64,
}

impl Scale {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, x: f64) -> f64 {
        x * (self.max - self.min) + self.min
    }
}

/// Min-max constants fitted on training rows only. Traffic scales are keyed
/// by sensor id, weather scales by channel name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub traffic: BTreeMap<String, Scale>,
    pub weather: BTreeMap<String, Scale>,
}

fn column_range(m: &Array2<f64>, c: usize, rows: &[usize]) -> (f64, f64) {
    rows.iter()
        .map(|&r| m[[r, c]])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

impl NormalizationParams {
    /// Fits per-sensor and per-channel ranges over `rows` of the panel.
    ///
    /// A constant traffic sensor is an error. A constant weather channel
    /// maps to zero with unit scale.
    pub fn fit(panel: &Panel, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::Normalization("no training rows".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= panel.n_times()) {
            return Err(CoreError::Normalization(format!("row {r} outside the panel")));
        }
        let mut traffic = BTreeMap::new();
        for (c, s) in panel.sensors.iter().enumerate() {
            let (min, max) = column_range(&panel.traffic, c, rows);
            if max <= min {
                return Err(CoreError::Normalization(format!(
                    "sensor `{}` is constant ({min}) over the training rows",
                    s.id
                )));
            }
            traffic.insert(s.id.clone(), Scale { min, max });
        }
        let mut weather = BTreeMap::new();
        for (c, name) in WEATHER_COLUMNS.iter().enumerate() {
            let (min, mut max) = column_range(&panel.weather, c, rows);
            if max <= min {
                max = min + 1.0;
            }
            weather.insert(name.to_string(), Scale { min, max });
        }
        Ok(Self { traffic, weather })
    }

    pub fn sensor_scales(&self, ids: &[String]) -> Result<Vec<Scale>> {
        ids.iter()
            .map(|id| {
                self.traffic
                    .get(id)
                    .copied()
                    .ok_or_else(|| CoreError::Contract(format!("no normalization constants for sensor `{id}`")))
            })
            .collect()
    }

    pub fn weather_scales(&self) -> Result<Vec<Scale>> {
        WEATHER_COLUMNS
            .iter()
            .map(|c| {
                self.weather
                    .get(*c)
                    .copied()
                    .ok_or_else(|| CoreError::Contract(format!("no normalization constants for `{c}`")))
            })
            .collect()
    }

    /// Normalized copies of the panel's traffic and weather matrices. Values
    /// outside the fitted range are kept as-is (not clipped).
    pub fn apply(&self, panel: &Panel) -> Result<(Array2<f64>, Array2<f64>)> {
        let ts = self.sensor_scales(&panel.sensor_ids())?;
        let ws = self.weather_scales()?;
        let mut t = panel.traffic.clone();
        for (mut col, s) in t.columns_mut().into_iter().zip(&ts) {
            col.mapv_inplace(|x| s.apply(x));
        }
        let mut w = panel.weather.clone();
        for (mut col, s) in w.columns_mut().into_iter().zip(&ws) {
            col.mapv_inplace(|x| s.apply(x));
        }
        Ok((t, w))
    }

    /// Denormalizes `[rows × S]` values laid out row-major in sensor order.
    pub fn invert_traffic(&self, ids: &[String], values: &mut [f64]) -> Result<()> {
        let scales = self.sensor_scales(ids)?;
        let s = scales.len();
        if s == 0 || values.len() % s != 0 {
            return Err(CoreError::Dimension(format!("{} values for {s} sensors", values.len())));
        }
        for row in values.chunks_exact_mut(s) {
            for (v, sc) in row.iter_mut().zip(&scales) {
                *v = sc.invert(*v);
            }
        }
        Ok(())
    }
}
