//! Spot-forecasting windows: one sample per admissible origin hour.

use chrono::NaiveDateTime;
use crann_autodiff::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::normalize::NormalizationParams;
use super::panel::Panel;
use crate::error::{CoreError, Result};

/// Seasonal-naive lag in hours.
pub const WEEK: usize = 168;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Hours of zone-mean history for the temporal branch.
    pub lookback: usize,
    /// Hours of per-sensor history for the spatial branch.
    pub spatial_lags: usize,
    pub horizon: usize,
    pub ar_lags: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            lookback: 336,
            spatial_lags: 24,
            horizon: 24,
            ar_lags: 4,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.spatial_lags == 0 || self.horizon == 0 || self.ar_lags == 0 {
            return Err(CoreError::Config("window lengths must be positive".into()));
        }
        Ok(())
    }

    /// Index of the first admissible origin: the longest history needed.
    pub fn first_origin(&self) -> usize {
        self.lookback.max(self.spatial_lags).max(self.ar_lags)
    }

    /// Hours one sample spans, history plus horizon.
    pub fn span(&self) -> usize {
        self.first_origin() + self.horizon
    }
}

/// Time indices of every admissible origin, dropping those whose target
/// window touches an excluded hour.
pub fn spot_origins(panel: &Panel, w: &WindowConfig) -> Result<Vec<usize>> {
    w.validate()?;
    let n = panel.n_times();
    if n < w.span() {
        return Err(CoreError::Windowing(format!(
            "panel of {n} hours is shorter than the {} hours one sample needs",
            w.span()
        )));
    }
    let origins: Vec<usize> = (w.first_origin()..=n - w.horizon)
        .filter(|&t| !panel.excluded[t..t + w.horizon].iter().any(|&e| e))
        .collect();
    if origins.is_empty() {
        return Err(CoreError::Windowing("every origin overlaps an excluded range".into()));
    }
    Ok(origins)
}

/// Sorted union of all rows read by samples at `origins`, inputs and targets.
pub fn covered_rows(origins: &[usize], w: &WindowConfig) -> Vec<usize> {
    let mut rows = Vec::new();
    let mut next = 0;
    for &t in origins {
        let lo = (t - w.first_origin()).max(next);
        let hi = t + w.horizon;
        rows.extend(lo..hi);
        next = next.max(hi);
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotSample {
    /// Zone-mean normalized traffic over the `lookback` hours before origin.
    pub temporal_input: Vec<f64>,
    /// `[spatial_lags × S]`.
    pub spatial_input: Array2<f64>,
    /// `[ar_lags × S]`; row 0 is t−1.
    pub ar_terms: Array2<f64>,
    /// `[horizon × 8]`.
    pub exog: Array2<f64>,
    /// `[horizon × S]`.
    pub target: Array2<f64>,
    pub origin: NaiveDateTime,
}

/// Optional batch fields, built only for models that read them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchNeeds {
    /// Per-sensor history `[lookback × S]`.
    pub history: bool,
    /// Values one week before each target hour `[horizon × S]`.
    pub weekly: bool,
}

impl BatchNeeds {
    pub fn union(self, other: Self) -> Self {
        Self {
            history: self.history || other.history,
            weekly: self.weekly || other.weekly,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    /// `[B × lookback]`.
    pub temporal: Tensor,
    /// `[B × spatial_lags × S]`.
    pub spatial: Tensor,
    /// `[B × ar_lags × S]`.
    pub ar: Tensor,
    /// `[B × horizon × 8]`.
    pub exog: Tensor,
    /// `[B × horizon × S]`.
    pub target: Tensor,
    pub history: Option<Tensor>,
    pub weekly: Option<Tensor>,
}

/// Normalized panel view for one fold plus the origins of its samples.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub window: WindowConfig,
    pub start: NaiveDateTime,
    pub sensor_ids: Vec<String>,
    pub origins: Vec<usize>,
    traffic: Array2<f64>,
    weather: Array2<f64>,
    zone_mean: Vec<f64>,
}

impl SampleSet {
    pub fn new(panel: &Panel, norm: &NormalizationParams, window: WindowConfig, origins: Vec<usize>) -> Result<Self> {
        let (traffic, weather) = norm.apply(panel)?;
        Self::from_normalized(panel.start, panel.sensor_ids(), traffic, weather, window, origins)
    }

    pub fn from_normalized(
        start: NaiveDateTime,
        sensor_ids: Vec<String>,
        traffic: Array2<f64>,
        weather: Array2<f64>,
        window: WindowConfig,
        origins: Vec<usize>,
    ) -> Result<Self> {
        window.validate()?;
        let n = traffic.nrows();
        if traffic.ncols() != sensor_ids.len() || weather.dim() != (n, 8) {
            return Err(CoreError::Dimension("normalized matrices do not match the sensor list".into()));
        }
        if let Some(&t) = origins
            .iter()
            .find(|&&t| t < window.first_origin() || t + window.horizon > n)
        {
            return Err(CoreError::Windowing(format!("origin index {t} lacks history or horizon")));
        }
        let zone_mean = traffic.rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect();
        Ok(Self {
            window,
            start,
            sensor_ids,
            origins,
            traffic,
            weather,
            zone_mean,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn origin_time(&self, pos: usize) -> NaiveDateTime {
        self.start + chrono::Duration::hours(self.origins[pos] as i64)
    }

    /// Normalized traffic matrix `[n_times × S]`.
    pub fn traffic(&self) -> &Array2<f64> {
        &self.traffic
    }

    fn rows(&self, m: &Array2<f64>, from: usize, len: usize) -> Array2<f64> {
        m.slice(ndarray::s![from..from + len, ..]).to_owned()
    }

    pub fn sample(&self, pos: usize) -> SpotSample {
        let w = &self.window;
        let t = self.origins[pos];
        let ar = Array2::from_shape_fn((w.ar_lags, self.n_sensors()), |(l, s)| self.traffic[[t - 1 - l, s]]);
        SpotSample {
            temporal_input: self.zone_mean[t - w.lookback..t].to_vec(),
            spatial_input: self.rows(&self.traffic, t - w.spatial_lags, w.spatial_lags),
            ar_terms: ar,
            exog: self.rows(&self.weather, t, w.horizon),
            target: self.rows(&self.traffic, t, w.horizon),
            origin: self.origin_time(pos),
        }
    }

    /// Stacks the samples at `positions` into batch tensors.
    pub fn batch(&self, positions: &[usize], needs: BatchNeeds) -> Result<Batch> {
        let w = self.window;
        let s = self.n_sensors();
        let b = positions.len();
        if b == 0 {
            return Err(CoreError::Contract("empty batch".into()));
        }
        if needs.weekly && w.first_origin() < WEEK {
            return Err(CoreError::Windowing(format!(
                "seasonal lag of {WEEK} h exceeds the {} h of available history",
                w.first_origin()
            )));
        }
        let cap = |n: usize| Vec::with_capacity(b * n);
        let (mut temporal, mut spatial, mut ar, mut exog, mut target) = (
            cap(w.lookback),
            cap(w.spatial_lags * s),
            cap(w.ar_lags * s),
            cap(w.horizon * 8),
            cap(w.horizon * s),
        );
        let mut history = needs.history.then(|| cap(w.lookback * s));
        let mut weekly = needs.weekly.then(|| cap(w.horizon * s));
        let row = |m: &Array2<f64>, t: usize| m.row(t).to_vec();
        for &p in positions {
            let t = *self
                .origins
                .get(p)
                .ok_or_else(|| CoreError::Contract(format!("sample {p} out of range")))?;
            temporal.extend_from_slice(&self.zone_mean[t - w.lookback..t]);
            for r in t - w.spatial_lags..t {
                spatial.extend(row(&self.traffic, r));
            }
            for l in 0..w.ar_lags {
                ar.extend(row(&self.traffic, t - 1 - l));
            }
            for r in t..t + w.horizon {
                exog.extend(row(&self.weather, r));
                target.extend(row(&self.traffic, r));
            }
            if let Some(h) = history.as_mut() {
                for r in t - w.lookback..t {
                    h.extend(row(&self.traffic, r));
                }
            }
            if let Some(wk) = weekly.as_mut() {
                for r in t..t + w.horizon {
                    wk.extend(row(&self.traffic, r - WEEK));
                }
            }
        }
        Ok(Batch {
            size: b,
            temporal: Tensor::new(&[b, w.lookback], temporal)?,
            spatial: Tensor::new(&[b, w.spatial_lags, s], spatial)?,
            ar: Tensor::new(&[b, w.ar_lags, s], ar)?,
            exog: Tensor::new(&[b, w.horizon, 8], exog)?,
            target: Tensor::new(&[b, w.horizon, s], target)?,
            history: history.map(|h| Tensor::new(&[b, w.lookback, s], h)).transpose()?,
            weekly: weekly.map(|h| Tensor::new(&[b, w.horizon, s], h)).transpose()?,
        })
    }
}
