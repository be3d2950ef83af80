//! Parameter-free reference predictors.

use crann_autodiff::{Graph, ParamStore, Tensor, Var};

use super::{expect_shape, Architecture, Forecaster, ModelKind};
use crate::dataset::{Batch, BatchNeeds, WindowConfig, WEEK};
use crate::error::{CoreError, Result};

fn architecture(kind: ModelKind, lookback: usize) -> Architecture {
    Architecture {
        kind,
        convolutions: None,
        recurrent_layers: None,
        hidden_units: None,
        dense_layers: None,
        lookback,
        num_params: 0,
    }
}

/// Repeats the last observed value of each sensor over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Persistence {
    pub sensors: usize,
    pub window: WindowConfig,
}

impl Persistence {
    pub fn new(sensors: usize, window: &WindowConfig) -> Self {
        Self {
            sensors,
            window: *window,
        }
    }
}

impl Forecaster for Persistence {
    fn kind(&self) -> ModelKind {
        ModelKind::Persistence
    }

    fn init_params(&self, _seed: u64) -> Result<ParamStore> {
        Ok(ParamStore::new())
    }

    fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Var> {
        let (b, s, hz) = (batch.size, self.sensors, self.window.horizon);
        expect_shape("autoregressive terms", batch.ar.shape(), &[b, self.window.ar_lags, s])?;
        let ar = g.constant(batch.ar.clone());
        let last = g.narrow(ar, 1, 0, 1)?;
        let zeros = g.constant(Tensor::zeros(&[1, hz, 1]));
        Ok(g.add(last, zeros)?)
    }

    fn architecture(&self) -> Architecture {
        architecture(ModelKind::Persistence, 1)
    }
}

/// Copies the value observed one week before each target hour.
#[derive(Debug, Clone, PartialEq)]
pub struct SeasonalNaive {
    pub sensors: usize,
    pub window: WindowConfig,
}

impl SeasonalNaive {
    pub fn new(sensors: usize, window: &WindowConfig) -> Self {
        Self {
            sensors,
            window: *window,
        }
    }
}

impl Forecaster for SeasonalNaive {
    fn kind(&self) -> ModelKind {
        ModelKind::Seasonal
    }

    fn needs(&self) -> BatchNeeds {
        BatchNeeds {
            history: false,
            weekly: true,
        }
    }

    fn init_params(&self, _seed: u64) -> Result<ParamStore> {
        Ok(ParamStore::new())
    }

    fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Var> {
        let weekly = batch
            .weekly
            .as_ref()
            .ok_or_else(|| CoreError::Windowing(format!("seasonal naive needs {WEEK} h of history")))?;
        expect_shape("weekly values", weekly.shape(), &[batch.size, self.window.horizon, self.sensors])?;
        Ok(g.constant(weekly.clone()))
    }

    fn architecture(&self) -> Architecture {
        architecture(ModelKind::Seasonal, WEEK)
    }
}

/// Predicts the target itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub sensors: usize,
    pub window: WindowConfig,
}

impl Oracle {
    pub fn new(sensors: usize, window: &WindowConfig) -> Self {
        Self {
            sensors,
            window: *window,
        }
    }
}

impl Forecaster for Oracle {
    fn kind(&self) -> ModelKind {
        ModelKind::Oracle
    }

    fn init_params(&self, _seed: u64) -> Result<ParamStore> {
        Ok(ParamStore::new())
    }

    fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Var> {
        Ok(g.constant(batch.target.clone()))
    }

    fn architecture(&self) -> Architecture {
        architecture(ModelKind::Oracle, 0)
    }
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;
    use crann_autodiff::rng::rng_for;
    use crann_autodiff::Mode;
    use ndarray::Array2;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::dataset::SampleSet;

    fn set(traffic: Array2<f64>, w: WindowConfig) -> SampleSet {
        let n = traffic.nrows();
        let s = traffic.ncols();
        let start = NaiveDate::from_ymd_opt(2019, 1, 7).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let origins = (w.first_origin()..=n - w.horizon).collect();
        SampleSet::from_normalized(
            start,
            (0..s).map(|i| format!("s{i}")).collect(),
            traffic,
            Array2::zeros((n, 8)),
            w,
            origins,
        )
        .unwrap()
    }

    /// Per-horizon squared errors summed over all samples and sensors.
    fn errors(model: &dyn Forecaster, set: &SampleSet) -> Vec<f64> {
        let w = set.window;
        let store = ParamStore::new();
        let positions: Vec<usize> = (0..set.len()).collect();
        let b = set.batch(&positions, model.needs()).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let y = model.forward(&mut g, &b).unwrap();
        let (p, t) = (g.value(y), &b.target);
        let s = set.n_sensors();
        let mut out = vec![0.0; w.horizon];
        for (i, (a, b)) in p.data().iter().zip(t.data()).enumerate() {
            out[(i / s) % w.horizon] += (a - b).powi(2);
        }
        out
    }

    #[test]
    fn constant_series_is_exact_for_both() {
        let w = WindowConfig::default();
        let s = set(Array2::from_elem((400, 3), 0.4), w);
        for m in [&Persistence::new(3, &w) as &dyn Forecaster, &SeasonalNaive::new(3, &w)] {
            assert!(errors(m, &s).iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn weekly_series_is_exact_for_seasonal() {
        let w = WindowConfig::default();
        let traffic = Array2::from_shape_fn((600, 2), |(t, k)| ((t % WEEK) as f64 * 0.37 + k as f64).sin());
        let s = set(traffic, w);
        assert!(errors(&SeasonalNaive::new(2, &w), &s).iter().all(|&e| e == 0.0));
        assert!(errors(&Persistence::new(2, &w), &s).iter().any(|&e| e > 0.0));
    }

    #[test]
    fn random_walk_error_grows_like_sqrt_horizon() {
        let w = WindowConfig {
            lookback: 4,
            spatial_lags: 4,
            horizon: 16,
            ar_lags: 4,
        };
        let (n, sensors) = (3000, 40);
        let mut rng = rng_for(42, "walk");
        let step = Normal::new(0.0, 1.0).unwrap();
        let mut traffic = Array2::zeros((n, sensors));
        for k in 0..sensors {
            for t in 1..n {
                traffic[[t, k]] = traffic[[t - 1, k]] + step.sample(&mut rng);
            }
        }
        let s = set(traffic, w);
        let e = errors(&Persistence::new(sensors, &w), &s);
        let count = (s.len() * sensors) as f64;
        for h in 0..w.horizon {
            let rmse = (e[h] / count).sqrt();
            let theory = ((h + 1) as f64).sqrt();
            assert!((rmse / theory - 1.0).abs() < 0.1, "h={h}: {rmse} vs {theory}");
        }
    }

    #[test]
    fn seasonal_needs_a_week_of_history() {
        let w = WindowConfig {
            lookback: 24,
            spatial_lags: 24,
            horizon: 24,
            ar_lags: 4,
        };
        let s = set(Array2::zeros((100, 1)), w);
        assert!(matches!(s.batch(&[0], SeasonalNaive::new(1, &w).needs()), Err(CoreError::Windowing(_))));
    }

    #[test]
    fn oracle_returns_target() {
        let w = WindowConfig::default();
        let traffic = Array2::from_shape_fn((400, 2), |(t, k)| (t * 2 + k) as f64);
        let s = set(traffic, w);
        assert!(errors(&Oracle::new(2, &w), &s).iter().all(|&e| e == 0.0));
    }
}
