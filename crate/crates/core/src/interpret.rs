//! Attention summaries and permutation-sampling Shapley attributions for
//! the dense fusion stage.

use std::io::Write;

use crann_autodiff::rng::rng_for;
use crann_autodiff::{Graph, Mode, ParamStore};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{SampleSet, WEATHER_COLUMNS};
use crate::error::{CoreError, Result};
use crate::models::{Crann, CrannOutput};

/// Runs CRANN over `positions` in Eval mode and sums `extract` over batches,
/// in batch order.
fn accumulate<F>(
    model: &Crann,
    params: &ParamStore,
    data: &SampleSet,
    positions: &[usize],
    batch_size: usize,
    len: usize,
    extract: F,
) -> Result<Vec<f64>>
where
    F: Fn(&Graph<'_>, &CrannOutput, &mut [f64]) -> Result<()> + Sync,
{
    if positions.is_empty() {
        return Err(CoreError::Contract("empty sample set".into()));
    }
    let parts: Vec<Vec<f64>> = positions
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let batch = data.batch(chunk, Default::default())?;
            let mut g = Graph::new(params, Mode::Eval);
            let out = model.run(&mut g, &batch)?;
            let mut acc = vec![0.0; len];
            extract(&g, &out, &mut acc)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; len];
    for p in parts {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    Ok(total)
}

/// Mean temporal attention map, `weights[i * lookback + l]` for decoder
/// step `i` and input position `l` (oldest first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSummary {
    pub horizon: usize,
    pub lookback: usize,
    pub samples: usize,
    pub weights: Vec<f64>,
}

impl TemporalSummary {
    pub fn row(&self, step: usize) -> &[f64] {
        &self.weights[step * self.lookback..(step + 1) * self.lookback]
    }

    /// Hours between input position `l` and the target of step `i`.
    pub fn distance(&self, step: usize, l: usize) -> usize {
        step + self.lookback - l
    }

    /// Mean weight on cells whose distance to the target is a multiple of
    /// `period`; compare with the uniform share `1 / lookback`.
    pub fn seasonal_weight(&self, period: usize) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..self.horizon {
            for (l, w) in self.row(i).iter().enumerate() {
                if self.distance(i, l) % period == 0 {
                    sum += w;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        header.extend((0..self.lookback).map(|l| format!("t-{}", self.lookback - l)));
        w.write_record(&header).map_err(csv_error)?;
        for i in 0..self.horizon {
            let mut rec = vec![format!("t+{}", i + 1)];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_error)?;
        }
        w.flush().map_err(|e| CoreError::io("csv", e))
    }
}

pub fn temporal_summary(
    model: &Crann,
    params: &ParamStore,
    data: &SampleSet,
    positions: &[usize],
    batch_size: usize,
) -> Result<TemporalSummary> {
    let (h, l) = (model.window.horizon, model.window.lookback);
    let total = accumulate(model, params, data, positions, batch_size, h * l, |g, out, acc| {
        let t = out
            .temporal
            .as_ref()
            .ok_or_else(|| CoreError::Contract("temporal branch is disabled".into()))?;
        for (i, &a) in t.attention.iter().enumerate() {
            for sample in g.value(a).data().chunks(l) {
                acc[i * l..(i + 1) * l].iter_mut().zip(sample).for_each(|(s, v)| *s += v);
            }
        }
        Ok(())
    })?;
    let n = positions.len() as f64;
    Ok(TemporalSummary {
        horizon: h,
        lookback: l,
        samples: positions.len(),
        weights: total.into_iter().map(|v| v / n).collect(),
    })
}

/// Mean spatial attention: `pairwise[j * S + k]` is the weight target sensor
/// `j` gives source sensor `k`, averaged over samples and lags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialSummary {
    pub sensor_ids: Vec<String>,
    pub samples: usize,
    pub pairwise: Vec<f64>,
    /// Column means of `pairwise`.
    pub per_sensor: Vec<f64>,
}

impl SpatialSummary {
    pub fn row(&self, target: usize) -> &[f64] {
        let s = self.sensor_ids.len();
        &self.pairwise[target * s..(target + 1) * s]
    }

    pub fn write_pairwise_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["target".to_string()];
        header.extend(self.sensor_ids.iter().cloned());
        w.write_record(&header).map_err(csv_error)?;
        for (j, id) in self.sensor_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.row(j).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_error)?;
        }
        w.flush().map_err(|e| CoreError::io("csv", e))
    }

    pub fn write_per_sensor_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sensor", "mean_attention"]).map_err(csv_error)?;
        for (id, v) in self.sensor_ids.iter().zip(&self.per_sensor) {
            w.write_record([id.as_str(), &v.to_string()]).map_err(csv_error)?;
        }
        w.flush().map_err(|e| CoreError::io("csv", e))
    }
}

pub fn spatial_summary(
    model: &Crann,
    params: &ParamStore,
    data: &SampleSet,
    positions: &[usize],
    batch_size: usize,
) -> Result<SpatialSummary> {
    let s = model.n_sensors();
    let total = accumulate(model, params, data, positions, batch_size, s * s, |g, out, acc| {
        let sp = out
            .spatial
            .as_ref()
            .ok_or_else(|| CoreError::Contract("spatial branch is disabled".into()))?;
        for slice in g.value(sp.attention).data().chunks(s * s) {
            acc.iter_mut().zip(slice).for_each(|(a, v)| *a += v);
        }
        Ok(())
    })?;
    let denom = (positions.len() * model.spatial.lags) as f64;
    let pairwise: Vec<f64> = total.into_iter().map(|v| v / denom).collect();
    let per_sensor = (0..s)
        .map(|k| (0..s).map(|j| pairwise[j * s + k]).sum::<f64>() / s as f64)
        .collect();
    Ok(SpatialSummary {
        sensor_ids: data.sensor_ids.clone(),
        samples: positions.len(),
        pairwise,
        per_sensor,
    })
}

/// Named set of dense-stage input indices attributed together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub indices: Vec<usize>,
}

/// Mean forecast, one group per sensor's spatial forecasts, one per AR lag
/// and one per weather variable; disabled branches contribute no groups.
pub fn feature_groups(model: &Crann, sensor_ids: &[String]) -> Vec<FeatureGroup> {
    let l = &model.layout;
    let (h, s) = (l.horizon, l.sensors);
    let mut groups = Vec::new();
    if let Some(r) = &l.mean {
        groups.push(FeatureGroup {
            name: "Mean".into(),
            indices: r.clone().collect(),
        });
    }
    if let Some(r) = &l.spatial {
        for (k, id) in sensor_ids.iter().enumerate().take(s) {
            groups.push(FeatureGroup {
                name: format!("Sensor_{id}"),
                indices: (0..h).map(|i| r.start + i * s + k).collect(),
            });
        }
    }
    if let Some(r) = &l.ar {
        for lag in 0..l.ar_lags {
            groups.push(FeatureGroup {
                name: format!("AR_t-{}", lag + 1),
                indices: (0..s).map(|k| r.start + lag * s + k).collect(),
            });
        }
    }
    if let Some(r) = &l.exog {
        let c = WEATHER_COLUMNS.len();
        for (j, name) in WEATHER_COLUMNS.iter().enumerate() {
            groups.push(FeatureGroup {
                name: (*name).to_string(),
                indices: (0..h).map(|i| r.start + i * c + j).collect(),
            });
        }
    }
    groups
}

/// Dense-stage input rows for `positions`, in order.
pub fn feature_rows(
    model: &Crann,
    params: &ParamStore,
    data: &SampleSet,
    positions: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if positions.is_empty() {
        return Err(CoreError::Contract("empty sample set".into()));
    }
    let f = model.feature_len();
    let parts: Vec<Vec<Vec<f64>>> = positions
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let batch = data.batch(chunk, Default::default())?;
            let mut g = Graph::new(params, Mode::Eval);
            let out = model.run(&mut g, &batch)?;
            Ok(g.value(out.features).data().chunks(f).map(<[f64]>::to_vec).collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Function explained by [`shapley_mc`].
pub trait GroupFunction: Sync {
    fn n_inputs(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Copies `target` into `state` at `indices` and sets `out` to the
    /// function value at the new state.
    fn switch(&self, state: &mut [f64], out: &mut [f64], indices: &[usize], target: &[f64]) -> Result<()> {
        for &j in indices {
            state[j] = target[j];
        }
        out.copy_from_slice(&self.eval(state)?);
        Ok(())
    }
}

/// `y = W x + b` with `W` stored `[outputs × inputs]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStage {
    pub inputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineStage {
    pub fn new(inputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != inputs * bias.len() {
            return Err(CoreError::Dimension(format!(
                "weight of length {} is not {} × {inputs}",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self { inputs, weight, bias })
    }

    pub fn from_crann(model: &Crann, params: &ParamStore) -> Result<Self> {
        let w = params.param(&model.dense_weight_path())?;
        let b = params.param(&model.dense_bias_path())?;
        Self::new(model.feature_len(), w.data().to_vec(), b.data().to_vec())
    }
}

impl GroupFunction for AffineStage {
    fn n_inputs(&self) -> usize {
        self.inputs
    }

    fn n_outputs(&self) -> usize {
        self.bias.len()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(CoreError::Dimension(format!("expected {} inputs, got {}", self.inputs, x.len())));
        }
        Ok(self
            .weight
            .chunks(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    fn switch(&self, state: &mut [f64], out: &mut [f64], indices: &[usize], target: &[f64]) -> Result<()> {
        for (o, row) in out.iter_mut().zip(self.weight.chunks(self.inputs)) {
            *o += indices.iter().map(|&j| row[j] * (target[j] - state[j])).sum::<f64>();
        }
        for &j in indices {
            state[j] = target[j];
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Single reference point at the background feature mean.
    #[default]
    Mean,
    /// One background row drawn per permutation.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapleyConfig {
    pub permutations: usize,
    pub seed: u64,
    pub background: BackgroundMode,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        Self {
            permutations: 200,
            seed: 0,
            background: BackgroundMode::Mean,
        }
    }
}

/// Signed estimates `phi[(n * groups + g) * outputs + o]` for explained
/// sample `n`, group `g` and output cell `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyEstimate {
    pub samples: usize,
    pub groups: usize,
    pub outputs: usize,
    pub phi: Vec<f64>,
}

impl ShapleyEstimate {
    pub fn get(&self, sample: usize, group: usize, output: usize) -> f64 {
        self.phi[(sample * self.groups + group) * self.outputs + output]
    }

    /// Mean of `|phi|` over samples and output cells, per group.
    pub fn mean_abs(&self) -> Vec<f64> {
        let denom = (self.samples * self.outputs) as f64;
        (0..self.groups)
            .map(|g| {
                (0..self.samples)
                    .flat_map(|n| (0..self.outputs).map(move |o| (n, o)))
                    .map(|(n, o)| self.get(n, g, o).abs())
                    .sum::<f64>()
                    / denom
            })
            .collect()
    }
}

fn column_mean(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut m = vec![0.0; width];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

/// Permutation-sampling Shapley values of `groups` for each row of
/// `explain`. Each permutation switches groups from the reference to the
/// actual values in a seeded random order; marginal output changes are
/// averaged over permutations in index order.
pub fn shapley_mc(
    f: &dyn GroupFunction,
    groups: &[FeatureGroup],
    background: &[Vec<f64>],
    explain: &[Vec<f64>],
    cfg: &ShapleyConfig,
) -> Result<ShapleyEstimate> {
    if background.is_empty() {
        return Err(CoreError::Contract("empty background set".into()));
    }
    if explain.is_empty() {
        return Err(CoreError::Contract("no samples to explain".into()));
    }
    if cfg.permutations == 0 {
        return Err(CoreError::Config("at least one permutation is required".into()));
    }
    let (p_in, p_out) = (f.n_inputs(), f.n_outputs());
    if let Some(r) = background.iter().chain(explain).find(|r| r.len() != p_in) {
        return Err(CoreError::Dimension(format!("feature row of length {} (expected {p_in})", r.len())));
    }
    if let Some(g) = groups.iter().find(|g| g.indices.iter().any(|&j| j >= p_in)) {
        return Err(CoreError::Dimension(format!("group `{}` indexes past {p_in} features", g.name)));
    }
    let mean = column_mean(background, p_in);
    let plans: Vec<(Vec<usize>, &[f64])> = (0..cfg.permutations)
        .map(|p| {
            let mut rng = rng_for(cfg.seed, &format!("shapley/{p}"));
            let mut order: Vec<usize> = (0..groups.len()).collect();
            order.shuffle(&mut rng);
            let reference = match cfg.background {
                BackgroundMode::Mean => mean.as_slice(),
                BackgroundMode::Sample => background[rng.gen_range(0..background.len())].as_slice(),
            };
            (order, reference)
        })
        .collect();
    let g_len = groups.len();
    let per_sample: Vec<Vec<f64>> = explain
        .par_iter()
        .map(|x| {
            let mut phi = vec![0.0; g_len * p_out];
            let mut before = vec![0.0; p_out];
            for (order, reference) in &plans {
                let mut state = reference.to_vec();
                let mut out = f.eval(&state)?;
                for &g in order {
                    before.copy_from_slice(&out);
                    f.switch(&mut state, &mut out, &groups[g].indices, x)?;
                    let slot = &mut phi[g * p_out..(g + 1) * p_out];
                    for ((s, a), b) in slot.iter_mut().zip(&out).zip(&before) {
                        *s += a - b;
                    }
                }
            }
            let n = plans.len() as f64;
            phi.iter_mut().for_each(|v| *v /= n);
            Ok(phi)
        })
        .collect::<Result<_>>()?;
    Ok(ShapleyEstimate {
        samples: explain.len(),
        groups: g_len,
        outputs: p_out,
        phi: per_sample.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAttribution {
    pub group: String,
    pub mean_abs_shapley: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub permutations: usize,
    pub seed: u64,
    pub background: BackgroundMode,
    pub background_samples: usize,
    pub explained_samples: usize,
    pub groups: Vec<GroupAttribution>,
}

impl AttributionReport {
    pub fn value(&self, group: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.group == group).map(|g| g.mean_abs_shapley)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature", "mean_abs_shapley"]).map_err(csv_error)?;
        for g in &self.groups {
            w.write_record([g.group.as_str(), &g.mean_abs_shapley.to_string()])
                .map_err(csv_error)?;
        }
        w.flush().map_err(|e| CoreError::io("csv", e))
    }
}

/// Attributes CRANN's dense stage over its feature groups, with background
/// rows from `background` positions and explained rows from `explain`.
pub fn explain_dense(
    model: &Crann,
    params: &ParamStore,
    data: &SampleSet,
    background: &[usize],
    explain: &[usize],
    batch_size: usize,
    cfg: &ShapleyConfig,
) -> Result<AttributionReport> {
    if background.is_empty() {
        return Err(CoreError::Contract("empty background set".into()));
    }
    let bg = feature_rows(model, params, data, background, batch_size)?;
    let ex = feature_rows(model, params, data, explain, batch_size)?;
    let stage = AffineStage::from_crann(model, params)?;
    let groups = feature_groups(model, &data.sensor_ids);
    let est = shapley_mc(&stage, &groups, &bg, &ex, cfg)?;
    Ok(AttributionReport {
        permutations: cfg.permutations,
        seed: cfg.seed,
        background: cfg.background,
        background_samples: bg.len(),
        explained_samples: ex.len(),
        groups: groups
            .into_iter()
            .zip(est.mean_abs())
            .map(|(g, v)| GroupAttribution {
                group: g.name,
                mean_abs_shapley: v,
            })
            .collect(),
    })
}

fn csv_error(e: csv::Error) -> CoreError {
    CoreError::Data(format!("csv: {e}"))
}
