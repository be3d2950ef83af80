//! End-to-end operations over a work directory: prepare, train, evaluate,
//! predict and explain.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use crann_autodiff::ParamStore;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataset::{
    blocked_kfold, build_panel, covered_rows, ingest_sensors, ingest_traffic, ingest_weather, spot_origins,
    FoldPlan, NormalizationParams, Panel, SampleSet, TIME_FORMAT,
};
use crate::error::{CoreError, Result};
use crate::interpret::{explain_dense, spatial_summary, temporal_summary, AttributionReport};
use crate::metrics::{MetricAccumulator, MetricResult};
use crate::models::{build_model, Forecaster, ModelConfig, ModelKind};
use crate::training::{predict as predict_positions, train, TrainReport};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| CoreError::io(path, e))
}

/// Artifact locations under the configured work directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn panel(&self) -> PathBuf {
        self.root.join("prepared/panel.json")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("prepared/samples.json")
    }

    pub fn folds(&self) -> PathBuf {
        self.root.join("prepared/folds.json")
    }

    pub fn normalization(&self) -> PathBuf {
        self.root.join("prepared/normalization.json")
    }

    pub fn checkpoint(&self, kind: ModelKind, fold: usize) -> PathBuf {
        self.root.join(format!("models/{kind}/fold_{fold}.ckpt"))
    }

    pub fn train_report(&self, kind: ModelKind, fold: usize) -> PathBuf {
        self.root.join(format!("models/{kind}/fold_{fold}.report.json"))
    }

    pub fn metrics(&self, kind: ModelKind, ext: &str) -> PathBuf {
        self.root.join(format!("results/{kind}_metrics.{ext}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub window_span: usize,
    /// Panel row of every sample's first forecast hour.
    pub origins: Vec<usize>,
}

/// Cleaned panel, sample origins, fold plan and per-fold train-fitted
/// normalization constants.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub panel: Panel,
    pub origins: Vec<usize>,
    pub plan: FoldPlan,
    pub normalization: Vec<NormalizationParams>,
}

impl Prepared {
    /// Builds everything from an in-memory panel.
    pub fn from_panel(panel: Panel, cfg: &RunConfig) -> Result<Self> {
        let w = &cfg.data.window;
        let origins = spot_origins(&panel, w)?;
        let plan = blocked_kfold(origins.len(), cfg.data.folds, cfg.data.gap())?;
        let normalization = plan
            .folds
            .iter()
            .map(|f| {
                let train: Vec<usize> = f.train.iter().map(|&p| origins[p]).collect();
                NormalizationParams::fit(&panel, &covered_rows(&train, w))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            panel,
            origins,
            plan,
            normalization,
        })
    }

    pub fn sample_set(&self, fold: usize, cfg: &RunConfig) -> Result<SampleSet> {
        self.plan.fold(fold)?;
        SampleSet::new(&self.panel, &self.normalization[fold], cfg.data.window, self.origins.clone())
    }

    pub fn save(&self, ws: &Workspace, cfg: &RunConfig) -> Result<()> {
        write_json(&ws.panel(), &self.panel)?;
        write_json(
            &ws.samples(),
            &SampleIndex {
                window_span: cfg.data.window.span(),
                origins: self.origins.clone(),
            },
        )?;
        write_json(&ws.folds(), &self.plan)?;
        write_json(&ws.normalization(), &self.normalization)
    }

    pub fn load(ws: &Workspace, cfg: &RunConfig) -> Result<Self> {
        if !ws.panel().exists() {
            return Err(CoreError::Usage(format!(
                "no prepared data in {}; run `prepare` first",
                ws.root.display()
            )));
        }
        let panel: Panel = read_json(&ws.panel())?;
        panel.validate()?;
        let index: SampleIndex = read_json(&ws.samples())?;
        if index.window_span != cfg.data.window.span() {
            return Err(CoreError::Usage("window changed since `prepare`; run it again".into()));
        }
        let plan: FoldPlan = read_json(&ws.folds())?;
        let normalization: Vec<NormalizationParams> = read_json(&ws.normalization())?;
        if plan.k != cfg.data.folds || normalization.len() != plan.k || plan.n_samples != index.origins.len() {
            return Err(CoreError::Usage("fold settings changed since `prepare`; run it again".into()));
        }
        Ok(Self {
            panel,
            origins: index.origins,
            plan,
            normalization,
        })
    }
}

/// Reads the configured CSV inputs into a panel.
pub fn load_panel(cfg: &RunConfig) -> Result<Panel> {
    let d = &cfg.data;
    let open = |p: &Path| fs::File::open(p).map_err(|e| CoreError::io(p, e));
    let sensors = d
        .sensors
        .as_deref()
        .map(|p| ingest_sensors(open(p)?, &p.display().to_string()))
        .transpose()?;
    let known = sensors.as_ref().map(|s| s.iter().map(|i| i.id.clone()).collect());
    let traffic = ingest_traffic(open(&d.traffic)?, &d.traffic.display().to_string(), known.as_ref())?;
    let weather = d
        .weather
        .as_deref()
        .map(|p| ingest_weather(open(p)?, &p.display().to_string()))
        .transpose()?;
    build_panel(&traffic, weather.as_ref(), sensors.as_deref(), &d.exclusions)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let prepared = Prepared::from_panel(load_panel(cfg)?, cfg)?;
    prepared.save(&Workspace::new(&cfg.data.workdir), cfg)?;
    Ok(prepared)
}

/// Model settings with the kind overridden.
pub fn model_config(cfg: &RunConfig, kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        ..cfg.model.clone()
    }
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Trains one fold and scores its test block; nothing is written.
pub fn run_fold(prepared: &Prepared, cfg: &RunConfig, kind: ModelKind, fold: usize) -> Result<FoldRun> {
    let f = prepared.plan.fold(fold)?;
    let data = prepared.sample_set(fold, cfg)?;
    let mcfg = model_config(cfg, kind);
    let model = build_model(&mcfg, &cfg.data.window, &prepared.panel.sensors)?;
    let (params, mut report) = train(model.as_ref(), &data, &f.train, &f.validation, &cfg.train)?;
    report.fold = Some(fold);
    let norm = &prepared.normalization[fold];
    report.test_metrics = Some(score(model.as_ref(), &params, &data, &f.test, norm, cfg.eval.batch_size)?.finish()?);
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            model: mcfg,
            window: cfg.data.window,
            sensors: prepared.panel.sensors.clone(),
            normalization: norm.clone(),
            fold: Some(fold),
            seed: cfg.train.seed,
        },
        params,
    };
    Ok(FoldRun { checkpoint, report })
}

fn score(
    model: &dyn Forecaster,
    params: &ParamStore,
    data: &SampleSet,
    positions: &[usize],
    norm: &NormalizationParams,
    batch_size: usize,
) -> Result<MetricAccumulator> {
    let mut p = predict_positions(model, params, data, positions, batch_size)?;
    p.denormalize(norm, &data.sensor_ids)?;
    let mut acc = MetricAccumulator::default();
    acc.add(&p.predicted, &p.actual)?;
    Ok(acc)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CoreError::Config(format!("thread pool: {e}")))
}

/// Trains `folds` (in parallel up to `jobs`) and writes checkpoints and
/// reports.
pub fn train_folds(
    prepared: &Prepared,
    cfg: &RunConfig,
    kind: ModelKind,
    folds: &[usize],
    jobs: usize,
) -> Result<Vec<TrainReport>> {
    for &f in folds {
        prepared.plan.fold(f)?;
    }
    let ws = Workspace::new(&cfg.data.workdir);
    pool(jobs)?.install(|| {
        folds
            .par_iter()
            .map(|&f| {
                let run = run_fold(prepared, cfg, kind, f)?;
                let path = ws.checkpoint(kind, f);
                create(&path)?;
                run.checkpoint.save(&path)?;
                write_json(&ws.train_report(kind, f), &run.report)?;
                Ok(run.report)
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub samples: usize,
    pub rmse: f64,
    pub bias: f64,
    pub wmape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub folds: Vec<FoldMetrics>,
    /// Over every evaluated test prediction.
    pub pooled: MetricResult,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| CoreError::Data(format!("csv: {e}"));
        w.write_record(["model", "fold", "samples", "rmse", "bias", "wmape"]).map_err(err)?;
        let model = self.model.to_string();
        for f in &self.folds {
            w.write_record([
                model.clone(),
                f.fold.to_string(),
                f.samples.to_string(),
                f.rmse.to_string(),
                f.bias.to_string(),
                f.wmape.to_string(),
            ])
            .map_err(err)?;
        }
        let total: usize = self.folds.iter().map(|f| f.samples).sum();
        let p = &self.pooled;
        w.write_record([
            model,
            "pooled".into(),
            total.to_string(),
            p.rmse.to_string(),
            p.bias.to_string(),
            p.wmape.to_string(),
        ])
        .map_err(err)?;
        w.flush().map_err(|e| CoreError::io("csv", e))
    }
}

/// Parameters for `kind` on `fold`: the saved checkpoint for trainable
/// models, none otherwise.
fn fold_model(
    ws: &Workspace,
    cfg: &RunConfig,
    prepared: &Prepared,
    kind: ModelKind,
    fold: usize,
) -> Result<(Box<dyn Forecaster>, ParamStore)> {
    if !kind.is_trainable() {
        let model = build_model(&model_config(cfg, kind), &cfg.data.window, &prepared.panel.sensors)?;
        return Ok((model, ParamStore::new()));
    }
    let path = ws.checkpoint(kind, fold);
    if !path.exists() {
        return Err(CoreError::Usage(format!(
            "no checkpoint for {kind} fold {fold}; run `train` first"
        )));
    }
    let ck = Checkpoint::load(&path)?;
    let model = ck.build()?;
    Ok((model, ck.params))
}

/// Scores `folds` on their test blocks and writes per-fold and pooled
/// metrics as JSON and CSV.
pub fn evaluate_folds(
    prepared: &Prepared,
    cfg: &RunConfig,
    kind: ModelKind,
    folds: &[usize],
    jobs: usize,
) -> Result<EvalReport> {
    for &f in folds {
        prepared.plan.fold(f)?;
    }
    let ws = Workspace::new(&cfg.data.workdir);
    let parts: Vec<(usize, MetricAccumulator)> = pool(jobs)?.install(|| {
        folds
            .par_iter()
            .map(|&f| {
                let (model, params) = fold_model(&ws, cfg, prepared, kind, f)?;
                let data = prepared.sample_set(f, cfg)?;
                let test = &prepared.plan.folds[f].test;
                let acc = score(model.as_ref(), &params, &data, test, &prepared.normalization[f], cfg.eval.batch_size)?;
                Ok((test.len(), acc))
            })
            .collect::<Result<_>>()
    })?;
    let mut pooled = MetricAccumulator::default();
    let mut rows = Vec::with_capacity(folds.len());
    for (&fold, (samples, acc)) in folds.iter().zip(&parts) {
        pooled.merge(acc);
        let m = acc.finish()?;
        rows.push(FoldMetrics {
            fold,
            samples: *samples,
            rmse: m.rmse,
            bias: m.bias,
            wmape: m.wmape,
        });
    }
    let report = EvalReport {
        model: kind,
        folds: rows,
        pooled: pooled.finish()?,
    };
    write_json(&ws.metrics(kind, "json"), &report)?;
    report.write_csv(create(&ws.metrics(kind, "csv"))?)?;
    Ok(report)
}

/// Forecast for the origin hour `origin`, `[horizon × S]` vehicles/hour.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub times: Vec<NaiveDateTime>,
    pub sensor_ids: Vec<String>,
    pub values: Vec<f64>,
}

impl Forecast {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| CoreError::Data(format!("csv: {e}"));
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.sensor_ids.iter().cloned());
        w.write_record(&header).map_err(err)?;
        let s = self.sensor_ids.len();
        for (i, t) in self.times.iter().enumerate() {
            let mut rec = vec![t.format(TIME_FORMAT).to_string()];
            rec.extend(self.values[i * s..(i + 1) * s].iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| CoreError::io("csv", e))
    }
}

/// Forecasts from `origin` with a saved model. The panel must hold the
/// model's history before `origin` and weather for the forecast hours.
pub fn forecast(ck: &Checkpoint, panel: &Panel, origin: NaiveDateTime) -> Result<Forecast> {
    let model = ck.build()?;
    let w = ck.meta.window;
    let ids: Vec<String> = ck.meta.sensors.iter().map(|s| s.id.clone()).collect();
    if panel.sensor_ids() != ids {
        return Err(CoreError::Data("panel sensors differ from the checkpoint's".into()));
    }
    let t = panel
        .index_of(origin)
        .ok_or_else(|| CoreError::Usage(format!("origin {origin} is outside the data")))?;
    if t < w.first_origin() || t + w.horizon > panel.n_times() {
        return Err(CoreError::Usage(format!(
            "origin {origin} needs {} h of history and {} h of weather inside the data",
            w.first_origin(),
            w.horizon
        )));
    }
    let data = SampleSet::new(panel, &ck.meta.normalization, w, vec![t])?;
    let mut p = predict_positions(model.as_ref(), &ck.params, &data, &[0], 1)?;
    p.denormalize(&ck.meta.normalization, &ids)?;
    Ok(Forecast {
        times: (0..w.horizon).map(|i| panel.time(t + i)).collect(),
        sensor_ids: ids,
        values: p.predicted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainKind {
    Temporal,
    Spatial,
    Shapley,
}

impl std::str::FromStr for ExplainKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(Self::Temporal),
            "spatial" => Ok(Self::Spatial),
            "shapley" => Ok(Self::Shapley),
            _ => Err(CoreError::Usage(format!(
                "unknown explanation `{s}`; expected temporal, spatial or shapley"
            ))),
        }
    }
}

/// Up to `n` positions spread evenly over `positions`.
pub fn spread(positions: &[usize], n: usize) -> Vec<usize> {
    if positions.len() <= n {
        return positions.to_vec();
    }
    (0..n).map(|i| positions[i * positions.len() / n]).collect()
}

/// Writes the requested explanation CSVs into `out` and returns their paths.
/// Explained samples come from the checkpoint fold's test block; the
/// Shapley background from its training block.
pub fn explain(
    ck: &Checkpoint,
    prepared: &Prepared,
    cfg: &RunConfig,
    kind: ExplainKind,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let model = ck.build()?;
    let crann = model
        .as_crann()
        .ok_or_else(|| CoreError::Usage(format!("explanations need a crann checkpoint, got {}", model.kind())))?;
    let fold = ck
        .meta
        .fold
        .ok_or_else(|| CoreError::Usage("checkpoint carries no fold".into()))?;
    let f = prepared.plan.fold(fold)?;
    let data = SampleSet::new(&prepared.panel, &ck.meta.normalization, ck.meta.window, prepared.origins.clone())?;
    let ex = &cfg.explain;
    let samples = spread(&f.test, ex.max_samples);
    let bs = cfg.eval.batch_size;
    let mut written = Vec::new();
    let mut emit = |name: &str, f: &dyn Fn(fs::File) -> Result<()>| -> Result<()> {
        let path = out.join(name);
        f(create(&path)?)?;
        written.push(path);
        Ok(())
    };
    match kind {
        ExplainKind::Temporal => {
            let s = temporal_summary(crann, &ck.params, &data, &samples, bs)?;
            emit("temporal_attention.csv", &|file| s.write_csv(file))?;
        }
        ExplainKind::Spatial => {
            let s = spatial_summary(crann, &ck.params, &data, &samples, bs)?;
            emit("spatial_attention_pairwise.csv", &|file| s.write_pairwise_csv(file))?;
            emit("spatial_attention_sensors.csv", &|file| s.write_per_sensor_csv(file))?;
        }
        ExplainKind::Shapley => {
            let background = spread(&f.train, ex.max_background);
            let r: AttributionReport = explain_dense(crann, &ck.params, &data, &background, &samples, bs, &ex.shapley)?;
            emit("shapley.csv", &|file| r.write_csv(file))?;
            let path = out.join("shapley.json");
            write_json(&path, &r)?;
            written.push(path);
        }
    }
    Ok(written)
}
