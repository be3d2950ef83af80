mod folds;
mod normalize;
mod panel;
mod samples;

pub use folds::{blocked_kfold, Fold, FoldPlan};
pub use normalize::{NormalizationParams, Scale};
pub use panel::{
    aggregate_hourly, build_panel, floor_hour, impute_missing, ingest_sensors, ingest_traffic, ingest_weather,
    parse_timestamp, Exclusion, Panel, RawTraffic, RawWeather, SensorInfo, TIME_FORMAT, WEATHER_COLUMNS,
};
pub use samples::{covered_rows, spot_origins, Batch, BatchNeeds, SampleSet, SpotSample, WindowConfig, WEEK};
