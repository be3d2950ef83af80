//! CSV ingestion, hourly aggregation and imputation into an aligned panel.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Read;

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, Timelike};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const WEATHER_COLUMNS: [&str; 8] = [
    "temperature",
    "solar_radiation",
    "wind_speed",
    "wind_direction",
    "rainfall",
    "pressure",
    "humidity",
    "uv",
];

pub const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

const FORMATS: [&str; 4] = ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%d %H:%M"];

/// Parses an ISO-8601 timestamp. Offsets are converted to UTC; naive
/// timestamps are taken as-is.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn floor_hour(t: NaiveDateTime) -> NaiveDateTime {
    t.date().and_hms_opt(t.hour(), 0, 0).expect("valid hour")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorInfo {
    pub id: String,
    pub longitude: Option<f64>,
    pub latitude: Option<f64>,
}

impl SensorInfo {
    pub fn bare(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            longitude: None,
            latitude: None,
        }
    }
}

/// Sub-hourly readings grouped by sensor and hour.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTraffic {
    pub hours: BTreeMap<String, BTreeMap<NaiveDateTime, Vec<f64>>>,
}

impl RawTraffic {
    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }

    fn span(&self) -> Option<(NaiveDateTime, NaiveDateTime)> {
        let first = self.hours.values().filter_map(|m| m.keys().next()).min()?;
        let last = self.hours.values().filter_map(|m| m.keys().next_back()).max()?;
        Some((*first, *last))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawWeather {
    pub hours: BTreeMap<NaiveDateTime, Vec<[f64; 8]>>,
}

fn ingest_err(source: &str, line: u64, msg: impl Into<String>) -> CoreError {
    CoreError::Ingest {
        path: source.to_string(),
        line,
        msg: msg.into(),
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(input)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, source: &str, expected: &[&str]) -> Result<bool> {
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(ingest_err(source, 1, e.to_string())),
    };
    if headers.is_empty() {
        return Ok(false);
    }
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(ingest_err(
            source,
            1,
            format!("expected header `{}`, got `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(true)
}

fn records<'a, R: Read + 'a>(
    rdr: &'a mut csv::Reader<R>,
    source: &str,
) -> impl Iterator<Item = Result<(u64, csv::StringRecord)>> + 'a {
    let source = source.to_string();
    rdr.records().map(move |r| match r {
        Ok(rec) => Ok((rec.position().map_or(0, |p| p.line()), rec)),
        Err(e) => {
            let line = e.position().map_or(0, |p| p.line());
            Err(ingest_err(&source, line, e.to_string()))
        }
    })
}

fn parse_time_field(source: &str, line: u64, s: &str) -> Result<NaiveDateTime> {
    parse_timestamp(s).ok_or_else(|| ingest_err(source, line, format!("bad timestamp `{s}`")))
}

/// Reads `timestamp,sensor_id,intensity` rows. When `known` is given, rows
/// for other sensors are rejected.
pub fn ingest_traffic<R: Read>(input: R, source: &str, known: Option<&BTreeSet<String>>) -> Result<RawTraffic> {
    let mut rdr = reader(input);
    let mut raw = RawTraffic::default();
    if !check_header(&mut rdr, source, &["timestamp", "sensor_id", "intensity"])? {
        return Ok(raw);
    }
    let mut seen: HashSet<(String, NaiveDateTime)> = HashSet::new();
    for rec in records(&mut rdr, source) {
        let (line, rec) = rec?;
        let t = parse_time_field(source, line, &rec[0])?;
        let id = rec[1].to_string();
        if id.is_empty() {
            return Err(ingest_err(source, line, "empty sensor_id"));
        }
        let v: f64 = rec[2]
            .parse()
            .map_err(|_| ingest_err(source, line, format!("bad intensity `{}`", &rec[2])))?;
        if !v.is_finite() || v < 0.0 {
            return Err(ingest_err(source, line, format!("intensity must be finite and >= 0, got {v}")));
        }
        if let Some(k) = known {
            if !k.contains(&id) {
                return Err(ingest_err(source, line, format!("unknown sensor `{id}`")));
            }
        }
        if !seen.insert((id.clone(), t)) {
            return Err(ingest_err(source, line, format!("duplicate reading for sensor `{id}` at {t}")));
        }
        raw.hours.entry(id).or_default().entry(floor_hour(t)).or_default().push(v);
    }
    Ok(raw)
}

pub fn ingest_weather<R: Read>(input: R, source: &str) -> Result<RawWeather> {
    let mut rdr = reader(input);
    let mut raw = RawWeather::default();
    let mut header = vec!["timestamp"];
    header.extend(WEATHER_COLUMNS);
    if !check_header(&mut rdr, source, &header)? {
        return Ok(raw);
    }
    let mut seen = HashSet::new();
    for rec in records(&mut rdr, source) {
        let (line, rec) = rec?;
        let t = parse_time_field(source, line, &rec[0])?;
        if !seen.insert(t) {
            return Err(ingest_err(source, line, format!("duplicate weather row at {t}")));
        }
        let mut row = [0.0; 8];
        for (c, slot) in row.iter_mut().enumerate() {
            let s = &rec[c + 1];
            *slot = s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ingest_err(source, line, format!("bad {} `{s}`", WEATHER_COLUMNS[c])))?;
        }
        raw.hours.entry(floor_hour(t)).or_default().push(row);
    }
    Ok(raw)
}

pub fn ingest_sensors<R: Read>(input: R, source: &str) -> Result<Vec<SensorInfo>> {
    let mut rdr = reader(input);
    let mut out = Vec::new();
    if !check_header(&mut rdr, source, &["sensor_id", "longitude", "latitude"])? {
        return Ok(out);
    }
    let mut seen = HashSet::new();
    for rec in records(&mut rdr, source) {
        let (line, rec) = rec?;
        let coord = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                return Ok(None);
            }
            rec[i]
                .parse::<f64>()
                .map(Some)
                .map_err(|_| ingest_err(source, line, format!("bad coordinate `{}`", &rec[i])))
        };
        let info = SensorInfo {
            id: rec[0].to_string(),
            longitude: coord(1)?,
            latitude: coord(2)?,
        };
        if !seen.insert(info.id.clone()) {
            return Err(ingest_err(source, line, format!("duplicate sensor `{}`", info.id)));
        }
        out.push(info);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Per-hour mean of the sub-hourly readings of one sensor; hours without
/// readings are `NaN`.
pub fn aggregate_hourly(readings: &BTreeMap<NaiveDateTime, Vec<f64>>, start: NaiveDateTime, n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; n];
    for (t, vals) in readings {
        let Some(i) = hour_index(start, *t) else { continue };
        if i < n && !vals.is_empty() {
            out[i] = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    out
}

fn hour_index(start: NaiveDateTime, t: NaiveDateTime) -> Option<usize> {
    let h = (t - start).num_hours();
    (h >= 0 && start + Duration::hours(h) == t).then_some(h as usize)
}

/// Fills `NaN` cells with the mean of the same column, hour of day and day
/// of week, falling back to the column mean. Returns the number of cells
/// filled.
pub fn impute_missing(values: &mut Array2<f64>, start: NaiveDateTime, names: &[String]) -> Result<usize> {
    let (n, cols) = values.dim();
    let slot = |i: usize| {
        let t = start + Duration::hours(i as i64);
        t.hour() as usize * 7 + t.weekday().num_days_from_monday() as usize
    };
    let mut filled = 0;
    for c in 0..cols {
        let mut sums = [(0.0f64, 0usize); 168];
        let (mut total, mut count) = (0.0, 0usize);
        for i in 0..n {
            let v = values[[i, c]];
            if !v.is_nan() {
                let s = &mut sums[slot(i)];
                s.0 += v;
                s.1 += 1;
                total += v;
                count += 1;
            }
        }
        if count == 0 {
            return Err(CoreError::Data(format!("series `{}` has no observed values", names[c])));
        }
        let fallback = total / count as f64;
        for i in 0..n {
            if values[[i, c]].is_nan() {
                let (s, k) = sums[slot(i)];
                values[[i, c]] = if k > 0 { s / k as f64 } else { fallback };
                filled += 1;
            }
        }
    }
    Ok(filled)
}

/// Aligned hourly traffic and weather for one zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub start: NaiveDateTime,
    pub sensors: Vec<SensorInfo>,
    /// `[n_times × S]`, vehicles/hour.
    pub traffic: Array2<f64>,
    /// `[n_times × 8]` in [`WEATHER_COLUMNS`] order.
    pub weather: Array2<f64>,
    /// Hours removed by the exclusion list; samples touching them in their
    /// target window are dropped.
    pub excluded: Vec<bool>,
}

impl Panel {
    pub fn n_times(&self) -> usize {
        self.traffic.nrows()
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn time(&self, i: usize) -> NaiveDateTime {
        self.start + Duration::hours(i as i64)
    }

    pub fn index_of(&self, t: NaiveDateTime) -> Option<usize> {
        hour_index(self.start, t).filter(|&i| i < self.n_times())
    }

    pub fn sensor_ids(&self) -> Vec<String> {
        self.sensors.iter().map(|s| s.id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_times();
        if self.traffic.ncols() != self.sensors.len() || self.weather.dim() != (n, 8) || self.excluded.len() != n {
            return Err(CoreError::Data("panel matrices are inconsistent".into()));
        }
        if self.traffic.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::Data("traffic must be finite and non-negative".into()));
        }
        if self.weather.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Data("weather must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub from: NaiveDateTime,
    pub to: NaiveDateTime,
}

/// Aggregates, aligns and imputes raw inputs into a [`Panel`]. Sensors are
/// ordered by id; with `meta`, the sensor set is exactly the metadata list.
pub fn build_panel(
    traffic: &RawTraffic,
    weather: Option<&RawWeather>,
    meta: Option<&[SensorInfo]>,
    exclusions: &[Exclusion],
) -> Result<Panel> {
    let Some((start, end)) = traffic.span() else {
        return Err(CoreError::Data("no traffic readings".into()));
    };
    let n = (end - start).num_hours() as usize + 1;
    let sensors: Vec<SensorInfo> = match meta {
        Some(m) => {
            let mut m = m.to_vec();
            m.sort_by(|a, b| a.id.cmp(&b.id));
            m
        }
        None => traffic.hours.keys().map(SensorInfo::bare).collect(),
    };
    let mut excluded = vec![false; n];
    for ex in exclusions {
        for (i, slot) in excluded.iter_mut().enumerate() {
            let t = start + Duration::hours(i as i64);
            if t >= floor_hour(ex.from) && t <= ex.to {
                *slot = true;
            }
        }
    }

    let empty = BTreeMap::new();
    let mut tm = Array2::from_elem((n, sensors.len()), f64::NAN);
    for (c, s) in sensors.iter().enumerate() {
        let col = aggregate_hourly(traffic.hours.get(&s.id).unwrap_or(&empty), start, n);
        for (i, v) in col.into_iter().enumerate() {
            tm[[i, c]] = if excluded[i] { f64::NAN } else { v };
        }
    }
    let ids: Vec<String> = sensors.iter().map(|s| s.id.clone()).collect();
    impute_missing(&mut tm, start, &ids)?;

    let mut wm = Array2::from_elem((n, 8), f64::NAN);
    match weather {
        Some(w) if !w.hours.is_empty() => {
            for (t, rows) in &w.hours {
                let Some(i) = hour_index(start, *t).filter(|&i| i < n) else { continue };
                for c in 0..8 {
                    wm[[i, c]] = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
                }
            }
            let names: Vec<String> = WEATHER_COLUMNS.iter().map(|s| s.to_string()).collect();
            impute_missing(&mut wm, start, &names)?;
        }
        _ => wm.fill(0.0),
    }

    let panel = Panel {
        start,
        sensors,
        traffic: tm,
        weather: wm,
        excluded,
    };
    panel.validate()?;
    Ok(panel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn quarter_hours_group_into_one_hour() {
        let csv = "timestamp,sensor_id,intensity\n\
            2019-01-07T08:00:00,a,400\n2019-01-07T08:15:00,a,440\n\
            2019-01-07T08:30:00,a,420\n2019-01-07T08:45:00,a,460\n";
        let raw = ingest_traffic(csv.as_bytes(), "t.csv", None).unwrap();
        let hours = &raw.hours["a"];
        assert_eq!(hours.len(), 1);
        let vals = &hours[&ts("2019-01-07T08:00")];
        assert_eq!(vals.len(), 4);
        let agg = aggregate_hourly(hours, ts("2019-01-07T08:00"), 1);
        assert_eq!(agg, vec![430.0]);
    }

    #[test]
    fn empty_file_gives_empty_fragment() {
        assert!(ingest_traffic("".as_bytes(), "t.csv", None).unwrap().is_empty());
        assert!(ingest_traffic("timestamp,sensor_id,intensity\n".as_bytes(), "t.csv", None)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn malformed_intensity_reports_line() {
        let csv = "timestamp,sensor_id,intensity\n2019-01-07T08:00:00,a,1\n2019-01-07T09:00:00,a,abc\n";
        match ingest_traffic(csv.as_bytes(), "t.csv", None) {
            Err(CoreError::Ingest { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("abc"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicates_negative_and_unknown_sensors_are_rejected() {
        let dup = "timestamp,sensor_id,intensity\n2019-01-07T08:00:00,a,1\n2019-01-07T08:00:00,a,2\n";
        assert!(matches!(ingest_traffic(dup.as_bytes(), "t", None), Err(CoreError::Ingest { line: 3, .. })));
        let neg = "timestamp,sensor_id,intensity\n2019-01-07T08:00:00,a,-1\n";
        assert!(ingest_traffic(neg.as_bytes(), "t", None).is_err());
        let known: BTreeSet<String> = ["b".to_string()].into();
        let ok = "timestamp,sensor_id,intensity\n2019-01-07T08:00:00,a,1\n";
        assert!(ingest_traffic(ok.as_bytes(), "t", None).is_ok());
        assert!(ingest_traffic(ok.as_bytes(), "t", Some(&known)).is_err());
    }

    #[test]
    fn wrong_header_is_rejected() {
        let csv = "time,sensor,value\n2019-01-07T08:00:00,a,1\n";
        assert!(matches!(ingest_traffic(csv.as_bytes(), "t", None), Err(CoreError::Ingest { line: 1, .. })));
    }

    #[test]
    fn timestamp_formats() {
        let want = ts("2019-06-01T00:00:00");
        for s in ["2019-06-01T00:00", "2019-06-01 00:00:00", "2019-06-01T02:00:00+02:00", "2019-06-01T00:00:00Z"] {
            assert_eq!(parse_timestamp(s), Some(want), "{s}");
        }
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn single_and_missing_hours() {
        let start = ts("2019-01-07T00:00");
        let mut m = BTreeMap::new();
        m.insert(ts("2019-01-07T01:00"), vec![7.0]);
        let agg = aggregate_hourly(&m, start, 3);
        assert!(agg[0].is_nan() && agg[2].is_nan());
        assert_eq!(agg[1], 7.0);
    }

    #[test]
    fn imputation_uses_same_weekday_and_hour() {
        // three Mondays at 08:00, one week apart; middle one missing
        let start = ts("2019-01-07T08:00");
        let n = 2 * 168 + 1;
        let mut v = Array2::from_elem((n, 1), 1.0);
        v[[0, 0]] = 500.0;
        v[[168, 0]] = f64::NAN;
        v[[336, 0]] = 700.0;
        impute_missing(&mut v, start, &["a".into()]).unwrap();
        assert_eq!(v[[168, 0]], 600.0);
        let again = {
            let mut w = v.clone();
            impute_missing(&mut w, start, &["a".into()]).unwrap();
            w
        };
        assert_eq!(again, v);
    }

    #[test]
    fn single_observation_fills_everything_and_empty_series_fails() {
        let start = ts("2019-01-07T00:00");
        let mut v = Array2::from_elem((5, 2), f64::NAN);
        v[[2, 0]] = 42.0;
        let err = impute_missing(&mut v.clone(), start, &["a".into(), "b".into()]).unwrap_err();
        assert!(err.to_string().contains("`b`"));
        v.column_mut(1).fill(1.0);
        impute_missing(&mut v, start, &["a".into(), "b".into()]).unwrap();
        assert!(v.column(0).iter().all(|&x| x == 42.0));
    }

    #[test]
    fn build_panel_aligns_sorts_and_excludes() {
        let csv = "timestamp,sensor_id,intensity\n\
            2019-01-07T00:00:00,b,10\n2019-01-07T00:00:00,a,1\n\
            2019-01-07T01:00:00,a,3\n2019-01-07T02:00:00,b,30\n";
        let raw = ingest_traffic(csv.as_bytes(), "t", None).unwrap();
        let ex = [Exclusion {
            from: ts("2019-01-07T02:00"),
            to: ts("2019-01-07T02:00"),
        }];
        let p = build_panel(&raw, None, None, &ex).unwrap();
        assert_eq!(p.sensor_ids(), vec!["a", "b"]);
        assert_eq!(p.n_times(), 3);
        assert_eq!(p.excluded, vec![false, false, true]);
        // b at 02:00 excluded, then imputed from the sensor mean
        assert_eq!(p.traffic[[2, 1]], 10.0);
        assert_eq!(p.traffic[[1, 1]], 10.0);
        assert_eq!(p.traffic[[2, 0]], 2.0);
        assert!(p.weather.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn weather_rows_parse_and_align() {
        let mut csv = String::from("timestamp,");
        csv.push_str(&WEATHER_COLUMNS.join(","));
        csv.push_str("\n2019-01-07T00:00:00,1,2,3,4,5,6,7,8\n");
        let w = ingest_weather(csv.as_bytes(), "w").unwrap();
        assert_eq!(w.hours[&ts("2019-01-07T00:00")][0], [1., 2., 3., 4., 5., 6., 7., 8.]);
        let bad = csv.replace(",8\n", ",x\n");
        assert!(ingest_weather(bad.as_bytes(), "w").is_err());
    }

    #[test]
    fn sensor_metadata_is_sorted() {
        let csv = "sensor_id,longitude,latitude\nz,-3.7,40.4\na,,\n";
        let s = ingest_sensors(csv.as_bytes(), "s").unwrap();
        assert_eq!(s[0].id, "a");
        assert_eq!(s[0].longitude, None);
        assert_eq!(s[1].latitude, Some(40.4));
    }
}
