//! Shared record types, feature layout and dataset assembly.
//!
//! A server-hour of KPI readings is flattened into a fixed per-hour feature
//! order: `cpu_max, cpu_min, cpu_avg, mem_max, mem_min, mem_avg` followed by
//! one usage value per disk mount in mount order. A [`FeatureVector`] for hour
//! `t` concatenates the per-hour features of `t, t-1, ..., t-L`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::{DateTime, Duration, DurationRound, Utc};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

/// Truncates a timestamp to the start of its hour.
pub fn hour_floor(ts: Timestamp) -> Timestamp {
    ts.duration_trunc(Duration::hours(1))
        .expect("hour truncation is always representable")
}

pub fn is_hour_aligned(ts: Timestamp) -> bool {
    hour_floor(ts) == ts
}

pub fn next_hour(ts: Timestamp) -> Timestamp {
    ts + Duration::hours(1)
}

/// Whole hours from `a` to `b`.
pub fn hours_between(a: Timestamp, b: Timestamp) -> i64 {
    (b - a).num_hours()
}

/// Maximum, minimum and average of one usage KPI within an hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiTriple {
    pub max: f64,
    pub min: f64,
    pub avg: f64,
}

impl KpiTriple {
    pub fn new(max: f64, min: f64, avg: f64) -> Self {
        Self { max, min, avg }
    }

    pub fn is_ordered(&self) -> bool {
        self.min <= self.avg && self.avg <= self.max
    }
}

/// One server-hour of raw KPI readings.
///
/// Usage values are fractions in `[0, 1]`. A missing reading is stored as
/// `NaN`; preprocessing removes such rows before features are built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiRecord {
    pub server_id: String,
    pub timestamp: Timestamp,
    pub cpu: KpiTriple,
    pub mem: KpiTriple,
    pub disks: Vec<f64>,
}

impl KpiRecord {
    pub fn feature_count(&self) -> usize {
        per_hour_feature_count(self.disks.len())
    }

    /// Per-hour features in the canonical order.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.feature_count());
        self.extend_features(&mut out);
        out
    }

    pub fn extend_features(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&[
            self.cpu.max,
            self.cpu.min,
            self.cpu.avg,
            self.mem.max,
            self.mem.min,
            self.mem.avg,
        ]);
        out.extend_from_slice(&self.disks);
    }

    /// Inverse of [`KpiRecord::features`].
    pub fn from_features(server_id: &str, timestamp: Timestamp, values: &[f64]) -> Result<Self> {
        if values.len() < 6 {
            return Err(Error::DimensionMismatch {
                expected: 6,
                got: values.len(),
            });
        }
        Ok(Self {
            server_id: server_id.to_string(),
            timestamp,
            cpu: KpiTriple::new(values[0], values[1], values[2]),
            mem: KpiTriple::new(values[3], values[4], values[5]),
            disks: values[6..].to_vec(),
        })
    }

    pub fn has_missing(&self) -> bool {
        self.features().iter().any(|v| v.is_nan())
    }
}

pub fn per_hour_feature_count(disk_count: usize) -> usize {
    6 + disk_count
}

/// Name of one per-hour KPI feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KpiFeature {
    CpuMax,
    CpuMin,
    CpuAvg,
    MemMax,
    MemMin,
    MemAvg,
    Disk(usize),
}

impl KpiFeature {
    pub fn from_index(index: usize) -> Self {
        match index {
            0 => KpiFeature::CpuMax,
            1 => KpiFeature::CpuMin,
            2 => KpiFeature::CpuAvg,
            3 => KpiFeature::MemMax,
            4 => KpiFeature::MemMin,
            5 => KpiFeature::MemAvg,
            d => KpiFeature::Disk(d - 6),
        }
    }

    pub fn index(self) -> usize {
        match self {
            KpiFeature::CpuMax => 0,
            KpiFeature::CpuMin => 1,
            KpiFeature::CpuAvg => 2,
            KpiFeature::MemMax => 3,
            KpiFeature::MemMin => 4,
            KpiFeature::MemAvg => 5,
            KpiFeature::Disk(d) => 6 + d,
        }
    }

    pub fn name(self) -> String {
        match self {
            KpiFeature::CpuMax => "cpu_max".into(),
            KpiFeature::CpuMin => "cpu_min".into(),
            KpiFeature::CpuAvg => "cpu_avg".into(),
            KpiFeature::MemMax => "mem_max".into(),
            KpiFeature::MemMin => "mem_min".into(),
            KpiFeature::MemAvg => "mem_avg".into(),
            KpiFeature::Disk(d) => format!("disk_{d}"),
        }
    }

    pub fn all(disk_count: usize) -> Vec<KpiFeature> {
        (0..per_hour_feature_count(disk_count))
            .map(KpiFeature::from_index)
            .collect()
    }
}

impl fmt::Display for KpiFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Ordinal anomaly severity. `Normal` means no alarm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityLevel {
    Normal = 0,
    Low = 1,
    Medium = 2,
    High = 3,
}

impl SeverityLevel {
    pub const ALL: [SeverityLevel; 4] = [
        SeverityLevel::Normal,
        SeverityLevel::Low,
        SeverityLevel::Medium,
        SeverityLevel::High,
    ];
    pub const ANOMALOUS: [SeverityLevel; 3] =
        [SeverityLevel::Low, SeverityLevel::Medium, SeverityLevel::High];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SeverityLevel::Normal),
            1 => Some(SeverityLevel::Low),
            2 => Some(SeverityLevel::Medium),
            3 => Some(SeverityLevel::High),
            _ => None,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self != SeverityLevel::Normal
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityLevel::Normal => "normal",
            SeverityLevel::Low => "low",
            SeverityLevel::Medium => "medium",
            SeverityLevel::High => "high",
        }
    }

    /// Parses an alarm severity token. `normal` is not a valid alarm severity.
    pub fn parse_alarm_token(token: &str) -> Option<Self> {
        match token.trim().to_ascii_lowercase().as_str() {
            "low" => Some(SeverityLevel::Low),
            "medium" => Some(SeverityLevel::Medium),
            "high" => Some(SeverityLevel::High),
            _ => None,
        }
    }
}

impl fmt::Display for SeverityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A labeled anomaly event at a server-hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub server_id: String,
    pub timestamp: Timestamp,
    pub severity: SeverityLevel,
    pub content: String,
}

impl AlarmRecord {
    pub fn new(
        server_id: impl Into<String>,
        timestamp: Timestamp,
        severity: SeverityLevel,
        content: impl Into<String>,
    ) -> Result<Self> {
        if !severity.is_anomalous() {
            return Err(Error::Validation(
                "an alarm record cannot carry the normal severity".into(),
            ));
        }
        Ok(Self {
            server_id: server_id.into(),
            timestamp: hour_floor(timestamp),
            severity,
            content: content.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Dense row-major matrix of real values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Mapping between flat feature-vector indices and `(hour offset, KPI)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub disk_count: usize,
    pub lag: usize,
}

impl FeatureLayout {
    pub fn new(disk_count: usize, lag: usize) -> Self {
        Self { disk_count, lag }
    }

    pub fn per_hour(&self) -> usize {
        per_hour_feature_count(self.disk_count)
    }

    pub fn dimension(&self) -> usize {
        (1 + self.lag) * self.per_hour()
    }

    /// Index of `feature` measured `offset` hours before the row's hour.
    pub fn index_of(&self, offset: usize, feature: KpiFeature) -> Option<usize> {
        let f = feature.index();
        (offset <= self.lag && f < self.per_hour()).then(|| offset * self.per_hour() + f)
    }

    pub fn locate(&self, index: usize) -> Option<(usize, KpiFeature)> {
        (index < self.dimension())
            .then(|| (index / self.per_hour(), KpiFeature::from_index(index % self.per_hour())))
    }

    pub fn feature_name(&self, index: usize) -> Option<String> {
        self.locate(index).map(|(offset, f)| match offset {
            0 => format!("{f}@t"),
            k => format!("{f}@t-{k}"),
        })
    }

    pub fn target_names(&self) -> Vec<String> {
        KpiFeature::all(self.disk_count)
            .into_iter()
            .map(KpiFeature::name)
            .collect()
    }
}

/// Feature vector of one server at hour `timestamp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub server_id: String,
    pub timestamp: Timestamp,
    pub features: FeatureVector,
}

/// Builds lagged feature vectors from one contiguous, hour-ordered series.
///
/// Rows are produced for every hour with at least `lag` earlier hours; a
/// series shorter than `lag + 1` yields nothing.
pub fn build_feature_matrix(records: &[KpiRecord], lag: usize) -> Result<Vec<FeatureRow>> {
    validate_series(records)?;
    if records.len() < lag + 1 {
        return Ok(Vec::new());
    }
    let per_hour = records[0].feature_count();
    let mut out = Vec::with_capacity(records.len() - lag);
    for t in lag..records.len() {
        let mut values = Vec::with_capacity((lag + 1) * per_hour);
        for k in 0..=lag {
            records[t - k].extend_features(&mut values);
        }
        out.push(FeatureRow {
            server_id: records[t].server_id.clone(),
            timestamp: records[t].timestamp,
            features: FeatureVector(values),
        });
    }
    Ok(out)
}

fn validate_series(records: &[KpiRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    let disks = first.disks.len();
    for (i, rec) in records.iter().enumerate() {
        if rec.server_id != first.server_id {
            return Err(Error::Validation(format!(
                "series mixes servers {} and {}",
                first.server_id, rec.server_id
            )));
        }
        if rec.disks.len() != disks {
            return Err(Error::Validation(format!(
                "server {} has inconsistent disk arity at {}",
                rec.server_id, rec.timestamp
            )));
        }
        if !is_hour_aligned(rec.timestamp) {
            return Err(Error::Validation(format!(
                "timestamp {} is not hour aligned",
                rec.timestamp
            )));
        }
        if rec.has_missing() {
            return Err(Error::Validation(format!(
                "server {} has missing values at {}",
                rec.server_id, rec.timestamp
            )));
        }
        if i > 0 {
            let step = hours_between(records[i - 1].timestamp, rec.timestamp);
            if step <= 0 {
                return Err(Error::Validation(format!(
                    "series for {} is not sorted at {}",
                    rec.server_id, rec.timestamp
                )));
            }
            if step != 1 {
                return Err(Error::Validation(format!(
                    "series for {} has a {}-hour gap before {}",
                    rec.server_id,
                    step - 1,
                    rec.timestamp
                )));
            }
        }
    }
    Ok(())
}

/// Lookup of KPI records by `(server_id, hour)`.
#[derive(Debug, Default, Clone)]
pub struct KpiIndex<'a> {
    map: HashMap<(&'a str, i64), &'a KpiRecord>,
    servers: BTreeSet<&'a str>,
}

impl<'a> KpiIndex<'a> {
    pub fn new<I: IntoIterator<Item = &'a KpiRecord>>(records: I) -> Self {
        let mut index = Self::default();
        for rec in records {
            index
                .map
                .entry((rec.server_id.as_str(), rec.timestamp.timestamp()))
                .or_insert(rec);
            index.servers.insert(rec.server_id.as_str());
        }
        index
    }

    pub fn get(&self, server_id: &str, ts: Timestamp) -> Option<&'a KpiRecord> {
        self.map.get(&(server_id, ts.timestamp())).copied()
    }

    pub fn has_server(&self, server_id: &str) -> bool {
        self.servers.contains(server_id)
    }
}

/// One training/evaluation example: features at `timestamp`, targets and
/// label at the following hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub server_id: String,
    pub timestamp: Timestamp,
    pub features: FeatureVector,
    pub target: Vec<f64>,
    pub severity: SeverityLevel,
}

impl LabeledRow {
    pub fn target_timestamp(&self) -> Timestamp {
        next_hour(self.timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub layout: FeatureLayout,
    pub rows: Vec<LabeledRow>,
}

impl LabeledDataset {
    pub fn new(layout: FeatureLayout) -> Self {
        Self {
            layout,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn features(&self) -> FeatureMatrix {
        let rows: Vec<&[f64]> = self.rows.iter().map(|r| r.features.as_slice()).collect();
        FeatureMatrix::from_rows(&rows).expect("feature vectors share one layout")
    }

    pub fn targets(&self) -> FeatureMatrix {
        let rows: Vec<&[f64]> = self.rows.iter().map(|r| r.target.as_slice()).collect();
        FeatureMatrix::from_rows(&rows).expect("targets share one layout")
    }

    pub fn severities(&self) -> Vec<SeverityLevel> {
        self.rows.iter().map(|r| r.severity).collect()
    }

    pub fn target_time_range(&self) -> Option<(Timestamp, Timestamp)> {
        let min = self.rows.iter().map(LabeledRow::target_timestamp).min()?;
        let max = self.rows.iter().map(LabeledRow::target_timestamp).max()?;
        Some((min, max))
    }

    /// Count of normal rows divided by count of anomalous rows.
    pub fn imbalance_ratio(&self) -> Option<f64> {
        let anomalous = self.rows.iter().filter(|r| r.severity.is_anomalous()).count();
        (anomalous > 0).then(|| (self.rows.len() - anomalous) as f64 / anomalous as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct JoinReport {
    /// Feature rows discarded because no KPI record exists at `t + 1`.
    pub dropped_rows: usize,
    pub unknown_server_alarms: usize,
}

/// Attaches next-hour KPI targets and severity labels to feature rows.
///
/// Several alarms in one server-hour collapse to the highest severity.
pub fn join_alarms(
    layout: FeatureLayout,
    features: &[FeatureRow],
    kpi_index: &KpiIndex<'_>,
    alarms: &[AlarmRecord],
) -> (LabeledDataset, JoinReport) {
    let mut report = JoinReport::default();
    let mut labels: HashMap<(&str, i64), SeverityLevel> = HashMap::new();
    for alarm in alarms {
        if !kpi_index.has_server(&alarm.server_id) {
            warn!(
                "alarm at {} references unknown server {}; skipped",
                alarm.timestamp, alarm.server_id
            );
            report.unknown_server_alarms += 1;
            continue;
        }
        let key = (
            alarm.server_id.as_str(),
            hour_floor(alarm.timestamp).timestamp(),
        );
        let slot = labels.entry(key).or_insert(alarm.severity);
        *slot = (*slot).max(alarm.severity);
    }

    let mut ds = LabeledDataset::new(layout);
    for row in features {
        let target_ts = next_hour(row.timestamp);
        let Some(target) = kpi_index.get(&row.server_id, target_ts) else {
            report.dropped_rows += 1;
            continue;
        };
        let severity = labels
            .get(&(row.server_id.as_str(), target_ts.timestamp()))
            .copied()
            .unwrap_or(SeverityLevel::Normal);
        ds.rows.push(LabeledRow {
            server_id: row.server_id.clone(),
            timestamp: row.timestamp,
            features: row.features.clone(),
            target: target.features(),
            severity,
        });
    }
    (ds, report)
}

/// Partitions by target timestamp: `<= boundary` trains, the rest tests.
pub fn chronological_split(
    ds: &LabeledDataset,
    boundary: Timestamp,
) -> (LabeledDataset, LabeledDataset) {
    let mut train = LabeledDataset::new(ds.layout);
    let mut test = LabeledDataset::new(ds.layout);
    for row in &ds.rows {
        if row.target_timestamp() <= boundary {
            train.rows.push(row.clone());
        } else {
            test.rows.push(row.clone());
        }
    }
    if !ds.is_empty() && (train.is_empty() || test.is_empty()) {
        warn!(
            "split boundary {boundary} lies outside the data range; one partition is empty"
        );
    }
    (train, test)
}

/// Groups records by server, each group sorted by time.
pub fn group_by_server(records: &[KpiRecord]) -> BTreeMap<String, Vec<KpiRecord>> {
    let mut groups: BTreeMap<String, Vec<KpiRecord>> = BTreeMap::new();
    for rec in records {
        groups.entry(rec.server_id.clone()).or_default().push(rec.clone());
    }
    for series in groups.values_mut() {
        series.sort_by_key(|r| r.timestamp);
    }
    groups
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use chrono::TimeZone;

    pub fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap()
    }

    pub fn hour(h: i64) -> Timestamp {
        t0() + Duration::hours(h)
    }

    pub fn record(server: &str, h: i64, level: f64) -> KpiRecord {
        KpiRecord {
            server_id: server.into(),
            timestamp: hour(h),
            cpu: KpiTriple::new(level + 0.1, level - 0.1, level),
            mem: KpiTriple::new(level + 0.05, level - 0.05, level),
            disks: vec![level / 2.0, level / 3.0],
        }
    }

    pub fn series(server: &str, hours: i64) -> Vec<KpiRecord> {
        (0..hours)
            .map(|h| record(server, h, 0.3 + 0.01 * h as f64))
            .collect()
    }
}
