//! Log parsing and preprocessing: CSV ingestion, cleaning, gap filling and
//! z-score standardization.
//!
//! KPI CSV header (column order is free, names are exact):
//!
//! ```text
//! server_id,timestamp,cpu_max,cpu_min,cpu_avg,mem_max,mem_min,mem_avg,disk_0,...,disk_{D-1}
//! ```
//!
//! Alarm CSV header: `server_id,timestamp,severity,content` with severity in
//! `low | medium | high` (case-insensitive). Timestamps are RFC 3339 or
//! `YYYY-MM-DD HH:MM:SS` (UTC) and are truncated to the hour.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};

use chrono::{NaiveDateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    group_by_server, hour_floor, hours_between, AlarmRecord, FeatureMatrix, KpiRecord, KpiTriple,
    SeverityLevel, Timestamp,
};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;
pub const DEFAULT_MAX_GAP: usize = 6;

const KPI_FIXED_COLUMNS: [&str; 8] = [
    "server_id",
    "timestamp",
    "cpu_max",
    "cpu_min",
    "cpu_avg",
    "mem_max",
    "mem_min",
    "mem_avg",
];
const ALARM_COLUMNS: [&str; 4] = ["server_id", "timestamp", "severity", "content"];

/// A non-fatal problem found while parsing, tied to a 1-based input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub diagnostics: Vec<Diagnostic>,
}

impl<T> Default for Parsed<T> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            diagnostics: Vec::new(),
        }
    }
}

pub fn parse_timestamp(raw: &str) -> Option<Timestamp> {
    let raw = raw.trim();
    if let Ok(ts) = chrono::DateTime::parse_from_rfc3339(raw) {
        return Some(ts.with_timezone(&Utc));
    }
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(|naive| naive.and_utc())
}

pub fn format_timestamp(ts: Timestamp) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn header_index(headers: &csv::StringRecord) -> BTreeMap<String, usize> {
    headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect()
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

struct KpiColumns {
    fixed: [usize; 8],
    disks: Vec<usize>,
}

fn kpi_columns(headers: &csv::StringRecord) -> Result<KpiColumns> {
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::Schema("missing header row".into()));
    }
    let index = header_index(headers);
    let mut fixed = [0usize; 8];
    for (slot, name) in fixed.iter_mut().zip(KPI_FIXED_COLUMNS) {
        *slot = *index
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))?;
    }
    let mut disks = Vec::new();
    while let Some(&col) = index.get(&format!("disk_{}", disks.len())) {
        disks.push(col);
    }
    let known = KPI_FIXED_COLUMNS.len() + disks.len();
    if index.len() != known || headers.len() != known {
        let unknown: Vec<&str> = headers
            .iter()
            .map(str::trim)
            .filter(|h| {
                !KPI_FIXED_COLUMNS.contains(h)
                    && !(0..disks.len()).any(|d| *h == format!("disk_{d}"))
            })
            .collect();
        return Err(Error::Schema(format!(
            "unknown or duplicate columns: {}",
            unknown.join(", ")
        )));
    }
    Ok(KpiColumns { fixed, disks })
}

fn parse_value(raw: &str) -> std::result::Result<f64, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(f64::NAN);
    }
    raw.parse::<f64>()
        .map_err(|_| format!("unparseable value `{raw}`"))
        .and_then(|v| {
            if v.is_infinite() {
                Err(format!("non-finite value `{raw}`"))
            } else {
                Ok(v)
            }
        })
}

/// Parses a KPI CSV. Malformed rows become diagnostics; schema problems are
/// fatal. Values are not range-checked here (see [`clean`]).
pub fn parse_kpi_csv<R: Read>(reader: R) -> Result<Parsed<KpiRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = kpi_columns(&headers)?;
    let mut out = Parsed::default();
    for result in rdr.records() {
        let record = match result {
            Ok(r) => r,
            Err(err) => {
                let line = err.position().map_or(0, |p| p.line());
                out.diagnostics.push(Diagnostic {
                    line,
                    message: err.to_string(),
                });
                continue;
            }
        };
        let line = line_of(&record);
        if record.len() != headers.len() {
            out.diagnostics.push(Diagnostic {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
            continue;
        }
        match kpi_row(&record, &cols) {
            Ok(rec) => out.records.push(rec),
            Err(message) => out.diagnostics.push(Diagnostic { line, message }),
        }
    }
    Ok(out)
}

fn kpi_row(record: &csv::StringRecord, cols: &KpiColumns) -> std::result::Result<KpiRecord, String> {
    let server_id = record[cols.fixed[0]].trim().to_string();
    if server_id.is_empty() {
        return Err("empty server_id".into());
    }
    let raw_ts = &record[cols.fixed[1]];
    let timestamp = parse_timestamp(raw_ts)
        .map(hour_floor)
        .ok_or_else(|| format!("unparseable timestamp `{}`", raw_ts.trim()))?;
    let mut values = [0.0; 6];
    for (v, &col) in values.iter_mut().zip(&cols.fixed[2..]) {
        *v = parse_value(&record[col])?;
    }
    let disks = cols
        .disks
        .iter()
        .map(|&col| parse_value(&record[col]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(KpiRecord {
        server_id,
        timestamp,
        cpu: KpiTriple::new(values[0], values[1], values[2]),
        mem: KpiTriple::new(values[3], values[4], values[5]),
        disks,
    })
}

pub fn parse_alarm_csv<R: Read>(reader: R) -> Result<Parsed<AlarmRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Schema("missing header row".into()));
    }
    let index = header_index(&headers);
    let mut cols = [0usize; 4];
    for (slot, name) in cols.iter_mut().zip(ALARM_COLUMNS) {
        *slot = *index
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))?;
    }
    if headers.len() != ALARM_COLUMNS.len() {
        return Err(Error::Schema(format!(
            "alarm CSV must have exactly the columns {}",
            ALARM_COLUMNS.join(",")
        )));
    }
    let mut out = Parsed::default();
    for result in rdr.records() {
        let record = match result {
            Ok(r) => r,
            Err(err) => {
                out.diagnostics.push(Diagnostic {
                    line: err.position().map_or(0, |p| p.line()),
                    message: err.to_string(),
                });
                continue;
            }
        };
        let line = line_of(&record);
        if record.len() != headers.len() {
            out.diagnostics.push(Diagnostic {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
            continue;
        }
        let server_id = record[cols[0]].trim();
        let Some(timestamp) = parse_timestamp(&record[cols[1]]) else {
            out.diagnostics.push(Diagnostic {
                line,
                message: format!("unparseable timestamp `{}`", record[cols[1]].trim()),
            });
            continue;
        };
        let Some(severity) = SeverityLevel::parse_alarm_token(&record[cols[2]]) else {
            out.diagnostics.push(Diagnostic {
                line,
                message: format!("unknown severity `{}`", record[cols[2]].trim()),
            });
            continue;
        };
        if server_id.is_empty() {
            out.diagnostics.push(Diagnostic {
                line,
                message: "empty server_id".into(),
            });
            continue;
        }
        out.records.push(
            AlarmRecord::new(server_id, timestamp, severity, &record[cols[3]])
                .expect("parsed severity is anomalous"),
        );
    }
    Ok(out)
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Writes records in the KPI CSV schema. Disk arity comes from the first
/// record (zero disks for an empty slice unless `disk_count` is given).
pub fn write_kpi_csv<W: Write>(
    writer: W,
    records: &[KpiRecord],
    disk_count: Option<usize>,
) -> Result<()> {
    let disks = disk_count
        .or_else(|| records.first().map(|r| r.disks.len()))
        .unwrap_or(0);
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = KPI_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..disks).map(|d| format!("disk_{d}")));
    wtr.write_record(&header)?;
    for rec in records {
        if rec.disks.len() != disks {
            return Err(Error::Validation(format!(
                "record for {} at {} has {} disks, expected {disks}",
                rec.server_id,
                rec.timestamp,
                rec.disks.len()
            )));
        }
        let mut row = vec![rec.server_id.clone(), format_timestamp(rec.timestamp)];
        row.extend(rec.features().into_iter().map(fmt_value));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_alarm_csv<W: Write>(writer: W, alarms: &[AlarmRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(ALARM_COLUMNS)?;
    for alarm in alarms {
        wtr.write_record([
            alarm.server_id.as_str(),
            &format_timestamp(alarm.timestamp),
            alarm.severity.name(),
            alarm.content.as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Counts of every repair applied during preprocessing.
///
/// Output rows = input rows - `duplicates_removed` - `rows_dropped` +
/// `gaps_filled`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub duplicates_removed: usize,
    pub values_clamped: usize,
    pub triples_repaired: usize,
    pub gaps_filled: usize,
    pub rows_dropped: usize,
}

impl CleaningReport {
    pub fn is_zero(&self) -> bool {
        *self == CleaningReport::default()
    }

    pub fn merge(&mut self, other: &CleaningReport) {
        self.duplicates_removed += other.duplicates_removed;
        self.values_clamped += other.values_clamped;
        self.triples_repaired += other.triples_repaired;
        self.gaps_filled += other.gaps_filled;
        self.rows_dropped += other.rows_dropped;
    }
}

impl fmt::Display for CleaningReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "duplicates_removed={} values_clamped={} triples_repaired={} gaps_filled={} rows_dropped={}",
            self.duplicates_removed,
            self.values_clamped,
            self.triples_repaired,
            self.gaps_filled,
            self.rows_dropped
        )
    }
}

fn clamp_unit(v: &mut f64, report: &mut CleaningReport) {
    if v.is_nan() {
        return;
    }
    let clamped = v.clamp(0.0, 1.0);
    if clamped != *v {
        *v = clamped;
        report.values_clamped += 1;
    }
}

fn repair_triple(t: &mut KpiTriple, report: &mut CleaningReport) {
    if t.max.is_nan() || t.min.is_nan() || t.avg.is_nan() || t.is_ordered() {
        return;
    }
    let mut sorted = [t.max, t.min, t.avg];
    sorted.sort_by(f64::total_cmp);
    *t = KpiTriple::new(sorted[2], sorted[0], sorted[1]);
    report.triples_repaired += 1;
}

/// Removes duplicate `(server_id, timestamp)` rows (first wins), clamps
/// usages into `[0, 1]` and restores `min <= avg <= max` by sorting a
/// violating triple. Row order is otherwise preserved.
pub fn clean(records: &[KpiRecord]) -> (Vec<KpiRecord>, CleaningReport) {
    let mut report = CleaningReport::default();
    let mut seen: HashSet<(&str, i64)> = HashSet::with_capacity(records.len());
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        if !seen.insert((rec.server_id.as_str(), rec.timestamp.timestamp())) {
            report.duplicates_removed += 1;
            continue;
        }
        let mut rec = rec.clone();
        for t in [&mut rec.cpu, &mut rec.mem] {
            clamp_unit(&mut t.max, &mut report);
            clamp_unit(&mut t.min, &mut report);
            clamp_unit(&mut t.avg, &mut report);
        }
        for d in rec.disks.iter_mut() {
            clamp_unit(d, &mut report);
        }
        repair_triple(&mut rec.cpu, &mut report);
        repair_triple(&mut rec.mem, &mut report);
        out.push(rec);
    }
    (out, report)
}

fn interpolate(a: &KpiRecord, b: &KpiRecord, frac: f64, ts: Timestamp) -> KpiRecord {
    let fa = a.features();
    let fb = b.features();
    let values: Vec<f64> = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| x + (y - x) * frac)
        .collect();
    KpiRecord::from_features(&a.server_id, ts, &values).expect("same arity as the endpoints")
}

/// Fills interior gaps of one server's series.
///
/// Rows with missing readings are dropped first and treated as gaps. A gap of
/// at most `max_gap` hours is filled by per-feature linear interpolation; a
/// longer outage splits the series into independent segments.
pub fn fill_missing(series: &[KpiRecord], max_gap: usize) -> (Vec<Vec<KpiRecord>>, CleaningReport) {
    let mut report = CleaningReport::default();
    let mut observed: Vec<&KpiRecord> = Vec::with_capacity(series.len());
    for rec in series {
        if rec.has_missing() {
            report.rows_dropped += 1;
        } else {
            observed.push(rec);
        }
    }
    observed.sort_by_key(|r| r.timestamp);
    let before = observed.len();
    observed.dedup_by_key(|r| r.timestamp);
    report.duplicates_removed += before - observed.len();

    let mut segments: Vec<Vec<KpiRecord>> = Vec::new();
    let mut current: Vec<KpiRecord> = Vec::new();
    for rec in observed {
        if let Some(prev) = current.last() {
            let missing = hours_between(prev.timestamp, rec.timestamp) - 1;
            if missing as usize > max_gap {
                segments.push(std::mem::take(&mut current));
            } else if missing > 0 {
                let prev = prev.clone();
                let span = (missing + 1) as f64;
                for k in 1..=missing {
                    let ts = prev.timestamp + chrono::Duration::hours(k);
                    current.push(interpolate(&prev, rec, k as f64 / span, ts));
                    report.gaps_filled += 1;
                }
            }
        }
        current.push(rec.clone());
    }
    if !current.is_empty() {
        segments.push(current);
    }
    (segments, report)
}

/// Output of the full preprocessing chain.
#[derive(Debug, Clone, Default)]
pub struct Preprocessed {
    /// Gap-free hourly segments, ordered by server then time.
    pub segments: Vec<Vec<KpiRecord>>,
    pub report: CleaningReport,
}

impl Preprocessed {
    pub fn records(&self) -> impl Iterator<Item = &KpiRecord> {
        self.segments.iter().flatten()
    }

    pub fn disk_count(&self) -> Option<usize> {
        self.records().next().map(|r| r.disks.len())
    }
}

/// `clean` followed by per-server `fill_missing`.
pub fn preprocess(records: &[KpiRecord], max_gap: usize) -> Result<Preprocessed> {
    let (cleaned, mut report) = clean(records);
    if let Some(first) = cleaned.first() {
        let arity = first.disks.len();
        if let Some(bad) = cleaned.iter().find(|r| r.disks.len() != arity) {
            return Err(Error::Validation(format!(
                "disk arity differs: server {} has {} disks, expected {arity}",
                bad.server_id,
                bad.disks.len()
            )));
        }
    }
    let mut segments = Vec::new();
    for series in group_by_server(&cleaned).into_values() {
        let (segs, r) = fill_missing(&series, max_gap);
        report.merge(&r);
        segments.extend(segs);
    }
    Ok(Preprocessed { segments, report })
}

/// Per-column z-score transform fit on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns whose standard deviation was raised to [`STD_FLOOR`].
    pub floored: Vec<usize>,
}

impl Scaler {
    /// Fits means and population standard deviations.
    pub fn fit(train: &FeatureMatrix) -> Result<Self> {
        let n = train.nrows();
        if n == 0 {
            return Err(Error::InsufficientData(
                "cannot fit a scaler on zero rows".into(),
            ));
        }
        let cols = train.ncols();
        let mut mean = vec![0.0; cols];
        for row in train.rows_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; cols];
        for row in train.rows_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut floored = Vec::new();
        let std = var
            .into_iter()
            .enumerate()
            .map(|(j, s)| {
                let sd = (s / n as f64).sqrt();
                if sd < STD_FLOOR {
                    floored.push(j);
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        if !floored.is_empty() {
            warn!("zero-variance columns {floored:?}: standard deviation floored at {STD_FLOOR}");
        }
        Ok(Self { mean, std, floored })
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn apply(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
        let mut data = Vec::with_capacity(matrix.nrows() * matrix.ncols());
        for row in matrix.rows_iter() {
            data.extend(self.apply_row(row)?);
        }
        FeatureMatrix::new(matrix.nrows(), matrix.ncols(), data)
    }

    pub fn invert_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect())
    }

    pub fn invert(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
        let mut data = Vec::with_capacity(matrix.nrows() * matrix.ncols());
        for row in matrix.rows_iter() {
            data.extend(self.invert_row(row)?);
        }
        FeatureMatrix::new(matrix.nrows(), matrix.ncols(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::fixtures::{hour, record, series};
    use proptest::prelude::*;

    const HEADER: &str =
        "server_id,timestamp,cpu_max,cpu_min,cpu_avg,mem_max,mem_min,mem_avg,disk_0,disk_1\n";

    #[test]
    fn empty_file_with_header_parses_to_nothing() {
        let parsed = parse_kpi_csv(HEADER.as_bytes()).unwrap();
        assert!(parsed.records.is_empty());
        assert!(parsed.diagnostics.is_empty());
    }

    #[test]
    fn missing_header_and_unknown_columns_are_fatal() {
        assert!(matches!(parse_kpi_csv("".as_bytes()), Err(Error::Schema(_))));
        let bad = "server_id,timestamp,cpu_max,cpu_min,cpu_avg,mem_max,mem_min,mem_avg,gpu\n";
        assert!(matches!(parse_kpi_csv(bad.as_bytes()), Err(Error::Schema(_))));
        let missing = "server_id,timestamp,cpu_max\n";
        assert!(matches!(parse_kpi_csv(missing.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn parse_does_not_validate_ranges() {
        let csv = format!("{HEADER}s1,2021-01-01T03:00:00Z,0.9,0.1,1.50,0.5,0.4,0.45,0.2,0.3\n");
        let parsed = parse_kpi_csv(csv.as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.records[0].cpu.avg, 1.5);
    }

    #[test]
    fn bad_timestamp_is_a_line_diagnostic() {
        let csv = format!(
            "{HEADER}s1,2021-01-01T03:00:00Z,0.9,0.1,0.5,0.5,0.4,0.45,0.2,0.3\n\
             s1,yesterday,0.9,0.1,0.5,0.5,0.4,0.45,0.2,0.3\n"
        );
        let parsed = parse_kpi_csv(csv.as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.diagnostics.len(), 1);
        assert_eq!(parsed.diagnostics[0].line, 3);
    }

    #[test]
    fn alarm_parsing() {
        let csv = "server_id,timestamp,severity,content\n\
                   s1,2021-01-01 14:37:00,high,\"disk full, /var\"\n\
                   s1,2021-01-01 15:00:00,CRITICAL,boom\n";
        let parsed = parse_alarm_csv(csv.as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.records[0].severity.code(), 3);
        assert_eq!(parsed.records[0].timestamp, hour(14));
        assert_eq!(parsed.records[0].content, "disk full, /var");
        assert_eq!(parsed.diagnostics.len(), 1);
        assert_eq!(parsed.diagnostics[0].line, 3);
    }

    #[test]
    fn csv_round_trip() {
        let recs = series("srv-1", 5);
        let mut buf = Vec::new();
        write_kpi_csv(&mut buf, &recs, None).unwrap();
        let parsed = parse_kpi_csv(buf.as_slice()).unwrap();
        assert_eq!(parsed.records, recs);
    }

    #[test]
    fn clean_input_is_untouched() {
        let recs = series("a", 10);
        let (out, report) = clean(&recs);
        assert_eq!(out, recs);
        assert!(report.is_zero());
    }

    #[test]
    fn triple_sort_repair() {
        let mut rec = record("a", 0, 0.3);
        rec.cpu = KpiTriple::new(0.2, 0.5, 0.3);
        let (out, report) = clean(&[rec]);
        assert_eq!(out[0].cpu, KpiTriple::new(0.5, 0.2, 0.3));
        assert_eq!(report.triples_repaired, 1);
    }

    #[test]
    fn duplicates_keep_first() {
        let a = record("a", 0, 0.3);
        let mut b = a.clone();
        b.disks[0] = 0.9;
        let (out, report) = clean(&[a.clone(), b]);
        assert_eq!(out, vec![a]);
        assert_eq!(report.duplicates_removed, 1);
    }

    #[test]
    fn one_hour_gap_is_midpoint() {
        let mut a = record("a", 0, 0.3);
        let mut b = record("a", 2, 0.3);
        a.disks[0] = 0.2;
        b.disks[0] = 0.4;
        let (segs, report) = fill_missing(&[a, b], 6);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].len(), 3);
        assert!((segs[0][1].disks[0] - 0.3).abs() < 1e-12);
        assert_eq!(segs[0][1].timestamp, hour(1));
        assert_eq!(report.gaps_filled, 1);
    }

    #[test]
    fn three_hour_gap_linear() {
        let mut a = record("a", 0, 0.3);
        let mut b = record("a", 4, 0.3);
        a.disks[1] = 0.0;
        b.disks[1] = 0.4;
        let (segs, _) = fill_missing(&[a, b], 6);
        let filled: Vec<f64> = segs[0][1..4].iter().map(|r| r.disks[1]).collect();
        for (got, want) in filled.iter().zip([0.1, 0.2, 0.3]) {
            assert!((got - want).abs() < 1e-12, "{filled:?}");
        }
    }

    #[test]
    fn long_outage_splits() {
        let a = record("a", 0, 0.3);
        let b = record("a", 8, 0.3);
        let (segs, report) = fill_missing(&[a, b], 6);
        assert_eq!(segs.len(), 2);
        assert_eq!(report.gaps_filled, 0);
    }

    #[test]
    fn rows_with_missing_values_become_gaps() {
        let mut recs = series("a", 3);
        recs[1].mem.avg = f64::NAN;
        let (segs, report) = fill_missing(&recs, 6);
        assert_eq!(report.rows_dropped, 1);
        assert_eq!(report.gaps_filled, 1);
        assert_eq!(segs[0].len(), 3);
        assert!(!segs[0][1].has_missing());
    }

    #[test]
    fn standardize_examples() {
        let m = FeatureMatrix::from_rows(&[[0.5, 0.0], [0.5, 1.0], [0.5, 0.0], [0.5, 1.0]]).unwrap();
        let scaler = Scaler::fit(&m).unwrap();
        assert_eq!(scaler.floored, vec![0]);
        assert_eq!(scaler.mean[1], 0.5);
        assert_eq!(scaler.std[1], 0.5);
        let z = scaler.apply(&m).unwrap();
        assert_eq!(z.column(0), vec![0.0; 4]);
        assert_eq!(z.column(1), vec![-1.0, 1.0, -1.0, 1.0]);
    }

    fn arb_record() -> impl Strategy<Value = KpiRecord> {
        (0i64..6, prop::collection::vec(-0.5f64..1.5, 8)).prop_map(|(h, v)| {
            KpiRecord::from_features("s", hour(h), &v).unwrap()
        })
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(recs in prop::collection::vec(arb_record(), 0..20)) {
            let (once, _) = clean(&recs);
            let (twice, report) = clean(&once);
            prop_assert_eq!(&once, &twice);
            prop_assert!(report.is_zero());
        }

        #[test]
        fn fill_preserves_observed(levels in prop::collection::vec(0.0f64..1.0, 2..12),
                                   keep in prop::collection::vec(any::<bool>(), 12)) {
            let recs: Vec<KpiRecord> = levels.iter().enumerate()
                .filter(|(i, _)| keep[*i] || *i == 0)
                .map(|(i, &l)| record("a", i as i64, l))
                .collect();
            let (segs, report) = fill_missing(&recs, 3);
            let out: Vec<&KpiRecord> = segs.iter().flatten().collect();
            for rec in &recs {
                prop_assert!(out.contains(&rec));
            }
            prop_assert_eq!(out.len(), recs.len() + report.gaps_filled);
        }

        #[test]
        fn scaler_round_trip(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..30)) {
            let m = FeatureMatrix::from_rows(&rows).unwrap();
            let scaler = Scaler::fit(&m).unwrap();
            let z = scaler.apply(&m).unwrap();
            for j in 0..3 {
                let mean: f64 = z.column(j).iter().sum::<f64>() / z.nrows() as f64;
                prop_assert!(mean.abs() < 1e-9);
            }
            let back = scaler.invert(&z).unwrap();
            for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
