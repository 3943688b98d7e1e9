//! End-to-end orchestration: simulate, preprocess, train, predict and
//! evaluate, plus the persisted [`PipelineModel`].

pub mod bundle;
mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use chrono::Duration;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{PathConfig, RunConfig, SeverityConfig, SimulateConfig, TrainingSource};

use crate::datamodel::{
    build_feature_matrix, chronological_split, hour_floor, next_hour, AlarmRecord, FeatureLayout,
    JoinReport, KpiFeature, KpiIndex, KpiRecord, LabeledDataset, SeverityLevel, Timestamp,
};
use crate::error::{Error, Result};
use crate::forecast::{fit_rfr, forecast_baseline, BaselineModel, ForestModel};
use crate::identify::{fit_stacking, ClassForest, StackingModel};
use crate::ingest::{format_timestamp, preprocess, CleaningReport, Scaler};
use crate::metrics::{assemble_report, rmse, ConfusionMatrix, EvaluationReport, TargetRmse, BETA};
use crate::rng::derive_seed;
use crate::severity::{fit_knn_severity, SamplingWeights, SeverityKnnModel};
use crate::synthgen::{corrupt, generate_fleet, AnomalyCampaign, Business, CorruptionReport, Fleet, ServerProfile};

/// Fewest labeled training rows `train` accepts.
pub const MIN_TRAINING_ROWS: usize = 50;

/// Severity stage of a bundle; skipped when training had too few anomalies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SeverityStage {
    Trained(SeverityKnnModel),
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub lag: usize,
    pub max_gap: usize,
    pub train_rows: usize,
    pub anomalous_rows: usize,
    /// Training rows at low, medium and high severity.
    pub level_counts: [usize; 3],
    /// First and last target hour seen in training.
    pub train_start: Timestamp,
    pub train_end: Timestamp,
    pub classifier_source: TrainingSource,
    pub config_digest: String,
}

/// A trained pipeline: forecaster, identifier, severity grader and the
/// optional flat multiclass baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    pub business: Business,
    pub metadata: TrainingMetadata,
    pub layout: FeatureLayout,
    /// Standardizes next-hour KPI vectors before classification.
    pub scaler: Scaler,
    pub forecaster: ForestModel,
    pub identifier: StackingModel,
    pub severity: SeverityStage,
    pub flat: Option<ClassForest>,
}

/// Output of the full pipeline for one feature vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub forecast: Vec<f64>,
    pub probability: f64,
    pub anomaly: bool,
    /// Present when flagged and the severity stage was trained.
    pub severity: Option<SeverityLevel>,
}

impl Prediction {
    /// Four-class label: normal, or the graded level of a flagged anomaly.
    /// A flag without a severity model counts as low.
    pub fn class(&self) -> SeverityLevel {
        match (self.anomaly, self.severity) {
            (false, _) => SeverityLevel::Normal,
            (true, Some(level)) => level,
            (true, None) => SeverityLevel::Low,
        }
    }
}

impl PipelineModel {
    pub(crate) fn check_consistency(&self) -> Result<()> {
        let per_hour = self.layout.per_hour();
        let checks = [
            (self.layout.dimension(), self.forecaster.n_features()),
            (per_hour, self.forecaster.n_targets()),
            (per_hour, self.scaler.dimension()),
            (per_hour, self.identifier.n_features()),
        ];
        for (expected, got) in checks {
            if expected != got {
                return Err(Error::Model(format!(
                    "bundle parts disagree on dimensions: expected {expected}, got {got}"
                )));
            }
        }
        if let SeverityStage::Trained(m) = &self.severity {
            if m.n_features() != per_hour {
                return Err(Error::Model("severity model dimension mismatch".into()));
            }
        }
        Ok(())
    }

    /// Refuses use with data tagged for another business line.
    pub fn ensure_business(&self, business: Business) -> Result<()> {
        if business != self.business {
            return Err(Error::Model(format!(
                "model was trained for {} and cannot serve {business}",
                self.business
            )));
        }
        Ok(())
    }

    /// Forecast, identify and grade from a lagged feature vector.
    pub fn predict_vector(&self, features: &[f64]) -> Result<Prediction> {
        let forecast = self.forecaster.predict(features)?;
        self.classify_forecast(forecast)
    }

    /// Identify and grade an already forecast KPI vector.
    pub fn classify_forecast(&self, forecast: Vec<f64>) -> Result<Prediction> {
        let z = self.scaler.apply_row(&forecast)?;
        let (probability, anomaly) = self.identifier.predict(&z)?;
        let severity = match (&self.severity, anomaly) {
            (SeverityStage::Trained(m), true) => Some(m.predict(&z)?),
            _ => None,
        };
        Ok(Prediction {
            forecast,
            probability,
            anomaly,
            severity,
        })
    }

    /// Flat multiclass baseline on a forecast KPI vector; `None` when the
    /// bundle has no such model.
    pub fn flat_class(&self, forecast: &[f64]) -> Result<Option<SeverityLevel>> {
        let Some(flat) = &self.flat else {
            return Ok(None);
        };
        let code = flat.predict_class(&self.scaler.apply_row(forecast)?)?;
        Ok(SeverityLevel::from_code(code))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        bundle::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        bundle::from_bytes(bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        bundle::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        bundle::load(path)
    }
}

/// Generates the configured fleet, corrupted when rates are non-zero.
pub fn simulate(cfg: &RunConfig) -> Result<(Fleet, Option<CorruptionReport>)> {
    cfg.validate()?;
    let s = &cfg.simulate;
    if s.servers == 0 {
        return Err(Error::InvalidParameter("at least one server is required".into()));
    }
    let profiles = ServerProfile::fleet(cfg.business, s.servers, s.disk_count, derive_seed(cfg.seed, &[20]));
    let campaign = AnomalyCampaign {
        imbalance_ratio: s
            .anomalies
            .then(|| s.imbalance.unwrap_or(cfg.business.default_imbalance())),
        ..s.campaign.clone()
    };
    let mut fleet = generate_fleet(&profiles, s.hours, s.start, &campaign, derive_seed(cfg.seed, &[21]))?;
    if s.missing_rate == 0.0 && s.noise_rate == 0.0 {
        return Ok((fleet, None));
    }
    let (kpis, report) = corrupt(&fleet.kpis, s.missing_rate, s.noise_rate, derive_seed(cfg.seed, &[22]))?;
    fleet.kpis = kpis;
    Ok((fleet, Some(report)))
}

/// Labeled rows built from raw records, with the repair accounting.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: LabeledDataset,
    pub cleaning: CleaningReport,
    pub join: JoinReport,
}

/// Cleans and gap-fills `kpis`, builds lagged feature rows per segment and
/// attaches next-hour targets and alarm labels.
pub fn prepare_dataset(kpis: &[KpiRecord], alarms: &[AlarmRecord], lag: usize, max_gap: usize) -> Result<Prepared> {
    let pre = preprocess(kpis, max_gap)?;
    let disk_count = pre
        .disk_count()
        .ok_or_else(|| Error::InsufficientData("no usable KPI rows after cleaning".into()))?;
    let layout = FeatureLayout::new(disk_count, lag);
    let mut rows = Vec::new();
    for segment in &pre.segments {
        rows.extend(build_feature_matrix(segment, lag)?);
    }
    let index = KpiIndex::new(pre.records());
    let (dataset, join) = crate::datamodel::join_alarms(layout, &rows, &index, alarms);
    Ok(Prepared {
        dataset,
        cleaning: pre.report,
        join,
    })
}

/// Default split: the target hour 70% of the way through the data.
pub fn default_boundary(ds: &LabeledDataset) -> Option<Timestamp> {
    let (lo, hi) = ds.target_time_range()?;
    let span = (hi - lo).num_hours();
    Some(lo + Duration::hours(span * 7 / 10))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingSummary {
    pub business: Business,
    pub train_rows: usize,
    pub anomalous_rows: usize,
    pub level_counts: [usize; 3],
    pub train_start: String,
    pub train_end: String,
    pub cleaning: CleaningReport,
    pub dropped_rows: usize,
    pub unknown_server_alarms: usize,
    pub identifier_constant: bool,
    pub severity_weights: Option<SamplingWeights>,
    pub severity_skipped: Option<String>,
    pub flat_trained: bool,
    /// Wall-clock seconds per stage.
    pub seconds: BTreeMap<String, f64>,
}

/// Preprocesses, splits at the configured boundary and fits on the early part.
pub fn train(cfg: &RunConfig, kpis: &[KpiRecord], alarms: &[AlarmRecord]) -> Result<(PipelineModel, TrainingSummary)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let prep = prepare_dataset(kpis, alarms, cfg.lag, cfg.max_gap).map_err(Error::in_stage("preprocess"))?;
    let preprocess_secs = t0.elapsed().as_secs_f64();
    let boundary = cfg
        .split_boundary
        .or_else(|| default_boundary(&prep.dataset))
        .ok_or_else(|| Error::InsufficientData("no labeled rows could be built".into()))?;
    let (train_set, _) = chronological_split(&prep.dataset, boundary);
    let (model, mut summary) = fit(cfg, &train_set)?;
    summary.cleaning = prep.cleaning;
    summary.dropped_rows = prep.join.dropped_rows;
    summary.unknown_server_alarms = prep.join.unknown_server_alarms;
    summary.seconds.insert("preprocess".into(), preprocess_secs);
    Ok((model, summary))
}

/// Fits every stage on an already labeled training set.
pub fn fit(cfg: &RunConfig, train: &LabeledDataset) -> Result<(PipelineModel, TrainingSummary)> {
    cfg.validate()?;
    if train.len() < MIN_TRAINING_ROWS {
        return Err(Error::InsufficientData(format!(
            "training needs at least {MIN_TRAINING_ROWS} labeled rows, got {}",
            train.len()
        )));
    }
    let mut seconds = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, seconds: &mut BTreeMap<String, f64>| {
        seconds.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let x = train.features();
    let y_true = train.targets();
    let scaler = Scaler::fit(&y_true).map_err(Error::in_stage("scale"))?;

    let mut forest_params = cfg.forecast;
    forest_params.tree.seed = derive_seed(cfg.seed, &[10]);
    let forecaster = fit_rfr(&x, &y_true, &forest_params).map_err(Error::in_stage("forecast"))?;
    lap("forecast", &mut seconds);

    let class_input = match cfg.classifier_source {
        TrainingSource::TrueVectors => y_true,
        TrainingSource::InSampleForecasts => forecaster.predict_matrix(&x)?,
        TrainingSource::OutOfBagForecasts => forecaster.oob_predict_matrix(&x)?,
    };
    let z = scaler.apply(&class_input)?;
    let levels = train.severities();
    let anomalous: Vec<bool> = levels.iter().map(|l| l.is_anomalous()).collect();
    let identifier = fit_stacking(&z, &anomalous, &cfg.identify, derive_seed(cfg.seed, &[11]))
        .map_err(Error::in_stage("identify"))?;
    lap("identify", &mut seconds);

    let anomalous_idx: Vec<usize> = (0..levels.len()).filter(|&i| anomalous[i]).collect();
    let anomalous_levels: Vec<SeverityLevel> = anomalous_idx.iter().map(|&i| levels[i]).collect();
    let count = |l: SeverityLevel| anomalous_levels.iter().filter(|&&v| v == l).count();
    let level_counts = [
        count(SeverityLevel::Low),
        count(SeverityLevel::Medium),
        count(SeverityLevel::High),
    ];
    let weights = if !cfg.severity.weighted {
        SamplingWeights::UNIT
    } else {
        cfg.severity
            .weights
            .unwrap_or_else(|| SamplingWeights::for_levels(&anomalous_levels))
    };
    let severity = if anomalous_idx.is_empty() {
        warn!("severity: no anomalous training rows; stage skipped");
        SeverityStage::Skipped {
            reason: "no anomalous training rows".into(),
        }
    } else {
        match fit_knn_severity(&z.select_rows(&anomalous_idx), &anomalous_levels, &weights) {
            Ok(m) => SeverityStage::Trained(m),
            Err(Error::InsufficientData(reason)) => {
                warn!("severity: {reason}; stage skipped");
                SeverityStage::Skipped { reason }
            }
            Err(e) => return Err(Error::in_stage("severity")(e)),
        }
    };
    lap("severity", &mut seconds);

    let flat = if cfg.rtap_c {
        let codes: Vec<u8> = levels.iter().map(|l| l.code()).collect();
        Some(
            ClassForest::fit(&z, &codes, 4, &cfg.flat, derive_seed(cfg.seed, &[12]))
                .map_err(Error::in_stage("rtap_c"))?,
        )
    } else {
        None
    };
    lap("rtap_c", &mut seconds);

    let (train_start, train_end) = train.target_time_range().expect("training set is non-empty");
    let metadata = TrainingMetadata {
        seed: cfg.seed,
        lag: train.layout.lag,
        max_gap: cfg.max_gap,
        train_rows: train.len(),
        anomalous_rows: anomalous_idx.len(),
        level_counts,
        train_start,
        train_end,
        classifier_source: cfg.classifier_source,
        config_digest: cfg.digest(),
    };
    let summary = TrainingSummary {
        business: cfg.business,
        train_rows: train.len(),
        anomalous_rows: anomalous_idx.len(),
        level_counts,
        train_start: format_timestamp(train_start),
        train_end: format_timestamp(train_end),
        cleaning: CleaningReport::default(),
        dropped_rows: 0,
        unknown_server_alarms: 0,
        identifier_constant: identifier.is_constant(),
        severity_weights: matches!(severity, SeverityStage::Trained(_)).then_some(weights),
        severity_skipped: match &severity {
            SeverityStage::Skipped { reason } => Some(reason.clone()),
            SeverityStage::Trained(_) => None,
        },
        flat_trained: flat.is_some(),
        seconds,
    };
    let model = PipelineModel {
        business: cfg.business,
        metadata,
        layout: train.layout,
        scaler,
        forecaster,
        identifier,
        severity,
        flat,
    };
    model.check_consistency()?;
    info!(
        "trained on {} rows ({} anomalous) ending {}",
        summary.train_rows, summary.anomalous_rows, summary.train_end
    );
    Ok((model, summary))
}

/// Prediction for one server's next hour.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServerPrediction {
    pub server_id: String,
    /// The predicted hour, `t + 1`.
    pub timestamp: Timestamp,
    #[serde(flatten)]
    pub prediction: Prediction,
}

#[derive(Debug, Clone, Default)]
pub struct PredictOutcome {
    pub predictions: Vec<ServerPrediction>,
    /// Servers without a prediction and why.
    pub skipped: Vec<(String, String)>,
}

/// Predicts hour `t + 1` for every server from its trailing `lag + 1`
/// contiguous clean hours ending at `t`.
///
/// With `at`, rows after `at` are discarded before any processing and only
/// servers with a clean record at `at` are predicted. Without it each server
/// is predicted from its own last hour.
pub fn predict_latest(model: &PipelineModel, kpis: &[KpiRecord], at: Option<Timestamp>) -> Result<PredictOutcome> {
    let visible: Vec<KpiRecord> = match at {
        Some(t) => kpis.iter().filter(|r| r.timestamp <= t).cloned().collect(),
        None => kpis.to_vec(),
    };
    let mut out = PredictOutcome::default();
    if visible.is_empty() {
        return Ok(out);
    }
    let pre = preprocess(&visible, model.metadata.max_gap)?;
    if let Some(d) = pre.disk_count() {
        if d != model.layout.disk_count {
            return Err(Error::Validation(format!(
                "input has {d} disks per server but the model expects {}",
                model.layout.disk_count
            )));
        }
    }
    let lag = model.layout.lag;
    let mut last: BTreeMap<&str, &[KpiRecord]> = BTreeMap::new();
    for seg in &pre.segments {
        if let Some(first) = seg.first() {
            last.insert(first.server_id.as_str(), seg.as_slice());
        }
    }
    for (server, seg) in last {
        let end = seg.last().expect("segments are non-empty").timestamp;
        if let Some(t) = at {
            if end != hour_floor(t) {
                out.skipped.push((server.to_string(), format!("no clean record at {}", format_timestamp(t))));
                continue;
            }
        }
        if seg.len() < lag + 1 {
            out.skipped.push((
                server.to_string(),
                format!("only {} contiguous hours before {}, need {}", seg.len(), format_timestamp(end), lag + 1),
            ));
            continue;
        }
        let rows = build_feature_matrix(&seg[seg.len() - lag - 1..], lag)?;
        let row = rows.into_iter().next().expect("one row from lag + 1 records");
        out.predictions.push(ServerPrediction {
            server_id: server.to_string(),
            timestamp: next_hour(end),
            prediction: model.predict_vector(row.features.as_slice())?,
        });
    }
    for (server, why) in &out.skipped {
        warn!("predict: skipped {server}: {why}");
    }
    Ok(out)
}

/// Writes predictions as CSV: server, predicted hour, one column per KPI
/// target, probability, flag and severity (empty when not graded).
pub fn write_predictions_csv<W: Write>(writer: W, layout: &FeatureLayout, preds: &[ServerPrediction]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["server_id".to_string(), "timestamp".to_string()];
    header.extend(layout.target_names());
    header.extend(["probability", "anomaly", "severity"].map(String::from));
    wtr.write_record(&header)?;
    for p in preds {
        let mut row = vec![p.server_id.clone(), format_timestamp(p.timestamp)];
        row.extend(p.prediction.forecast.iter().map(|v| v.to_string()));
        row.push(p.prediction.probability.to_string());
        row.push(p.prediction.anomaly.to_string());
        row.push(p.prediction.severity.map(|s| s.name().to_string()).unwrap_or_default());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvaluateOptions {
    /// First target hour evaluated; defaults to the hour after training ended.
    pub test_start: Option<Timestamp>,
    /// Permit a test period that overlaps the training period.
    pub allow_overlap: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub business: Business,
    pub test_start: String,
    pub test_end: String,
    pub rtap: EvaluationReport,
    /// Flat multiclass baseline scored on the same rows.
    pub rtap_c: Option<EvaluationReport>,
}

/// Scores the model on rows whose target hour is at or after the test start.
pub fn evaluate(
    model: &PipelineModel,
    kpis: &[KpiRecord],
    alarms: &[AlarmRecord],
    opts: &EvaluateOptions,
) -> Result<Evaluation> {
    let train_end = model.metadata.train_end;
    let test_start = opts.test_start.unwrap_or_else(|| next_hour(train_end));
    if test_start <= train_end && !opts.allow_overlap {
        return Err(Error::Validation(format!(
            "test period starting {} overlaps training, which ended {}; allow the overlap explicitly to proceed",
            format_timestamp(test_start),
            format_timestamp(train_end)
        )));
    }
    let prep = prepare_dataset(kpis, alarms, model.metadata.lag, model.metadata.max_gap)?;
    if prep.dataset.layout != model.layout {
        return Err(Error::Validation(format!(
            "data layout {:?} differs from the model's {:?}",
            prep.dataset.layout, model.layout
        )));
    }
    let mut test = LabeledDataset::new(model.layout);
    test.rows = prep
        .dataset
        .rows
        .into_iter()
        .filter(|r| r.target_timestamp() >= test_start)
        .collect();
    evaluate_dataset(model, &test)
}

/// Scores the model and, when present, the flat baseline on `test`.
pub fn evaluate_dataset(model: &PipelineModel, test: &LabeledDataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InsufficientData("no test rows to evaluate".into()));
    }
    let outputs: Vec<(Prediction, Option<SeverityLevel>)> = test
        .rows
        .par_iter()
        .map(|row| {
            let p = model.predict_vector(row.features.as_slice())?;
            let flat = model.flat_class(&p.forecast)?;
            Ok((p, flat))
        })
        .collect::<Result<_>>()?;

    let layout = model.layout;
    let window = BaselineModel::DEFAULT_WINDOW.min(layout.lag + 1);
    let baselines = [
        BaselineModel::Naive,
        BaselineModel::MovingAverage { window },
        BaselineModel::ExponentialSmoothing {
            alpha: BaselineModel::DEFAULT_ALPHA,
        },
    ];
    let mut forecast_rmse = Vec::with_capacity(layout.per_hour());
    for (j, name) in layout.target_names().into_iter().enumerate() {
        let feature = KpiFeature::from_index(j);
        let actual: Vec<f64> = test.rows.iter().map(|r| r.target[j]).collect();
        let predicted: Vec<f64> = outputs.iter().map(|(p, _)| p.forecast[j]).collect();
        let mut table = BTreeMap::new();
        for b in &baselines {
            let guesses = test
                .rows
                .iter()
                .map(|r| {
                    let history: Vec<f64> = (0..=layout.lag)
                        .rev()
                        .map(|k| r.features.0[layout.index_of(k, feature).expect("offset within lag")])
                        .collect();
                    forecast_baseline(b, &history)
                })
                .collect::<Result<Vec<_>>>()?;
            table.insert(b.name().to_string(), rmse(&guesses, &actual)?);
        }
        forecast_rmse.push(TargetRmse {
            target: name,
            model: rmse(&predicted, &actual)?,
            baselines: table,
        });
    }

    let truth: Vec<usize> = test.rows.iter().map(|r| r.severity.code() as usize).collect();
    let binary_truth: Vec<usize> = truth.iter().map(|&c| (c > 0) as usize).collect();
    let rtap_classes: Vec<usize> = outputs.iter().map(|(p, _)| p.class().code() as usize).collect();
    let rtap_flags: Vec<usize> = outputs.iter().map(|(p, _)| p.anomaly as usize).collect();
    let rtap = assemble_report(
        forecast_rmse.clone(),
        &ConfusionMatrix::from_pairs(2, &binary_truth, &rtap_flags)?,
        &ConfusionMatrix::from_pairs(4, &truth, &rtap_classes)?,
        BETA,
    )?;
    let rtap_c = if model.flat.is_some() {
        let classes: Vec<usize> = outputs
            .iter()
            .map(|(_, f)| f.map_or(0, |l| l.code() as usize))
            .collect();
        let flags: Vec<usize> = classes.iter().map(|&c| (c > 0) as usize).collect();
        Some(assemble_report(
            forecast_rmse,
            &ConfusionMatrix::from_pairs(2, &binary_truth, &flags)?,
            &ConfusionMatrix::from_pairs(4, &truth, &classes)?,
            BETA,
        )?)
    } else {
        None
    };
    let (lo, hi) = test.target_time_range().expect("test set is non-empty");
    Ok(Evaluation {
        business: model.business,
        test_start: format_timestamp(lo),
        test_end: format_timestamp(hi),
        rtap,
        rtap_c,
    })
}

/// Process exit status for an error: 1 usage, 2 data, 3 model.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) | Error::InvalidParameter(_) => 1,
        Error::Model(_) => 3,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, anomalies: bool) -> (RunConfig, Fleet) {
        let mut cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        cfg.simulate.servers = 3;
        cfg.simulate.hours = 400;
        cfg.simulate.imbalance = Some(25.0);
        cfg.simulate.anomalies = anomalies;
        cfg.forecast.n_trees = 4;
        cfg.identify.base.random_forest.n_trees = 10;
        cfg.identify.base.gbdt.n_rounds = 10;
        cfg.flat.n_trees = 10;
        let (fleet, _) = simulate(&cfg).unwrap();
        (cfg, fleet)
    }

    fn trained(seed: u64) -> (RunConfig, Fleet, PipelineModel) {
        let (cfg, fleet) = small(seed, true);
        let (model, _) = train(&cfg, &fleet.kpis, &fleet.alarms).unwrap();
        (cfg, fleet, model)
    }

    #[test]
    fn zero_alarm_training_skips_severity() {
        let (cfg, fleet) = small(1, false);
        assert!(fleet.alarms.is_empty());
        let (model, summary) = train(&cfg, &fleet.kpis, &[]).unwrap();
        assert!(matches!(model.severity, SeverityStage::Skipped { .. }));
        assert!(summary.identifier_constant);
        assert!(summary.severity_skipped.is_some());
        let out = predict_latest(&model, &fleet.kpis, None).unwrap();
        assert_eq!(out.predictions.len(), 3);
        assert!(out.predictions.iter().all(|p| !p.prediction.anomaly && p.prediction.severity.is_none()));
        let back = PipelineModel::from_bytes(&model.to_bytes().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn bundle_rejects_damage() {
        let (_, _, model) = trained(2);
        let bytes = model.to_bytes().unwrap();
        assert_eq!(PipelineModel::from_bytes(&bytes).unwrap(), model);

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        let mut trailing = bytes.clone();
        trailing.push(0);
        let truncated = &bytes[..bytes.len() - 10];
        let text = String::from_utf8_lossy(&bytes[..200]).to_string();
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        let mut future = bumped.into_bytes();
        future.extend_from_slice(&bytes[200..]);
        for bad in [&flipped[..], &trailing[..], truncated, &future[..], b"RTAPBNDL\n", b"nonsense"] {
            assert!(matches!(PipelineModel::from_bytes(bad), Err(Error::Model(_))));
        }
    }

    #[test]
    fn save_and_load_through_a_file() {
        let (_, _, model) = trained(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rtap");
        model.save(&path).unwrap();
        assert_eq!(PipelineModel::load(&path).unwrap(), model);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(matches!(PipelineModel::load(&dir.path().join("none")), Err(Error::Io(_))));
    }

    #[test]
    fn business_mismatch_is_a_model_error() {
        let (_, _, model) = trained(4);
        assert!(model.ensure_business(Business::Biz).is_ok());
        let err = model.ensure_business(Business::Trd).unwrap_err();
        assert_eq!(exit_code(&err), 3);
    }

    #[test]
    fn evaluate_refuses_overlap_unless_allowed() {
        let (_, fleet, model) = trained(5);
        let early = EvaluateOptions {
            test_start: Some(model.metadata.train_start),
            allow_overlap: false,
        };
        let err = evaluate(&model, &fleet.kpis, &fleet.alarms, &early).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let allowed = EvaluateOptions {
            allow_overlap: true,
            ..early
        };
        let e = evaluate(&model, &fleet.kpis, &fleet.alarms, &allowed).unwrap();
        assert_eq!(e.rtap.instances as usize, model.metadata.train_rows + {
            let held = evaluate(&model, &fleet.kpis, &fleet.alarms, &EvaluateOptions::default()).unwrap();
            held.rtap.instances as usize
        });
        assert_eq!(e.rtap.forecast_rmse.len(), model.layout.per_hour());
        assert!(e.rtap_c.is_some());
    }

    #[test]
    fn predict_skips_servers_without_history() {
        let (_, fleet, model) = trained(6);
        let t = fleet.kpis[2].timestamp;
        let out = predict_latest(&model, &fleet.kpis, Some(t)).unwrap();
        assert!(out.predictions.is_empty());
        assert_eq!(out.skipped.len(), 3);
        let t = fleet.kpis[3].timestamp;
        let out = predict_latest(&model, &fleet.kpis, Some(t)).unwrap();
        assert_eq!(out.predictions.len(), 3);
        assert!(out.predictions.iter().all(|p| p.timestamp == next_hour(t)));

        let mut csv = Vec::new();
        write_predictions_csv(&mut csv, &model.layout, &out.predictions).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("server_id,timestamp,cpu_max,"));
    }

    #[test]
    fn predict_rejects_other_disk_arity() {
        let (_, fleet, model) = trained(7);
        let mut kpis = fleet.kpis.clone();
        for r in &mut kpis {
            r.disks.push(0.5);
        }
        assert!(matches!(predict_latest(&model, &kpis, None), Err(Error::Validation(_))));
    }

    #[test]
    fn too_little_data() {
        let (cfg, fleet) = small(8, true);
        let few: Vec<KpiRecord> = fleet.kpis.iter().take(30).cloned().collect();
        let err = train(&cfg, &few, &[]).unwrap_err();
        assert!(matches!(err.root(), Error::InsufficientData(_)));
        assert_eq!(exit_code(&err), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
    }

    #[test]
    fn training_source_changes_only_the_classifiers() {
        let (mut cfg, fleet) = small(9, true);
        let (a, _) = train(&cfg, &fleet.kpis, &fleet.alarms).unwrap();
        cfg.classifier_source = TrainingSource::TrueVectors;
        let (b, _) = train(&cfg, &fleet.kpis, &fleet.alarms).unwrap();
        assert_eq!(a.forecaster, b.forecaster);
        assert_eq!(a.scaler, b.scaler);
        assert_ne!(a.metadata.config_digest, b.metadata.config_digest);
    }
}
