use std::collections::BTreeSet;

use chrono::Duration;
use rtap::datamodel::{KpiRecord, SeverityLevel};
use rtap::ingest::{parse_alarm_csv, parse_kpi_csv, write_alarm_csv, write_kpi_csv};
use rtap::pipeline::{predict_latest, simulate, train, RunConfig};

/// High-severity events drift upward for a few hours before they start, so
/// the hour before onset should already forecast a high anomaly.
#[test]
fn precursor_flags_upcoming_high_anomaly() {
    let mut cfg = RunConfig {
        seed: 1,
        ..RunConfig::default()
    };
    cfg.simulate.servers = 6;
    cfg.simulate.hours = 1500;
    cfg.simulate.imbalance = Some(20.0);
    cfg.simulate.campaign.severity_mix = [0.0, 0.0, 1.0];
    cfg.forecast.n_trees = 30;
    let (fleet, _) = simulate(&cfg).unwrap();
    let (model, _) = train(&cfg, &fleet.kpis, &fleet.alarms).unwrap();

    let alarmed: BTreeSet<_> = fleet.alarms.iter().map(|a| (a.server_id.as_str(), a.timestamp)).collect();
    let onsets: Vec<_> = fleet
        .alarms
        .iter()
        .filter(|a| a.timestamp > model.metadata.train_end)
        .filter(|a| !alarmed.contains(&(a.server_id.as_str(), a.timestamp - Duration::hours(1))))
        .collect();
    assert!(onsets.len() >= 20);
    let mut flagged_high = 0;
    for a in &onsets {
        let t = a.timestamp - Duration::hours(1);
        let out = predict_latest(&model, &fleet.kpis, Some(t)).unwrap();
        let p = out.predictions.iter().find(|p| p.server_id == a.server_id).unwrap();
        assert_eq!(p.timestamp, a.timestamp);
        if p.prediction.anomaly && p.prediction.severity == Some(SeverityLevel::High) {
            flagged_high += 1;
        }
    }
    assert!(
        flagged_high * 2 >= onsets.len(),
        "{flagged_high} of {} onsets flagged high",
        onsets.len()
    );
}

#[test]
fn csv_round_trip_trains_the_same_model() {
    let mut cfg = RunConfig {
        seed: 4,
        ..RunConfig::default()
    };
    cfg.simulate.servers = 3;
    cfg.simulate.hours = 400;
    cfg.simulate.imbalance = Some(25.0);
    cfg.simulate.missing_rate = 0.02;
    cfg.simulate.noise_rate = 0.02;
    cfg.forecast.n_trees = 5;
    let (fleet, report) = simulate(&cfg).unwrap();
    assert!(report.unwrap().rows_deleted > 0);

    let mut kpi_csv = Vec::new();
    write_kpi_csv(&mut kpi_csv, &fleet.kpis, None).unwrap();
    let mut alarm_csv = Vec::new();
    write_alarm_csv(&mut alarm_csv, &fleet.alarms).unwrap();
    let kpis = parse_kpi_csv(&kpi_csv[..]).unwrap();
    let alarms = parse_alarm_csv(&alarm_csv[..]).unwrap();
    assert_eq!(alarms.records, fleet.alarms);
    assert_eq!(kpis.records.len(), fleet.kpis.len());

    let (a, summary) = train(&cfg, &fleet.kpis, &fleet.alarms).unwrap();
    let (b, _) = train(&cfg, &kpis.records, &alarms.records).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert!(!summary.cleaning.is_zero());
}

#[test]
fn predictions_ignore_rows_after_the_cut() {
    let mut cfg = RunConfig {
        seed: 8,
        ..RunConfig::default()
    };
    cfg.simulate.servers = 2;
    cfg.simulate.hours = 300;
    cfg.forecast.n_trees = 4;
    cfg.simulate.imbalance = Some(20.0);
    let (fleet, _) = simulate(&cfg).unwrap();
    let (model, _) = train(&cfg, &fleet.kpis, &fleet.alarms).unwrap();
    let t = cfg.simulate.start + Duration::hours(200);
    let past: Vec<KpiRecord> = fleet.kpis.iter().filter(|r| r.timestamp <= t).cloned().collect();
    let full = predict_latest(&model, &fleet.kpis, Some(t)).unwrap();
    let cut = predict_latest(&model, &past, None).unwrap();
    assert_eq!(full.predictions, cut.predictions);
    assert_eq!(full.predictions.len(), 2);
}
