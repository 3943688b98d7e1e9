//! Simulate, train, save, reload, predict the next hour and evaluate.
//!
//! cargo run --release --example end_to_end

use rtap::pipeline::{evaluate, predict_latest, simulate, train, EvaluateOptions, PipelineModel, RunConfig};

fn main() -> rtap::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.simulate.servers = 8;
    cfg.simulate.hours = 1500;
    cfg.forecast.n_trees = 30;
    let (fleet, _) = simulate(&cfg)?;

    let (model, summary) = train(&cfg, &fleet.kpis, &fleet.alarms)?;
    println!(
        "trained on {} rows, {} anomalous, through {}",
        summary.train_rows, summary.anomalous_rows, summary.train_end
    );
    let path = std::env::temp_dir().join("rtap-end-to-end.rtap");
    model.save(&path)?;
    let model = PipelineModel::load(&path)?;

    let next = predict_latest(&model, &fleet.kpis, None)?;
    for p in &next.predictions {
        println!(
            "{} {}: p(anomaly) {:.3} severity {}",
            p.server_id,
            p.timestamp,
            p.prediction.probability,
            p.prediction.severity.map_or("-", |s| s.name())
        );
    }

    let eval = evaluate(&model, &fleet.kpis, &fleet.alarms, &EvaluateOptions::default())?;
    println!(
        "test {} .. {}: anomaly F0.5 {:?}, macro F0.5 RTAP {:.3}, RTAP-C {:.3}",
        eval.test_start,
        eval.test_end,
        eval.rtap.anomaly.f_beta,
        eval.rtap.severity.macro_f,
        eval.rtap_c.as_ref().map_or(f64::NAN, |r| r.severity.macro_f)
    );
    let _ = std::fs::remove_file(path);
    Ok(())
}
