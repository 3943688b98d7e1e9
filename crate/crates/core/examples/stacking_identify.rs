//! Trains the four base classifiers and the stacked model on standardized
//! next-hour KPI vectors and compares their anomaly F0.5.
//!
//! cargo run --release --example stacking_identify

use rtap::datamodel::chronological_split;
use rtap::identify::{fit_stacking, BaseClassifierKind, StackingParams};
use rtap::ingest::Scaler;
use rtap::metrics::{precision_recall_f, ConfusionMatrix, BETA};
use rtap::pipeline::{default_boundary, prepare_dataset, simulate, RunConfig};
use rtap::synthgen::Business;

fn f_half(truth: &[bool], pred: &[bool]) -> f64 {
    let t: Vec<usize> = truth.iter().map(|&b| b as usize).collect();
    let p: Vec<usize> = pred.iter().map(|&b| b as usize).collect();
    let cm = ConfusionMatrix::from_pairs(2, &t, &p).unwrap();
    precision_recall_f(&cm, 1, BETA).unwrap().f_beta
}

fn main() -> rtap::Result<()> {
    let mut cfg = RunConfig {
        business: Business::Mon,
        ..RunConfig::default()
    };
    cfg.simulate.servers = 10;
    let (fleet, _) = simulate(&cfg)?;
    let prep = prepare_dataset(&fleet.kpis, &fleet.alarms, cfg.lag, cfg.max_gap)?;
    let (train, test) = chronological_split(&prep.dataset, default_boundary(&prep.dataset).unwrap());
    let scaler = Scaler::fit(&train.targets())?;
    let label = |ds: &rtap::datamodel::LabeledDataset| -> Vec<bool> {
        ds.severities().iter().map(|l| l.is_anomalous()).collect()
    };
    let (y_train, y_test) = (label(&train), label(&test));
    let model = fit_stacking(&scaler.apply(&train.targets())?, &y_train, &StackingParams::default(), 7)?;

    let z_test = scaler.apply(&test.targets())?;
    let mut preds = vec![Vec::new(); 5];
    for row in z_test.rows_iter() {
        let base = model.base_probabilities(row)?;
        for j in 0..4 {
            preds[j].push(base[j] >= 0.5);
        }
        preds[4].push(model.predict(row)?.1);
    }
    for (j, kind) in BaseClassifierKind::ALL.iter().enumerate() {
        println!("{:<14} F0.5 {:.3}", kind.name(), f_half(&y_test, &preds[j]));
    }
    println!("{:<14} F0.5 {:.3}", "stacking", f_half(&y_test, &preds[4]));
    println!("meta layer: {:?}", model.meta());
    Ok(())
}
