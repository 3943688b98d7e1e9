//! Fits the per-target random forest and compares it with the naive,
//! moving-average and exponential-smoothing baselines.
//!
//! cargo run --release --example forecast_kpis

use rtap::datamodel::{chronological_split, KpiFeature};
use rtap::forecast::{fit_rfr, forecast_baseline, BaselineModel, ForestParams};
use rtap::metrics::rmse;
use rtap::pipeline::{default_boundary, prepare_dataset, simulate, RunConfig};

fn main() -> rtap::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.simulate.servers = 6;
    cfg.simulate.hours = 1500;
    let (fleet, _) = simulate(&cfg)?;
    let prep = prepare_dataset(&fleet.kpis, &fleet.alarms, cfg.lag, cfg.max_gap)?;
    let (train, test) = chronological_split(&prep.dataset, default_boundary(&prep.dataset).unwrap());

    let params = ForestParams {
        n_trees: 40,
        ..ForestParams::default()
    };
    let model = fit_rfr(&train.features(), &train.targets(), &params)?;
    let pred = model.predict_matrix(&test.features())?;
    let layout = test.layout;
    let baselines = [
        BaselineModel::Naive,
        BaselineModel::MovingAverage { window: 3 },
        BaselineModel::ExponentialSmoothing { alpha: 0.3 },
    ];
    println!("{:<8} {:>8} {:>8} {:>8} {:>8}", "target", "rfr", "naive", "ma", "es");
    for (j, name) in layout.target_names().iter().enumerate() {
        let actual: Vec<f64> = test.rows.iter().map(|r| r.target[j]).collect();
        let mut line = format!("{name:<8} {:>8.4}", rmse(&pred.column(j), &actual)?);
        for b in &baselines {
            let guesses = test
                .rows
                .iter()
                .map(|r| {
                    let history: Vec<f64> = (0..=layout.lag)
                        .rev()
                        .map(|k| r.features.0[layout.index_of(k, KpiFeature::from_index(j)).unwrap()])
                        .collect();
                    forecast_baseline(b, &history)
                })
                .collect::<rtap::Result<Vec<_>>>()?;
            line += &format!(" {:>8.4}", rmse(&guesses, &actual)?);
        }
        println!("{line}");
    }
    Ok(())
}
