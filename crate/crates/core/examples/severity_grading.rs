//! Grades anomalies with the 3-NN severity model, with and without
//! severity-weighted replication.
//!
//! cargo run --release --example severity_grading

use rtap::datamodel::{chronological_split, LabeledDataset, SeverityLevel};
use rtap::ingest::Scaler;
use rtap::metrics::{macro_f, precision_recall_f, ConfusionMatrix, BETA};
use rtap::pipeline::{default_boundary, prepare_dataset, simulate, RunConfig};
use rtap::severity::{fit_knn_severity, SamplingWeights};

fn main() -> rtap::Result<()> {
    let cfg = RunConfig::default();
    let (fleet, _) = simulate(&cfg)?;
    let prep = prepare_dataset(&fleet.kpis, &fleet.alarms, cfg.lag, cfg.max_gap)?;
    let (train, test) = chronological_split(&prep.dataset, default_boundary(&prep.dataset).unwrap());
    let scaler = Scaler::fit(&train.targets())?;
    let anomalous = |ds: &LabeledDataset| -> rtap::Result<_> {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.rows[i].severity.is_anomalous()).collect();
        let z = scaler.apply(&ds.targets())?.select_rows(&idx);
        let levels: Vec<SeverityLevel> = idx.iter().map(|&i| ds.rows[i].severity).collect();
        Ok((z, levels))
    };
    let (z_train, l_train) = anomalous(&train)?;
    let (z_test, l_test) = anomalous(&test)?;
    let truth: Vec<usize> = l_test.iter().map(|l| l.code() as usize - 1).collect();

    for weights in [SamplingWeights::UNIT, SamplingWeights::for_levels(&l_train)] {
        let model = fit_knn_severity(&z_train, &l_train, &weights)?;
        let pred = z_test
            .rows_iter()
            .map(|r| Ok(model.predict(r)?.code() as usize - 1))
            .collect::<rtap::Result<Vec<_>>>()?;
        let cm = ConfusionMatrix::from_pairs(3, &truth, &pred)?;
        let per: Vec<String> = ["low", "medium", "high"]
            .iter()
            .enumerate()
            .map(|(c, n)| format!("{n} {:.3}", precision_recall_f(&cm, c, BETA).unwrap().f_beta))
            .collect();
        println!(
            "weights ({},{},{}): {} replicated rows, macro F0.5 {:.3} [{}]",
            weights.low,
            weights.medium,
            weights.high,
            model.len(),
            macro_f(&cm, BETA)?,
            per.join(", ")
        );
    }
    Ok(())
}
