//! Builds an evaluation report from hand-written confusion matrices.
//!
//! cargo run --example metrics_report

use rtap::metrics::{assemble_report, f_beta, ConfusionMatrix, BETA};

fn main() -> rtap::Result<()> {
    println!("F0.5 at precision 0.8, recall 0.5: {:.4}", f_beta(0.8, 0.5, BETA));

    // truth, predicted over normal/low/medium/high; no high case in the data
    let truth = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 2, 2];
    let pred = [0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 2, 1];
    let binary_truth: Vec<usize> = truth.iter().map(|&c| (c > 0) as usize).collect();
    let binary_pred: Vec<usize> = pred.iter().map(|&c| (c > 0) as usize).collect();
    let report = assemble_report(
        Vec::new(),
        &ConfusionMatrix::from_pairs(2, &binary_truth, &binary_pred)?,
        &ConfusionMatrix::from_pairs(4, &truth, &pred)?,
        BETA,
    )?;
    println!("{}", report.to_json()?);
    Ok(())
}
