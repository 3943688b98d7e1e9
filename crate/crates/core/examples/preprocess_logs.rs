//! Corrupts a clean fleet, then cleans and gap-fills it again.
//!
//! cargo run --example preprocess_logs

use rtap::ingest::{parse_kpi_csv, preprocess, write_kpi_csv, DEFAULT_MAX_GAP};
use rtap::pipeline::{simulate, RunConfig};

fn main() -> rtap::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.simulate.servers = 3;
    cfg.simulate.hours = 500;
    cfg.simulate.missing_rate = 0.05;
    cfg.simulate.noise_rate = 0.03;
    let (fleet, corruption) = simulate(&cfg)?;
    println!("injected: {:?}", corruption.expect("rates are non-zero"));

    // through CSV, as logs would arrive
    let mut csv = Vec::new();
    write_kpi_csv(&mut csv, &fleet.kpis, None)?;
    let parsed = parse_kpi_csv(&csv[..])?;
    println!("parsed {} rows, {} diagnostics", parsed.records.len(), parsed.diagnostics.len());

    let pre = preprocess(&parsed.records, DEFAULT_MAX_GAP)?;
    println!("repairs: {}", serde_json::to_string(&pre.report).unwrap());
    for seg in &pre.segments {
        println!(
            "  {} {} .. {} ({} hours)",
            seg[0].server_id,
            seg[0].timestamp,
            seg[seg.len() - 1].timestamp,
            seg.len()
        );
    }
    Ok(())
}
