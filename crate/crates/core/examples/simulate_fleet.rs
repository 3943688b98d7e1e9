//! Generates a small synthetic fleet and prints per-severity counts.
//!
//! cargo run --example simulate_fleet

use rtap::datamodel::SeverityLevel;
use rtap::pipeline::{simulate, RunConfig};
use rtap::synthgen::Business;

fn main() -> rtap::Result<()> {
    for business in Business::ALL {
        let mut cfg = RunConfig {
            business,
            ..RunConfig::default()
        };
        cfg.simulate.servers = 5;
        cfg.simulate.hours = 2000;
        let (fleet, _) = simulate(&cfg)?;
        let count = |l| fleet.alarms.iter().filter(|a| a.severity == l).count();
        let anomalous = fleet.alarms.len();
        println!(
            "{business}: {} KPI rows, {anomalous} alarm hours (low {}, medium {}, high {}), normal:anomalous {:.1}",
            fleet.kpis.len(),
            count(SeverityLevel::Low),
            count(SeverityLevel::Medium),
            count(SeverityLevel::High),
            (fleet.kpis.len() - anomalous) as f64 / anomalous as f64
        );
    }
    Ok(())
}
