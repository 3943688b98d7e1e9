use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use rtap::datamodel::{AlarmRecord, KpiRecord, Timestamp};
use rtap::ingest::{self, parse_timestamp, Parsed};
use rtap::pipeline::{self, EvaluateOptions, PipelineModel, RunConfig};
use rtap::synthgen::Business;
use rtap::{Error, Result};

#[derive(Parser)]
#[command(name = "rtap", version, about = "Forecast server KPIs and predict next-hour anomalies")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set forecast.n_trees=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_business)]
    business: Option<Business>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fleet as KPI and alarm CSV files.
    Simulate(SimulateArgs),
    /// Clean and gap-fill a KPI CSV.
    Preprocess(PreprocessArgs),
    /// Fit every stage and write a model bundle.
    Train(TrainArgs),
    /// Predict the next hour for every server.
    Predict(PredictArgs),
    /// Score a model on held-out hours.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory receiving kpi.csv and alarms.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    servers: Option<usize>,
    #[arg(long)]
    hours: Option<usize>,
    /// Normal hours per anomalous hour.
    #[arg(long)]
    imbalance: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    kpi: Option<PathBuf>,
    /// Cleaned CSV destination.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    kpi: Option<PathBuf>,
    #[arg(long)]
    alarms: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write the training summary as JSON here instead of stdout.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    kpi: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Predict the hour after this one, ignoring any later rows.
    #[arg(long, value_parser = parse_ts)]
    at: Option<Timestamp>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    kpi: Option<PathBuf>,
    #[arg(long)]
    alarms: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// First target hour scored (default: the hour after training ended).
    #[arg(long, value_parser = parse_ts)]
    test_start: Option<Timestamp>,
    /// Allow the test period to overlap training.
    #[arg(long)]
    allow_overlap: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_business(raw: &str) -> std::result::Result<Business, String> {
    raw.parse().map_err(|_| format!("unknown business {raw:?}"))
}

fn parse_ts(raw: &str) -> std::result::Result<Timestamp, String> {
    parse_timestamp(raw).ok_or_else(|| format!("cannot parse timestamp {raw:?}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rtap: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(b) = cli.business {
        cfg.business = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(flag: Option<&PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(fallback.as_ref())
        .cloned()
        .ok_or_else(|| Error::Config(format!("no {name} path: pass --{name} or set paths.{name}")))
}

fn report<T>(parsed: Parsed<T>, path: &Path) -> Vec<T> {
    for d in parsed.diagnostics.iter().take(20) {
        warn!("{}: {d}", path.display());
    }
    if parsed.diagnostics.len() > 20 {
        warn!("{}: {} more diagnostics", path.display(), parsed.diagnostics.len() - 20);
    }
    parsed.records
}

fn read_kpis(path: &Path) -> Result<Vec<KpiRecord>> {
    let parsed = ingest::parse_kpi_csv(BufReader::new(File::open(path)?))?;
    Ok(report(parsed, path))
}

fn read_alarms(path: &Path) -> Result<Vec<AlarmRecord>> {
    let parsed = ingest::parse_alarm_csv(BufReader::new(File::open(path)?))?;
    Ok(report(parsed, path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Opens `path`, or stdout when absent.
fn sink(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: serde::Serialize>(path: Option<&PathBuf>, value: &T) -> Result<()> {
    let mut out = sink(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Io(e.into()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate(a) => {
            cfg.simulate.servers = a.servers.unwrap_or(cfg.simulate.servers);
            cfg.simulate.hours = a.hours.unwrap_or(cfg.simulate.hours);
            cfg.simulate.imbalance = a.imbalance.or(cfg.simulate.imbalance);
            let (fleet, corruption) = pipeline::simulate(&cfg)?;
            fs::create_dir_all(&a.out_dir)?;
            ingest::write_kpi_csv(create(&a.out_dir.join("kpi.csv"))?, &fleet.kpis, Some(cfg.simulate.disk_count))?;
            ingest::write_alarm_csv(create(&a.out_dir.join("alarms.csv"))?, &fleet.alarms)?;
            if let Some(c) = corruption {
                info!(
                    "corruption: {} rows deleted, {} values out of range, {} duplicates",
                    c.rows_deleted, c.values_out_of_range, c.duplicates_inserted
                );
            }
            println!(
                "{} KPI rows and {} alarms written to {}",
                fleet.kpis.len(),
                fleet.alarms.len(),
                a.out_dir.display()
            );
        }
        Command::Preprocess(a) => {
            let kpi = require(a.kpi.as_ref(), &cfg.paths.kpi, "kpi")?;
            let records = read_kpis(&kpi)?;
            let pre = ingest::preprocess(&records, cfg.max_gap)?;
            let cleaned: Vec<KpiRecord> = pre.records().cloned().collect();
            ingest::write_kpi_csv(create(&a.out)?, &cleaned, pre.disk_count())?;
            write_json(None, &pre.report)?;
        }
        Command::Train(a) => {
            let kpi = require(a.kpi.as_ref(), &cfg.paths.kpi, "kpi")?;
            let alarms = require(a.alarms.as_ref(), &cfg.paths.alarms, "alarms")?;
            let model_path = require(a.model.as_ref(), &cfg.paths.model, "model")?;
            let (model, summary) = pipeline::train(&cfg, &read_kpis(&kpi)?, &read_alarms(&alarms)?)?;
            model.save(&model_path)?;
            info!("model written to {}", model_path.display());
            write_json(a.summary.as_ref(), &summary)?;
        }
        Command::Predict(a) => {
            let kpi = require(a.kpi.as_ref(), &cfg.paths.kpi, "kpi")?;
            let model_path = require(a.model.as_ref(), &cfg.paths.model, "model")?;
            let model = PipelineModel::load(&model_path)?;
            if cli.business.is_some() {
                model.ensure_business(cfg.business)?;
            }
            let outcome = pipeline::predict_latest(&model, &read_kpis(&kpi)?, a.at)?;
            let out = a.out.as_ref().or(cfg.paths.output.as_ref());
            match a.format {
                Format::Csv => pipeline::write_predictions_csv(sink(out)?, &model.layout, &outcome.predictions)?,
                Format::Json => write_json(out, &outcome.predictions)?,
            }
        }
        Command::Evaluate(a) => {
            let kpi = require(a.kpi.as_ref(), &cfg.paths.kpi, "kpi")?;
            let alarms = require(a.alarms.as_ref(), &cfg.paths.alarms, "alarms")?;
            let model_path = require(a.model.as_ref(), &cfg.paths.model, "model")?;
            let model = PipelineModel::load(&model_path)?;
            if cli.business.is_some() {
                model.ensure_business(cfg.business)?;
            }
            let opts = EvaluateOptions {
                test_start: a.test_start,
                allow_overlap: a.allow_overlap,
            };
            let evaluation = pipeline::evaluate(&model, &read_kpis(&kpi)?, &read_alarms(&alarms)?, &opts)?;
            write_json(a.out.as_ref().or(cfg.paths.output.as_ref()), &evaluation)?;
        }
    }
    Ok(())
}
