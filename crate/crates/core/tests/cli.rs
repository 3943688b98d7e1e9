use std::path::Path;
use std::process::{Command, Output};

fn rtap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const CONFIG: &str = r#"
seed = 5
[simulate]
servers = 3
hours = 500
imbalance = 25.0
[forecast]
n_trees = 5
[identify.base.random_forest]
n_trees = 10
[flat]
n_trees = 10
[paths]
kpi = "data/kpi.csv"
alarms = "data/alarms.csv"
model = "model.rtap"
"#;

#[test]
fn full_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    let cfg = ["--config", "run.toml"];

    let out = rtap(d, &[&cfg[..], &["simulate", "--out-dir", "data"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let kpi = std::fs::read_to_string(d.join("data/kpi.csv")).unwrap();
    assert_eq!(kpi.lines().count(), 1 + 3 * 500);

    let out = rtap(d, &[&cfg[..], &["preprocess", "--out", "clean.csv"]].concat());
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["rows_dropped"], 0);
    assert_eq!(std::fs::read_to_string(d.join("clean.csv")).unwrap(), kpi);

    let out = rtap(d, &[&cfg[..], &["train"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["train_rows"].as_u64().unwrap() > 500);
    let bundle = std::fs::read(d.join("model.rtap")).unwrap();

    // same inputs, same bytes
    let out = rtap(d, &[&cfg[..], &["train", "--model", "again.rtap", "--summary", "s.json"]].concat());
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(d.join("again.rtap")).unwrap(), bundle);

    let out = rtap(d, &[&cfg[..], &["predict", "--format", "json"]].concat());
    assert_eq!(code(&out), 0);
    let preds: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(preds.as_array().unwrap().len(), 3);
    assert!(preds[0]["probability"].is_number());

    let at = ["predict", "--at", "2021-01-10T05:00:00Z", "--out", "p.csv"];
    assert_eq!(code(&rtap(d, &[&cfg[..], &at].concat())), 0);
    let csv = std::fs::read_to_string(d.join("p.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().contains("2021-01-10T06:00:00Z"));

    let out = rtap(d, &[&cfg[..], &["evaluate"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(eval["rtap"]["severity"]["macro_f"].is_number());
    assert!(eval["rtap_c"]["severity"]["macro_f"].is_number());
    assert_eq!(eval["rtap"]["forecast_rmse"].as_array().unwrap().len(), 8);

    let overlap = ["evaluate", "--test-start", "2021-01-02T00:00:00Z"];
    assert_eq!(code(&rtap(d, &[&cfg[..], &overlap].concat())), 2);
    let allowed = [&overlap[..], &["--allow-overlap"]].concat();
    assert_eq!(code(&rtap(d, &[&cfg[..], &allowed].concat())), 0);

    // model trained for Biz refuses another business
    assert_eq!(code(&rtap(d, &[&cfg[..], &["predict", "--business", "Trd"]].concat())), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&rtap(d, &[])), 1);
    assert_eq!(code(&rtap(d, &["frobnicate"])), 1);
    assert_eq!(code(&rtap(d, &["train", "--kpi", "k.csv"])), 1);
    assert_eq!(code(&rtap(d, &["simulate", "--out-dir", "x", "--set", "seed=\"a\""])), 1);
    assert_eq!(code(&rtap(d, &["--help"])), 0);

    assert_eq!(code(&rtap(d, &["predict", "--kpi", "missing.csv", "--model", "m"])), 2);
    std::fs::write(d.join("bad.csv"), "a,b\n1,2\n").unwrap();
    std::fs::write(d.join("m.rtap"), "not a bundle").unwrap();
    assert_eq!(code(&rtap(d, &["predict", "--kpi", "bad.csv", "--model", "m.rtap"])), 3);

    let sim = rtap(d, &["simulate", "--out-dir", "data", "--servers", "1", "--hours", "30"]);
    assert_eq!(code(&sim), 0);
    assert_eq!(code(&rtap(d, &["predict", "--kpi", "data/kpi.csv", "--model", "m.rtap"])), 3);
    let train = ["train", "--kpi", "data/kpi.csv", "--alarms", "data/alarms.csv", "--model", "x.rtap"];
    assert_eq!(code(&rtap(d, &train)), 2);
}
