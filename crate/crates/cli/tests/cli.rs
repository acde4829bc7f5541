use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gatets::data::PreparedSeries;
use gatets::moe::{count_parameters, GateTsConfig};
use gatets::trainer::Checkpoint;
use serde_json::Value;

fn gatets(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatets"))
        .args(args)
        .env_remove("GATETS_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gatets(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--set", "d_model=8", "--set", "n_heads=2", "--set", "ffn_width=8", "--set", "epochs=2", "--set",
    "batch_size=64", "--context", "12",
];

fn train_tiny(dir: &Path, dataset: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join("run");
    let mut args = vec!["train", "--dataset", dataset, "--horizon", "3", "--out", p(&out)];
    args.extend(TINY);
    args.extend(extra);
    ok(&args);
    out
}

fn write_csv(dir: &Path, n: usize, gaps: &[usize]) -> PathBuf {
    let mut s = String::from("timestamp,value\n");
    for i in 0..n {
        let v = if gaps.contains(&i) { String::new() } else { format!("{}", (i as f64 * 0.3).sin() + 0.01 * i as f64) };
        s.push_str(&format!("{},{v}\n", i * 4));
    }
    let path = dir.join("series.csv");
    fs::write(&path, s).unwrap();
    path
}

fn prepared(dir: &Path) -> PreparedSeries {
    serde_json::from_str(&fs::read_to_string(dir.join("prepared.json")).unwrap()).unwrap()
}

#[test]
fn prepare_reports_imputation_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let csv = write_csv(d.path(), 400, &[10, 11, 50]);
    let before = fs::read(&csv).unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    ok(&["prepare", "--dataset", p(&csv), "--context", "8", "--horizon", "2", "--out", p(&a)]);
    ok(&["prepare", "--dataset", p(&csv), "--context", "8", "--horizon", "2", "--out", p(&b)]);
    assert_eq!(prepared(&a).provenance.imputed, 3);
    assert_eq!(fs::read(a.join("prepared.json")).unwrap(), fs::read(b.join("prepared.json")).unwrap());
    assert_eq!(fs::read(&csv).unwrap(), before, "input must not change");
    let m: Value = serde_json::from_str(&fs::read_to_string(a.join("prepare.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["dataset"]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["outputs"][0], "prepared.json");
}

#[test]
fn prepare_aggregates_by_factor() {
    let d = tempfile::tempdir().unwrap();
    let csv = write_csv(d.path(), 10_000, &[]);
    let out = d.path().join("agg");
    ok(&["prepare", "--dataset", p(&csv), "--aggregate", "150", "--context", "4", "--horizon", "2", "--out", p(&out)]);
    let s = prepared(&out);
    assert_eq!(s.values.len(), 10_000 / 150);
    assert_eq!(s.provenance.aggregation, 150);
}

#[test]
fn parse_errors_carry_file_and_line() {
    let d = tempfile::tempdir().unwrap();
    let csv = d.path().join("bad.csv");
    fs::write(&csv, "1,1.0\n2,abc\n").unwrap();
    let out = gatets(&["prepare", "--dataset", p(&csv), "--out", p(&d.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.csv:2"), "{err}");
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let d = tempfile::tempdir().unwrap();
    let o = p(d.path());
    let missing = gatets(&["train", "--dataset", "/nonexistent/x.csv", "--out", o]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));
    assert!(!d.path().join("model.ckpt").exists());

    let bad_key = gatets(&["train", "--dataset", "synth:sine", "--set", "depth=2", "--out", o]);
    assert_eq!(bad_key.status.code(), Some(2));
    let err = String::from_utf8_lossy(&bad_key.stderr);
    assert!(err.contains("model.n_experts") && err.contains("train.lr"), "{err}");

    let bad_k = gatets(&["train", "--dataset", "synth:sine", "--experts", "2", "--active", "3", "--out", o]);
    assert_eq!(bad_k.status.code(), Some(2));
    let bad_flag = gatets(&["train", "--dataset", "synth:sine", "--router", "mlp"]);
    assert_eq!(bad_flag.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_numeric_code_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("run");
    let r = gatets(&[
        "train", "--dataset", "synth:sine:600", "--context", "12", "--horizon", "3", "--set", "d_model=8", "--set",
        "n_heads=2", "--set", "ffn_width=8", "--set", "epochs=5", "--set", "lr=1e8", "--set", "weight_decay=0",
        "--set", "warmup_fraction=0", "--out", p(&out),
    ]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("train.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "diverged");
}

#[test]
fn routers_and_expert_flags_reach_the_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    for router in ["attention", "hmm", "classic"] {
        let run = train_tiny(
            &d.path().join(router),
            "synth:sine:500",
            &["--router", router, "--experts", "16", "--active", "2"],
        );
        let c = Checkpoint::load(&run.join("model.ckpt")).unwrap();
        assert_eq!(c.model_config.router.to_string(), router);
        assert_eq!((c.model_config.n_experts, c.model_config.active), (16, 2));
        let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
        assert_eq!(history.lines().count(), 2);
    }
}

#[test]
fn training_is_deterministic_under_fixed_seed() {
    let d = tempfile::tempdir().unwrap();
    let a = train_tiny(&d.path().join("a"), "synth:regime:600", &["--seed", "7"]);
    let b = train_tiny(&d.path().join("b"), "synth:regime:600", &["--seed", "7"]);
    let c = train_tiny(&d.path().join("c"), "synth:regime:600", &["--seed", "8"]);
    for f in ["model.ckpt", "last.ckpt", "history.jsonl", "prepared.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(c.join("model.ckpt")).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    let full = train_tiny(&d.path().join("full"), "synth:sine:500", &["--set", "epochs=4", "--checkpoint-every", "2"]);
    let mid = full.join("epoch-0002.ckpt");
    assert_eq!(Checkpoint::load(&mid).unwrap().state.epoch, 2);
    let resumed = d.path().join("resumed");
    let out = ok(&["train", "--dataset", "synth:sine:500", "--resume", p(&mid), "--out", p(&resumed)]);
    assert_eq!(out.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    for f in ["model.ckpt", "last.ckpt", "history.jsonl"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn evaluate_writes_matching_text_and_json() {
    let d = tempfile::tempdir().unwrap();
    let run = train_tiny(d.path(), "synth:sine:500", &["--experts", "4", "--active", "2"]);
    let ev = d.path().join("ev");
    let ckpt = run.join("model.ckpt");
    let data = run.join("prepared.json");
    let before = fs::read(&ckpt).unwrap();
    let stdout = ok(&["evaluate", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--out", p(&ev)]);
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    let json: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let text = fs::read_to_string(ev.join("report.txt")).unwrap();
    assert_eq!(stdout, text);
    let pairs: Vec<(&str, &str)> = text.lines().map(|l| l.split_once('=').unwrap()).collect();
    for (k, v) in &pairs {
        let mut node = &json;
        for part in k.split('.') {
            node = match node {
                Value::Array(a) => &a[part.parse::<usize>().unwrap()],
                other => &other[part],
            };
        }
        let expect = match node {
            Value::String(s) => s.clone(),
            Value::Null => "none".into(),
            other => other.to_string(),
        };
        assert_eq!(&expect, v, "{k}");
    }
    for key in ["mae.mean", "rmse.mean", "smape.mean", "mase.mean", "params_total", "params_active"] {
        assert!(pairs.iter().any(|(k, _)| *k == key), "missing {key}");
    }

    let cfg: GateTsConfig = Checkpoint::load(&ckpt).unwrap().model_config;
    let (total, active) = count_parameters(&cfg);
    assert_eq!(json["params_total"], total);
    assert_eq!(json["params_active"], active);
    assert!(active < total);
}

#[test]
fn intermittent_series_suppresses_smape() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("naive");
    let text = ok(&[
        "evaluate", "--dataset", "synth:intermittent:3000", "--naive", "--context", "24", "--horizon", "4", "--out",
        p(&out),
    ]);
    assert!(text.contains("smape=suppressed (zero-heavy)"), "{text}");
    let json: Value = serde_json::from_str(&fs::read_to_string(out.join("naive-report.json")).unwrap()).unwrap();
    assert_eq!(json["smape"], "suppressed (zero-heavy)");
    assert!(json["smape_note"].as_str().unwrap().contains("zero"));
}

fn trace_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn route_trace_csv_and_svg_agree() {
    let d = tempfile::tempdir().unwrap();
    let run = train_tiny(d.path(), "synth:regime:800", &["--experts", "4", "--active", "2"]);
    let ckpt = run.join("model.ckpt");
    let data = run.join("prepared.json");
    let t1 = d.path().join("t1");
    let t2 = d.path().join("t2");
    ok(&["route-trace", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--out", p(&t1)]);
    ok(&["route-trace", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--out", p(&t2)]);
    let csv = fs::read_to_string(t1.join("trace.csv")).unwrap();
    let svg = fs::read_to_string(t1.join("trace.svg")).unwrap();
    assert_eq!(csv, fs::read_to_string(t2.join("trace.csv")).unwrap());
    assert_eq!(svg, fs::read_to_string(t2.join("trace.svg")).unwrap());

    let rows = trace_rows(&csv);
    let sets: BTreeSet<Vec<usize>> = rows
        .iter()
        .map(|r| {
            let mut ids: Vec<usize> = r[3].split(';').map(|s| s.parse().unwrap()).collect();
            assert_eq!(ids.len(), 2);
            let w: f64 = r[4].split(';').map(|s| s.parse::<f64>().unwrap()).sum();
            assert!((w - 1.0).abs() < 1e-5);
            ids.sort();
            ids
        })
        .collect();
    let fills: BTreeSet<&str> = svg
        .lines()
        .filter(|l| l.starts_with("<circle"))
        .map(|l| l.split("fill=\"").nth(1).unwrap().split('"').next().unwrap())
        .collect();
    assert_eq!(fills.len(), sets.len());
    assert_eq!(svg.lines().filter(|l| l.starts_with("<circle")).count(), rows.len());
}

#[test]
fn route_trace_with_k1_and_bad_range() {
    let d = tempfile::tempdir().unwrap();
    let run = train_tiny(d.path(), "synth:sine:500", &["--experts", "3", "--active", "1"]);
    let ckpt = run.join("model.ckpt");
    let data = run.join("prepared.json");
    let t = d.path().join("t");
    ok(&["route-trace", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--from", "2", "--to", "12", "--out", p(&t)]);
    let rows = trace_rows(&fs::read_to_string(t.join("trace.csv")).unwrap());
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| !r[3].contains(';')));
    let bad = gatets(&["route-trace", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--to", "100000", "--out", p(&t)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn forecast_writes_horizon_rows() {
    let d = tempfile::tempdir().unwrap();
    let run = train_tiny(d.path(), "synth:sine:500", &[]);
    let f = d.path().join("f");
    let data = run.join("prepared.json");
    ok(&["forecast", "--dataset", p(&data), "--checkpoint", p(&run.join("model.ckpt")), "--end", "100", "--out", p(&f)]);
    let csv = fs::read_to_string(f.join("forecast.csv")).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["100", "101", "102"]);
    assert!(f.join("forecast.manifest.json").exists());
}

#[test]
fn config_file_and_env_output_root() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(
        &cfg,
        "[model]\ncontext = 12\nhorizon = 2\nd_model = 8\nn_heads = 2\nffn_width = 8\nn_experts = 3\nactive = 1\nrouter = \"hmm\"\n[train]\nepochs = 1\nbatch_size = 64\n[data]\nsplit = [0.7, 0.15, 0.15]\n",
    )
    .unwrap();
    let root = d.path().join("envout");
    let out = Command::new(env!("CARGO_BIN_EXE_gatets"))
        .args(["train", "--dataset", "synth:sine:400", "--config", p(&cfg), "--experts", "4"])
        .env("GATETS_OUT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = Checkpoint::load(&root.join("model.ckpt")).unwrap();
    assert_eq!(c.model_config.n_experts, 4, "flags win over the file");
    assert_eq!(c.model_config.horizon, 2);
    assert_eq!(prepared(&root).splits.train, 0..280);
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    assert_eq!(gatets(&["train", "--dataset", "synth:sine", "--config", p(&bad)]).status.code(), Some(2));
}

#[test]
fn selfcheck_passes_and_catches_perturbed_gradients() {
    let good = gatets(&["selfcheck", "--seeds", "1"]);
    assert!(good.status.success(), "{}", String::from_utf8_lossy(&good.stdout));
    let bad = gatets(&["selfcheck", "--seeds", "1", "--perturb-gradients", "1e-3"]);
    assert_eq!(bad.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL grad/"));
}
