use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_opera");

fn opera(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("OPERA_OUT").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = "num_classes = 3\nper_class = 12\ndim = 6\nepochs = 3\nbatch_size = 16\nbackbone_widths = 16\nprojector_hidden = 16\nembed_dim = 8\npredictor_hidden = 16\nprobe_epochs = 20\nordering_samples = 200\n";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_defaults_succeed() {
    let o = opera(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|v| v["pass"] == true));
}

#[test]
fn verify_zero_trials_is_usage_error() {
    assert_eq!(opera(&["verify", "--trials", "0"]).status.code(), Some(2));
}

#[test]
fn verify_perturbed_gradient_fails() {
    let o = opera(&["verify", "--trials", "5", "--perturb-gradient", "1e-6"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"pass\":false"));
}

#[test]
fn unknown_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "mode = opera\nfoo=1\n");
    let o = opera(&["train", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("foo"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3_with_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "hot.cfg", &format!("{SMALL}lr = 1e12\nschedule = constant\nepochs = 20\n").replace("epochs = 3\n", ""));
    let out = dir.path().join("out");
    let o = opera(&["train", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() < 20);
    assert!(!out.join("final.ckpt").exists());
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "small.cfg", SMALL);
    let env_out = dir.path().join("from_env");
    let o = Command::new(BIN).args(["train", s(&cfg)]).env("OPERA_OUT", &env_out).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(env_out.join("metrics.jsonl")).unwrap().lines().count(), 3);
    assert!(env_out.join("config.resolved").exists());
}

#[test]
fn eval_protocols_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("run");
    assert!(opera(&["train", s(&cfg), "--out", s(&out)]).status.success());
    let ckpt = out.join("final.ckpt");

    let eval = |protocol: &str| opera(&["eval", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--protocol", protocol]);
    let probe: serde_json::Value = serde_json::from_slice(&eval("probe").stdout).unwrap();
    let acc = probe["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let knn: serde_json::Value = serde_json::from_slice(&eval("knn").stdout).unwrap();
    assert!(knn["accuracy"].as_f64().is_some());
    let ord: serde_json::Value = serde_json::from_slice(&eval("ordering").stdout).unwrap();
    for key in ["mean_same_instance", "mean_same_class", "mean_cross_class"] {
        assert!(ord[key].as_f64().is_some(), "{key}");
    }

    let wide = write_cfg(dir.path(), "wide.cfg", &SMALL.replace("dim = 6", "dim = 7"));
    let o = opera(&["eval", "--checkpoint", s(&ckpt), "--config", s(&wide)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let text = std::fs::read_to_string(&ckpt).unwrap();
    let cut: Vec<&str> = text.lines().take(12).collect();
    let truncated = dir.path().join("cut.ckpt");
    std::fs::write(&truncated, cut.join("\n")).unwrap();
    let o = opera(&["eval", "--checkpoint", s(&truncated), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 13"), "{}", stderr(&o));
}

#[test]
fn eval_on_csv_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("run");
    assert!(opera(&["train", s(&cfg), "--out", s(&out)]).status.success());
    let data = opera::data::experiment_dataset(&opera::config::ExperimentConfig::load(&cfg).unwrap()).unwrap();
    let csv = dir.path().join("data.csv");
    opera::data::write_csv(&data, std::fs::File::create(&csv).unwrap()).unwrap();
    let o = opera(&["eval", "--checkpoint", s(&out.join("final.ckpt")), "--data", s(&csv), "--protocol", "knn"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn compare_needs_two_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "small.cfg", SMALL);
    assert_eq!(opera(&["compare", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn compare_arrangements() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs: Vec<PathBuf> = ["A", "B", "C"]
        .iter()
        .map(|a| write_cfg(dir.path(), &format!("{a}.cfg"), &format!("{SMALL}arrangement = {a}\n")))
        .collect();
    let mut args = vec!["compare"];
    args.extend(cfgs.iter().map(|p| s(p)));
    let o = opera(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_reader(o.stdout.as_slice());
    let arrangements: Vec<String> = rdr.records().map(|r| r.unwrap()[2].to_string()).collect();
    assert_eq!(arrangements, ["A", "B", "C"]);
}

#[test]
fn compare_failure_keeps_finished_rows() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_cfg(dir.path(), "good.cfg", SMALL);
    let bad = write_cfg(dir.path(), "bad.cfg", "bogus = 1\n");
    let table = dir.path().join("t.csv");
    let o = opera(&["compare", s(&good), s(&bad), "--output", s(&table)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(&table).unwrap().lines().count(), 2);
}
