use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use zopro::analysis::{AnalyticsReport, Flag};
use zopro::rundir::{policy_checkpoint, reward_checkpoint, RunManifest, RunStatus};

const SMALL: &str = r#"
steps_per_iteration = 20
batch_size = 8
prompt_dim = 4
hidden_layers = [8]
n_responses = 8
n_prompts = 64
heldout_prompts = 32
pretrain_rounds = 2
pretrain_epochs = 5
reward_epochs = 5
"#;

fn zopro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zopro")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let path = dir.join(name);
    let iterations = if extra.contains("n_iterations") { "" } else { "n_iterations = 1\n" };
    fs::write(&path, format!("{SMALL}{iterations}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_single_iteration_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let run = tmp.path().join("run");
    let out = zopro(&["train", "--config", &cfg, "--out", &s(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));

    let manifest: RunManifest = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.status, RunStatus::Completed);
    assert_eq!(manifest.iterations_completed, 1);
    assert!(policy_checkpoint(&run, 1).is_file());
    assert!(reward_checkpoint(&run, 1).is_file());
    let ckpts = fs::read_dir(run.join("checkpoints")).unwrap().filter(|e| e.as_ref().unwrap().path().is_file()).count();
    assert_eq!(ckpts, 2);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 21);
    assert!(metrics.starts_with("step,iteration,alpha,epsilon,eta,projected_grad,J_plus,J_minus,mean_reward,wall_ms"));
}

#[test]
fn train_is_byte_reproducible_and_seed_override_changes_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "n_iterations = 2\n");
    let metrics = |name: &str, extra: &[&str]| {
        let dir = tmp.path().join(name);
        let mut args = vec!["train", "--config", &cfg, "--out"];
        let d = s(&dir);
        args.push(&d);
        args.extend(extra);
        let out = zopro(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        (fs::read(dir.join("metrics.csv")).unwrap(), fs::read(policy_checkpoint(&dir, 2)).unwrap())
    };
    let a = metrics("a", &[]);
    let b = metrics("b", &[]);
    assert_eq!(a, b);
    let c = metrics("c", &["--seed-override", "99"]);
    assert_ne!(a.0, c.0);
}

#[test]
fn zero_refine_fraction_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "refine_fraction = 0.0\n");
    let out = zopro(&["train", "--config", &cfg, "--out", &s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("refine_fraction"), "{}", stderr(&out));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn malformed_config_names_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "eta = \n");
    let out = zopro(&["train", "--config", &cfg, "--out", &s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));

    let unknown = write_config(tmp.path(), "u.toml", "learning_rate = 1.0\n");
    let out = zopro(&["train", "--config", &unknown, "--out", &s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

fn read_report(dir: &Path) -> AnalyticsReport {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn analyze_single_iteration_is_flagged_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let run = tmp.path().join("run");
    assert!(zopro(&["train", "--config", &cfg, "--out", &s(&run)]).status.success());
    let out = zopro(&["analyze", "--run", &s(&run), "--out", &s(&tmp.path().join("a"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = read_report(&tmp.path().join("a"));
    assert_eq!(report.flags, vec![Flag::InsufficientIterations]);
    assert!(report.relative_angle_deg.is_empty() && report.procrustes_disparity.is_empty());
}

#[test]
fn analyze_multi_iteration_cardinality_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "n_iterations = 4\n");
    let run = tmp.path().join("run");
    assert!(zopro(&["train", "--config", &cfg, "--out", &s(&run)]).status.success());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = zopro(&["analyze", "--config", &s(&run), "--out", &s(dir)]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let report = read_report(&a);
    assert_eq!(report.tags, vec![1, 2, 3, 4]);
    assert_eq!(report.procrustes_disparity.len(), 3);
    assert_eq!(report.distance_correlation.len(), 3);
    assert_eq!(report.relative_angle_deg.len(), 3);
    assert_eq!(report.pearson_delta_corr.len(), 3);
    assert_eq!(report.layerwise_angles.len(), 3);
    for name in ["report.json", "plotdata/angles.csv", "plotdata/correlations.csv", "plotdata/layerwise_angles.csv", "plotdata/trajectory_pca.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_eq!(fs::read_to_string(a.join("plotdata/angles.csv")).unwrap().lines().count(), 4);
}

#[test]
fn analyze_reports_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "n_iterations = 3\n");
    let run = tmp.path().join("run");
    assert!(zopro(&["train", "--config", &cfg, "--out", &s(&run)]).status.success());
    fs::remove_file(reward_checkpoint(&run, 2)).unwrap();
    let out = zopro(&["analyze", "--run", &s(&run), "--out", &s(&tmp.path().join("a"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("reward"), "{}", stderr(&out));
}

#[test]
fn grid_records_collapse_without_aborting() {
    let tmp = tempfile::tempdir().unwrap();
    // the default architecture; tiny nets absorb eta = 1 without collapsing
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "").unwrap();
    let cfg = s(&cfg);
    let out_dir = tmp.path().join("grid");
    let out = zopro(&["grid", "--config", &cfg, "--out", &s(&out_dir), "--eta-list", "1,1e-5", "--epsilon-list", "1,1e-4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(out_dir.join("grid.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["eta", "epsilon", "final_reward_delta", "collapsed_flag"]
    );
    let rows: Vec<zopro::cli::GridRow> = reader.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let subdirs = fs::read_dir(&out_dir).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(subdirs, 4);
    let explosive = rows.iter().find(|r| r.eta == 1.0 && r.epsilon == 1.0).unwrap();
    assert!(explosive.collapsed_flag, "{explosive:?}");
    let best = rows.iter().find(|r| r.eta == 1e-5 && r.epsilon == 1e-4).unwrap();
    assert!(best.final_reward_delta.is_finite());
}

#[test]
fn compare_series_share_a_start() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let one = tmp.path().join("one");
    let out = zopro(&["compare", "--config", &cfg, "--out", &s(&one), "--methods", "zopro"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let series = |dir: &Path| {
        let mut r = csv::Reader::from_path(dir.join("compare.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        rows
    };
    let rows = series(&one);
    assert!(rows.iter().all(|r| &r[0] == "zopro"));
    assert_eq!(rows.len(), 21);

    let all = tmp.path().join("all");
    let out = zopro(&["compare", "--config", &cfg, "--out", &s(&all)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = series(&all);
    let starts: Vec<(&str, &str)> = rows.iter().filter(|r| &r[1] == "0").map(|r| (r.get(0).unwrap(), r.get(4).unwrap())).collect();
    assert_eq!(starts.iter().map(|s| s.0).collect::<Vec<_>>(), ["zopro", "spsa", "first_order"]);
    assert!(starts.iter().all(|s| s.1 == starts[0].1));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(all.join("compare.json")).unwrap()).unwrap();
    assert!(summary["threshold"].is_number());
}

#[test]
fn unknown_method_is_an_argument_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let out = zopro(&["compare", "--config", &cfg, "--out", &s(&tmp.path().join("x")), "--methods", "adam"]);
    assert_eq!(out.status.code(), Some(2));
}
