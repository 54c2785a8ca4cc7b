use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tmbench_cli::commands::read_joint_csv;
use tmbench_cli::RunManifest;
use tmbench_core::analysis::{evaluate_dataset, systematic_error, ResultRow, SweepDataset, SweepSpec};
use tmbench_core::click_counting::Arm;
use tmbench_core::simulator::{simulate_trials, ExperimentConfig};
use tmbench_core::timetag::WindowMode;

const CONFIG: &str = "network_bins = 32\ntrials = 20000\nrng_seed = 7\nmean_pairs = 1.5\n";

fn tmbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmbench")).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn simulate(dir: &Path, config: &Path, out: &str) -> PathBuf {
    let out = dir.join(out);
    let o = tmbench(&["simulate", "--config", arg(config), "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn rows(dir: &Path) -> Vec<ResultRow> {
    let text = fs::read_to_string(dir.join("results.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    serde_json::from_value(doc["rows"].clone()).unwrap()
}

fn data_lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).count()
}

#[test]
fn simulate_writes_deterministic_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let a = RunManifest::read(&simulate(dir.path(), &config, "a").join("manifest.json")).unwrap();
    let b = RunManifest::read(&simulate(dir.path(), &config, "b").join("manifest.json")).unwrap();
    let names: Vec<&str> = a.outputs.iter().map(|f| f.path.as_str()).collect();
    for expected in ["tags.csv", "joint_histogram.csv", "singles.csv"] {
        assert!(names.contains(&expected), "{names:?}");
        assert!(dir.path().join("a").join(expected).is_file());
    }
    assert!(dir.path().join("a/manifest.json").is_file());
    assert_eq!(a.run_id, b.run_id);
    let digests = |m: &RunManifest| m.outputs.iter().map(|f| f.sha256.clone()).collect::<Vec<_>>();
    assert_eq!(digests(&a), digests(&b));
    assert_eq!(a.seed, Some(7));

    let c = dir.path().join("c");
    assert!(tmbench(&["simulate", "--config", arg(&config), "--seed", "8", "--out", arg(&c)]).status.success());
    let c = RunManifest::read(&c.join("manifest.json")).unwrap();
    assert_ne!(a.run_id, c.run_id);
    assert_ne!(digests(&a), digests(&c));
}

#[test]
fn zero_trials_give_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = tmbench(&["simulate", "--config", arg(&config), "--trials", "0", "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_lines(&out.join("tags.csv")), 1);
    assert_eq!(data_lines(&out.join("joint_histogram.csv")), 1);
}

#[test]
fn invalid_configuration_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &format!("{CONFIG}detector_efficiency = 1.2\n"));
    let out = dir.path().join("out");
    let o = tmbench(&["simulate", "--config", arg(&config), "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("detector_efficiency"));
    assert!(!out.exists());
}

#[test]
fn missing_input_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = tmbench(&["analyze", arg(&dir.path().join("absent.csv")), "--out", arg(&out)]);
    assert_ne!(o.status.code(), Some(0));
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(tmbench(&["simulate"]).status.code(), Some(1));
    assert_eq!(tmbench(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tmbench(&["sweep", "--out", "x", "--k-list", "0"]).status.code(), Some(1));
    assert_eq!(tmbench(&["--help"]).status.code(), Some(0));
}

#[test]
fn jitter_free_analysis_matches_the_histogram_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{CONFIG}jitter = false\n");
    let config_path = write_config(dir.path(), &text);
    let sim = simulate(dir.path(), &config_path, "sim");
    let out = dir.path().join("ana");
    let o = tmbench(&[
        "analyze",
        arg(&sim.join("tags.csv")),
        "--out",
        arg(&out),
        "--windows",
        "dynamic:2",
        "--herald-range",
        "0..6",
        "--k-list",
        "1,2",
        "--bins-per-mode",
        "16",
        "--label",
        "direct",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let config = ExperimentConfig::from_toml_str(&text).unwrap();
    let joint = read_joint_csv(&sim.join("joint_histogram.csv"), config.network_bins).unwrap();
    let (direct, singles) = simulate_trials(&config).unwrap();
    assert_eq!(joint, direct);
    let dataset = SweepDataset {
        pump: "direct".into(),
        window: WindowMode::Dynamic(2.0),
        joint,
        systematic_rel: systematic_error(&singles).unwrap().pooled,
    };
    let spec = SweepSpec {
        herald_arm: Arm::A,
        heralds: 0..=6,
        k_list: vec![1, 2],
        bins_per_mode: 16,
    };
    let expected = evaluate_dataset(&dataset, &spec);
    assert_eq!(rows(&out), expected);
    assert!(expected.iter().any(|r| r.lambda_min.is_some_and(|l| l < 0.0)));
}

#[test]
fn single_cell_sweep_equals_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let cell = ["--windows", "dynamic:2", "--herald-range", "2..2", "--k-list", "1"];
    let sweep = dir.path().join("sweep");
    let mut args = vec!["sweep", "--config", arg(&config), "--out", arg(&sweep), "--pumps", "150"];
    args.extend(cell);
    let o = tmbench(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let sim = simulate(dir.path(), &config, "sim");
    let ana = dir.path().join("ana");
    let tags = sim.join("tags.csv");
    let mut args = vec!["analyze", arg(&tags), "--out", arg(&ana), "--label", "150uW"];
    args.extend(cell);
    let o = tmbench(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let (s, a) = (rows(&sweep), rows(&ana));
    assert_eq!(s.len(), 1);
    assert_eq!(s, a);
    assert!(sweep.join("cells").join(format!("{}.json", s[0].key())).is_file());
}

#[test]
fn resumed_sweep_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "network_bins = 32\ntrials = 5000\nrng_seed = 3\n");
    let out = dir.path().join("sweep");
    let args = [
        "sweep",
        "--config",
        arg(&config),
        "--out",
        arg(&out),
        "--pumps",
        "50,500",
        "--windows",
        "dynamic:1,static:300",
        "--herald-range",
        "1..3",
        "--k-list",
        "1,2",
        "--bins-per-mode",
        "16",
    ];
    assert!(tmbench(&args).status.success());
    let csv = fs::read(out.join("results.csv")).unwrap();
    let json = fs::read(out.join("results.json")).unwrap();
    assert_eq!(rows(&out).len(), 2 * 2 * 3 * 2);

    let cells: Vec<PathBuf> = fs::read_dir(out.join("cells")).unwrap().map(|e| e.unwrap().path()).collect();
    let victim = cells.iter().find(|p| p.to_string_lossy().contains("500uW")).unwrap();
    fs::remove_file(victim).unwrap();
    fs::remove_file(out.join("results.csv")).unwrap();
    let mut resumed = args.to_vec();
    resumed.push("--resume");
    let o = tmbench(&resumed);
    assert!(o.status.success());
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("500uW done") && !log.contains("50uW done"), "{log}");
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), csv);
    assert_eq!(fs::read(out.join("results.json")).unwrap(), json);
}

#[test]
fn report_summarizes_a_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "network_bins = 32\ntrials = 5000\nrng_seed = 3\n");
    let out = dir.path().join("sweep");
    let o = tmbench(&[
        "sweep",
        "--config",
        arg(&config),
        "--out",
        arg(&out),
        "--pumps",
        "150",
        "--windows",
        "dynamic:2",
        "--herald-range",
        "1..4",
        "--k-list",
        "1,2",
        "--bins-per-mode",
        "16",
    ]);
    assert!(o.status.success());
    let report = dir.path().join("report");
    let o = tmbench(&["report", arg(&out), "--out", arg(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_lines(&report.join("report_significance.csv")), 1 + 2);
    assert_eq!(data_lines(&report.join("report_best.csv")), 1 + 2);
    assert_eq!(data_lines(&report.join("report_k_trend.csv")), 1 + 8);
    let manifest = RunManifest::read(&report.join("report_manifest.json")).unwrap();
    assert_eq!(manifest.command, "report");
    assert_eq!(manifest.outputs.len(), 3);
}
