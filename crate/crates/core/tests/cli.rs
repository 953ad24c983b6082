use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use llab::config::ExperimentConfig;
use llab::grid::{grid_cells, read_results, run_grid};

const BASE: &str = r#"
[model]
name = "mlp-small"
hidden = [16, 8]

[dataset]
kind = "synthetic-blobs"
n_train = 200
n_test = 100
dim = 6
n_classes = 3
clusters_per_class = 2

[recipe]
epochs = 3
batch_size = 50

[spectrum]
k = [1]
retain = [20]

[spectrum.settings]
n_probes = 2
lanczos_steps = 12
bins = 31
batch_size = 100
"#;

fn config(dir: &Path, grid: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, format!("{BASE}\n[grid]\n{grid}\n")).unwrap();
    path
}

fn llab(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_llab"));
    cmd.args(args).env_remove("LLAB_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

#[test]
fn single_vanilla_run_writes_one_json_and_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), r#"algorithms = ["vanilla"]"#);
    let out = tmp.path().join("out");
    let o = llab(&["run", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let runs: Vec<_> = fs::read_dir(out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    assert_eq!(csv_rows(&out.join("results.csv")), 1);
    assert!(out.join("pareto.csv").exists() && out.join("ledgers.csv").exists());
    let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("ledger_mode"), "defaults are echoed: {resolved}");

    // the JSON carries the resolved config and dataset hashes
    let json: serde_json::Value = serde_json::from_slice(&fs::read(runs[0].as_ref().unwrap().path()).unwrap()).unwrap();
    let text = json.to_string();
    assert!(text.contains("mlp-small") && text.contains("2*MAC"), "{text}");
    let rows = read_results(&out).unwrap();
    assert_eq!(rows[0].algorithm, "vanilla");
    assert_eq!(rows[0].flop_convention, "2*MAC");
    assert!(rows[0].backprop_flops.unwrap() > 0);
}

#[test]
fn grid_arithmetic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "algorithms = [\"rise\"]\nretain = [10, 25, 50]\nk = [0, 2]\nseeds = [0, 1, 2]");
    let cfg = llab::config::parse_config(&cfg).unwrap();
    let cells = grid_cells(&cfg);
    assert_eq!(cells.len(), 18);
    let names: std::collections::HashSet<_> = cells.iter().map(|c| c.name()).collect();
    assert_eq!(names.len(), 18);

    let both = config(tmp.path(), "algorithms = [\"vanilla\", \"ilot\", \"rise\"]\nretain = [10, 50]\nk = [0, 1]\niterations = [1, 2]\nseeds = [0, 1]");
    let cfg = llab::config::parse_config(&both).unwrap();
    // vanilla once per seed; I-LOT over R x k x I x seed; RISE over R x k x seed
    assert_eq!(grid_cells(&cfg).len(), 2 + 2 * 2 * 2 * 2 + 2 * 2 * 2);
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = config(tmp.path(), "algorithms = [\"rise\"]\nretain = [0]\nk = [7]");
    let o = llab(&["run", s(&bad)], &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("grid.retain") && err.contains("grid.k"), "{err}");

    let typo = tmp.path().join("typo.toml");
    fs::write(&typo, format!("{BASE}\n[grid]\nalgorithms = [\"rise\"]\nseeds = [0]\nretian = [5]\n")).unwrap();
    let o = llab(&["run", s(&typo)], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("retian"));

    let o = llab(&["run", s(&tmp.path().join("missing.toml"))], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn io_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(llab(&["plots", s(&empty)], &[]).status.code(), Some(3));
    assert_eq!(llab(&["pareto", s(&tmp.path().join("nowhere"))], &[]).status.code(), Some(3));
}

#[test]
fn diverging_runs_are_recorded_and_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("exp.toml");
    // a huge constant learning rate makes the loss overflow
    let text = BASE.replace("[recipe]\n", "[recipe]\nschedule = { kind = \"constant\", base = 1e300 }\n").replace("epochs = 3", "epochs = 20");
    fs::write(&path, format!("{text}\n[grid]\nalgorithms = [\"vanilla\"]\nseeds = [0, 1]\n")).unwrap();
    let out = tmp.path().join("out");
    let o = llab(&["run", s(&path), "--out", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_results(&out).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| !r.ok() && r.final_test_accuracy.is_none()));
    assert!(rows.iter().all(|r| r.status == "failed"));
    let record: serde_json::Value = serde_json::from_slice(&fs::read(out.join("runs/vanilla_R100_k0_I0_seed0.json")).unwrap()).unwrap();
    let error = record["error"].as_str().unwrap();
    assert!(error.contains("non-finite") && error.contains("epoch"), "{error}");
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), r#"algorithms = ["vanilla"]"#);
    let env_out = tmp.path().join("from_env");
    let o = llab(&["run", s(&cfg)], &[("LLAB_OUT", &env_out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(env_out.join("results.csv").exists());
    assert!(!tmp.path().join("results").exists());

    // an explicit flag beats the environment
    let flag_out = tmp.path().join("from_flag");
    let o = llab(&["run", s(&cfg), "--out", s(&flag_out)], &[("LLAB_OUT", &env_out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(flag_out.join("results.csv").exists());
}

#[test]
fn plots_from_runs_and_from_spectra() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = config(tmp.path(), "algorithms = [\"vanilla\", \"ilot\", \"rise\"]\nretain = [20, 50]\nk = [1]");
    let cfg = ExperimentConfig::from_toml(&fs::read_to_string(&cfg_path).unwrap(), tmp.path()).unwrap();
    let runs = tmp.path().join("runs_out");
    let summary = run_grid(&cfg, &runs, 2).unwrap();
    assert_eq!(summary.rows.len(), 5);
    let o = llab(&["plots", s(&runs)], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(csv_rows(&runs.join("plots/scatter.csv")), 5);
    let mut log = csv::Reader::from_path(runs.join("plots/scatter_log.csv")).unwrap();
    let headers = log.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "view"));
    assert!(log.records().all(|r| r.unwrap().iter().any(|v| v == "log")));

    let spectra = tmp.path().join("spectra_out");
    let o = llab(&["spectrum", s(&cfg_path), "--k", "0,1", "--r", "20", "--out", s(&spectra)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&spectra.join("spectra/flatness.csv")), 4);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(spectra.join("spectra/spectrum_k1_R20.json")).unwrap()).unwrap();
    for key in ["ritz", "histogram", "flatness", "seed", "n_probes", "lanczos_steps"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let o = llab(&["plots", s(&spectra)], &[]);
    assert_eq!(o.status.code(), Some(0));
    let mut files: Vec<String> =
        fs::read_dir(spectra.join("plots")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["hist_k0_R20.csv", "hist_k0_ref.csv", "hist_k1_R20.csv", "hist_k1_ref.csv"]);
}
