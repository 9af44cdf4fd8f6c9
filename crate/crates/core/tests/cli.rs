use std::fs;
use std::path::Path;

use cosso::cli::run_cli;
use cosso::io::{read_table, write_dataset_csv, ModelArchive};
use cosso::sim::{make_dataset, Example, ExperimentSpec};

fn names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

fn write_example(path: &Path, example: Example, n: usize, seed: u64) {
    let mut spec = ExperimentSpec::new(example, seed);
    spec.n = n;
    let ds = make_dataset(&spec, 0).unwrap();
    write_dataset_csv(path, &names(ds.d()), "y", &ds.x, &ds.y).unwrap();
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("cosso").chain(args.iter().copied()))
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let t = read_table(fs::File::open(path).unwrap()).unwrap();
    let j = t.column_index(name).unwrap();
    t.rows.iter().map(|r| r[j]).collect()
}

#[test]
fn predictions_on_training_file_equal_archived_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    write_example(&data, Example::One, 60, 3);
    let out = dir.path().join("fit");
    let (d, o) = (data.to_str().unwrap(), out.to_str().unwrap());
    let code = cli(&["fit", "--data", d, "--response", "y", "--lambda0-grid", "pow2:12:16", "--M-grid", "1,2,3", "--seed", "1", "--out", o]);
    assert_eq!(code, 0);
    for f in ["model.json", "components.csv", "tune.csv", "norm_path.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let pred_dir = dir.path().join("pred");
    let model = out.join("model.json");
    assert_eq!(cli(&["predict", "--model", model.to_str().unwrap(), "--data", d, "--out", pred_dir.to_str().unwrap()]), 0);
    let pred = column(&pred_dir.join("predictions.csv"), "prediction");
    let archive = ModelArchive::load(&model).unwrap();
    assert_eq!(pred.as_slice(), archive.fitted.as_slice());
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let args = ["simulate", "--example", "1", "--replicates", "2", "--seed", "7", "--n", "50",
            "--lambda0-grid", "pow2:12:14", "--M-grid", "1,2,4", "--out", out.to_str().unwrap()];
        assert_eq!(cli(&args), 0);
        reports.push((fs::read(out.join("report.csv")).unwrap(), fs::read(out.join("report.json")).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn twoway_design_on_ten_covariates_has_55_components() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    write_example(&data, Example::One, 40, 5);
    let out = dir.path().join("fit");
    let args = ["fit", "--data", data.to_str().unwrap(), "--response", "y", "--design", "twoway",
        "--lambda0-grid", "pow2:12:12", "--M-grid", "2", "--out", out.to_str().unwrap()];
    assert_eq!(cli(&args), 0);
    let text = fs::read_to_string(out.join("components.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 55);
}

#[test]
fn config_file_supplies_flags_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    write_example(&data, Example::One, 40, 9);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("# tuning run\ndata = {}\nresponse = y\nlambda0-grid = pow2:12:12\nM-grid = 9\n", data.display())).unwrap();
    let out = dir.path().join("tune");
    assert_eq!(cli(&["tune", "--config", cfg.to_str().unwrap(), "--M-grid", "1,2", "--out", out.to_str().unwrap()]), 0);
    let m: Vec<f64> = fs::read_to_string(out.join("tune.csv")).unwrap().lines()
        .filter(|l| l.starts_with("M,"))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(m, vec![1.0, 2.0]);
}

#[test]
fn exit_codes_by_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["nonsense"]), 1);
    assert_eq!(cli(&["fit", "--response", "y"]), 1);
    let missing = dir.path().join("absent.csv");
    assert_eq!(cli(&["fit", "--data", missing.to_str().unwrap(), "--response", "y"]), 1);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x1,y\n0.1,1\n,2\n0.3,3\n").unwrap();
    assert_eq!(cli(&["fit", "--data", bad.to_str().unwrap(), "--response", "y"]), 1);
    assert_eq!(cli(&["simulate", "--example", "9"]), 1);
    // Near-interpolating smoothers leave no usable GCV score.
    let data = dir.path().join("tiny.csv");
    fs::write(&data, "x1,y\n0.1,1\n0.5,2\n0.9,1.5\n0.3,0.2\n").unwrap();
    let out = dir.path().join("tiny_out");
    assert_eq!(cli(&["fit", "--data", data.to_str().unwrap(), "--response", "y", "--lambda0-grid", "1e-300", "--out", out.to_str().unwrap()]), 2);
    assert_eq!(cosso::CossoError::Internal("objective increased".into()).exit_code(), 3);
}
