//! Command-line front end.
//!
//! Every subcommand reads its options from flags, falling back to a flat
//! `key = value` config file (`--config`), then to defaults. Config keys are
//! the long flag names without dashes, e.g. `design = twoway`.
//!
//! Failures print a JSON object on stderr and exit with 1 (input),
//! 2 (numerical) or 3 (internal invariant violated).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::error::{CossoError, Result};
use crate::io::{self, fmt_f64, ModelArchive};
use crate::kernel::{kernel_from_spec, AnovaDesign, GramSet, ZERO_THRESHOLD};
use crate::logistic::{tune_logistic, ClassMetric};
use crate::rng;
use crate::sim::{run_experiment, Covariance, Example, ExperimentSpec};
use crate::spectral::{eigen_diagnostic, selection_consistency_experiment, ConsistencyConfig, LambdaSchedule, SpectralTruth};
use crate::tuning::{component_norm_path, criterion_from_spec, tune, Grids, TuneReport};

#[derive(Debug, Parser)]
#[command(name = "cosso", version, about = "Component selection and smoothing for SS-ANOVA models")]
struct Cli {
    /// Flat key = value file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tune and fit a regression model; writes model.json, components.csv, tune.csv, norm_path.csv.
    Fit(FitArgs),
    /// Apply a saved model to new covariates; writes predictions.csv (stdout without --out).
    Predict(PredictArgs),
    /// Tune and fit a logistic model; writes model.json, components.csv, tune.csv.
    Classify(ClassifyArgs),
    /// Run a replicated simulation; writes report.csv and report.json.
    Simulate(SimulateArgs),
    /// Closed-form selection experiment on the periodic grid; writes spectral.csv and spectral.json.
    Spectral(SpectralArgs),
    /// Run only the tuning stages; writes tune.csv and norm_path.csv.
    Tune(FitArgs),
}

#[derive(Debug, Args, Clone)]
struct ModelOpts {
    /// Training CSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Response column name.
    #[arg(long)]
    response: Option<String>,
    /// additive | twoway
    #[arg(long)]
    design: Option<String>,
    /// Component kernel, e.g. sobolev2.
    #[arg(long)]
    kernel: Option<String>,
    /// Comma-separated values or pow2:K0:K1 for {2^-k}.
    #[arg(long = "lambda0-grid")]
    lambda0_grid: Option<String>,
    /// Comma-separated values or lin:LO:HI:COUNT.
    #[arg(long = "M-grid")]
    m_grid: Option<String>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelOpts,
    /// gcv | cv5 | cv10 | cv:K
    #[arg(long)]
    criterion: Option<String>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Saved model archive.
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV containing the model's covariate columns.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[command(flatten)]
    model: ModelOpts,
    /// misclass | deviance
    #[arg(long)]
    metric: Option<String>,
    /// Number of cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// 1 | 2 | 3 | 4-Z | 4-phi
    #[arg(long)]
    example: Option<String>,
    /// uniform | cs:T | ar1:RHO
    #[arg(long)]
    covariance: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    /// gcv | cv5 | cv10 | cv:K
    #[arg(long)]
    criterion: Option<String>,
    /// Noise standard deviation, overriding the example default.
    #[arg(long = "noise-sd")]
    noise_sd: Option<f64>,
    /// Read the stated Example 1 and 2 noise levels as: variance | sd
    #[arg(long = "noise-reading")]
    noise_reading: Option<String>,
    #[arg(long = "n-test")]
    n_test: Option<usize>,
    #[arg(long = "lambda0-grid")]
    lambda0_grid: Option<String>,
    #[arg(long = "M-grid")]
    m_grid: Option<String>,
}

#[derive(Debug, Args)]
struct SpectralArgs {
    /// Grid points per axis (even, >= 4).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// λ = scale · n^(-exponent).
    #[arg(long = "lambda-scale")]
    lambda_scale: Option<f64>,
    #[arg(long = "lambda-exponent")]
    lambda_exponent: Option<f64>,
    /// Amplitudes main1,main2,interaction.
    #[arg(long)]
    truth: Option<String>,
    #[arg(long)]
    replicates: Option<usize>,
}

/// Flag value, else config value, else nothing.
struct Settings {
    config: BTreeMap<String, String>,
}

impl Settings {
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.config.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CossoError::input(format!("config key '{key}': bad value '{raw}'"))),
        }
    }

    /// Like `get`, for string flags whose type parses with its own errors.
    fn parsed<T: FromStr<Err = CossoError>>(&self, flag: Option<String>, key: &str) -> Result<Option<T>> {
        self.get(flag, key)?.map(|v: String| v.parse()).transpose()
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.get(flag, key)?
            .ok_or_else(|| CossoError::input(format!("missing required option --{key}")))
    }
}

fn parse_list(raw: &str) -> Result<Vec<f64>> {
    let bad = || CossoError::input(format!("bad grid '{raw}'"));
    let parts: Vec<&str> = raw.split(':').collect();
    let vals: Vec<f64> = match parts.as_slice() {
        ["pow2", a, b] => {
            let (a, b): (i32, i32) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            (a..=b).map(|k| 2f64.powi(-k)).collect()
        }
        ["lin", lo, hi, k] => {
            let (lo, hi): (f64, f64) = (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
            let k: usize = k.parse().map_err(|_| bad())?;
            if k < 2 {
                return Err(bad());
            }
            (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
        }
        _ => raw
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?,
    };
    if vals.is_empty() || vals.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(vals)
}

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn grids(s: &Settings, opts: &ModelOpts, p: usize) -> Result<Grids> {
    let mut g = Grids::default_for(p);
    if let Some(raw) = s.get::<String>(opts.lambda0_grid.clone(), "lambda0-grid")? {
        g.lambda0 = parse_list(&raw)?;
    }
    if let Some(raw) = s.get::<String>(opts.m_grid.clone(), "M-grid")? {
        g.m = parse_list(&raw)?;
    }
    Ok(g)
}

fn write_tune_csv(path: &Path, rep: &TuneReport) -> Result<()> {
    let mut rows = Vec::new();
    for (v, sc) in rep.lambda0_grid.iter().zip(&rep.lambda0_scores) {
        rows.push(vec!["lambda0".into(), fmt_f64(*v), sc.map_or("NA".into(), fmt_f64), u8::from(*v == rep.lambda0).to_string()]);
    }
    for (v, sc) in rep.m_grid.iter().zip(&rep.m_scores) {
        rows.push(vec!["M".into(), fmt_f64(*v), sc.map_or("NA".into(), fmt_f64), u8::from(*v == rep.m).to_string()]);
    }
    io::write_csv(path, &["stage".into(), "value".into(), "score".into(), "chosen".into()], &rows)
}

fn write_components(path: &Path, design: &AnovaDesign, theta: &[f64], norms: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = design
        .components()
        .iter()
        .enumerate()
        .map(|(a, c)| {
            vec![
                c.to_string(),
                fmt_f64(theta[a]),
                fmt_f64(norms[a]),
                u8::from(theta[a] >= ZERO_THRESHOLD).to_string(),
            ]
        })
        .collect();
    io::write_csv(
        path,
        &["component".into(), "theta".into(), "l1_norm".into(), "selected".into()],
        &rows,
    )
}

fn write_norm_path(path: &Path, design: &AnovaDesign, grams: &GramSet, y: &nalgebra::DVector<f64>, lambda0: f64, m_grid: &[f64]) -> Result<()> {
    let path_rows = component_norm_path(grams, y, lambda0, m_grid)?;
    let mut header = vec!["M".to_string()];
    header.extend(design.components().iter().map(|c| c.to_string()));
    let rows: Vec<Vec<String>> = path_rows
        .iter()
        .map(|r| {
            let mut row = vec![fmt_f64(r.m)];
            row.extend(r.norms.iter().map(|&v| fmt_f64(v)));
            row
        })
        .collect();
    io::write_csv(path, &header, &rows)
}

fn run_fit(s: &Settings, args: FitArgs, seed: u64, out: &Option<PathBuf>, write_model: bool) -> Result<()> {
    let data_path: PathBuf = s.require(args.model.data.clone(), "data")?;
    let response: String = s.require(args.model.response.clone(), "response")?;
    let ds = io::load_csv(&data_path, &response, false)?;
    let design = AnovaDesign::by_name(&s.get(args.model.design.clone(), "design")?.unwrap_or_else(|| "additive".into()), ds.d())?;
    let kernel = kernel_from_spec(&s.get(args.model.kernel.clone(), "kernel")?.unwrap_or_else(|| "sobolev2".into()))?;
    let criterion = criterion_from_spec(&s.get(args.criterion, "criterion")?.unwrap_or_else(|| "gcv".into()))?;
    let g = grids(s, &args.model, design.p())?;
    let tune_seed = rng::derive_seed(seed, &["tune"]);
    let (report, state) = tune(&ds, &design, kernel.clone(), criterion.as_ref(), &g, tune_seed)?;
    let dir = out_dir(out)?;
    write_tune_csv(&dir.join("tune.csv"), &report)?;
    let grams = GramSet::build(kernel.as_ref(), &design, &ds.x)?;
    write_norm_path(&dir.join("norm_path.csv"), &design, &grams, &ds.y, report.lambda0, &report.m_grid)?;
    if write_model {
        write_components(&dir.join("components.csv"), &design, state.theta().as_slice(), &state.component_norms()?)?;
        let archive = ModelArchive::from_fit(
            &state,
            ds.covariate_names.clone(),
            ds.response_name.clone(),
            Some(serde_json::to_value(&report)?),
            seed,
        )?;
        archive.save(&dir.join("model.json"))?;
    }
    println!(
        "{}",
        json!({"lambda0": report.lambda0, "M": report.m, "criterion": report.criterion,
               "selected": state.selected().iter().map(|&a| design.components()[a].to_string()).collect::<Vec<_>>()})
    );
    Ok(())
}

fn run_predict(s: &Settings, args: PredictArgs, out: &Option<PathBuf>) -> Result<()> {
    let model: PathBuf = s.require(args.model, "model")?;
    let data: PathBuf = s.require(args.data, "data")?;
    let archive = ModelArchive::load(&model)?;
    let raw = io::load_covariates(&data, &archive.covariate_names)?;
    let pred = archive.predict(&raw)?;
    let (header, rows): (Vec<String>, Vec<Vec<String>>) = if archive.is_logistic() {
        let prob = archive.predict_proba(&raw)?;
        (
            vec!["logit".into(), "probability".into(), "class".into()],
            (0..pred.len())
                .map(|i| vec![fmt_f64(pred[i]), fmt_f64(prob[i]), u8::from(pred[i] >= 0.0).to_string()])
                .collect(),
        )
    } else {
        (vec!["prediction".into()], pred.iter().map(|&v| vec![fmt_f64(v)]).collect())
    };
    match out {
        Some(_) => io::write_csv(&out_dir(out)?.join("predictions.csv"), &header, &rows),
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.write_record(&header)?;
            for r in rows {
                w.write_record(&r)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn run_classify(s: &Settings, args: ClassifyArgs, seed: u64, out: &Option<PathBuf>) -> Result<()> {
    let data_path: PathBuf = s.require(args.model.data.clone(), "data")?;
    let response: String = s.require(args.model.response.clone(), "response")?;
    let ds = io::load_csv(&data_path, &response, true)?;
    let design = AnovaDesign::by_name(&s.get(args.model.design.clone(), "design")?.unwrap_or_else(|| "additive".into()), ds.d())?;
    let kernel = kernel_from_spec(&s.get(args.model.kernel.clone(), "kernel")?.unwrap_or_else(|| "sobolev2".into()))?;
    let metric: ClassMetric = s.parsed(args.metric, "metric")?.unwrap_or(ClassMetric::Misclassification);
    let folds: usize = s.get(args.folds, "folds")?.unwrap_or(5);
    let g = grids(s, &args.model, design.p())?;
    let (report, fit) = tune_logistic(&ds, &design, kernel, &g, folds, metric, rng::derive_seed(seed, &["classify"]))?;
    let dir = out_dir(out)?;
    let rep = TuneReport {
        lambda0_grid: report.lambda0_grid.clone(),
        lambda0_scores: report.lambda0_scores.clone(),
        m_grid: report.m_grid.clone(),
        m_scores: report.m_scores.clone(),
        lambda0: report.lambda0,
        m: report.m,
        criterion: format!("cv:{}", report.k),
        seed: report.seed,
    };
    write_tune_csv(&dir.join("tune.csv"), &rep)?;
    let grams = GramSet::build(fit.kernel.as_ref(), &design, &ds.x)?;
    let n = ds.n() as f64;
    let norms: Vec<f64> = fit
        .result
        .expansion
        .coef
        .iter()
        .zip(grams.matrices())
        .map(|(c, r)| (r * c).iter().map(|v| v.abs()).sum::<f64>() / n)
        .collect();
    write_components(&dir.join("components.csv"), &design, &fit.result.theta, &norms)?;
    ModelArchive::from_logistic(&fit, ds.covariate_names.clone(), ds.response_name.clone(), Some(serde_json::to_value(&report)?), seed)?
        .save(&dir.join("model.json"))?;
    println!(
        "{}",
        json!({"lambda0": report.lambda0, "M": report.m, "metric": report.metric,
               "deviance": fit.deviance_trace().last(),
               "selected": fit.selected().iter().map(|&a| design.components()[a].to_string()).collect::<Vec<_>>()})
    );
    Ok(())
}

fn run_simulate(s: &Settings, args: SimulateArgs, seed: u64, out: &Option<PathBuf>) -> Result<()> {
    let example: Example = s
        .parsed(args.example, "example")?
        .ok_or_else(|| CossoError::input("missing required option --example"))?;
    let mut spec = ExperimentSpec::new(example, seed);
    if let Some(c) = s.parsed::<Covariance>(args.covariance, "covariance")? {
        spec.covariance = c;
    }
    if let Some(n) = s.get(args.n, "n")? {
        spec.n = n;
    }
    if let Some(r) = s.get(args.replicates, "replicates")? {
        spec.replicates = r;
    }
    if let Some(c) = s.get(args.criterion, "criterion")? {
        spec.criterion = c;
    }
    spec.noise_sd = s.get(args.noise_sd, "noise-sd")?;
    match s.get::<String>(args.noise_reading, "noise-reading")?.as_deref() {
        None | Some("variance") => spec.variance_reading = true,
        Some("sd") => spec.variance_reading = false,
        Some(other) => return Err(CossoError::input(format!("noise-reading '{other}' (variance, sd)"))),
    }
    if let Some(t) = s.get(args.n_test, "n-test")? {
        spec.n_test = t;
    }
    if let Some(raw) = s.get::<String>(args.lambda0_grid, "lambda0-grid")? {
        spec.lambda0_grid = Some(parse_list(&raw)?);
    }
    if let Some(raw) = s.get::<String>(args.m_grid, "M-grid")? {
        spec.m_grid = Some(parse_list(&raw)?);
    }
    let report = run_experiment(&spec)?;
    let dir = out_dir(out)?;
    fs::write(dir.join("report.csv"), report.to_csv()?)?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    println!(
        "{}",
        json!({"example": example.to_string(), "replicates": report.replicates.len(), "failures": report.failures.len(),
               "mean_ise": report.mean_ise, "se_ise": report.se_ise, "mean_model_size": report.mean_model_size})
    );
    Ok(())
}

fn run_spectral(s: &Settings, args: SpectralArgs, seed: u64, out: &Option<PathBuf>) -> Result<()> {
    let m: usize = s.get(args.m, "m")?.unwrap_or(20);
    let truth = match s.get::<String>(args.truth, "truth")? {
        None => SpectralTruth {
            main1: 1.0,
            main2: 1.0,
            interaction: 0.0,
        },
        Some(raw) => {
            let v = parse_list(&raw)?;
            if v.len() != 3 {
                return Err(CossoError::input("truth needs three amplitudes: main1,main2,interaction"));
            }
            SpectralTruth {
                main1: v[0],
                main2: v[1],
                interaction: v[2],
            }
        }
    };
    let cfg = ConsistencyConfig {
        m,
        sigma: s.get(args.sigma, "sigma")?.unwrap_or(1.0),
        schedule: LambdaSchedule {
            scale: s.get(args.lambda_scale, "lambda-scale")?.unwrap_or(2e-6),
            exponent: s.get(args.lambda_exponent, "lambda-exponent")?.unwrap_or(0.5),
        },
        truth,
        replicates: s.get(args.replicates, "replicates")?.unwrap_or(200),
        seed,
    };
    let rep = selection_consistency_experiment(&cfg)?;
    let dir = out_dir(out)?;
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| vec![r.replicate.to_string(), r.block.to_string(), fmt_f64(r.u), fmt_f64(r.lambda), fmt_f64(r.theta)])
        .collect();
    io::write_csv(
        &dir.join("spectral.csv"),
        &["replicate".into(), "block".into(), "U".into(), "lambda".into(), "theta".into()],
        &rows,
    )?;
    let summary = json!({
        "config": rep.config,
        "lambda": rep.lambda,
        "selection_rate": rep.selection_rate,
        "exact_recovery_rate": rep.exact_recovery_rate,
        "eigen_diagnostic": eigen_diagnostic(m)?,
    });
    fs::write(dir.join("spectral.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", json!({"lambda": rep.lambda, "selection_rate": rep.selection_rate, "exact_recovery_rate": rep.exact_recovery_rate}));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => io::load_config(p)?,
        None => BTreeMap::new(),
    };
    let s = Settings { config };
    let seed: u64 = s.get(cli.seed, "seed")?.unwrap_or(0);
    let out: Option<PathBuf> = s.get(cli.out.clone(), "out")?;
    match cli.command {
        Command::Fit(a) => run_fit(&s, a, seed, &out, true),
        Command::Tune(a) => run_fit(&s, a, seed, &out, false),
        Command::Predict(a) => run_predict(&s, a, &out),
        Command::Classify(a) => run_classify(&s, a, seed, &out),
        Command::Simulate(a) => run_simulate(&s, a, seed, &out),
        Command::Spectral(a) => run_spectral(&s, a, seed, &out),
    }
}

fn report_error(e: &CossoError) -> i32 {
    eprintln!("{}", json!({"error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()}));
    e.exit_code()
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            return report_error(&CossoError::input(e.to_string().trim().to_string()));
        }
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(cli))) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => report_error(&e),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            report_error(&CossoError::Internal(msg))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_syntax() {
        assert_eq!(parse_list("1,2.5, 3").unwrap(), vec![1.0, 2.5, 3.0]);
        assert_eq!(parse_list("pow2:0:2").unwrap(), vec![1.0, 0.5, 0.25]);
        assert_eq!(parse_list("lin:0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_list("lin:0:1:1").is_err());
        assert!(parse_list("a,b").is_err());
    }
}
