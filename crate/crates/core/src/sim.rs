//! Synthetic regression problems, integrated squared error and replicated
//! fit-tune-evaluate experiments.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{CossoError, Result};
use crate::kernel::{AnovaDesign, Sobolev2, ZERO_THRESHOLD};
use crate::rng;
use crate::solver::FitState;
use crate::tuning::{criterion_from_spec, tune, Grids};

/// `g1..g4` on `[0, 1]`.
pub fn building_block(t: f64, which: u8) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CossoError::input(format!("t = {t} is outside [0, 1]")));
    }
    block_unchecked(t, which)
}

fn block_unchecked(t: f64, which: u8) -> Result<f64> {
    let s = (2.0 * PI * t).sin();
    let c = (2.0 * PI * t).cos();
    Ok(match which {
        1 => t,
        2 => (2.0 * t - 1.0).powi(2),
        3 => s / (2.0 - s),
        4 => 0.1 * s + 0.2 * c + 0.3 * s * s + 0.4 * c.powi(3) + 0.5 * s.powi(3),
        _ => return Err(CossoError::input(format!("building block {which} does not exist (1..4)"))),
    })
}

fn g(which: u8, t: f64) -> f64 {
    block_unchecked(t, which).expect("block index is fixed in code")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Covariance {
    Uniform,
    CompoundSymmetry(f64),
    TrimmedAr1(f64),
}

impl Covariance {
    fn validate(&self) -> Result<()> {
        match *self {
            Covariance::Uniform => Ok(()),
            Covariance::CompoundSymmetry(t) if t.is_finite() && t >= 0.0 => Ok(()),
            Covariance::TrimmedAr1(r) if r.abs() < 1.0 => Ok(()),
            other => Err(CossoError::input(format!("invalid covariance structure {other}"))),
        }
    }
}

impl fmt::Display for Covariance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Covariance::Uniform => write!(f, "uniform"),
            Covariance::CompoundSymmetry(t) => write!(f, "cs:{t}"),
            Covariance::TrimmedAr1(r) => write!(f, "ar1:{r}"),
        }
    }
}

impl FromStr for Covariance {
    type Err = CossoError;

    /// `uniform`, `cs:<t>` or `ar1:<rho>`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| CossoError::input(format!("bad covariance parameter '{v}'")))
        };
        let c = match s.split_once(':') {
            None if s == "uniform" => Covariance::Uniform,
            Some(("cs", v)) => Covariance::CompoundSymmetry(parse(v)?),
            Some(("ar1", v)) => Covariance::TrimmedAr1(parse(v)?),
            _ => return Err(CossoError::input(format!("unknown covariance '{s}' (uniform, cs:t, ar1:rho)"))),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Draws an `n × d` covariate matrix on `[0, 1]^d`.
pub fn sample_covariates_with<R: Rng>(structure: Covariance, n: usize, d: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    structure.validate()?;
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        match structure {
            Covariance::Uniform => {
                for j in 0..d {
                    x[(i, j)] = rng.gen::<f64>();
                }
            }
            Covariance::CompoundSymmetry(t) => {
                let u: f64 = rng.gen();
                for j in 0..d {
                    x[(i, j)] = (rng.gen::<f64>() + t * u) / (1.0 + t);
                }
            }
            Covariance::TrimmedAr1(rho) => {
                let mut prev = 0.0;
                let scale = (1.0 - rho * rho).sqrt();
                for j in 0..d {
                    let w: f64 = StandardNormal.sample(rng);
                    let v = if j == 0 { w } else { rho * prev + scale * w };
                    prev = v;
                    x[(i, j)] = (v.clamp(-2.5, 2.5) + 2.5) / 5.0;
                }
            }
        }
    }
    Ok(x)
}

pub fn sample_covariates(structure: Covariance, n: usize, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_covariates_with(structure, n, d, &mut rng::stream(seed, &["covariates"]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Example {
    One,
    Two,
    Three,
    FourZ,
    FourPhi,
}

impl fmt::Display for Example {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Example::One => "1",
            Example::Two => "2",
            Example::Three => "3",
            Example::FourZ => "4-Z",
            Example::FourPhi => "4-phi",
        })
    }
}

impl FromStr for Example {
    type Err = CossoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" => Ok(Example::One),
            "2" => Ok(Example::Two),
            "3" => Ok(Example::Three),
            "4-z" | "4z" => Ok(Example::FourZ),
            "4-phi" | "4phi" => Ok(Example::FourPhi),
            _ => Err(CossoError::input(format!("unknown example '{s}' (1, 2, 3, 4-Z, 4-phi)"))),
        }
    }
}

/// Maps `[0, 1]⁴` to `(R, ω, L, C)` over the stated physical ranges.
fn circuit(x: &[f64]) -> (f64, f64) {
    let r = 100.0 * x[0];
    let omega = 40.0 * PI + 520.0 * PI * x[1];
    let l = x[2];
    let c = 1.0 + 10.0 * x[3];
    (r, omega * l - 1.0 / (omega * c))
}

impl Example {
    pub fn d(&self) -> usize {
        match self {
            Example::One | Example::Three => 10,
            Example::Two => 60,
            Example::FourZ | Example::FourPhi => 4,
        }
    }

    pub fn default_n(&self) -> usize {
        match self {
            Example::Two => 500,
            _ => 100,
        }
    }

    pub fn design(&self) -> Result<AnovaDesign> {
        match self {
            Example::One | Example::Two => AnovaDesign::additive(self.d()),
            _ => AnovaDesign::two_way(self.d()),
        }
    }

    /// 1-based indices of the variables the truth depends on.
    pub fn informative(&self) -> Vec<usize> {
        match self {
            Example::One | Example::Three => vec![1, 2, 3, 4],
            Example::Two => (1..=12).collect(),
            Example::FourZ | Example::FourPhi => vec![1, 2, 3, 4],
        }
    }

    pub fn truth(&self, x: &[f64]) -> f64 {
        match self {
            Example::One => 5.0 * g(1, x[0]) + 3.0 * g(2, x[1]) + 4.0 * g(3, x[2]) + 6.0 * g(4, x[3]),
            Example::Two => (0..12)
                .map(|j| {
                    let w = [1.0, 1.5, 2.0][j / 4];
                    w * g((j % 4 + 1) as u8, x[j])
                })
                .sum(),
            Example::Three => {
                g(1, x[0])
                    + g(2, x[1])
                    + g(3, x[2])
                    + g(4, x[3])
                    + g(1, x[2] * x[3])
                    + g(2, (x[0] + x[2]) / 2.0)
                    + g(3, x[0] * x[1])
            }
            Example::FourZ => {
                let (r, react) = circuit(x);
                (r * r + react * react).sqrt()
            }
            Example::FourPhi => {
                let (r, react) = circuit(x);
                // atan(react / R) with R = 0 read as the limit.
                react.atan2(r)
            }
        }
    }

    pub fn truth_on(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(x.nrows(), |i, _| {
            let row: Vec<f64> = x.row(i).iter().cloned().collect();
            self.truth(&row)
        })
    }

    /// Noise standard deviation giving a 3:1 signal-to-noise ratio in the
    /// uniform design. `variance_reading` treats the stated Example 1 and 2
    /// figures as variances; otherwise as standard deviations.
    pub fn noise_sd(&self, variance_reading: bool) -> f64 {
        let stated = |v: f64| if variance_reading { v.sqrt() } else { v };
        match self {
            Example::One => stated(1.74),
            Example::Two => stated(0.5184),
            Example::Three => 0.2546,
            Example::FourZ | Example::FourPhi => (self.mc_variance() / 9.0).sqrt(),
        }
    }

    /// Monte Carlo variance of the truth under the uniform design, 10⁵ draws
    /// from a fixed stream.
    pub fn mc_variance(&self) -> f64 {
        static CACHE: OnceLock<Vec<(String, f64)>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| {
            [
                Example::One,
                Example::Two,
                Example::Three,
                Example::FourZ,
                Example::FourPhi,
            ]
            .iter()
            .map(|e| (e.to_string(), e.compute_mc_variance(100_000)))
            .collect()
        });
        cache
            .iter()
            .find(|(k, _)| *k == self.to_string())
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN)
    }

    fn compute_mc_variance(&self, draws: usize) -> f64 {
        let mut rng = rng::stream(0, &["mc-variance", &self.to_string()]);
        let d = self.d();
        let mut row = vec![0.0; d];
        let (mut mean, mut m2) = (0.0, 0.0);
        for k in 0..draws {
            row.iter_mut().for_each(|v| *v = rng.gen());
            let f = self.truth(&row);
            let delta = f - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (f - mean);
        }
        m2 / (draws - 1) as f64
    }
}

/// Replicated experiment description.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub example: Example,
    pub covariance: Covariance,
    pub n: usize,
    pub replicates: usize,
    /// Tuning criterion name (`gcv`, `cv5`, `cv10`, `cv:k`).
    pub criterion: String,
    pub seed: u64,
    /// Overrides the default noise level.
    pub noise_sd: Option<f64>,
    /// Read the stated Example 1 and 2 noise levels as variances.
    pub variance_reading: bool,
    pub lambda0_grid: Option<Vec<f64>>,
    pub m_grid: Option<Vec<f64>>,
    pub n_test: usize,
}

impl ExperimentSpec {
    pub fn new(example: Example, seed: u64) -> Self {
        Self {
            example,
            covariance: Covariance::Uniform,
            n: example.default_n(),
            replicates: 20,
            criterion: "cv5".into(),
            seed,
            noise_sd: None,
            variance_reading: true,
            lambda0_grid: None,
            m_grid: None,
            n_test: 10_000,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.noise_sd.unwrap_or_else(|| self.example.noise_sd(self.variance_reading))
    }

    fn validate(&self) -> Result<()> {
        self.covariance.validate()?;
        if self.n < 4 {
            return Err(CossoError::input("n must be at least 4"));
        }
        if !(self.sigma().is_finite() && self.sigma() >= 0.0) {
            return Err(CossoError::input("noise level must be finite and >= 0"));
        }
        Ok(())
    }

    fn grids(&self, p: usize) -> Grids {
        let mut g = Grids::default_for(p);
        if let Some(l) = &self.lambda0_grid {
            g.lambda0 = l.clone();
        }
        if let Some(m) = &self.m_grid {
            g.m = m.clone();
        }
        g
    }
}

/// One replicate's training data.
pub fn make_dataset(spec: &ExperimentSpec, replicate: usize) -> Result<Dataset> {
    spec.validate()?;
    let tag = spec.example.to_string();
    let rep = replicate.to_string();
    let mut rng = rng::stream(spec.seed, &["sim", &tag, &rep, "train"]);
    let x = sample_covariates_with(spec.covariance, spec.n, spec.example.d(), &mut rng)?;
    let f = spec.example.truth_on(&x);
    let sigma = spec.sigma();
    let mut noise = rng::stream(spec.seed, &["sim", &tag, &rep, "noise"]);
    let y = DVector::from_fn(spec.n, |i, _| {
        let e: f64 = StandardNormal.sample(&mut noise);
        f[i] + sigma * e
    });
    Dataset::new_unit(x, y)
}

/// Mean squared difference between a predictor and the truth over fresh
/// covariates.
pub fn ise_with<P>(predict: P, example: Example, structure: Covariance, n_test: usize, seed: u64) -> Result<f64>
where
    P: Fn(&DMatrix<f64>) -> Result<DVector<f64>>,
{
    if n_test == 0 {
        return Err(CossoError::input("n_test must be positive"));
    }
    let x = sample_covariates_with(
        structure,
        n_test,
        example.d(),
        &mut rng::stream(seed, &["ise", &example.to_string()]),
    )?;
    let f = example.truth_on(&x);
    let fhat = predict(&x)?;
    Ok((fhat - f).norm_squared() / n_test as f64)
}

pub fn ise(state: &FitState, example: Example, structure: Covariance, n_test: usize, seed: u64) -> Result<f64> {
    ise_with(|x| state.predict_unit(x), example, structure, n_test, seed)
}

/// 1-based variables that enter at least one selected component.
pub fn selected_variables(state: &FitState) -> Vec<bool> {
    let mut sel = vec![false; state.design.d()];
    for (a, comp) in state.design.components().iter().enumerate() {
        if state.theta().as_slice()[a] >= ZERO_THRESHOLD {
            for v in comp.variables() {
                sel[v] = true;
            }
        }
    }
    sel
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub ise: f64,
    /// Number of components with `θ ≥ 1e-6`.
    pub model_size: usize,
    pub selected: Vec<bool>,
    pub lambda0: f64,
    pub m: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub spec: ExperimentSpec,
    pub sigma: f64,
    pub replicates: Vec<ReplicateResult>,
    /// `(replicate, message)` for every replicate that failed.
    pub failures: Vec<(usize, String)>,
    pub mean_ise: f64,
    pub se_ise: f64,
    pub mean_model_size: f64,
    pub sd_model_size: f64,
    pub se_model_size: f64,
    /// Per variable, the number of replicates that selected it.
    pub appearance: Vec<usize>,
    pub mean_m: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn run_replicate(spec: &ExperimentSpec, r: usize) -> Result<ReplicateResult> {
    let data = make_dataset(spec, r)?;
    let design = spec.example.design()?;
    let criterion = criterion_from_spec(&spec.criterion)?;
    let seed = rng::derive_seed(spec.seed, &["sim", &spec.example.to_string(), &r.to_string(), "tune"]);
    let (report, state) = tune(&data, &design, Arc::new(Sobolev2), criterion.as_ref(), &spec.grids(design.p()), seed)?;
    let test_seed = rng::derive_seed(spec.seed, &["sim", &spec.example.to_string(), &r.to_string(), "test"]);
    let ise = ise(&state, spec.example, spec.covariance, spec.n_test, test_seed)?;
    Ok(ReplicateResult {
        replicate: r,
        ise,
        model_size: state.theta().as_slice().iter().filter(|&&t| t >= ZERO_THRESHOLD).count(),
        selected: selected_variables(&state),
        lambda0: report.lambda0,
        m: report.m,
    })
}

/// Replicated fit-tune-evaluate loop. Failed replicates are logged, listed in
/// the report and left out of the aggregates.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunReport> {
    spec.validate()?;
    criterion_from_spec(&spec.criterion)?;
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for r in 0..spec.replicates {
        match run_replicate(spec, r) {
            Ok(res) => reps.push(res),
            Err(e @ CossoError::Input(_)) => return Err(e),
            Err(e) => {
                log::warn!("replicate {r} failed and is excluded: {e}");
                failures.push((r, e.to_string()));
            }
        }
    }
    let ises: Vec<f64> = reps.iter().map(|r| r.ise).collect();
    let sizes: Vec<f64> = reps.iter().map(|r| r.model_size as f64).collect();
    let ms: Vec<f64> = reps.iter().map(|r| r.m).collect();
    let (mean_ise, sd_ise) = mean_sd(&ises);
    let (mean_size, sd_size) = mean_sd(&sizes);
    let k = (reps.len() as f64).sqrt();
    let d = spec.example.d();
    let appearance = (0..d).map(|j| reps.iter().filter(|r| r.selected[j]).count()).collect();
    Ok(RunReport {
        spec: spec.clone(),
        sigma: spec.sigma(),
        failures,
        mean_ise,
        se_ise: sd_ise / k,
        mean_model_size: mean_size,
        sd_model_size: sd_size,
        se_model_size: sd_size / k,
        appearance,
        mean_m: mean_sd(&ms).0,
        replicates: reps,
    })
}

impl RunReport {
    /// Per-replicate CSV: replicate, ise, model_size, lambda0, M, x1..xd.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let d = self.spec.example.d();
        let mut header = vec!["replicate".to_string(), "ise".into(), "model_size".into(), "lambda0".into(), "M".into()];
        header.extend((1..=d).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for r in &self.replicates {
            let mut rec = vec![
                r.replicate.to_string(),
                format!("{:e}", r.ise),
                r.model_size.to_string(),
                format!("{:e}", r.lambda0),
                r.m.to_string(),
            ];
            rec.extend(r.selected.iter().map(|&s| u8::from(s).to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| CossoError::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CossoError::Internal(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_at_known_points() {
        assert_eq!(building_block(0.3, 1).unwrap(), 0.3);
        assert_eq!(building_block(0.5, 2).unwrap(), 0.0);
        assert!((building_block(0.25, 3).unwrap() - 1.0).abs() < 1e-15);
        assert!((building_block(0.0, 4).unwrap() - 0.6).abs() < 1e-15);
        assert!(building_block(1.5, 1).is_err());
        assert!(building_block(0.5, 5).is_err());
    }

    #[test]
    fn example_one_by_hand() {
        let mut x = vec![0.0; 10];
        x[..4].copy_from_slice(&[0.5, 0.5, 0.25, 0.0]);
        // 5·0.5 + 3·0 + 4·1 + 6·0.6
        assert!((Example::One.truth(&x) - 10.1).abs() < 1e-12);
    }

    #[test]
    fn example_three_composes_interactions() {
        let x = [0.2, 0.7, 0.4, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let s = |t: f64| (2.0 * PI * t).sin();
        let g3 = |t: f64| s(t) / (2.0 - s(t));
        let g4 = |t: f64| {
            let c = (2.0 * PI * t).cos();
            0.1 * s(t) + 0.2 * c + 0.3 * s(t).powi(2) + 0.4 * c.powi(3) + 0.5 * s(t).powi(3)
        };
        let expect = 0.2 + (0.4f64).powi(2) + g3(0.4) + g4(0.9) + 0.36 + (2.0 * 0.3f64 - 1.0).powi(2) + g3(0.14);
        assert!((Example::Three.truth(&x) - expect).abs() < 1e-12);
    }

    #[test]
    fn circuit_reactance_cancels() {
        // ωL = 1/(ωC) at C midpoint (C = 6) and ω = 40π + 520π·0.5.
        let omega = 300.0 * PI;
        let l = 1.0 / (omega * omega * 6.0);
        let x = [0.3, 0.5, l, 0.5];
        assert!((Example::FourZ.truth(&x) - 30.0).abs() < 1e-9);
        assert!(Example::FourPhi.truth(&x).abs() < 1e-9);
    }

    #[test]
    fn noiseless_dataset_is_truth() {
        let mut spec = ExperimentSpec::new(Example::One, 3);
        spec.noise_sd = Some(0.0);
        spec.n = 30;
        let ds = make_dataset(&spec, 0).unwrap();
        assert_eq!(ds.y, Example::One.truth_on(&ds.x));
    }

    #[test]
    fn covariance_parsing() {
        assert_eq!("cs:1".parse::<Covariance>().unwrap(), Covariance::CompoundSymmetry(1.0));
        assert_eq!("ar1:-0.5".parse::<Covariance>().unwrap(), Covariance::TrimmedAr1(-0.5));
        assert!("ar1:1".parse::<Covariance>().is_err());
        assert!("cs:-1".parse::<Covariance>().is_err());
    }

    #[test]
    fn trimmed_ar1_stays_in_unit_cube() {
        let x = sample_covariates(Covariance::TrimmedAr1(0.9), 500, 6, 1).unwrap();
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn stated_noise_matches_snr() {
        // 15.63 / 9 ≈ 1.737 against the stated 1.74.
        let v1 = Example::One.mc_variance();
        assert!((v1 / 9.0 - 1.74).abs() < 0.02, "{v1}");
        let v2 = Example::Two.mc_variance();
        assert!((v2 / 9.0 - 0.5184).abs() < 0.01, "{v2}");
    }
}
