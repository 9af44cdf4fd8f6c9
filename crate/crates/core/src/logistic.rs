//! COSSO for binary classification: logistic loss minimized by IRLS, each
//! Newton step solved as a weighted COSSO fit.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{CossoError, Result};
use crate::kernel::{cross_grams, AnovaDesign, ComponentKernel, GramSet, ZERO_THRESHOLD};
use crate::solver::{fit_one_step_with, fit_spline_only, Budget, SolverFit};
use crate::tuning::{fold_partition, Grids, Stage};

const F_CLAMP: f64 = 30.0;
const WEIGHT_FLOOR: f64 = 1e-6;
const MAX_HALVINGS: usize = 30;

fn check_labels(y: &DVector<f64>) -> Result<()> {
    match y.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(CossoError::input(format!("label {} at position {} is not 0 or 1", y[i], i + 1))),
        None => Ok(()),
    }
}

/// `log(1 + e^f)` without overflow.
fn softplus(f: f64) -> f64 {
    if f > 0.0 {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    }
}

pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// `(1/n) Σ [-y_i f_i + log(1 + e^{f_i})]`.
pub fn logistic_loss(f: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    if f.len() != y.len() {
        return Err(CossoError::input("logit and label lengths differ"));
    }
    check_labels(y)?;
    let n = y.len().max(1) as f64;
    Ok(f.iter().zip(y.iter()).map(|(&fi, &yi)| softplus(fi) - yi * fi).sum::<f64>() / n)
}

/// Gradient of [`logistic_loss`] with respect to `f`.
pub fn logistic_loss_gradient(f: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if f.len() != y.len() {
        return Err(CossoError::input("logit and label lengths differ"));
    }
    check_labels(y)?;
    let n = y.len().max(1) as f64;
    Ok(DVector::from_fn(y.len(), |i, _| (sigmoid(f[i]) - y[i]) / n))
}

/// `f(x) = b + Σ_α Σ_i coef_α[i] R_α(x, x_i)`.
///
/// Step halving mixes two fits with different θ, so the logit is kept per
/// component instead of as a single `(θ, c)` pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelExpansion {
    pub coef: Vec<DVector<f64>>,
    pub b: f64,
}

impl KernelExpansion {
    pub fn constant(p: usize, n: usize, b: f64) -> Self {
        Self {
            coef: vec![DVector::zeros(n); p],
            b,
        }
    }

    pub fn from_fit(fit: &SolverFit) -> Self {
        Self {
            coef: fit.theta.as_slice().iter().map(|&t| &fit.spline.c * t).collect(),
            b: fit.spline.b,
        }
    }

    /// `(1 - t) self + t other`.
    pub fn blend(&self, other: &Self, t: f64) -> Self {
        Self {
            coef: self
                .coef
                .iter()
                .zip(&other.coef)
                .map(|(a, b)| a * (1.0 - t) + b * t)
                .collect(),
            b: (1.0 - t) * self.b + t * other.b,
        }
    }

    /// Evaluates with precomputed cross matrices `R_α(x_new, x_train)`.
    pub fn eval(&self, cross: &[DMatrix<f64>]) -> DVector<f64> {
        let m = cross.first().map_or(0, |c| c.nrows());
        let mut out = DVector::from_element(m, self.b);
        for (r, c) in cross.iter().zip(&self.coef) {
            if c.iter().any(|&v| v != 0.0) {
                out += r * c;
            }
        }
        out
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.coef.len())
            .filter(|&a| self.coef[a].iter().any(|&v| v != 0.0))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            max_iters: 15,
            rel_tol: 1e-6,
        }
    }
}

/// Result of IRLS on a prebuilt Gram set.
#[derive(Debug, Clone)]
pub struct IrlsResult {
    pub expansion: KernelExpansion,
    /// θ of the last accepted weighted subproblem.
    pub theta: Vec<f64>,
    /// Deviance `2 n ℓ(f)` at the start and after each accepted step.
    pub deviance_trace: Vec<f64>,
    pub iterations: usize,
    pub separated: bool,
}

fn clamp(f: DVector<f64>) -> (DVector<f64>, bool) {
    let mut hit = false;
    let f = f.map(|v| {
        if v.abs() > F_CLAMP {
            hit = true;
        }
        v.clamp(-F_CLAMP, F_CLAMP)
    });
    (f, hit)
}

fn deviance(f: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    Ok(2.0 * y.len() as f64 * logistic_loss(f, y)?)
}

/// IRLS with step halving; `stage` selects the θ ≡ 1 spline or one-step COSSO
/// for each weighted subproblem.
pub fn irls_grams(grams: &GramSet, y: &DVector<f64>, lambda0: f64, stage: Stage, opts: IrlsOptions) -> Result<IrlsResult> {
    check_labels(y)?;
    let (n, p) = (grams.n(), grams.p());
    if y.len() != n {
        return Err(CossoError::input("label length does not match gram matrices"));
    }
    let ones = y.sum();
    if ones == 0.0 || ones == n as f64 {
        return Err(CossoError::input("both classes must be present"));
    }
    let ybar = ones / n as f64;
    let mut expansion = KernelExpansion::constant(p, n, (ybar / (1.0 - ybar)).ln());
    let mut f = expansion.eval(grams.matrices());
    let mut dev = deviance(&f, y)?;
    let mut trace = vec![dev];
    let mut theta = vec![0.0; p];
    let mut separated = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let prob = f.map(sigmoid);
        let w = prob.map(|q| (q * (1.0 - q)).max(WEIGHT_FLOOR));
        let z = DVector::from_fn(n, |i, _| f[i] + (y[i] - prob[i]) / w[i]);
        let fit = match stage {
            Stage::Spline => fit_spline_only(grams, &z, Some(&w), lambda0)?,
            Stage::OneStep(m) => fit_one_step_with(grams, &z, Some(&w), lambda0, Budget::Total(m))?,
        };
        let proposal = KernelExpansion::from_fit(&fit);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = expansion.blend(&proposal, t);
            let (fc, hit) = clamp(cand.eval(grams.matrices()));
            let dc = deviance(&fc, y)?;
            if dc <= dev {
                accepted = Some((cand, fc, dc, hit));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc, dc, hit)) = accepted else {
            log::debug!("IRLS: no step halving lowered the deviance; stopping");
            break;
        };
        separated |= hit;
        let change = (dev - dc) / dev.max(f64::MIN_POSITIVE);
        expansion = cand;
        f = fc;
        dev = dc;
        theta = fit.theta.as_slice().to_vec();
        trace.push(dev);
        if change < opts.rel_tol {
            break;
        }
    }
    if separated {
        log::warn!("logit reached the clamp |f| = {F_CLAMP}; the classes look separable");
    }
    Ok(IrlsResult {
        expansion,
        theta,
        deviance_trace: trace,
        iterations,
        separated,
    })
}

/// Fitted logistic COSSO model.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub design: AnovaDesign,
    pub kernel: Arc<dyn ComponentKernel>,
    pub train_x: DMatrix<f64>,
    pub scaling: crate::data::Scaling,
    pub lambda0: f64,
    pub m: f64,
    pub result: IrlsResult,
}

impl LogisticFit {
    pub fn deviance_trace(&self) -> &[f64] {
        &self.result.deviance_trace
    }

    pub fn predict_logit_unit(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let cross = cross_grams(self.kernel.as_ref(), &self.design, x, &self.train_x)?;
        Ok(self.result.expansion.eval(&cross).map(|v| v.clamp(-F_CLAMP, F_CLAMP)))
    }

    pub fn predict_logit(&self, raw: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.predict_logit_unit(&self.scaling.apply(raw)?)
    }

    pub fn predict_proba(&self, raw: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.predict_logit(raw)?.map(sigmoid))
    }

    /// Components whose θ in the last accepted step reaches the reporting threshold.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.result.theta.len())
            .filter(|&a| self.result.theta[a] >= ZERO_THRESHOLD)
            .collect()
    }
}

pub fn irls_fit(
    data: &Dataset,
    design: &AnovaDesign,
    kernel: Arc<dyn ComponentKernel>,
    lambda0: f64,
    m: f64,
    opts: IrlsOptions,
) -> Result<LogisticFit> {
    data.check_labels()?;
    let grams = GramSet::build(kernel.as_ref(), design, &data.x)?;
    let result = irls_grams(&grams, &data.y, lambda0, Stage::OneStep(m), opts)?;
    Ok(LogisticFit {
        design: design.clone(),
        kernel,
        train_x: data.x.clone(),
        scaling: data.scaling.clone(),
        lambda0,
        m,
        result,
    })
}

/// Held-out score used for classification tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ClassMetric {
    Misclassification,
    Deviance,
}

impl std::str::FromStr for ClassMetric {
    type Err = CossoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "misclass" | "misclassification" => Ok(ClassMetric::Misclassification),
            "deviance" => Ok(ClassMetric::Deviance),
            _ => Err(CossoError::input(format!("unknown metric '{s}' (misclass, deviance)"))),
        }
    }
}

fn fold_score(y: &[f64], f: &DVector<f64>, metric: ClassMetric) -> f64 {
    let n = y.len() as f64;
    match metric {
        ClassMetric::Misclassification => {
            y.iter()
                .zip(f.iter())
                .filter(|(&yi, &fi)| (fi >= 0.0) != (yi == 1.0))
                .count() as f64
                / n
        }
        ClassMetric::Deviance => {
            2.0 * y.iter().zip(f.iter()).map(|(&yi, &fi)| softplus(fi) - yi * fi).sum::<f64>() / n
        }
    }
}

/// Mean held-out score over seeded folds.
pub fn logistic_cv_score(
    grams: &GramSet,
    y: &DVector<f64>,
    lambda0: f64,
    stage: Stage,
    k: usize,
    metric: ClassMetric,
    seed: u64,
) -> Result<f64> {
    let n = grams.n();
    let folds = fold_partition(n, k, seed)?;
    let mut total = 0.0;
    for fold in &folds {
        let mut held = vec![false; n];
        fold.iter().for_each(|&i| held[i] = true);
        let train: Vec<usize> = (0..n).filter(|&i| !held[i]).collect();
        let y_train = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
        let ones = y_train.sum();
        if ones == 0.0 || ones == train.len() as f64 {
            return Err(CossoError::input("a training fold contains a single class"));
        }
        let res = irls_grams(&grams.subset(&train), &y_train, lambda0, stage, IrlsOptions::default())?;
        let f = res.expansion.eval(&grams.submatrix(fold, &train)).map(|v| v.clamp(-F_CLAMP, F_CLAMP));
        let y_fold: Vec<f64> = fold.iter().map(|&i| y[i]).collect();
        total += fold_score(&y_fold, &f, metric);
    }
    Ok(total / folds.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct LogisticTuneReport {
    pub lambda0_grid: Vec<f64>,
    pub lambda0_scores: Vec<Option<f64>>,
    pub m_grid: Vec<f64>,
    pub m_scores: Vec<Option<f64>>,
    pub lambda0: f64,
    pub m: f64,
    pub k: usize,
    pub metric: ClassMetric,
    pub seed: u64,
}

fn pick(grid: &[f64], scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let sb = scores[b].unwrap_or(f64::INFINITY);
                s < sb || (s == sb && grid[i] < grid[b])
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

fn usable(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) | Err(CossoError::Numerical { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Two-stage k-fold tuning for classification, then a refit on all data.
pub fn tune_logistic(
    data: &Dataset,
    design: &AnovaDesign,
    kernel: Arc<dyn ComponentKernel>,
    grids: &Grids,
    k: usize,
    metric: ClassMetric,
    seed: u64,
) -> Result<(LogisticTuneReport, LogisticFit)> {
    data.check_labels()?;
    if grids.lambda0.is_empty() || grids.m.is_empty() {
        return Err(CossoError::input("tuning grids must be non-empty"));
    }
    let grams = GramSet::build(kernel.as_ref(), design, &data.x)?;
    let lambda0_scores = grids
        .lambda0
        .iter()
        .map(|&l| usable(logistic_cv_score(&grams, &data.y, l, Stage::Spline, k, metric, seed)))
        .collect::<Result<Vec<_>>>()?;
    let li = pick(&grids.lambda0, &lambda0_scores)
        .ok_or_else(|| CossoError::Tuning("every lambda0 score failed".into()))?;
    let lambda0 = grids.lambda0[li];
    let m_scores = grids
        .m
        .iter()
        .map(|&m| usable(logistic_cv_score(&grams, &data.y, lambda0, Stage::OneStep(m), k, metric, seed)))
        .collect::<Result<Vec<_>>>()?;
    let mi = pick(&grids.m, &m_scores).ok_or_else(|| CossoError::Tuning("every M score failed".into()))?;
    let m = grids.m[mi];
    let result = irls_grams(&grams, &data.y, lambda0, Stage::OneStep(m), IrlsOptions::default())?;
    Ok((
        LogisticTuneReport {
            lambda0_grid: grids.lambda0.clone(),
            lambda0_scores,
            m_grid: grids.m.clone(),
            m_scores,
            lambda0,
            m,
            k,
            metric,
            seed,
        },
        LogisticFit {
            design: design.clone(),
            kernel,
            train_x: data.x.clone(),
            scaling: data.scaling.clone(),
            lambda0,
            m,
            result,
        },
    ))
}
