//! COSSO fitting by alternating the fixed-θ spline solve and the garrote.
//!
//! The objective tracked throughout is
//!
//! ```text
//! L(θ, c, b) = (1/n)(y - R_θ c - b1)ᵀ W (y - R_θ c - b1) + λ0 Σ_α θ_α cᵀ R_α c
//! ```
//!
//! plus `λ Σθ` in the penalized form. The spline step minimizes `L` over
//! `(c, b)` and the garrote step minimizes it over the feasible θ, so `L` never
//! increases along the iteration.

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, Scaling};
use crate::error::{CossoError, Result};
use crate::garrote::{garrote_step, garrote_step_penalized, GarroteProblem, KKT_TOL};
use crate::kernel::{cross_grams, weighted_gram, weighted_sum, AnovaDesign, ComponentKernel, GramSet, ThetaWeights};
use crate::registry::{parse_arg, Registry};
use crate::spline::{check_lambda0, solve_with_matrix, SplineSolution};

/// How the θ step is constrained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    /// `Σθ ≤ M`.
    Total(f64),
    /// `λ Σθ` added to the objective.
    Penalty(f64),
}

impl Budget {
    fn penalty(&self) -> f64 {
        match *self {
            Budget::Total(_) => 0.0,
            Budget::Penalty(l) => l,
        }
    }

    /// Whether θ satisfies the budget constraint (always, in penalized form).
    pub fn admits(&self, theta: &ThetaWeights) -> bool {
        match *self {
            Budget::Total(m) => theta.sum() <= m * (1.0 + 1e-12) + 1e-12,
            Budget::Penalty(_) => true,
        }
    }

    fn validate(&self) -> Result<()> {
        let (v, what) = match *self {
            Budget::Total(m) => (m, "M"),
            Budget::Penalty(l) => (l, "lambda"),
        };
        if v.is_finite() && v >= 0.0 {
            Ok(())
        } else {
            Err(CossoError::input(format!("{what} = {v} must be finite and >= 0")))
        }
    }
}

/// Decomposed objective value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    /// `(1/n) Σ w_i (y_i - f_i)²`.
    pub residual: f64,
    /// `λ0 Σ θ_α cᵀ R_α c`.
    pub roughness: f64,
    pub theta_sum: f64,
}

impl ObjectiveValue {
    /// Residual plus roughness; the quantity minimized under `Σθ ≤ M`.
    pub fn constrained(&self) -> f64 {
        self.residual + self.roughness
    }

    pub fn penalized(&self, lambda: f64) -> f64 {
        self.constrained() + lambda * self.theta_sum
    }

    fn for_budget(&self, budget: Budget) -> f64 {
        self.penalized(budget.penalty())
    }
}

fn objective_parts(
    grams: &GramSet,
    theta: &ThetaWeights,
    sol: &SplineSolution,
    y: &DVector<f64>,
    weights: Option<&DVector<f64>>,
    lambda0: f64,
) -> Result<ObjectiveValue> {
    let n = grams.n();
    if y.len() != n || sol.c.len() != n || theta.len() != grams.p() {
        return Err(CossoError::input("objective dimensions disagree"));
    }
    let r = weighted_gram(grams, theta)?;
    let resid = y - sol.fitted(&r);
    let residual = match weights {
        None => resid.norm_squared(),
        Some(w) => resid.iter().zip(w.iter()).map(|(e, w)| w * e * e).sum(),
    } / n as f64;
    let mut roughness = 0.0;
    for (a, ra) in grams.matrices().iter().enumerate() {
        let t = theta.as_slice()[a];
        if t != 0.0 {
            roughness += t * sol.c.dot(&(ra * &sol.c));
        }
    }
    Ok(ObjectiveValue {
        residual,
        roughness: lambda0 * roughness,
        theta_sum: theta.sum(),
    })
}

/// Evaluates the COSSO objective at `(θ, c, b)`.
pub fn cosso_objective(
    grams: &GramSet,
    theta: &ThetaWeights,
    sol: &SplineSolution,
    y: &DVector<f64>,
    lambda0: f64,
) -> Result<ObjectiveValue> {
    objective_parts(grams, theta, sol, y, None, lambda0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub descent_slack: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 20,
            rel_tol: 1e-8,
            descent_slack: 1e-10,
        }
    }
}

/// Result of a fit on a fixed Gram set.
#[derive(Debug, Clone)]
pub struct SolverFit {
    pub theta: ThetaWeights,
    pub spline: SplineSolution,
    pub lambda0: f64,
    pub budget: Budget,
    pub objective: ObjectiveValue,
    /// Objective after every stage (spline, garrote, spline, ...).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub fitted: DVector<f64>,
    /// Budget multiplier of the last garrote step (½-scaled).
    pub budget_multiplier: f64,
}

struct Problem<'a> {
    grams: &'a GramSet,
    y: &'a DVector<f64>,
    weights: Option<&'a DVector<f64>>,
    lambda0: f64,
    budget: Budget,
}

impl Problem<'_> {
    fn unit_weights(&self) -> DVector<f64> {
        DVector::from_element(self.y.len(), 1.0)
    }

    fn spline(&self, theta: &ThetaWeights) -> Result<SplineSolution> {
        let r = weighted_gram(self.grams, theta)?;
        let w = self.weights.cloned().unwrap_or_else(|| self.unit_weights());
        solve_with_matrix(&r, self.y, &w, self.lambda0)
    }

    fn garrote(&self, sol: &SplineSolution) -> Result<(ThetaWeights, f64)> {
        let prob = GarroteProblem::from_spline(self.grams, sol, self.y, self.lambda0, self.weights)?;
        let out = match self.budget {
            Budget::Total(m) => garrote_step(&prob, m)?,
            Budget::Penalty(l) => garrote_step_penalized(&prob, l)?,
        };
        if !out.kkt.holds(KKT_TOL) {
            return Err(CossoError::Internal(format!("garrote KKT certificate failed: {:?}", out.kkt)));
        }
        Ok((out.theta, out.budget_multiplier))
    }

    fn objective(&self, theta: &ThetaWeights, sol: &SplineSolution) -> Result<ObjectiveValue> {
        objective_parts(self.grams, theta, sol, self.y, self.weights, self.lambda0)
    }

    fn validate(&self) -> Result<()> {
        check_lambda0(self.lambda0)?;
        self.budget.validate()?;
        if self.y.len() != self.grams.n() {
            return Err(CossoError::input("response length does not match gram matrices"));
        }
        Ok(())
    }

    fn finish(
        &self,
        theta: ThetaWeights,
        spline: SplineSolution,
        trace: Vec<f64>,
        iterations: usize,
        budget_multiplier: f64,
    ) -> Result<SolverFit> {
        let objective = self.objective(&theta, &spline)?;
        let fitted = spline.fitted(&weighted_gram(self.grams, &theta)?);
        Ok(SolverFit {
            theta,
            spline,
            lambda0: self.lambda0,
            budget: self.budget,
            objective,
            trace,
            iterations,
            fitted,
            budget_multiplier,
        })
    }

    fn one_step(&self) -> Result<SolverFit> {
        self.validate()?;
        let p = self.grams.p();
        let theta0 = ThetaWeights::ones(p);
        let s0 = self.spline(&theta0)?;
        let mut trace = vec![self.objective(&theta0, &s0)?.for_budget(self.budget)];
        let (theta1, nu) = self.garrote(&s0)?;
        trace.push(self.objective(&theta1, &s0)?.for_budget(self.budget));
        let s1 = self.spline(&theta1)?;
        trace.push(self.objective(&theta1, &s1)?.for_budget(self.budget));
        self.finish(theta1, s1, trace, 1, nu)
    }

    fn iterate(&self, start: Option<(ThetaWeights, SplineSolution)>, opts: FitOptions) -> Result<SolverFit> {
        self.validate()?;
        let (mut theta, mut sol) = match start {
            Some((t, s)) => {
                if t.len() != self.grams.p() || s.c.len() != self.grams.n() {
                    return Err(CossoError::input("starting state does not match the problem"));
                }
                (t, s)
            }
            None => {
                let t = ThetaWeights::ones(self.grams.p());
                let s = self.spline(&t)?;
                (t, s)
            }
        };
        let mut current = self.objective(&theta, &sol)?.for_budget(self.budget);
        let mut trace = vec![current];
        let mut nu = 0.0;
        let check = |prev: f64, next: f64| -> Result<()> {
            if next > prev + opts.descent_slack * prev.abs().max(1.0) {
                Err(CossoError::Internal(format!(
                    "objective increased from {prev:.15e} to {next:.15e}"
                )))
            } else {
                Ok(())
            }
        };
        let mut iterations = 0;
        while iterations < opts.max_iter {
            iterations += 1;
            let (t_new, nu_new) = self.garrote(&sol)?;
            let mid = self.objective(&t_new, &sol)?.for_budget(self.budget);
            // The θ = 1 start may violate the budget; descent holds from the
            // first feasible point on.
            let feasible = self.budget.admits(&theta);
            if feasible {
                check(current, mid)?;
            }
            trace.push(mid);
            let s_new = self.spline(&t_new)?;
            let next = self.objective(&t_new, &s_new)?.for_budget(self.budget);
            check(mid, next)?;
            trace.push(next);
            let decrease = current - next;
            theta = t_new;
            sol = s_new;
            nu = nu_new;
            let stop = feasible && decrease <= opts.rel_tol * current.abs().max(f64::MIN_POSITIVE);
            current = next;
            if stop {
                break;
            }
        }
        self.finish(theta, sol, trace, iterations, nu)
    }
}

/// θ = 1 → spline → garrote → spline.
pub fn fit_one_step(grams: &GramSet, y: &DVector<f64>, lambda0: f64, budget: f64) -> Result<SolverFit> {
    Problem {
        grams,
        y,
        weights: None,
        lambda0,
        budget: Budget::Total(budget),
    }
    .one_step()
}

/// Alternates spline and garrote steps from θ = 1 until the relative decrease
/// drops below `opts.rel_tol` or `opts.max_iter` iterations run.
pub fn fit_full_iterate(grams: &GramSet, y: &DVector<f64>, lambda0: f64, budget: f64) -> Result<SolverFit> {
    fit_full_iterate_with(grams, y, None, lambda0, Budget::Total(budget), None, FitOptions::default())
}

/// General entry point: weights, either budget form, optional warm start.
pub fn fit_full_iterate_with(
    grams: &GramSet,
    y: &DVector<f64>,
    weights: Option<&DVector<f64>>,
    lambda0: f64,
    budget: Budget,
    start: Option<(ThetaWeights, SplineSolution)>,
    opts: FitOptions,
) -> Result<SolverFit> {
    Problem {
        grams,
        y,
        weights,
        lambda0,
        budget,
    }
    .iterate(start, opts)
}

pub fn fit_one_step_with(
    grams: &GramSet,
    y: &DVector<f64>,
    weights: Option<&DVector<f64>>,
    lambda0: f64,
    budget: Budget,
) -> Result<SolverFit> {
    Problem {
        grams,
        y,
        weights,
        lambda0,
        budget,
    }
    .one_step()
}

/// Fixed θ = 1 smoothing spline, used for the first tuning stage.
pub fn fit_spline_only(
    grams: &GramSet,
    y: &DVector<f64>,
    weights: Option<&DVector<f64>>,
    lambda0: f64,
) -> Result<SolverFit> {
    let prob = Problem {
        grams,
        y,
        weights,
        lambda0,
        budget: Budget::Total(grams.p() as f64),
    };
    prob.validate()?;
    let theta = ThetaWeights::ones(grams.p());
    let sol = prob.spline(&theta)?;
    let obj = prob.objective(&theta, &sol)?.constrained();
    prob.finish(theta, sol, vec![obj], 0, 0.0)
}

/// A fitting algorithm selectable by name.
pub trait FitStrategy: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    fn fit(
        &self,
        grams: &GramSet,
        y: &DVector<f64>,
        weights: Option<&DVector<f64>>,
        lambda0: f64,
        budget: Budget,
    ) -> Result<SolverFit>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OneStep;

impl FitStrategy for OneStep {
    fn name(&self) -> String {
        "one-step".into()
    }

    fn fit(
        &self,
        grams: &GramSet,
        y: &DVector<f64>,
        weights: Option<&DVector<f64>>,
        lambda0: f64,
        budget: Budget,
    ) -> Result<SolverFit> {
        fit_one_step_with(grams, y, weights, lambda0, budget)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FullIterate {
    pub opts: FitOptions,
}

impl FitStrategy for FullIterate {
    fn name(&self) -> String {
        if self.opts.max_iter == FitOptions::default().max_iter {
            "full".into()
        } else {
            format!("full:{}", self.opts.max_iter)
        }
    }

    fn fit(
        &self,
        grams: &GramSet,
        y: &DVector<f64>,
        weights: Option<&DVector<f64>>,
        lambda0: f64,
        budget: Budget,
    ) -> Result<SolverFit> {
        fit_full_iterate_with(grams, y, weights, lambda0, budget, None, self.opts)
    }
}

pub fn strategy_registry() -> &'static Registry<dyn FitStrategy> {
    static REG: OnceLock<Registry<dyn FitStrategy>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn FitStrategy> = Registry::new("fit strategy");
        r.register("one-step", |_| Ok(Box::new(OneStep)));
        r.register("full", |arg| {
            let mut opts = FitOptions::default();
            if arg.is_some() {
                opts.max_iter = parse_arg("full", arg)?;
            }
            Ok(Box::new(FullIterate { opts }))
        });
        r
    })
}

pub fn strategy_from_spec(spec: &str) -> Result<Arc<dyn FitStrategy>> {
    Ok(Arc::from(strategy_registry().create(spec)?))
}

/// `Σ_α θ_α R_α(x, X) c + b`, shared by live and archived models so both
/// produce the same bits.
pub(crate) fn predict_with(
    kernel: &dyn ComponentKernel,
    design: &AnovaDesign,
    train_x: &DMatrix<f64>,
    theta: &ThetaWeights,
    spline: &SplineSolution,
    x: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let cross = cross_grams(kernel, design, x, train_x)?;
    let r = weighted_sum(&cross, theta)?;
    Ok(r * &spline.c + DVector::from_element(x.nrows(), spline.b))
}

/// A fitted model together with everything needed to evaluate it.
#[derive(Debug, Clone)]
pub struct FitState {
    pub design: AnovaDesign,
    pub kernel: Arc<dyn ComponentKernel>,
    /// Training covariates on `[0, 1]`.
    pub train_x: DMatrix<f64>,
    pub scaling: Scaling,
    pub fit: SolverFit,
}

impl FitState {
    pub fn new(
        design: AnovaDesign,
        kernel: Arc<dyn ComponentKernel>,
        data: &Dataset,
        fit: SolverFit,
    ) -> Result<Self> {
        if fit.spline.c.len() != data.n() || fit.theta.len() != design.p() {
            return Err(CossoError::input("fit does not match data or design"));
        }
        Ok(Self {
            design,
            kernel,
            train_x: data.x.clone(),
            scaling: data.scaling.clone(),
            fit,
        })
    }

    pub fn theta(&self) -> &ThetaWeights {
        &self.fit.theta
    }

    pub fn intercept(&self) -> f64 {
        self.fit.spline.b
    }

    /// Predictions at covariates already on `[0, 1]`.
    pub fn predict_unit(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        predict_with(
            self.kernel.as_ref(),
            &self.design,
            &self.train_x,
            &self.fit.theta,
            &self.fit.spline,
            x,
        )
    }

    /// Predictions at raw covariates: applies the stored scaling first.
    pub fn predict(&self, raw: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.predict_unit(&self.scaling.apply(raw)?)
    }

    /// `f̂_α(x) = θ_α Σ_i c_i R_α(x_i, x)` for every component, `m × p`.
    pub fn component_values(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cross = cross_grams(self.kernel.as_ref(), &self.design, x, &self.train_x)?;
        let mut out = DMatrix::zeros(x.nrows(), self.design.p());
        for (a, ra) in cross.iter().enumerate() {
            let t = self.fit.theta.as_slice()[a];
            if t != 0.0 {
                out.set_column(a, &((ra * &self.fit.spline.c) * t));
            }
        }
        Ok(out)
    }

    /// Empirical L1 norms `(1/n) Σ_i |f̂_α(x_i)|` over the training points.
    pub fn component_norms(&self) -> Result<Vec<f64>> {
        let vals = self.component_values(&self.train_x)?;
        let n = vals.nrows() as f64;
        Ok(vals.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>() / n).collect())
    }

    pub fn selected(&self) -> Vec<usize> {
        self.fit.theta.support()
    }
}
