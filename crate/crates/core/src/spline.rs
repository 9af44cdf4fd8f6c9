//! Fixed-θ smoothing spline solve.
//!
//! For fixed θ the fit `f = R_θ c + b 1` minimizes
//! `(y - f)ᵀ W (y - f) + n λ0 cᵀ R_θ c`. Its stationarity conditions are
//! solved in the canonical form
//!
//! ```text
//! (R_θ + n λ0 W⁻¹) c + b 1 = y,     1ᵀ c = 0,
//! ```
//!
//! whose matrix block is positive definite for any λ0 > 0, so it has a unique
//! solution even when `R_θ` is singular. `W = I` for regression.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{CossoError, Result};
use crate::kernel::{weighted_gram, GramSet, ThetaWeights};

const CERTIFY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSolution {
    pub c: DVector<f64>,
    pub b: f64,
}

impl SplineSolution {
    pub fn fitted(&self, r_theta: &DMatrix<f64>) -> DVector<f64> {
        r_theta * &self.c + DVector::from_element(self.c.len(), self.b)
    }
}

pub(crate) fn check_lambda0(lambda0: f64) -> Result<()> {
    if lambda0.is_finite() && lambda0 > 0.0 {
        Ok(())
    } else {
        Err(CossoError::input(format!("lambda0 = {lambda0} must be positive")))
    }
}

fn check_weights(w: &DVector<f64>, n: usize) -> Result<()> {
    if w.len() != n {
        return Err(CossoError::input(format!("{} weights for {n} observations", w.len())));
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(CossoError::input("weights must be positive"));
    }
    Ok(())
}

/// Factorization of `R_θ + n λ0 W⁻¹`.
pub(crate) struct SplineSystem {
    chol: Cholesky<f64, Dyn>,
    matrix: DMatrix<f64>,
    condition: f64,
}

impl SplineSystem {
    pub(crate) fn new(r_theta: &DMatrix<f64>, w: &DVector<f64>, lambda0: f64) -> Result<Self> {
        let n = r_theta.nrows();
        let nl = n as f64 * lambda0;
        let mut matrix = r_theta.clone();
        for i in 0..n {
            matrix[(i, i)] += nl / w[i];
        }
        let chol = match Cholesky::new(matrix.clone()) {
            Some(c) => c,
            None => {
                // Roundoff can make a nearly singular block indefinite.
                let jitter = 1e-10 * r_theta.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
                for i in 0..n {
                    matrix[(i, i)] += jitter;
                }
                Cholesky::new(matrix.clone()).ok_or_else(|| {
                    CossoError::numerical("spline system is not positive definite", f64::INFINITY)
                })?
            }
        };
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v.abs()), hi.max(v.abs())));
        let condition = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
        Ok(Self { chol, matrix, condition })
    }

    pub(crate) fn solve(&self, y: &DVector<f64>) -> Result<SplineSolution> {
        let n = y.len();
        let ones = DVector::from_element(n, 1.0);
        let u = self.chol.solve(y);
        let v = self.chol.solve(&ones);
        let denom = v.sum();
        if !(denom.is_finite() && denom > 0.0) {
            return Err(CossoError::numerical("degenerate intercept equation", self.condition));
        }
        let b = u.sum() / denom;
        let c = u - &v * b;
        let sol = SplineSolution { c, b };
        self.certify(&sol, y)?;
        Ok(sol)
    }

    fn certify(&self, sol: &SplineSolution, y: &DVector<f64>) -> Result<()> {
        let r1 = &self.matrix * &sol.c + DVector::from_element(y.len(), sol.b) - y;
        let resid = r1.norm() + sol.c.sum().abs();
        if resid.is_finite() && resid <= CERTIFY_TOL * (y.norm() + 1.0) {
            Ok(())
        } else {
            Err(CossoError::numerical(
                format!("spline stationarity residual {resid:e} exceeds tolerance"),
                self.condition,
            ))
        }
    }

    /// `P` with `c = P y`, i.e. `M⁻¹ - M⁻¹ 1 1ᵀ M⁻¹ / (1ᵀ M⁻¹ 1)`.
    pub(crate) fn coefficient_operator(&self) -> DMatrix<f64> {
        let minv = self.chol.inverse();
        let v = minv.column_sum();
        let denom = v.sum();
        &minv - (&v * v.transpose()) / denom
    }
}

/// At θ = 0 the objective does not depend on `c`; the system still has a
/// unique solution `c = W(y - b)/(n λ0)`, and that is the value the θ step
/// needs to be able to leave zero again. Taking `c = 0` there would make
/// θ = 0 a spurious fixed point of the alternation.
pub(crate) fn solve_with_matrix(
    r_theta: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    lambda0: f64,
) -> Result<SplineSolution> {
    SplineSystem::new(r_theta, w, lambda0)?.solve(y)
}

/// Solves the fixed-θ spline problem with unit weights.
pub fn solve_spline(
    grams: &GramSet,
    theta: &ThetaWeights,
    y: &DVector<f64>,
    lambda0: f64,
) -> Result<SplineSolution> {
    let w = DVector::from_element(y.len(), 1.0);
    solve_spline_weighted(grams, theta, y, &w, lambda0)
}

/// Weighted variant used inside IRLS.
pub fn solve_spline_weighted(
    grams: &GramSet,
    theta: &ThetaWeights,
    y: &DVector<f64>,
    w: &DVector<f64>,
    lambda0: f64,
) -> Result<SplineSolution> {
    check_lambda0(lambda0)?;
    if y.len() != grams.n() {
        return Err(CossoError::input(format!(
            "response has length {}, gram matrices are {}×{}",
            y.len(),
            grams.n(),
            grams.n()
        )));
    }
    check_weights(w, y.len())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(CossoError::input("response contains non-finite values"));
    }
    let r = weighted_gram(grams, theta)?;
    solve_with_matrix(&r, y, w, lambda0)
}

/// Smoothing matrix `A` of the fixed-θ, unit-weight spline (`ŷ = A y`).
pub fn smoothing_matrix(grams: &GramSet, theta: &ThetaWeights, lambda0: f64) -> Result<DMatrix<f64>> {
    check_lambda0(lambda0)?;
    let n = grams.n();
    if theta.sum() == 0.0 {
        return Ok(DMatrix::from_element(n, n, 1.0 / n as f64));
    }
    let r = weighted_gram(grams, theta)?;
    let w = DVector::from_element(n, 1.0);
    let sys = SplineSystem::new(&r, &w, lambda0)?;
    let p = sys.coefficient_operator();
    // ŷ = y - n λ0 c.
    Ok(DMatrix::identity(n, n) - p * (n as f64 * lambda0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{AnovaDesign, Sobolev2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(n: usize, d: usize, seed: u64) -> (GramSet, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>());
        let y = DVector::from_fn(n, |i, _| (6.0 * x[(i, 0)]).sin() + rng.gen::<f64>());
        let g = GramSet::build(&Sobolev2, &AnovaDesign::additive(d).unwrap(), &x).unwrap();
        (g, y)
    }

    #[test]
    fn zero_theta_gives_mean() {
        let (g, y) = problem(9, 2, 1);
        let s = solve_spline(&g, &ThetaWeights::zeros(2), &y, 0.1).unwrap();
        assert!((s.b - y.mean()).abs() < 1e-12);
        // c keeps the centered response so the θ step can leave zero.
        let expected = y.add_scalar(-y.mean()) / (9.0 * 0.1);
        assert!((s.c - expected).amax() < 1e-12);
    }

    #[test]
    fn huge_lambda_flattens_fit() {
        let (g, y) = problem(15, 2, 2);
        let theta = ThetaWeights::ones(2);
        let s = solve_spline(&g, &theta, &y, 1e8).unwrap();
        let fit = s.fitted(&weighted_gram(&g, &theta).unwrap());
        for v in fit.iter() {
            assert!((v - y.mean()).abs() < 1e-3);
        }
    }

    #[test]
    fn matches_bordered_dense_elimination() {
        // Oracle: the full (n+1)×(n+1) stationarity system solved by LU.
        let (g, y) = problem(3, 1, 3);
        let theta = ThetaWeights::new(vec![0.7]).unwrap();
        let lambda0 = 0.01;
        let s = solve_spline(&g, &theta, &y, lambda0).unwrap();
        let r = weighted_gram(&g, &theta).unwrap();
        let n = 3;
        let mut k = DMatrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = r[(i, j)] + if i == j { n as f64 * lambda0 } else { 0.0 };
            }
            k[(i, n)] = 1.0;
            k[(n, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&y);
        let sol = k.lu().solve(&rhs).unwrap();
        for i in 0..n {
            assert!((sol[i] - s.c[i]).abs() < 1e-10);
        }
        assert!((sol[n] - s.b).abs() < 1e-10);
    }

    #[test]
    fn singular_r_theta_is_fine() {
        let (g, y) = problem(20, 3, 4);
        let theta = ThetaWeights::new(vec![0.0, 2.0, 0.0]).unwrap();
        let s = solve_spline(&g, &theta, &y, 1e-7).unwrap();
        assert!(s.c.sum().abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (g, y) = problem(5, 1, 5);
        assert!(solve_spline(&g, &ThetaWeights::ones(1), &y, 0.0).is_err());
        assert!(solve_spline(&g, &ThetaWeights::ones(2), &y, 1.0).is_err());
        let short = DVector::from_element(4, 1.0);
        assert!(solve_spline(&g, &ThetaWeights::ones(1), &short, 1.0).is_err());
    }

    #[test]
    fn smoothing_matrix_reproduces_fit() {
        let (g, y) = problem(12, 2, 6);
        let theta = ThetaWeights::new(vec![1.0, 0.3]).unwrap();
        let a = smoothing_matrix(&g, &theta, 1e-3).unwrap();
        let s = solve_spline(&g, &theta, &y, 1e-3).unwrap();
        let fit = s.fitted(&weighted_gram(&g, &theta).unwrap());
        assert!((a * &y - fit).amax() < 1e-10);
    }
}
