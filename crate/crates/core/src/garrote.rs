//! Nonnegative garrote step.
//!
//! Solves `min ½‖z - Gθ‖²_W` over `θ ≥ 0, Σθ ≤ M` (or, for the penalized
//! form, `min ‖z - Gθ‖²_W + nλ Σθ` over `θ ≥ 0`) with a primal active-set
//! method. The working set holds bound constraints `θ_α = 0` and, optionally,
//! the budget `Σθ = M`. Each iteration minimizes the quadratic on the face
//! defined by the working set through an eigendecomposition of the reduced
//! Hessian, so rank-deficient `G` is handled: directions of zero curvature
//! are followed as rays until a constraint blocks them.

use nalgebra::{DMatrix, DVector};

use crate::error::{CossoError, Result};
use crate::kernel::{GramSet, ThetaWeights};
use crate::linalg::symmetric_eigen;
use crate::spline::SplineSolution;

/// Relative tolerance of the KKT certificate.
pub const KKT_TOL: f64 = 1e-6;

/// The garrote subproblem at fixed spline coefficients.
#[derive(Debug, Clone)]
pub struct GarroteProblem {
    /// `n × p`, column α is `R_α c`.
    pub g: DMatrix<f64>,
    /// `y - ½ n λ0 W⁻¹ c - b 1`.
    pub z: DVector<f64>,
    /// Observation weights; `None` means unit weights.
    pub weights: Option<DVector<f64>>,
}

impl GarroteProblem {
    pub fn new(g: DMatrix<f64>, z: DVector<f64>) -> Result<Self> {
        if g.nrows() != z.len() {
            return Err(CossoError::input(format!(
                "G has {} rows but z has length {}",
                g.nrows(),
                z.len()
            )));
        }
        Ok(Self { g, z, weights: None })
    }

    /// Builds the subproblem from a spline solution.
    pub fn from_spline(
        grams: &GramSet,
        sol: &SplineSolution,
        y: &DVector<f64>,
        lambda0: f64,
        weights: Option<&DVector<f64>>,
    ) -> Result<Self> {
        let n = grams.n();
        if y.len() != n || sol.c.len() != n {
            return Err(CossoError::input("garrote problem dimensions disagree"));
        }
        let mut g = DMatrix::zeros(n, grams.p());
        for (a, r) in grams.matrices().iter().enumerate() {
            g.set_column(a, &(r * &sol.c));
        }
        let half = 0.5 * n as f64 * lambda0;
        let z = DVector::from_fn(n, |i, _| {
            let winv = weights.map_or(1.0, |w| 1.0 / w[i]);
            y[i] - half * winv * sol.c[i] - sol.b
        });
        Ok(Self {
            g,
            z,
            weights: weights.cloned(),
        })
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn p(&self) -> usize {
        self.g.ncols()
    }

    /// `(GᵀWG, GᵀWz)`.
    fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        match &self.weights {
            None => (self.g.tr_mul(&self.g), self.g.tr_mul(&self.z)),
            Some(w) => {
                let wg = DMatrix::from_fn(self.n(), self.p(), |i, j| w[i] * self.g[(i, j)]);
                (self.g.tr_mul(&wg), wg.tr_mul(&self.z))
            }
        }
    }

    /// `(z - Gθ)ᵀ W (z - Gθ)`.
    pub fn residual_ss(&self, theta: &[f64]) -> f64 {
        let r = &self.z - &self.g * DVector::from_column_slice(theta);
        match &self.weights {
            None => r.norm_squared(),
            Some(w) => r.iter().zip(w.iter()).map(|(e, w)| w * e * e).sum(),
        }
    }
}

/// Outcome of one garrote solve.
#[derive(Debug, Clone)]
pub struct GarroteSolution {
    pub theta: ThetaWeights,
    /// Multiplier of the budget constraint in the ½-scaled problem (0 if slack).
    pub budget_multiplier: f64,
    pub iterations: usize,
    pub kkt: KktCertificate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktCertificate {
    pub stationarity: f64,
    pub dual_feasibility: f64,
    pub primal_feasibility: f64,
    pub complementary_slackness: f64,
    /// Scale the residuals are measured against.
    pub scale: f64,
}

impl KktCertificate {
    pub fn max_violation(&self) -> f64 {
        self.stationarity
            .max(self.dual_feasibility)
            .max(self.primal_feasibility)
            .max(self.complementary_slackness)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.max_violation() <= tol * self.scale
    }
}

enum Budget {
    Constrained(f64),
    /// Linear penalty `κ Σθ` in the ½-scaled objective.
    Penalized(f64),
}

/// Certifies `theta` against the KKT conditions of the constrained problem.
///
/// With `∇ = GᵀW(Gθ - z)`: active entries satisfy `∇_α = -ν`, zero entries
/// `∇_α ≥ -ν`, and `ν ≥ 0` with `ν (M - Σθ) = 0`.
pub fn kkt_certificate(prob: &GarroteProblem, theta: &[f64], budget: f64) -> KktCertificate {
    let (q, l) = prob.normal_equations();
    certify(&q, &l, theta, &Budget::Constrained(budget))
}

fn certify(q: &DMatrix<f64>, qz: &DVector<f64>, theta: &[f64], budget: &Budget) -> KktCertificate {
    let p = theta.len();
    let th = DVector::from_column_slice(theta);
    let kappa = match budget {
        Budget::Penalized(k) => *k,
        Budget::Constrained(_) => 0.0,
    };
    let grad = q * &th - qz + DVector::from_element(p, kappa);
    let scale = 1.0 + qz.amax() + kappa.abs();
    let sum: f64 = theta.iter().sum();
    let active: Vec<usize> = (0..p).filter(|&a| theta[a] > 0.0).collect();

    let mut primal = theta.iter().fold(0.0f64, |m, &t| m.max(-t));
    let nu = match budget {
        Budget::Constrained(m) => {
            primal = primal.max(sum - m);
            let binding = m - sum <= 1e-9 * m.max(1.0);
            if binding && !active.is_empty() {
                -active.iter().map(|&a| grad[a]).sum::<f64>() / active.len() as f64
            } else if binding {
                // θ = 0 = M: any ν ≥ max(-∇) works.
                (0..p).fold(0.0f64, |m, a| m.max(-grad[a]))
            } else {
                0.0
            }
        }
        Budget::Penalized(_) => 0.0,
    };
    let slack = match budget {
        Budget::Constrained(m) => m - sum,
        Budget::Penalized(_) => 0.0,
    };
    let stationarity = active.iter().fold(0.0f64, |m, &a| m.max((grad[a] + nu).abs()));
    let dual = (0..p)
        .filter(|a| theta[*a] <= 0.0)
        .fold((-nu).max(0.0), |m, a| m.max(-(grad[a] + nu)));
    KktCertificate {
        stationarity,
        dual_feasibility: dual,
        primal_feasibility: primal.max(0.0),
        complementary_slackness: (nu * slack).abs(),
        scale,
    }
}

/// Constrained garrote: `θ ≥ 0`, `Σθ ≤ budget`.
pub fn garrote_step(prob: &GarroteProblem, budget: f64) -> Result<GarroteSolution> {
    if !(budget.is_finite() && budget >= 0.0) {
        return Err(CossoError::input(format!("M = {budget} must be finite and >= 0")));
    }
    solve(prob, Budget::Constrained(budget))
}

/// Penalized garrote: `min (z - Gθ)ᵀW(z - Gθ) + n λ Σθ` over `θ ≥ 0`.
pub fn garrote_step_penalized(prob: &GarroteProblem, lambda: f64) -> Result<GarroteSolution> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(CossoError::input(format!("lambda = {lambda} must be finite and >= 0")));
    }
    solve(prob, Budget::Penalized(0.5 * prob.n() as f64 * lambda))
}

/// Orthonormal basis of `{u : 1ᵀu = 0}` in `R^k` (Helmert contrasts).
fn helmert(k: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(k, k.saturating_sub(1));
    for j in 1..k {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            z[(i, j - 1)] = 1.0 / norm;
        }
        z[(j, j - 1)] = -(j as f64) / norm;
    }
    z
}

/// Largest gradient component within the face (mean removed on the budget).
fn face_gradient(grad: &DVector<f64>, free: &[usize], on_budget: bool) -> f64 {
    if free.is_empty() {
        return 0.0;
    }
    let shift = if on_budget {
        free.iter().map(|&a| grad[a]).sum::<f64>() / free.len() as f64
    } else {
        0.0
    };
    free.iter().fold(0.0f64, |m, &a| m.max((grad[a] - shift).abs()))
}

struct Step {
    d: DVector<f64>,
    ray: bool,
}

/// Minimizes the quadratic over the face: free indices `free`, optionally
/// with `1ᵀd = 0`.
fn face_step(q: &DMatrix<f64>, grad: &DVector<f64>, free: &[usize], on_budget: bool) -> Result<Step> {
    let p = grad.len();
    let k = free.len();
    let mut d = DVector::zeros(p);
    if k == 0 || (on_budget && k == 1) {
        return Ok(Step { d, ray: false });
    }
    let h = DMatrix::from_fn(k, k, |i, j| q[(free[i], free[j])]);
    let r = DVector::from_fn(k, |i, _| grad[free[i]]);
    let z = if on_budget { helmert(k) } else { DMatrix::identity(k, k) };
    let hr = z.tr_mul(&h) * &z;
    let rr = z.tr_mul(&r);
    let eig = symmetric_eigen(&hr)?;
    let top = eig.eigenvalues.amax();
    let thresh = 1e-12 * top;
    let rtol = 1e-14 * (1.0 + r.amax());

    let mut newton = DVector::zeros(rr.len());
    let mut ray = DVector::zeros(rr.len());
    let mut has_ray = false;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let s = v.dot(&rr);
        if lam > thresh && lam > 0.0 {
            newton -= v * (s / lam);
        } else if s.abs() > rtol {
            ray -= v * s;
            has_ray = true;
        }
    }
    let u = if has_ray { ray } else { newton };
    let df = z * u;
    for (i, &a) in free.iter().enumerate() {
        d[a] = df[i];
    }
    Ok(Step { d, ray: has_ray })
}

fn solve(prob: &GarroteProblem, budget: Budget) -> Result<GarroteSolution> {
    let p = prob.p();
    let (q, qz) = prob.normal_equations();
    let kappa = match budget {
        Budget::Penalized(k) => k,
        Budget::Constrained(_) => 0.0,
    };
    let cap = match budget {
        Budget::Constrained(m) => Some(m),
        Budget::Penalized(_) => None,
    };

    let mut theta = DVector::zeros(p);
    let finish = |theta: &DVector<f64>, nu: f64, iterations: usize| -> Result<GarroteSolution> {
        let vals: Vec<f64> = theta.iter().map(|v| v.max(0.0)).collect();
        let kkt = certify(&q, &qz, &vals, &budget);
        Ok(GarroteSolution {
            theta: ThetaWeights::new(vals)?,
            budget_multiplier: nu,
            iterations,
            kkt,
        })
    };
    if p == 0 || cap == Some(0.0) {
        return finish(&theta, 0.0, 0);
    }

    let mut bound = vec![true; p];
    let mut on_budget = false;
    // Unblocked Newton steps taken on the current face. On ill-conditioned
    // faces the first step is only accurate to roundoff; a few more act as
    // iterative refinement, after which the face is accepted.
    let mut refinements = 0;
    let max_iter = 100 * p;
    let mult_tol = 1e-11 * (1.0 + qz.amax() + kappa.abs() + q.amax());

    for iter in 1..=max_iter {
        let grad = &q * &theta - &qz + DVector::from_element(p, kappa);
        let free: Vec<usize> = (0..p).filter(|&a| !bound[a]).collect();
        let step = face_step(&q, &grad, &free, on_budget)?;
        let dscale = 1e-13 * (1.0 + theta.amax());
        let gscale = 1e-12 * (1.0 + qz.amax() + kappa.abs() + q.amax() * theta.amax());

        if refinements >= 3 || step.d.amax() <= dscale || face_gradient(&grad, &free, on_budget) <= gscale {
            refinements = 0;
            // Stationary on the face: check multipliers.
            let nu = if on_budget && !free.is_empty() {
                -free.iter().map(|&a| grad[a]).sum::<f64>() / free.len() as f64
            } else {
                0.0
            };
            let mut worst: Option<(usize, f64)> = None;
            for a in 0..p {
                if bound[a] {
                    let lam = grad[a] + nu;
                    if lam < -mult_tol && worst.map_or(true, |(_, w)| lam < w) {
                        worst = Some((a, lam));
                    }
                }
            }
            if on_budget && nu < -mult_tol && worst.map_or(true, |(_, w)| nu < w) {
                on_budget = false;
                continue;
            }
            match worst {
                Some((a, _)) => bound[a] = false,
                None => return finish(&theta, nu, iter),
            }
            continue;
        }

        // Ratio test; lowest index wins ties, bounds before the budget.
        let mut alpha = if step.ray { f64::INFINITY } else { 1.0 };
        let mut blocking: Option<Option<usize>> = None;
        for &a in &free {
            // Roundoff-sized components must not block a freshly released index.
            if step.d[a] < -dscale {
                let r = (theta[a] / -step.d[a]).max(0.0);
                if r < alpha {
                    alpha = r;
                    blocking = Some(Some(a));
                }
            }
        }
        if let (Some(m), false) = (cap, on_budget) {
            let ds = step.d.sum();
            if ds > 0.0 {
                let r = ((m - theta.sum()) / ds).max(0.0);
                if r < alpha {
                    alpha = r;
                    blocking = Some(None);
                }
            }
        }
        if !alpha.is_finite() {
            return Err(CossoError::numerical(
                "garrote objective unbounded along a zero-curvature direction",
                f64::INFINITY,
            ));
        }
        theta += &step.d * alpha;
        match blocking {
            Some(Some(a)) => {
                theta[a] = 0.0;
                bound[a] = true;
            }
            Some(None) => on_budget = true,
            None if !step.ray => refinements += 1,
            None => {}
        }
        if blocking.is_some() {
            refinements = 0;
        }
        for a in 0..p {
            if bound[a] {
                theta[a] = 0.0;
            }
        }
    }
    Err(CossoError::GarroteNonConvergence {
        iterations: max_iter,
        best: theta.iter().map(|v| v.max(0.0)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(n: usize, p: usize, seed: u64) -> GarroteProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, p, |_, _| rng.gen::<f64>() - 0.3);
        let z = DVector::from_fn(n, |_, _| rng.gen::<f64>() * 2.0);
        GarroteProblem::new(g, z).unwrap()
    }

    #[test]
    fn zero_budget_gives_zero() {
        let prob = random_problem(10, 4, 1);
        let s = garrote_step(&prob, 0.0).unwrap();
        assert_eq!(s.theta.as_slice(), &[0.0; 4]);
        assert!(s.kkt.holds(KKT_TOL));
    }

    #[test]
    fn one_dimensional_projection() {
        // gᵀz / gᵀg = 2 so the budget 1.5 binds.
        let g = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0]);
        let z = DVector::from_column_slice(&[2.0, 4.0, 4.0]);
        let prob = GarroteProblem::new(g, z).unwrap();
        let s = garrote_step(&prob, 1.5).unwrap();
        assert!((s.theta.as_slice()[0] - 1.5).abs() < 1e-12);
        // Grid search over [0, 1.5].
        let best = (0..=1500)
            .map(|i| i as f64 * 1e-3)
            .min_by(|a, b| prob.residual_ss(&[*a]).total_cmp(&prob.residual_ss(&[*b])))
            .unwrap();
        assert!((best - 1.5).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let col = DVector::from_fn(8, |_, _| rng.gen::<f64>());
        let g = DMatrix::from_columns(&[col.clone(), col.clone(), col * 2.0, DVector::zeros(8)]);
        let z = DVector::from_fn(8, |_, _| rng.gen::<f64>() * 5.0);
        let prob = GarroteProblem::new(g, z).unwrap();
        for m in [0.1, 1.0, 10.0] {
            let s = garrote_step(&prob, m).unwrap();
            assert!(s.kkt.holds(KKT_TOL), "{:?}", s.kkt);
        }
        let s = garrote_step_penalized(&prob, 0.01).unwrap();
        assert!(s.kkt.holds(KKT_TOL), "{:?}", s.kkt);
    }

    #[test]
    fn kkt_on_random_instances() {
        for seed in 0..50 {
            let p = 1 + (seed as usize % 20);
            let prob = random_problem(30, p, seed);
            let m = 0.2 + (seed % 7) as f64;
            let s = garrote_step(&prob, m).unwrap();
            assert!(s.kkt.holds(KKT_TOL), "seed {seed}: {:?}", s.kkt);
            assert!(s.theta.sum() <= m + 1e-9);
        }
    }

    #[test]
    fn penalized_matches_constrained_at_its_budget() {
        let prob = random_problem(25, 5, 9);
        let pen = garrote_step_penalized(&prob, 0.05).unwrap();
        let m = pen.theta.sum();
        let con = garrote_step(&prob, m).unwrap();
        for (a, b) in pen.theta.as_slice().iter().zip(con.theta.as_slice()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn certificate_flags_wrong_answer() {
        let prob = random_problem(20, 3, 2);
        let s = garrote_step(&prob, 1.0).unwrap();
        let mut bad = s.theta.as_slice().to_vec();
        bad[0] += 0.3;
        bad[1] = (bad[1] - 0.3).max(0.0);
        assert!(!kkt_certificate(&prob, &bad, 1.0).holds(KKT_TOL));
    }

    #[test]
    fn helmert_is_orthonormal() {
        let z = helmert(5);
        let ztz = z.tr_mul(&z);
        assert!((ztz - DMatrix::identity(4, 4)).amax() < 1e-14);
        assert!(z.row_sum().amax() < 1e-14);
    }
}

