//! Closed-form COSSO on the two-dimensional tensor-product periodic design.
//!
//! On the grid `{(k/m, ℓ/m)}` the products `γ_μ(s) γ_ν(t)` of the `m`-point
//! trigonometric basis are orthonormal under `⟨u, v⟩_n = (1/n) Σ u_i v_i`, and
//! the roughness penalty is diagonal in that basis with weights `q_μν`. With
//! `λ0 = 1` the problem separates into three one-dimensional minimizations,
//! one per block (two main effects and the interaction):
//!
//! ```text
//! A(θ) = Σ_block q z² / (q + θ) + λ θ,     A'(θ) = λ - Σ_block q z² / (q + θ)²,
//! ```
//!
//! so `θ̂ = 0` exactly when `U = Σ_block z² / q ≤ λ`.
//!
//! Grid ordering: observation `(k, ℓ)` (1-based) sits at row `(k-1) m + (ℓ-1)`,
//! so the first coordinate is the slow index and `R_12 = Σ ⊗ Σ`,
//! `R_1 = Σ ⊗ 11ᵀ`, `R_2 = 11ᵀ ⊗ Σ`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{CossoError, Result};
use crate::kernel::{k4, AnovaDesign, Component, GramSet, PeriodicTrigKernel, ZERO_THRESHOLD};
use crate::linalg::symmetric_eigen;
use crate::rng;
use crate::solver::{fit_full_iterate_with, Budget, FitOptions};

fn check_m(m: usize) -> Result<()> {
    if m >= 4 && m % 2 == 0 {
        Ok(())
    } else {
        Err(CossoError::input(format!("grid size m = {m} must be even and >= 4")))
    }
}

/// `γ_{mu+1}(t)` for the zero-based index `mu`.
pub fn basis_fn(m: usize, mu: usize, t: f64) -> f64 {
    let one_based = mu + 1;
    if one_based == 1 {
        1.0
    } else if one_based == m {
        (PI * m as f64 * t).cos()
    } else if one_based % 2 == 0 {
        let nu = (one_based / 2) as f64;
        SQRT_2 * (2.0 * PI * nu * t).cos()
    } else {
        let nu = ((one_based - 1) / 2) as f64;
        SQRT_2 * (2.0 * PI * nu * t).sin()
    }
}

/// The `m` basis vectors evaluated at `k/m`, `k = 1..m`.
pub fn trig_basis(m: usize) -> Result<Vec<DVector<f64>>> {
    check_m(m)?;
    Ok((0..m)
        .map(|mu| DVector::from_fn(m, |k, _| basis_fn(m, mu, (k + 1) as f64 / m as f64)))
        .collect())
}

fn basis_matrix(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |k, mu| basis_fn(m, mu, (k + 1) as f64 / m as f64))
}

/// Per-axis roughness weights: 0 for the constant, `(2πν)⁴` for the
/// frequency-ν cosine and sine, `(πm)⁴` for the Nyquist cosine.
pub fn axis_penalty_weights(m: usize) -> Result<Vec<f64>> {
    check_m(m)?;
    Ok((0..m)
        .map(|mu| {
            let one_based = mu + 1;
            if one_based == 1 {
                0.0
            } else if one_based == m {
                (PI * m as f64).powi(4)
            } else {
                let nu = (one_based / 2) as f64;
                (2.0 * PI * nu).powi(4)
            }
        })
        .collect())
}

/// `q_μν` table; entry `(0, 0)` is the unpenalized constant.
pub fn penalty_weights(m: usize) -> Result<DMatrix<f64>> {
    let q = axis_penalty_weights(m)?;
    Ok(DMatrix::from_fn(m, m, |mu, nu| match (mu, nu) {
        (0, 0) => 0.0,
        (_, 0) => q[mu],
        (0, _) => q[nu],
        _ => q[mu] * q[nu],
    }))
}

/// Regular tensor grid with `m` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FourierGrid {
    m: usize,
}

impl FourierGrid {
    pub fn new(m: usize) -> Result<Self> {
        check_m(m)?;
        Ok(Self { m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.m * self.m
    }

    pub fn index(&self, k: usize, l: usize) -> usize {
        k * self.m + l
    }

    /// `n × 2` design points.
    pub fn points(&self) -> DMatrix<f64> {
        let m = self.m;
        DMatrix::from_fn(m * m, 2, |i, j| {
            let (k, l) = (i / m, i % m);
            (if j == 0 { k + 1 } else { l + 1 }) as f64 / m as f64
        })
    }

    /// Evaluates `f` on the grid in observation order.
    pub fn sample<F: Fn(f64, f64) -> f64>(&self, f: F) -> DVector<f64> {
        let pts = self.points();
        DVector::from_fn(self.n(), |i, _| f(pts[(i, 0)], pts[(i, 1)]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Block {
    Main1,
    Main2,
    Interaction,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Main1, Block::Main2, Block::Interaction];

    fn contains(&self, mu: usize, nu: usize) -> bool {
        match self {
            Block::Main1 => mu >= 1 && nu == 0,
            Block::Main2 => mu == 0 && nu >= 1,
            Block::Interaction => mu >= 1 && nu >= 1,
        }
    }

    /// Matching component of the two-variable two-way design.
    pub fn component(&self) -> Component {
        match self {
            Block::Main1 => Component::Main(0),
            Block::Main2 => Component::Main(1),
            Block::Interaction => Component::Interaction(0, 1),
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Main1 => "main1",
            Block::Main2 => "main2",
            Block::Interaction => "interaction",
        })
    }
}

/// Basis coefficients `z_μν = ⟨y, γ_μν⟩_n` and penalty weights.
#[derive(Debug, Clone)]
pub struct SpectralCoeffs {
    pub m: usize,
    pub z: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl SpectralCoeffs {
    fn block_entries(&self, block: Block) -> impl Iterator<Item = (f64, f64)> + '_ {
        let m = self.m;
        (0..m)
            .flat_map(move |mu| (0..m).map(move |nu| (mu, nu)))
            .filter(move |&(mu, nu)| block.contains(mu, nu))
            .map(move |(mu, nu)| (self.z[(mu, nu)], self.q[(mu, nu)]))
    }

    /// `Σ z_μν γ_μν` in observation order.
    pub fn reconstruct(&self) -> DVector<f64> {
        let b = basis_matrix(self.m);
        let grid = &b * &self.z * b.transpose();
        DVector::from_fn(self.m * self.m, |i, _| grid[(i / self.m, i % self.m)])
    }
}

pub fn spectral_transform(y: &DVector<f64>, m: usize) -> Result<SpectralCoeffs> {
    check_m(m)?;
    let n = m * m;
    if y.len() != n {
        return Err(CossoError::input(format!("expected {n} observations, got {}", y.len())));
    }
    let b = basis_matrix(m);
    let grid = DMatrix::from_fn(m, m, |k, l| y[k * m + l]);
    let z = b.transpose() * grid * &b / n as f64;
    Ok(SpectralCoeffs {
        m,
        z,
        q: penalty_weights(m)?,
    })
}

/// `U = Σ_block z² / q`.
pub fn u_statistic(coeffs: &SpectralCoeffs, block: Block) -> f64 {
    coeffs.block_entries(block).map(|(z, q)| z * z / q).sum()
}

fn a_prime(coeffs: &SpectralCoeffs, block: Block, lambda: f64, theta: f64) -> f64 {
    lambda
        - coeffs
            .block_entries(block)
            .map(|(z, q)| q * z * z / (q + theta).powi(2))
            .sum::<f64>()
}

/// Block objective `A(θ)`.
pub fn block_objective(coeffs: &SpectralCoeffs, block: Block, lambda: f64, theta: f64) -> f64 {
    coeffs
        .block_entries(block)
        .map(|(z, q)| q * z * z / (q + theta))
        .sum::<f64>()
        + lambda * theta
}

/// Minimizer of `A` over `θ ≥ 0`. Returns `+∞` when `λ = 0` and the block has
/// signal (the unpenalized limit).
pub fn theta_minimize_1d(coeffs: &SpectralCoeffs, block: Block, lambda: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(CossoError::input(format!("lambda = {lambda} must be >= 0")));
    }
    let u = u_statistic(coeffs, block);
    if u <= lambda {
        return Ok(0.0);
    }
    if lambda == 0.0 {
        return Ok(f64::INFINITY);
    }
    // A'(θ) ≥ λ - Σ q z² / θ², so A' > 0 beyond this point.
    let s: f64 = coeffs.block_entries(block).map(|(z, q)| q * z * z).sum();
    let mut hi = (s / lambda).sqrt().max(f64::MIN_POSITIVE);
    while a_prime(coeffs, block, lambda, hi) <= 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    let tol = 1e-10 * hi.max(1.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if a_prime(coeffs, block, lambda, mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockEstimate {
    pub block: Block,
    pub u: f64,
    pub theta: f64,
}

impl BlockEstimate {
    pub fn selected(&self) -> bool {
        self.theta > 0.0
    }
}

pub fn oracle_fit(coeffs: &SpectralCoeffs, lambda: f64) -> Result<Vec<BlockEstimate>> {
    Block::ALL
        .iter()
        .map(|&block| {
            Ok(BlockEstimate {
                block,
                u: u_statistic(coeffs, block),
                theta: theta_minimize_1d(coeffs, block, lambda)?,
            })
        })
        .collect()
}

/// Signal on the grid: optional main effects and an interaction, each a
/// single low-frequency basis product scaled by an amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralTruth {
    pub main1: f64,
    pub main2: f64,
    pub interaction: f64,
}

impl SpectralTruth {
    pub fn eval(&self, m: usize, s: f64, t: f64) -> f64 {
        self.main1 * basis_fn(m, 1, s)
            + self.main2 * basis_fn(m, 2, t)
            + self.interaction * basis_fn(m, 1, s) * basis_fn(m, 1, t)
    }

    pub fn active(&self, block: Block) -> bool {
        match block {
            Block::Main1 => self.main1 != 0.0,
            Block::Main2 => self.main2 != 0.0,
            Block::Interaction => self.interaction != 0.0,
        }
    }
}

/// `λ = scale · n^{-exponent}`; `exponent ∈ (0, 1)` gives `λ → 0`, `nλ → ∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaSchedule {
    pub scale: f64,
    pub exponent: f64,
}

impl LambdaSchedule {
    pub fn at(&self, n: usize) -> f64 {
        self.scale * (n as f64).powf(-self.exponent)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyConfig {
    pub m: usize,
    pub sigma: f64,
    pub schedule: LambdaSchedule,
    pub truth: SpectralTruth,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub block: Block,
    pub u: f64,
    pub lambda: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub config: ConsistencyConfig,
    pub lambda: f64,
    pub rows: Vec<ReplicateRow>,
    /// Per block, fraction of replicates with `θ̂ > 0`.
    pub selection_rate: Vec<(Block, f64)>,
    /// Fraction of replicates whose selected set equals the true support.
    pub exact_recovery_rate: f64,
}

pub fn selection_consistency_experiment(cfg: &ConsistencyConfig) -> Result<ConsistencyReport> {
    let grid = FourierGrid::new(cfg.m)?;
    if !(cfg.sigma.is_finite() && cfg.sigma >= 0.0) {
        return Err(CossoError::input("sigma must be >= 0"));
    }
    let lambda = cfg.schedule.at(grid.n());
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(CossoError::input(format!("lambda schedule gives {lambda}, expected (0, inf)")));
    }
    let signal = grid.sample(|s, t| cfg.truth.eval(cfg.m, s, t));
    let mut rows = Vec::new();
    let mut hits = [0usize; 3];
    let mut exact = 0usize;
    for r in 0..cfg.replicates {
        let mut rng = rng::stream(cfg.seed, &["spectral", "replicate", &r.to_string()]);
        let y = DVector::from_fn(grid.n(), |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            signal[i] + cfg.sigma * e
        });
        let coeffs = spectral_transform(&y, cfg.m)?;
        let est = oracle_fit(&coeffs, lambda)?;
        let mut all_match = true;
        for (b, e) in est.iter().enumerate() {
            if e.selected() {
                hits[b] += 1;
            }
            all_match &= e.selected() == cfg.truth.active(e.block);
            rows.push(ReplicateRow {
                replicate: r,
                block: e.block,
                u: e.u,
                lambda,
                theta: e.theta,
            });
        }
        exact += usize::from(all_match);
    }
    let reps = cfg.replicates.max(1) as f64;
    Ok(ConsistencyReport {
        config: cfg.clone(),
        lambda,
        rows,
        selection_rate: Block::ALL.iter().zip(hits).map(|(b, h)| (*b, h as f64 / reps)).collect(),
        exact_recovery_rate: exact as f64 / reps,
    })
}

/// Fits the general solver on the grid with the truncated periodic kernel and
/// the penalized θ step (`λ0 = 1`), the setting in which the oracle is exact.
pub fn general_solver_blocks(
    grid: &FourierGrid,
    y: &DVector<f64>,
    lambda: f64,
    opts: FitOptions,
) -> Result<(Vec<f64>, f64)> {
    let kernel = PeriodicTrigKernel::new(grid.m())?;
    let design = AnovaDesign::new(2, Block::ALL.iter().map(Block::component).collect())?;
    let grams = GramSet::build(&kernel, &design, &grid.points())?;
    let fit = fit_full_iterate_with(&grams, y, None, 1.0, Budget::Penalty(lambda), None, opts)?;
    Ok((fit.theta.as_slice().to_vec(), fit.objective.penalized(lambda)))
}

/// Oracle objective `Σ(z - â)² + Σ θ⁻¹ q â² + λ Σθ` at its minimizer.
pub fn oracle_objective(coeffs: &SpectralCoeffs, est: &[BlockEstimate], lambda: f64) -> f64 {
    est.iter()
        .map(|e| {
            if e.theta.is_finite() {
                block_objective(coeffs, e.block, lambda, e.theta)
            } else {
                0.0
            }
        })
        .sum()
}

/// Outcome of comparing the general solver with the oracle on one draw.
#[derive(Debug, Clone, Serialize)]
pub struct CrossCheck {
    pub oracle: Vec<BlockEstimate>,
    pub solver_theta: Vec<f64>,
    pub oracle_objective: f64,
    pub solver_objective: f64,
}

impl CrossCheck {
    pub fn selections_agree(&self) -> bool {
        self.oracle
            .iter()
            .zip(&self.solver_theta)
            .all(|(o, &t)| o.selected() == (t >= ZERO_THRESHOLD))
    }
}

pub fn cross_check(grid: &FourierGrid, y: &DVector<f64>, lambda: f64, opts: FitOptions) -> Result<CrossCheck> {
    let coeffs = spectral_transform(y, grid.m())?;
    let oracle = oracle_fit(&coeffs, lambda)?;
    let (solver_theta, solver_objective) = general_solver_blocks(grid, y, lambda, opts)?;
    Ok(CrossCheck {
        oracle_objective: oracle_objective(&coeffs, &oracle, lambda),
        oracle,
        solver_theta,
        solver_objective,
    })
}

/// Eigen-system check of the periodic second-order Sobolev kernel on the
/// `m`-point grid.
#[derive(Debug, Clone, Serialize)]
pub struct EigenDiagnostic {
    pub m: usize,
    /// `1/(720 m⁴)`.
    pub t: f64,
    /// `max |Σ1 - m t 1|`.
    pub row_sum_error: f64,
    /// `η_2 ≥ … ≥ η_m` (eigenvalues divided by `m`, constant direction removed).
    pub eta: Vec<f64>,
    /// Range of `η_i i⁴` for `i ≥ 2`.
    pub scaled_min: f64,
    pub scaled_max: f64,
}

pub fn eigen_diagnostic(m: usize) -> Result<EigenDiagnostic> {
    check_m(m)?;
    let pts: Vec<f64> = (1..=m).map(|k| k as f64 / m as f64).collect();
    let sigma = DMatrix::from_fn(m, m, |i, j| -k4((pts[i] - pts[j]).abs()));
    let t = 1.0 / (720.0 * (m as f64).powi(4));
    let row_sum_error = sigma
        .column_sum()
        .iter()
        .fold(0.0f64, |e, v| e.max((v - m as f64 * t).abs()));
    let eig = symmetric_eigen(&sigma)?;
    let ones = DVector::from_element(m, 1.0 / (m as f64).sqrt());
    // Drop the eigenpair aligned with the constant vector.
    let const_idx = (0..m)
        .max_by(|&a, &b| {
            let da = eig.eigenvectors.column(a).dot(&ones).abs();
            let db = eig.eigenvectors.column(b).dot(&ones).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(0);
    let mut eta: Vec<f64> = (0..m)
        .filter(|&i| i != const_idx)
        .map(|i| eig.eigenvalues[i] / m as f64)
        .collect();
    eta.sort_by(|a, b| b.total_cmp(a));
    let scaled: Vec<f64> = eta
        .iter()
        .enumerate()
        .map(|(k, e)| e * ((k + 2) as f64).powi(4))
        .collect();
    Ok(EigenDiagnostic {
        m,
        t,
        row_sum_error,
        scaled_min: scaled.iter().cloned().fold(f64::INFINITY, f64::min),
        scaled_max: scaled.iter().cloned().fold(0.0, f64::max),
        eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_is_orthonormal_on_grid() {
        for m in [4, 6, 12] {
            let b = basis_matrix(m);
            let gram = b.tr_mul(&b) / m as f64;
            assert!((gram - DMatrix::identity(m, m)).amax() < 1e-10);
        }
    }

    #[test]
    fn m4_basis_by_hand() {
        let b = trig_basis(4).unwrap();
        let r2 = SQRT_2;
        // t = 1/4, 1/2, 3/4, 1
        let expect = [
            [1.0, 1.0, 1.0, 1.0],
            [0.0, -r2, 0.0, r2],
            [r2, 0.0, -r2, 0.0],
            [-1.0, 1.0, -1.0, 1.0],
        ];
        for (v, e) in b.iter().zip(expect) {
            for k in 0..4 {
                assert!((v[k] - e[k]).abs() < 1e-12, "{v} vs {e:?}");
            }
        }
    }

    #[test]
    fn transform_of_constant_and_basis_vectors() {
        let m = 6;
        let grid = FourierGrid::new(m).unwrap();
        let c = spectral_transform(&DVector::from_element(36, 2.5), m).unwrap();
        assert!((c.z[(0, 0)] - 2.5).abs() < 1e-12);
        assert!(c.z.iter().skip(1).all(|v| v.abs() < 1e-12));
        // γ_{23}: one-based (2, 3) → zero-based (1, 2).
        let y = grid.sample(|s, t| basis_fn(m, 1, s) * basis_fn(m, 2, t));
        let c = spectral_transform(&y, m).unwrap();
        for mu in 0..m {
            for nu in 0..m {
                let e = if (mu, nu) == (1, 2) { 1.0 } else { 0.0 };
                assert!((c.z[(mu, nu)] - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transform_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = DVector::from_fn(64, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
        let c = spectral_transform(&y, 8).unwrap();
        assert!((c.reconstruct() - y).amax() < 1e-10);
    }

    #[test]
    fn q_weights() {
        let q = axis_penalty_weights(8).unwrap();
        assert!((q[1] - (2.0 * PI).powi(4)).abs() < 1e-9);
        assert!((q[1] - 1558.545).abs() < 1e-3);
        for w in q.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let table = penalty_weights(8).unwrap();
        assert_eq!(table[(3, 5)], q[3] * q[5]);
        assert_eq!(table[(0, 0)], 0.0);
    }

    #[test]
    fn q_matches_second_derivative_quadrature() {
        // ∫ {γ''(t)}² dt by the midpoint rule, with γ'' by central differences.
        let m = 8;
        let q = axis_penalty_weights(m).unwrap();
        let h = 1e-4;
        let pts = 20_000;
        for mu in 1..m - 1 {
            let mut acc = 0.0;
            for k in 0..pts {
                let t = (k as f64 + 0.5) / pts as f64;
                let d2 = (basis_fn(m, mu, t + h) - 2.0 * basis_fn(m, mu, t) + basis_fn(m, mu, t - h)) / (h * h);
                acc += d2 * d2 / pts as f64;
            }
            assert!((acc - q[mu]).abs() < 1e-4 * q[mu], "mu {mu}: {acc} vs {}", q[mu]);
        }
    }

    fn coeffs_from(z: DMatrix<f64>) -> SpectralCoeffs {
        let m = z.nrows();
        SpectralCoeffs {
            m,
            q: penalty_weights(m).unwrap(),
            z,
        }
    }

    #[test]
    fn u_statistic_simple_cases() {
        let c = coeffs_from(DMatrix::zeros(6, 6));
        for b in Block::ALL {
            assert_eq!(u_statistic(&c, b), 0.0);
            assert_eq!(theta_minimize_1d(&c, b, 0.0).unwrap(), 0.0);
            assert_eq!(theta_minimize_1d(&c, b, 3.0).unwrap(), 0.0);
        }
        let mut c = coeffs_from(DMatrix::zeros(6, 6));
        c.q = DMatrix::from_element(6, 6, 1.0);
        c.z[(2, 3)] = 0.7;
        assert!((u_statistic(&c, Block::Interaction) - 0.49).abs() < 1e-15);
        assert_eq!(theta_minimize_1d(&c, Block::Interaction, 0.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn bisection_matches_grid_minimization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 6;
        let mut c = coeffs_from(DMatrix::zeros(m, m));
        c.q = DMatrix::from_fn(m, m, |_, _| 0.5 + rng.gen::<f64>());
        c.z = DMatrix::from_fn(m, m, |_, _| rng.gen::<f64>() - 0.5);
        let lambda = 0.3 * u_statistic(&c, Block::Interaction);
        let root = theta_minimize_1d(&c, Block::Interaction, lambda).unwrap();
        assert!(root > 0.0);
        // Dense grid, then refine around the best cell.
        let a = |t: f64| block_objective(&c, Block::Interaction, lambda, t);
        let hi = 4.0 * root;
        let mut best = 0.0;
        for k in 0..=200_000 {
            let t = hi * k as f64 / 200_000.0;
            if a(t) < a(best) {
                best = t;
            }
        }
        assert!((best - root).abs() < 1e-4 * hi, "{best} vs {root}");
        let (mut lo, mut up) = (best - hi / 200_000.0, best + hi / 200_000.0);
        for _ in 0..200 {
            let (m1, m2) = (lo + (up - lo) / 3.0, up - (up - lo) / 3.0);
            if a(m1) < a(m2) {
                up = m2;
            } else {
                lo = m1;
            }
        }
        assert!((0.5 * (lo + up) - root).abs() < 1e-6);
    }

    #[test]
    fn threshold_characterization_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let m = 6;
            let z = DMatrix::from_fn(m, m, |_, _| (rng.gen::<f64>() - 0.5) * 1e-2);
            let c = coeffs_from(z);
            let lambda = rng.gen::<f64>() * 2e-8;
            for b in Block::ALL {
                let th = theta_minimize_1d(&c, b, lambda).unwrap();
                assert_eq!(th > 0.0, u_statistic(&c, b) > lambda);
            }
        }
    }

    #[test]
    fn periodic_kernel_is_diagonal_in_basis() {
        let m = 6;
        let k = PeriodicTrigKernel::new(m).unwrap();
        let grid = FourierGrid::new(m).unwrap();
        let design = AnovaDesign::new(2, Block::ALL.iter().map(Block::component).collect()).unwrap();
        let grams = GramSet::build(&k, &design, &grid.points()).unwrap();
        let q = penalty_weights(m).unwrap();
        let n = grid.n() as f64;
        // γ_μν is an eigenvector of R_α with eigenvalue n / q_μν inside the block.
        for (bi, block) in Block::ALL.iter().enumerate() {
            for mu in 0..m {
                for nu in 0..m {
                    let v = grid.sample(|s, t| basis_fn(m, mu, s) * basis_fn(m, nu, t));
                    let rv = grams.get(bi) * &v;
                    let ev = if block.contains(mu, nu) { n / q[(mu, nu)] } else { 0.0 };
                    assert!((rv - &v * ev).amax() < 1e-10 * (1.0 + ev), "{block} ({mu},{nu})");
                }
            }
        }
    }

    #[test]
    fn noiseless_experiment_recovers_truth() {
        let cfg = ConsistencyConfig {
            m: 8,
            sigma: 0.0,
            schedule: LambdaSchedule {
                scale: 1e-6,
                exponent: 0.5,
            },
            truth: SpectralTruth {
                main1: 1.0,
                main2: 0.0,
                interaction: 1.0,
            },
            replicates: 3,
            seed: 1,
        };
        let rep = selection_consistency_experiment(&cfg).unwrap();
        assert_eq!(rep.exact_recovery_rate, 1.0);
    }

    #[test]
    fn eigen_diagnostic_row_sums() {
        for m in [8, 16, 32] {
            let diag = eigen_diagnostic(m).unwrap();
            assert!(diag.row_sum_error < 1e-8 * m as f64 * diag.t.max(1e-300) + 1e-18);
            assert_eq!(diag.eta.len(), m - 1);
        }
    }
}
