//! Worked examples for the simulation, spectral and kernel modules, each
//! checked against an independent computation.

use cosso::kernel::ZERO_THRESHOLD;
use cosso::sim::{building_block, ise_with, make_dataset, run_experiment, sample_covariates, Covariance, Example, ExperimentSpec};
use cosso::spectral::{eigen_diagnostic, spectral_transform, u_statistic, Block};
use cosso::{fit_one_step, sobolev_rk, AnovaDesign, GramSet};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

#[test]
fn scaled_block_variances() {
    // var{5 g1}, var{3 g2}, var{4 g3}, var{6 g4} for a uniform argument.
    let n = 400_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u: Vec<f64> = (0..n).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
    for (which, scale, want) in [(1u8, 5.0, 2.08), (2, 3.0, 0.80), (3, 4.0, 3.30), (4, 6.0, 9.45)] {
        let v: Vec<f64> = u.iter().map(|&t| scale * building_block(t, which).unwrap()).collect();
        let got = variance(&v);
        assert!((got - want).abs() <= 0.02 * want, "block {which}: {got}");
    }
}

#[test]
fn compound_symmetry_correlation() {
    let x = sample_covariates(Covariance::CompoundSymmetry(1.0), 5000, 3, 21).unwrap();
    for (j, k) in [(0, 1), (0, 2), (1, 2)] {
        let r = corr(x.column(j).as_slice(), x.column(k).as_slice());
        assert!((r - 0.5).abs() <= 0.05, "corr({j},{k}) = {r}");
    }
    let x = sample_covariates(Covariance::CompoundSymmetry(3.0), 5000, 2, 22).unwrap();
    let r = corr(x.column(0).as_slice(), x.column(1).as_slice());
    assert!((r - 0.9).abs() <= 0.05, "{r}");
}

#[test]
fn ar1_adjacent_correlation() {
    // Trimming at ±2.5 barely changes the correlation of the latent series.
    let x = sample_covariates(Covariance::TrimmedAr1(0.5), 5000, 4, 23).unwrap();
    for j in 0..3 {
        let r = corr(x.column(j).as_slice(), x.column(j + 1).as_slice());
        assert!((r - 0.5).abs() <= 0.05, "corr({j},{}) = {r}", j + 1);
    }
    let r = corr(x.column(0).as_slice(), x.column(2).as_slice());
    assert!((r - 0.25).abs() <= 0.05, "lag 2: {r}");
}

#[test]
fn constant_predictor_ise_is_signal_variance() {
    // The best constant is E f, and its ISE is Var f.
    let x = sample_covariates(Covariance::Uniform, 200_000, 10, 31).unwrap();
    let f = Example::One.truth_on(&x);
    let mean = f.mean();
    let ise = ise_with(|x: &DMatrix<f64>| Ok(DVector::from_element(x.nrows(), mean)), Example::One, Covariance::Uniform, 100_000, 32)
        .unwrap();
    assert!((ise - 15.6).abs() <= 0.5, "{ise}");
}

#[test]
fn example_one_fixed_tuning_gives_a_small_model() {
    // λ0 = 9.7656e-6 and M = 3.5 on n = 100 uniform draws should keep the
    // four informative variables plus at most a stray term or two.
    let design = AnovaDesign::additive(10).unwrap();
    let mut sizes = Vec::new();
    for rep in 0..10 {
        let mut spec = ExperimentSpec::new(Example::One, 41);
        spec.n = 100;
        let ds = make_dataset(&spec, rep).unwrap();
        let grams = GramSet::build(&cosso::kernel::Sobolev2, &design, &ds.x).unwrap();
        let fit = fit_one_step(&grams, &ds.y, 9.7656e-6, 3.5).unwrap();
        let sel: Vec<bool> = fit.theta.as_slice().iter().map(|&t| t >= ZERO_THRESHOLD).collect();
        assert!(sel[0] && sel[2] && sel[3], "replicate {rep}: {sel:?}");
        sizes.push(sel.iter().filter(|&&s| s).count());
    }
    sizes.sort();
    let median = sizes[sizes.len() / 2];
    assert!((4..=6).contains(&median), "sizes {sizes:?}");
}

#[test]
fn chosen_budget_tracks_informative_count() {
    let mut spec = ExperimentSpec::new(Example::One, 51);
    spec.replicates = 10;
    spec.criterion = "gcv".into();
    let rep = run_experiment(&spec).unwrap();
    assert!(rep.failures.is_empty(), "{:?}", rep.failures);
    assert!((2.5..=6.0).contains(&rep.mean_m), "mean M {}", rep.mean_m);
}

#[test]
fn null_u_moments_scale_with_sample_size() {
    // Under pure noise E(U) ~ σ²/n and var(U) ~ σ⁴/n².
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut scaled = Vec::new();
    for m in [8usize, 16, 32] {
        let n = m * m;
        let us: Vec<f64> = (0..500)
            .map(|_| {
                let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                u_statistic(&spectral_transform(&y, m).unwrap(), Block::Interaction)
            })
            .collect();
        let mean = us.iter().sum::<f64>() / us.len() as f64;
        scaled.push((mean * n as f64, variance(&us) * (n * n) as f64));
    }
    for &(a, b) in &scaled[1..] {
        let (a0, b0) = scaled[0];
        assert!(a / a0 <= 3.0 && a0 / a <= 3.0, "{scaled:?}");
        assert!(b / b0 <= 3.0 && b0 / b <= 3.0, "{scaled:?}");
    }
}

#[test]
fn periodic_eigenvalues_decay_like_fourth_power() {
    let mut ranges = Vec::new();
    for m in [8usize, 16, 32, 64] {
        let d = eigen_diagnostic(m).unwrap();
        assert!(d.scaled_min > 0.0);
        // Eigenvalues come in cosine/sine pairs, so the range is (3/2)^4 at most.
        assert!(d.scaled_max / d.scaled_min <= 5.0625 + 1e-6, "m = {m}: {d:?}");
        ranges.push((d.scaled_min, d.scaled_max));
    }
    for w in ranges.windows(2) {
        assert!((w[0].0 / w[1].0 - 1.0).abs() < 0.01 && (w[0].1 / w[1].1 - 1.0).abs() < 0.01, "{ranges:?}");
    }
}

#[test]
fn reproducing_property_by_quadrature() {
    // For g = ((t - 1/2)² - 1/12)/2, which has ∫g = ∫g' = 0 and g'' = 1,
    // the inner product <R(s, .), g> reduces to ∫ ∂²R(s, t)/∂t² dt and must equal g(s).
    let g = |t: f64| ((t - 0.5).powi(2) - 1.0 / 12.0) / 2.0;
    let k = 10_000;
    // Step below half the grid spacing keeps every stencil inside [0, 1].
    let h = 2e-5;
    for s in [0.05, 0.3, 0.5, 0.81] {
        let r = |t: f64| sobolev_rk(s, t).unwrap();
        let second = |t: f64| (r(t + h) - 2.0 * r(t) + r(t - h)) / (h * h);
        let integral: f64 = (0..k).map(|i| second((i as f64 + 0.5) / k as f64)).sum::<f64>() / k as f64;
        assert!((integral - g(s)).abs() < 1e-5, "s = {s}: {integral} vs {}", g(s));
    }
}
