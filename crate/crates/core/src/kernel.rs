//! Reproducing kernels, ANOVA designs and per-component Gram matrices.

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CossoError, Result};
use crate::registry::{parse_arg, Registry};

/// θ entries below this are reported as unselected.
pub const ZERO_THRESHOLD: f64 = 1e-6;

const DOMAIN_SLACK: f64 = 1e-12;

fn k1(u: f64) -> f64 {
    u - 0.5
}

fn k2(u: f64) -> f64 {
    let a = k1(u);
    (a * a - 1.0 / 12.0) / 2.0
}

/// Scaled fourth Bernoulli polynomial, `B4(u) / 24` on `[0, 1]`.
pub(crate) fn k4(u: f64) -> f64 {
    let a = k1(u);
    let a2 = a * a;
    (a2 * a2 - a2 / 2.0 + 7.0 / 240.0) / 24.0
}

fn sobolev_rk_unchecked(s: f64, t: f64) -> f64 {
    k1(s) * k1(t) + k2(s) * k2(t) - k4((s - t).abs())
}

fn check_unit(v: f64, what: &str) -> Result<()> {
    if v.is_finite() && (-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&v) {
        Ok(())
    } else {
        Err(CossoError::input(format!("{what} = {v} is outside [0, 1]")))
    }
}

/// Reproducing kernel of the mean-zero part of the second-order Sobolev space
/// on `[0, 1]`.
pub fn sobolev_rk(s: f64, t: f64) -> Result<f64> {
    check_unit(s, "s")?;
    check_unit(t, "t")?;
    Ok(sobolev_rk_unchecked(s, t))
}

/// A univariate reproducing kernel used for every main-effect space; interaction
/// spaces take products.
pub trait ComponentKernel: Send + Sync + fmt::Debug {
    /// Registry spec that recreates this kernel.
    fn spec(&self) -> String;

    /// Kernel value; both arguments are already known to lie in `[0, 1]`.
    fn eval(&self, s: f64, t: f64) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sobolev2;

impl ComponentKernel for Sobolev2 {
    fn spec(&self) -> String {
        "sobolev2".into()
    }

    fn eval(&self, s: f64, t: f64) -> f64 {
        sobolev_rk_unchecked(s, t)
    }
}

/// `(s - 1/2)(t - 1/2)`: the kernel of the centered linear functions under the
/// L2 inner product scaled so the COSSO penalty becomes a lasso penalty.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearKernel;

impl ComponentKernel for LinearKernel {
    fn spec(&self) -> String {
        "linear".into()
    }

    fn eval(&self, s: f64, t: f64) -> f64 {
        k1(s) * k1(t)
    }
}

/// Truncated periodic kernel `Σ_{μ≥2} γ_μ(s) γ_μ(t) / q_μ` built from the
/// `m`-point trigonometric basis. Diagonal in that basis on the regular grid.
#[derive(Debug, Clone)]
pub struct PeriodicTrigKernel {
    m: usize,
    inv_q: Vec<f64>,
}

impl PeriodicTrigKernel {
    pub fn new(m: usize) -> Result<Self> {
        let q = crate::spectral::axis_penalty_weights(m)?;
        let inv_q = q.iter().map(|&w| if w > 0.0 { 1.0 / w } else { 0.0 }).collect();
        Ok(Self { m, inv_q })
    }
}

impl ComponentKernel for PeriodicTrigKernel {
    fn spec(&self) -> String {
        format!("periodic:{}", self.m)
    }

    fn eval(&self, s: f64, t: f64) -> f64 {
        let mut acc = 0.0;
        for (mu, inv_q) in self.inv_q.iter().enumerate().skip(1) {
            acc += crate::spectral::basis_fn(self.m, mu, s)
                * crate::spectral::basis_fn(self.m, mu, t)
                * inv_q;
        }
        acc
    }
}

pub fn kernel_registry() -> &'static Registry<dyn ComponentKernel> {
    static REG: OnceLock<Registry<dyn ComponentKernel>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn ComponentKernel> = Registry::new("kernel");
        r.register("sobolev2", |_| Ok(Box::new(Sobolev2)));
        r.register("linear", |_| Ok(Box::new(LinearKernel)));
        r.register("periodic", |arg| {
            let m: usize = parse_arg("periodic kernel", arg)?;
            Ok(Box::new(PeriodicTrigKernel::new(m)?))
        });
        r
    })
}

pub fn kernel_from_spec(spec: &str) -> Result<Arc<dyn ComponentKernel>> {
    Ok(Arc::from(kernel_registry().create(spec)?))
}

/// One functional ANOVA component. Indices are zero-based; `Display` prints
/// them one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Main(usize),
    Interaction(usize, usize),
}

impl Component {
    pub fn variables(&self) -> Vec<usize> {
        match *self {
            Component::Main(j) => vec![j],
            Component::Interaction(j, k) => vec![j, k],
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Component::Main(j) => write!(f, "x{}", j + 1),
            Component::Interaction(j, k) => write!(f, "x{}:x{}", j + 1, k + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnovaDesign {
    d: usize,
    components: Vec<Component>,
}

impl AnovaDesign {
    pub fn new(d: usize, components: Vec<Component>) -> Result<Self> {
        if d == 0 {
            return Err(CossoError::input("design needs at least one covariate"));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &components {
            match *c {
                Component::Main(j) if j < d => {}
                Component::Interaction(j, k) if j < k && k < d => {}
                _ => return Err(CossoError::input(format!("component {c} invalid for d = {d}"))),
            }
            if !seen.insert(*c) {
                return Err(CossoError::input(format!("duplicate component {c}")));
            }
        }
        if components.is_empty() {
            return Err(CossoError::input("design has no components"));
        }
        Ok(Self { d, components })
    }

    pub fn additive(d: usize) -> Result<Self> {
        Self::new(d, (0..d).map(Component::Main).collect())
    }

    /// Main effects first, then interactions in lexicographic order.
    pub fn two_way(d: usize) -> Result<Self> {
        let mut comps: Vec<Component> = (0..d).map(Component::Main).collect();
        for j in 0..d {
            for k in j + 1..d {
                comps.push(Component::Interaction(j, k));
            }
        }
        Self::new(d, comps)
    }

    pub fn by_name(name: &str, d: usize) -> Result<Self> {
        match name {
            "additive" => Self::additive(d),
            "twoway" | "two-way" => Self::two_way(d),
            other => Err(CossoError::input(format!(
                "unknown design '{other}' (expected additive or twoway)"
            ))),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }
}

fn check_matrix(x: &DMatrix<f64>) -> Result<()> {
    for (idx, v) in x.iter().enumerate() {
        if !(v.is_finite() && (-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(v)) {
            let (r, c) = (idx % x.nrows(), idx / x.nrows());
            return Err(CossoError::input(format!(
                "covariate ({}, {}) = {v} is outside [0, 1]",
                r + 1,
                c + 1
            )));
        }
    }
    Ok(())
}

fn main_cross(kernel: &dyn ComponentKernel, a: &DMatrix<f64>, b: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, k| kernel.eval(a[(i, j)], b[(k, j)]))
}

/// Kernel matrices `R_α(a_i, b_k)` for every component, `a.nrows() × b.nrows()`.
pub fn cross_grams(
    kernel: &dyn ComponentKernel,
    design: &AnovaDesign,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    if a.ncols() != design.d() || b.ncols() != design.d() {
        return Err(CossoError::input(format!(
            "covariate matrices have {} and {} columns, design expects {}",
            a.ncols(),
            b.ncols(),
            design.d()
        )));
    }
    check_matrix(a)?;
    check_matrix(b)?;
    let mut mains: Vec<Option<DMatrix<f64>>> = vec![None; design.d()];
    let mut main = |j: usize| -> DMatrix<f64> {
        mains[j]
            .get_or_insert_with(|| main_cross(kernel, a, b, j))
            .clone()
    };
    Ok(design
        .components()
        .iter()
        .map(|c| match *c {
            Component::Main(j) => main(j),
            Component::Interaction(j, k) => main(j).component_mul(&main(k)),
        })
        .collect())
}

/// Gram matrix of a single component at the rows of `x`.
pub fn gram_component(kernel: &dyn ComponentKernel, x: &DMatrix<f64>, comp: Component) -> Result<DMatrix<f64>> {
    let design = AnovaDesign::new(x.ncols(), vec![comp])?;
    Ok(cross_grams(kernel, &design, x, x)?.remove(0))
}

/// The `p` training Gram matrices of a design.
#[derive(Debug, Clone)]
pub struct GramSet {
    matrices: Vec<DMatrix<f64>>,
}

impl GramSet {
    pub fn build(kernel: &dyn ComponentKernel, design: &AnovaDesign, x: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            matrices: cross_grams(kernel, design, x, x)?,
        })
    }

    pub fn from_matrices(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = matrices
            .first()
            .map(|m| m.nrows())
            .ok_or_else(|| CossoError::input("empty gram set"))?;
        for m in &matrices {
            if m.nrows() != n || m.ncols() != n {
                return Err(CossoError::input("gram matrices must all be n×n"));
            }
        }
        Ok(Self { matrices })
    }

    pub fn n(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn p(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn get(&self, alpha: usize) -> &DMatrix<f64> {
        &self.matrices[alpha]
    }

    /// Restricts every matrix to the given rows and columns.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Vec<DMatrix<f64>> {
        self.matrices
            .iter()
            .map(|m| DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])]))
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> GramSet {
        GramSet {
            matrices: self.submatrix(idx, idx),
        }
    }
}

/// Nonnegative component weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaWeights(Vec<f64>);

impl ThetaWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(CossoError::input(format!("theta[{}] = {v} must be finite and >= 0", i + 1)));
        }
        Ok(Self(values))
    }

    pub fn ones(p: usize) -> Self {
        Self(vec![1.0; p])
    }

    pub fn zeros(p: usize) -> Self {
        Self(vec![0.0; p])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_selected(&self, alpha: usize) -> bool {
        self.0[alpha] >= ZERO_THRESHOLD
    }

    /// Indices of components at or above the zero-threshold.
    pub fn support(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&a| self.is_selected(a)).collect()
    }

    pub fn all_zero(&self) -> bool {
        self.support().is_empty()
    }
}

/// `Σ_α θ_α R_α`.
pub fn weighted_gram(grams: &GramSet, theta: &ThetaWeights) -> Result<DMatrix<f64>> {
    weighted_sum(grams.matrices(), theta)
}

pub(crate) fn weighted_sum(mats: &[DMatrix<f64>], theta: &ThetaWeights) -> Result<DMatrix<f64>> {
    if mats.len() != theta.len() {
        return Err(CossoError::input(format!(
            "theta has length {}, expected {}",
            theta.len(),
            mats.len()
        )));
    }
    let (r, c) = mats.first().map(|m| m.shape()).unwrap_or((0, 0));
    let mut out = DMatrix::zeros(r, c);
    for (m, &t) in mats.iter().zip(theta.as_slice()) {
        if t != 0.0 {
            out += m * t;
        }
    }
    Ok(out)
}
