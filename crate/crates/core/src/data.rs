use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CossoError, Result};

/// Per-column min-max map onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaling {
    /// Leaves covariates that already live on `[0, 1]` untouched.
    pub fn identity(d: usize) -> Self {
        Self {
            min: vec![0.0; d],
            max: vec![1.0; d],
        }
    }

    pub fn fit(x: &DMatrix<f64>) -> Self {
        let (mut min, mut max) = (Vec::new(), Vec::new());
        for col in x.column_iter() {
            min.push(col.min());
            max.push(col.max());
        }
        Self { min, max }
    }

    pub fn d(&self) -> usize {
        self.min.len()
    }

    /// Columns whose training range is empty; they map to 0.5.
    pub fn constant_columns(&self) -> Vec<usize> {
        (0..self.d()).filter(|&j| self.max[j] <= self.min[j]).collect()
    }

    /// Scales and clamps into `[0, 1]`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.d() {
            return Err(CossoError::input(format!(
                "expected {} covariate columns, got {}",
                self.d(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let span = self.max[j] - self.min[j];
            if span > 0.0 {
                ((x[(i, j)] - self.min[j]) / span).clamp(0.0, 1.0)
            } else {
                0.5
            }
        }))
    }
}

/// Covariates on `[0, 1]^d` plus response.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub scaling: Scaling,
    pub covariate_names: Vec<String>,
    pub response_name: String,
}

impl Dataset {
    /// Wraps covariates already on `[0, 1]`.
    pub fn new_unit(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(CossoError::input(format!(
                "{} covariate rows but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        let d = x.ncols();
        let ds = Self {
            scaling: Scaling::identity(d),
            covariate_names: (1..=d).map(|j| format!("x{j}")).collect(),
            response_name: "y".into(),
            x,
            y,
        };
        ds.x.iter()
            .all(|v| (0.0..=1.0).contains(v))
            .then_some(())
            .ok_or_else(|| CossoError::input("covariates must lie in [0, 1]"))?;
        Ok(ds)
    }

    /// Min-max scales raw covariates and records the scaling.
    pub fn from_raw(
        raw: DMatrix<f64>,
        y: DVector<f64>,
        covariate_names: Vec<String>,
        response_name: String,
    ) -> Result<Self> {
        if raw.nrows() != y.len() {
            return Err(CossoError::input("covariate and response lengths differ"));
        }
        let scaling = Scaling::fit(&raw);
        for j in scaling.constant_columns() {
            log::warn!("covariate '{}' is constant; mapped to 0.5", covariate_names[j]);
        }
        let x = scaling.apply(&raw)?;
        Ok(Self {
            x,
            y,
            scaling,
            covariate_names,
            response_name,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            scaling: self.scaling.clone(),
            covariate_names: self.covariate_names.clone(),
            response_name: self.response_name.clone(),
        }
    }

    /// Checks that the response is a 0/1 label vector with both classes.
    pub fn check_labels(&self) -> Result<()> {
        if let Some(i) = self.y.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(CossoError::input(format!(
                "label in row {} is {}, expected 0 or 1",
                i + 1,
                self.y[i]
            )));
        }
        let ones = self.y.sum();
        if ones == 0.0 || ones == self.n() as f64 {
            return Err(CossoError::input("both classes must be present"));
        }
        Ok(())
    }
}
