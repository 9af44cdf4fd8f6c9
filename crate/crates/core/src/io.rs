//! CSV ingestion and output, flat key-value config files and versioned JSON
//! model archives.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Scaling};
use crate::error::{CossoError, Result};
use crate::kernel::{kernel_from_spec, AnovaDesign, ThetaWeights};
use crate::logistic::{sigmoid, LogisticFit};
use crate::solver::{predict_with, FitState};
use crate::spline::SplineSolution;

/// Header plus numeric rows of a CSV source.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CossoError::input(format!("no column named '{name}' (have: {})", self.header.join(", "))))
    }

    fn matrix(&self, cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), cols.len(), |i, j| self.rows[i][cols[j]])
    }
}

/// Parses a rectangular numeric CSV with a header row. Rows are reported
/// 1-based, counting data rows only.
pub fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().any(String::is_empty) {
        return Err(CossoError::input("header row has empty column names"));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row_no = i + 1;
        let rec = rec.map_err(|e| CossoError::input(format!("row {row_no}: {e}")))?;
        if rec.len() != header.len() {
            return Err(CossoError::input(format!(
                "row {row_no}: {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        let mut vals = Vec::with_capacity(rec.len());
        for (j, cell) in rec.iter().enumerate() {
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                return Err(CossoError::input(format!("row {row_no}: missing value in column '{}'", header[j])));
            }
            let v: f64 = cell.parse().map_err(|_| {
                CossoError::input(format!("row {row_no}: non-numeric value '{cell}' in column '{}'", header[j]))
            })?;
            if !v.is_finite() {
                return Err(CossoError::input(format!("row {row_no}: non-finite value in column '{}'", header[j])));
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(CossoError::input("no data rows"));
    }
    Ok(Table { header, rows })
}

/// Builds a scaled dataset from a table. With `labels`, the response must be
/// 0/1 with both classes present.
pub fn dataset_from_table(table: &Table, response: &str, labels: bool) -> Result<Dataset> {
    let ri = table.column_index(response)?;
    let cols: Vec<usize> = (0..table.header.len()).filter(|&j| j != ri).collect();
    if cols.is_empty() {
        return Err(CossoError::input("no covariate columns"));
    }
    let names = cols.iter().map(|&j| table.header[j].clone()).collect();
    let y = DVector::from_iterator(table.rows.len(), table.rows.iter().map(|r| r[ri]));
    let ds = Dataset::from_raw(table.matrix(&cols), y, names, response.to_string())?;
    if labels {
        ds.check_labels()?;
    }
    Ok(ds)
}

pub fn load_csv(path: &Path, response: &str, labels: bool) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| CossoError::input(format!("cannot open {}: {e}", path.display())))?;
    dataset_from_table(&read_table(file)?, response, labels)
}

/// Raw covariate columns picked by name, in the given order.
pub fn load_covariates(path: &Path, names: &[String]) -> Result<DMatrix<f64>> {
    let file = fs::File::open(path).map_err(|e| CossoError::input(format!("cannot open {}: {e}", path.display())))?;
    let table = read_table(file)?;
    let cols = names.iter().map(|n| table.column_index(n)).collect::<Result<Vec<_>>>()?;
    Ok(table.matrix(&cols))
}

/// Writes a header and rows of pre-formatted cells.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes raw covariates and response so that reading back reproduces them exactly.
pub fn write_dataset_csv(path: &Path, names: &[String], response: &str, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    let mut header = names.to_vec();
    header.push(response.to_string());
    let rows: Vec<Vec<String>> = (0..x.nrows())
        .map(|i| {
            let mut r: Vec<String> = x.row(i).iter().map(|&v| fmt_f64(v)).collect();
            r.push(fmt_f64(y[i]));
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Flat `key = value` configuration. Blank lines and lines starting with
/// `#` or `;` are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CossoError::input(format!("config line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CossoError::input(format!("config line {}: empty key", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| CossoError::input(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ArchivedModel {
    Regression { theta: ThetaWeights, spline: SplineSolution },
    /// Logit as a per-component expansion.
    Logistic { coef: Vec<DVector<f64>>, b: f64, theta: Vec<f64> },
}

/// Everything needed to reproduce predictions, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub schema_version: u32,
    pub kernel: String,
    pub design: AnovaDesign,
    pub scaling: Scaling,
    pub covariate_names: Vec<String>,
    pub response_name: String,
    pub train_x: DMatrix<f64>,
    pub lambda0: f64,
    pub m: f64,
    pub model: ArchivedModel,
    /// Predictions at the training points.
    pub fitted: DVector<f64>,
    pub tuning: Option<serde_json::Value>,
    pub seed: u64,
}

impl ModelArchive {
    pub fn from_fit(
        state: &FitState,
        covariate_names: Vec<String>,
        response_name: String,
        tuning: Option<serde_json::Value>,
        seed: u64,
    ) -> Result<Self> {
        let m = match state.fit.budget {
            crate::solver::Budget::Total(m) => m,
            crate::solver::Budget::Penalty(_) => f64::NAN,
        };
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            kernel: state.kernel.spec(),
            design: state.design.clone(),
            scaling: state.scaling.clone(),
            covariate_names,
            response_name,
            train_x: state.train_x.clone(),
            lambda0: state.fit.lambda0,
            m,
            model: ArchivedModel::Regression {
                theta: state.fit.theta.clone(),
                spline: state.fit.spline.clone(),
            },
            fitted: state.predict_unit(&state.train_x)?,
            tuning,
            seed,
        })
    }

    pub fn from_logistic(
        fit: &LogisticFit,
        covariate_names: Vec<String>,
        response_name: String,
        tuning: Option<serde_json::Value>,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            kernel: fit.kernel.spec(),
            design: fit.design.clone(),
            scaling: fit.scaling.clone(),
            covariate_names,
            response_name,
            train_x: fit.train_x.clone(),
            lambda0: fit.lambda0,
            m: fit.m,
            model: ArchivedModel::Logistic {
                coef: fit.result.expansion.coef.clone(),
                b: fit.result.expansion.b,
                theta: fit.result.theta.clone(),
            },
            fitted: fit.predict_logit_unit(&fit.train_x)?,
            tuning,
            seed,
        })
    }

    pub fn is_logistic(&self) -> bool {
        matches!(self.model, ArchivedModel::Logistic { .. })
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CossoError::input(format!(
                "archive schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        AnovaDesign::new(self.design.d(), self.design.components().to_vec())?;
        let (n, p) = (self.train_x.nrows(), self.design.p());
        let ok = match &self.model {
            ArchivedModel::Regression { theta, spline } => theta.len() == p && spline.c.len() == n,
            ArchivedModel::Logistic { coef, theta, .. } => {
                coef.len() == p && theta.len() == p && coef.iter().all(|c| c.len() == n)
            }
        };
        if !ok || self.train_x.ncols() != self.design.d() || self.scaling.d() != self.design.d() {
            return Err(CossoError::input("archive fields have inconsistent sizes"));
        }
        Ok(())
    }

    /// Fitted function (regression) or logit (classification) at raw covariates.
    pub fn predict(&self, raw: &DMatrix<f64>) -> Result<DVector<f64>> {
        let kernel = kernel_from_spec(&self.kernel)?;
        let x = self.scaling.apply(raw)?;
        match &self.model {
            ArchivedModel::Regression { theta, spline } => {
                predict_with(kernel.as_ref(), &self.design, &self.train_x, theta, spline, &x)
            }
            ArchivedModel::Logistic { coef, b, .. } => {
                let cross = crate::kernel::cross_grams(kernel.as_ref(), &self.design, &x, &self.train_x)?;
                let exp = crate::logistic::KernelExpansion { coef: coef.clone(), b: *b };
                Ok(exp.eval(&cross).map(|v| v.clamp(-30.0, 30.0)))
            }
        }
    }

    /// Class-1 probabilities; only for classification archives.
    pub fn predict_proba(&self, raw: &DMatrix<f64>) -> Result<DVector<f64>> {
        if !self.is_logistic() {
            return Err(CossoError::input("probabilities need a classification model"));
        }
        Ok(self.predict(raw)?.map(sigmoid))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| CossoError::input(format!("bad model archive: {e}")))?;
        a.validate()?;
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CossoError::input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
