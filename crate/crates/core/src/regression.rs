//! Least-squares regression used for conditional expectations.
//!
//! Column 0 of every design is the constant 1. The remaining columns are
//! centred and scaled before the normal equations are formed, columns that
//! are constant on the sample are dropped, and all cross-products are
//! accumulated with exact summation so a fit does not depend on row order.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::numeric::{fsum, ExactSum};
use crate::{Error, Result};

/// Ridge penalty (on standardised columns) used when the Gram matrix is
/// numerically singular.
pub const RIDGE: f64 = 1e-8;
/// Condition number above which the ridge fallback kicks in.
pub const MAX_CONDITION: f64 = 1e12;

/// Row-major design matrix whose first column is the constant 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl Design {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if n_cols == 0 || data.len() != n_rows * n_cols {
            return Err(Error::Dimension(format!(
                "design data of length {} for {n_rows} x {n_cols}",
                data.len()
            )));
        }
        Ok(Self { n_rows, n_cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }
}

/// Fitted linear predictor in the raw feature coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub coef: Vec<f64>,
}

impl LinearFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.coef.iter().zip(row).map(|(c, x)| c * x).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitDiagnostics {
    /// Condition number of the standardised Gram matrix (1 when only the intercept is active).
    pub condition: f64,
    pub ridge: bool,
    pub active_columns: usize,
    /// Non-constant columns dropped as linear combinations of earlier ones.
    pub collinear_dropped: usize,
}

/// Prepared normal equations for one design, reusable across targets.
pub struct Regressor<'a> {
    design: &'a Design,
    means: Vec<f64>,
    scales: Vec<f64>,
    active: Vec<usize>,
    factor: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    pub diagnostics: FitDiagnostics,
}

impl<'a> Regressor<'a> {
    pub fn new(design: &'a Design) -> Result<Self> {
        let n = design.n_rows;
        let p = design.n_cols;
        if n < 2 {
            return Err(Error::InsufficientData(format!("{n} rows for a regression")));
        }
        let mut means = vec![0.0; p];
        let mut scales = vec![1.0; p];
        let mut active = Vec::new();
        for c in 1..p {
            let col = || (0..n).map(|r| design.data[r * p + c]);
            let mean = fsum(col()) / n as f64;
            let var = fsum(col().map(|x| (x - mean) * (x - mean))) / n as f64;
            let sd = var.sqrt();
            if !mean.is_finite() || !sd.is_finite() {
                return Err(Error::NonFinite(format!("design column {c}")));
            }
            means[c] = mean;
            scales[c] = sd;
            if sd > 1e-12 * (1.0 + mean.abs()) {
                active.push(c);
            }
        }
        let q = active.len();
        let mut diagnostics = FitDiagnostics {
            condition: 1.0,
            ridge: false,
            active_columns: q + 1,
            collinear_dropped: 0,
        };
        if q == 0 {
            return Ok(Self {
                design,
                means,
                scales,
                active,
                factor: None,
                diagnostics,
            });
        }
        let mut acc = vec![ExactSum::new(); q * (q + 1) / 2];
        let mut z = vec![0.0; q];
        for r in 0..n {
            let row = design.row(r);
            for (a, &c) in active.iter().enumerate() {
                z[a] = (row[c] - means[c]) / scales[c];
            }
            let mut idx = 0;
            for a in 0..q {
                for b in 0..=a {
                    acc[idx].add(z[a] * z[b]);
                    idx += 1;
                }
            }
        }
        let mut full = DMatrix::<f64>::zeros(q, q);
        let mut idx = 0;
        for a in 0..q {
            for b in 0..=a {
                let v = acc[idx].value() / n as f64;
                full[(a, b)] = v;
                full[(b, a)] = v;
                idx += 1;
            }
        }
        // Keep columns in order while each adds a direction not spanned by the
        // columns kept before it.
        let keep = independent_columns(&full);
        diagnostics.collinear_dropped = q - keep.len();
        let active: Vec<usize> = keep.iter().map(|&a| active[a]).collect();
        let q = active.len();
        diagnostics.active_columns = q + 1;
        let gram = DMatrix::<f64>::from_fn(q, q, |a, b| full[(keep[a], keep[b])]);
        let mut gram = gram;
        let eig = SymmetricEigen::new(gram.clone());
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        diagnostics.condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let mut factor = if diagnostics.condition <= MAX_CONDITION {
            gram.clone().cholesky()
        } else {
            None
        };
        if factor.is_none() {
            diagnostics.ridge = true;
            for a in 0..q {
                gram[(a, a)] += RIDGE;
            }
            factor = gram.cholesky();
            if factor.is_none() {
                return Err(Error::NonFinite("regression Gram matrix".into()));
            }
        }
        Ok(Self {
            design,
            means,
            scales,
            active,
            factor,
            diagnostics,
        })
    }

    /// Least-squares fit of `target` (one value per design row).
    pub fn fit(&self, target: &[f64]) -> Result<LinearFit> {
        let n = self.design.n_rows;
        let p = self.design.n_cols;
        if target.len() != n {
            return Err(Error::Dimension(format!("{} targets for {n} rows", target.len())));
        }
        let t_mean = fsum(target.iter().copied()) / n as f64;
        if !t_mean.is_finite() {
            return Err(Error::NonFinite("regression target".into()));
        }
        let mut coef = vec![0.0; p];
        coef[0] = t_mean;
        let Some(factor) = &self.factor else {
            return Ok(LinearFit { coef });
        };
        let q = self.active.len();
        let mut acc = vec![ExactSum::new(); q];
        for (r, &t) in target.iter().enumerate() {
            let row = self.design.row(r);
            let dt = t - t_mean;
            for (a, &c) in self.active.iter().enumerate() {
                acc[a].add((row[c] - self.means[c]) / self.scales[c] * dt);
            }
        }
        let rhs = DVector::from_iterator(q, acc.iter().map(|a| a.value() / n as f64));
        let gamma = factor.solve(&rhs);
        for (a, &c) in self.active.iter().enumerate() {
            let b = gamma[a] / self.scales[c];
            coef[c] = b;
            coef[0] -= b * self.means[c];
        }
        Ok(LinearFit { coef })
    }

    /// Fitted values on the design rows.
    pub fn fitted(&self, fit: &LinearFit) -> Vec<f64> {
        (0..self.design.n_rows).map(|r| fit.predict(self.design.row(r))).collect()
    }
}

/// Relative Schur-complement threshold below which a column counts as dependent.
const DEPENDENCE_TOL: f64 = 1e-9;

/// Indices of a maximal independent prefix-greedy subset of the Gram columns.
fn independent_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let q = gram.nrows();
    let mut keep: Vec<usize> = Vec::new();
    // Rows of the Cholesky factor of the kept sub-Gram.
    let mut l: Vec<Vec<f64>> = Vec::new();
    for c in 0..q {
        let mut row = Vec::with_capacity(keep.len() + 1);
        for (a, &ka) in keep.iter().enumerate() {
            let dot: f64 = (0..a).map(|b| l[a][b] * row[b]).sum();
            row.push((gram[(ka, c)] - dot) / l[a][a]);
        }
        let d = gram[(c, c)] - row.iter().map(|x| x * x).sum::<f64>();
        if d > DEPENDENCE_TOL * gram[(c, c)] {
            row.push(d.sqrt());
            l.push(row);
            keep.push(c);
        }
    }
    keep
}
