//! Wald F tests on the mean coefficients, AIC/BIC grids over pairs of
//! correlation families, and backward covariate elimination.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::corr::{CorrFamily, CorrSpec};
use crate::data::Dataset;
use crate::error::{KronError, Result};
use crate::fit::{fit_ml, FitOptions, FitResult};

/// Absolute AIC difference treated as a tie.
const AIC_TIE: f64 = 1e-9;

/// Upper tail `P(F > x)` of the F distribution with `(d1, d2)` degrees of
/// freedom.
pub fn f_upper_tail(x: f64, d1: f64, d2: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    beta_reg(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * x)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaldTest {
    pub contrast: DMatrix<f64>,
    /// `C beta_hat`
    pub estimate: DVector<f64>,
    pub statistic: f64,
    pub num_df: usize,
    pub den_df: f64,
    pub p_value: f64,
}

fn matrix_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = top * 1e-10 * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&v| v > tol).count()
}

/// Residual-approximation F test of `C beta = 0` with `n - q` denominator
/// degrees of freedom.
pub fn wald_f_test(fit: &FitResult, contrast: &DMatrix<f64>) -> Result<WaldTest> {
    let q = fit.beta_hat.len();
    let c = contrast.nrows();
    if contrast.ncols() != q {
        return Err(KronError::Dimension(format!("contrast has {} columns, model has {q}", contrast.ncols())));
    }
    if c == 0 || c > q {
        return Err(KronError::Input(format!("contrast must have between 1 and {q} rows, got {c}")));
    }
    let rank = matrix_rank(contrast);
    if rank < c {
        return Err(KronError::RankDeficient { rank, q: c });
    }
    let v = fit.beta_vcov();
    if v.iter().any(|e| !e.is_finite()) {
        return Err(KronError::Evaluation("coefficient covariance is unavailable".into()));
    }
    let estimate = contrast * &fit.beta_hat;
    let middle = contrast * v * contrast.transpose();
    let chol = Cholesky::new(middle)
        .ok_or_else(|| KronError::Evaluation("contrast covariance is not positive definite".into()))?;
    let statistic = (estimate.dot(&chol.solve(&estimate)) / c as f64).max(0.0);
    let den_df = fit.n as f64 - q as f64;
    if den_df <= 0.0 {
        return Err(KronError::Input(format!("no residual degrees of freedom (n = {}, q = {q})", fit.n)));
    }
    Ok(WaldTest {
        contrast: contrast.clone(),
        estimate,
        statistic,
        num_df: c,
        den_df,
        p_value: f_upper_tail(statistic, c as f64, den_df),
    })
}

/// Contrast rows selecting the given coefficient columns.
pub fn selection_contrast(q: usize, columns: &[usize]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(columns.len(), q);
    for (r, &c) in columns.iter().enumerate() {
        m[(r, c)] = 1.0;
    }
    m
}

/// Variance of the profiled `sigma^2`, `2 sigma^4 / n`.
pub fn sigma2_variance(fit: &FitResult) -> f64 {
    2.0 * fit.sigma2.value * fit.sigma2.value / fit.n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub family1: CorrFamily,
    pub family2: CorrFamily,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub k: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionGrid {
    pub rows: Vec<CorrFamily>,
    pub cols: Vec<CorrFamily>,
    /// NaN where the cell failed.
    pub aic: DMatrix<f64>,
    pub bic: DMatrix<f64>,
    /// Row-major.
    pub cells: Vec<GridCell>,
    /// Minimum-AIC converged cell.
    pub best: Option<(CorrFamily, CorrFamily)>,
}

impl SelectionGrid {
    pub fn cell(&self, f1: CorrFamily, f2: CorrFamily) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.family1 == f1 && c.family2 == f2)
    }
}

/// Fits every family pair on the same data and mean model.
pub fn structure_grid(
    ds: &Dataset,
    families1: &[CorrFamily],
    families2: &[CorrFamily],
    opts: &FitOptions,
) -> Result<SelectionGrid> {
    if families1.is_empty() || families2.is_empty() {
        return Err(KronError::Input("structure grid needs at least one family per factor".into()));
    }
    let pairs: Vec<(CorrFamily, CorrFamily)> =
        families1.iter().flat_map(|&a| families2.iter().map(move |&b| (a, b))).collect();
    let cells: Vec<GridCell> = pairs
        .par_iter()
        .map(|&(f1, f2)| {
            let s1 = CorrSpec { family: f1, params: vec![] };
            let s2 = CorrSpec { family: f2, params: vec![] };
            match fit_ml(ds, &s1, &s2, opts) {
                Ok(fit) => GridCell {
                    family1: f1,
                    family2: f2,
                    loglik: fit.loglik,
                    aic: fit.aic,
                    bic: fit.bic,
                    k: fit.k,
                    converged: fit.converged,
                    error: None,
                },
                Err(e) => GridCell {
                    family1: f1,
                    family2: f2,
                    loglik: f64::NAN,
                    aic: f64::NAN,
                    bic: f64::NAN,
                    k: ds.q + f1.n_params() + f2.n_params() + 1,
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let (r, c) = (families1.len(), families2.len());
    let aic = DMatrix::from_fn(r, c, |i, j| cells[i * c + j].aic);
    let bic = DMatrix::from_fn(r, c, |i, j| cells[i * c + j].bic);
    let min_aic = cells
        .iter()
        .filter(|x| x.converged && x.aic.is_finite())
        .map(|x| x.aic)
        .fold(f64::INFINITY, f64::min);
    let best = cells
        .iter()
        .enumerate()
        .filter(|(_, x)| x.converged && x.aic.is_finite() && x.aic <= min_aic + AIC_TIE)
        .min_by_key(|(i, x)| (x.k, *i))
        .map(|(_, x)| (x.family1, x.family2));
    Ok(SelectionGrid { rows: families1.to_vec(), cols: families2.to_vec(), aic, bic, cells, best })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermTest {
    pub term: String,
    pub statistic: f64,
    pub num_df: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemovalStep {
    pub step: usize,
    pub removed: TermTest,
    /// Tests of every term in the model at this step.
    pub tests: Vec<TermTest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSelection {
    pub steps: Vec<RemovalStep>,
    pub retained: Vec<String>,
    /// Tests of the retained terms in the final model.
    pub final_tests: Vec<TermTest>,
    pub final_fit: FitResult,
}

fn term_tests(ds: &Dataset, fit: &FitResult) -> Result<Vec<TermTest>> {
    ds.terms
        .iter()
        .map(|t| {
            let w = wald_f_test(fit, &selection_contrast(ds.q, &t.columns))?;
            Ok(TermTest { term: t.name.clone(), statistic: w.statistic, num_df: w.num_df, p_value: w.p_value })
        })
        .collect()
}

/// Backward elimination: refit, test every remaining term jointly over its
/// columns, drop the largest p-value above `alpha`, repeat. Columns outside
/// all terms (the intercept) are always kept.
pub fn backward_select(
    ds: &Dataset,
    terms: &[String],
    spec1: &CorrSpec,
    spec2: &CorrSpec,
    alpha: f64,
    opts: &FitOptions,
) -> Result<BackwardSelection> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(KronError::Input(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut current: Vec<String> = terms.to_vec();
    let mut steps = Vec::new();
    loop {
        let sub = ds.select_terms(&current)?;
        let fit = fit_ml(&sub, spec1, spec2, opts)?;
        let tests = term_tests(&sub, &fit)?;
        let worst = tests
            .iter()
            .enumerate()
            .filter(|(_, t)| t.p_value > alpha)
            .max_by(|a, b| a.1.p_value.total_cmp(&b.1.p_value).then(b.0.cmp(&a.0)))
            .map(|(_, t)| t.clone());
        match worst {
            Some(removed) => {
                current.retain(|n| n != &removed.term);
                steps.push(RemovalStep { step: steps.len() + 1, removed, tests });
            }
            None => {
                let retained = sub.terms.iter().map(|t| t.name.clone()).collect();
                return Ok(BackwardSelection { steps, retained, final_tests: tests, final_fit: fit });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn f_tail_closed_forms() {
        // F(2, d2): P(F > x) = (1 + 2x/d2)^(-d2/2)
        for &(x, d2) in &[(0.5, 10.0), (3.0, 7.0), (1.2, 100.0)] {
            let exact = (1.0f64 + 2.0 * x / d2).powf(-d2 / 2.0);
            assert_abs_diff_eq!(f_upper_tail(x, 2.0, d2), exact, epsilon = 1e-12);
        }
        // F(1, d2) is a squared t; P(T^2 > 1) with d2 = 1 (Cauchy) is 1/2.
        assert_abs_diff_eq!(f_upper_tail(1.0, 1.0, 1.0), 0.5, epsilon = 1e-12);
        assert_eq!(f_upper_tail(0.0, 3.0, 10.0), 1.0);
        assert_eq!(f_upper_tail(f64::INFINITY, 3.0, 10.0), 0.0);
    }

    #[test]
    fn selection_contrast_picks_columns() {
        let c = selection_contrast(4, &[1, 3]);
        assert_eq!(c.nrows(), 2);
        assert_eq!(c[(0, 1)], 1.0);
        assert_eq!(c[(1, 3)], 1.0);
        assert_eq!(c.sum(), 2.0);
    }

    #[test]
    fn rank_detection() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert_eq!(matrix_rank(&m), 1);
        assert_eq!(matrix_rank(&DMatrix::identity(3, 3)), 3);
    }
}
