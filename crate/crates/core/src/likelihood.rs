//! Gaussian log-likelihood with separable within-subject correlation,
//! the profile log-likelihood with the common variance concentrated out,
//! its analytic gradient, and finite-difference Hessians.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::corr::{factor_matrix_derivs, fill_factor_matrix, CorrFamily, CorrSpec, DistanceConstants};
use crate::data::{Dataset, Patterns};
use crate::error::{KronError, Result};
use crate::kron::checked_cholesky;

/// Subject count from which per-subject terms are computed on the rayon pool.
const PARALLEL_SUBJECTS: usize = 64;

/// Floor below which the average weighted residual square counts as zero.
const SIGMA2_FLOOR: f64 = 1e-300;

/// Mean-model coefficients plus both factor correlation specifications.
///
/// Flattened order: `beta[0..q]`, then factor-1 parameters, then factor-2
/// parameters, each in [`CorrFamily::param_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub beta: DVector<f64>,
    pub tau1: CorrSpec,
    pub tau2: CorrSpec,
}

impl ThetaVector {
    pub fn new(beta: DVector<f64>, tau1: CorrSpec, tau2: CorrSpec) -> Self {
        Self { beta, tau1, tau2 }
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.tau1.params.len() + self.tau2.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_corr_params(&self) -> usize {
        self.tau1.params.len() + self.tau2.params.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.beta.iter().copied().collect();
        v.extend(&self.tau1.params);
        v.extend(&self.tau2.params);
        v
    }

    /// Same families, parameters taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> ThetaVector {
        let q = self.beta.len();
        let p1 = self.tau1.params.len();
        ThetaVector {
            beta: DVector::from_column_slice(&flat[..q]),
            tau1: CorrSpec { family: self.tau1.family, params: flat[q..q + p1].to_vec() },
            tau2: CorrSpec { family: self.tau2.family, params: flat[q + p1..].to_vec() },
        }
    }

    /// Labels in flattened order, e.g. `age`, `factor1.rho`, `factor2.delta`.
    pub fn param_names(&self, covariate_names: &[String]) -> Vec<String> {
        let mut names: Vec<String> = covariate_names.to_vec();
        for (k, spec) in [(1, &self.tau1), (2, &self.tau2)] {
            names.extend(spec.family.param_names().iter().map(|p| format!("factor{k}.{p}")));
        }
        names
    }

    fn check(&self, ds: &Dataset) -> Result<()> {
        if self.beta.len() != ds.q {
            return Err(KronError::Dimension(format!(
                "beta has length {}, design has {} columns",
                self.beta.len(),
                ds.q
            )));
        }
        self.tau1.validate()?;
        self.tau2.validate()?;
        if self.tau1.family == CorrFamily::Lear && ds.patterns1.unique.iter().any(|d| d.nrows() > 1) {
            ds.constants1.require_span(1)?;
        }
        if self.tau2.family == CorrFamily::Lear && ds.patterns2.unique.iter().any(|d| d.nrows() > 1) {
            ds.constants2.require_span(2)?;
        }
        Ok(())
    }
}

/// Profiled variance estimate with its variance `2 value^2 / n`, which treats
/// the mean and correlation parameters as known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSqEstimate {
    pub value: f64,
    pub variance: f64,
}

impl SigmaSqEstimate {
    pub fn new(value: f64, n: usize) -> Self {
        Self { value, variance: 2.0 * value * value / n as f64 }
    }

    pub fn se(&self) -> f64 {
        self.variance.sqrt()
    }
}

struct FactorEval {
    logdet: f64,
    mat: DMatrix<f64>,
    inv: DMatrix<f64>,
    derivs: Vec<DMatrix<f64>>,
    /// `tr(M^-1 dM/dtau_k)`
    tr_inv_deriv: Vec<f64>,
}

fn factor_evals(
    ds: &Dataset,
    patterns: &Patterns,
    spec: &CorrSpec,
    c: &DistanceConstants,
    factor: usize,
    want_derivs: bool,
) -> Result<Vec<FactorEval>> {
    patterns
        .unique
        .iter()
        .enumerate()
        .map(|(pid, dist)| {
            let mat = fill_factor_matrix(spec, dist, c);
            let chol = checked_cholesky(&mat, &format!("factor {factor} ({})", spec.family)).map_err(|e| {
                let sid = patterns
                    .of_subject
                    .iter()
                    .position(|&p| p == pid)
                    .map(|i| ds.subjects[i].subject_id.as_str())
                    .unwrap_or("?");
                e.in_context(&format!("subject '{sid}'"))
            })?;
            let l = chol.l_dirty();
            let logdet = (0..l.nrows()).map(|j| 2.0 * l[(j, j)].ln()).sum();
            let inv = chol.inverse();
            let (derivs, tr_inv_deriv) = if want_derivs {
                let derivs = factor_matrix_derivs(spec, dist, c);
                let tr = derivs.iter().map(|dm| inv.component_mul(dm).sum()).collect();
                (derivs, tr)
            } else {
                (Vec::new(), Vec::new())
            };
            Ok(FactorEval { logdet, mat, inv, derivs, tr_inv_deriv })
        })
        .collect()
}

struct SubjectTerm {
    quad: f64,
    xtw: DVector<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

/// Log-determinant sum, weighted residual sum of squares and (optionally)
/// the raw gradient pieces, accumulated over subjects in id order.
pub(crate) struct Accumulated {
    pub logdet: f64,
    pub quad: f64,
    pub xtw: DVector<f64>,
    pub trace1: Vec<f64>,
    pub trace2: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

pub(crate) fn accumulate(ds: &Dataset, theta: &ThetaVector, want_grad: bool) -> Result<Accumulated> {
    theta.check(ds)?;
    let f1 = factor_evals(ds, &ds.patterns1, &theta.tau1, &ds.constants1, 1, want_grad)?;
    let f2 = factor_evals(ds, &ds.patterns2, &theta.tau2, &ds.constants2, 2, want_grad)?;
    let p1 = theta.tau1.params.len();
    let p2 = theta.tau2.params.len();

    let term = |i: usize| -> SubjectTerm {
        let b = &ds.subjects[i];
        let g = &f1[ds.patterns1.of_subject[i]];
        let o = &f2[ds.patterns2.of_subject[i]];
        let r = &b.y - &b.x * &theta.beta;
        let rm = DMatrix::from_column_slice(b.s, b.t, r.as_slice());
        let w = &o.inv * &rm * &g.inv;
        let quad = w.as_slice().iter().zip(r.as_slice()).map(|(a, c)| a * c).sum();
        if !want_grad {
            return SubjectTerm { quad, xtw: DVector::zeros(0), g1: Vec::new(), g2: Vec::new() };
        }
        let xtw = b.x.tr_mul(&DVector::from_column_slice(w.as_slice()));
        let g1 = if p1 > 0 {
            let m = w.tr_mul(&o.mat) * &w;
            g.derivs.iter().map(|d| m.component_mul(d).sum()).collect()
        } else {
            Vec::new()
        };
        let g2 = if p2 > 0 {
            let m = &w * &g.mat * w.transpose();
            o.derivs.iter().map(|d| m.component_mul(d).sum()).collect()
        } else {
            Vec::new()
        };
        SubjectTerm { quad, xtw, g1, g2 }
    };
    let terms: Vec<SubjectTerm> = if ds.n_subjects() >= PARALLEL_SUBJECTS {
        (0..ds.n_subjects()).into_par_iter().map(term).collect()
    } else {
        (0..ds.n_subjects()).map(term).collect()
    };

    let mut acc = Accumulated {
        logdet: 0.0,
        quad: 0.0,
        xtw: DVector::zeros(if want_grad { ds.q } else { 0 }),
        trace1: vec![0.0; p1],
        trace2: vec![0.0; p2],
        g1: vec![0.0; p1],
        g2: vec![0.0; p2],
    };
    for (i, st) in terms.iter().enumerate() {
        let b = &ds.subjects[i];
        let g = &f1[ds.patterns1.of_subject[i]];
        let o = &f2[ds.patterns2.of_subject[i]];
        acc.logdet += b.s as f64 * g.logdet + b.t as f64 * o.logdet;
        acc.quad += st.quad;
        if want_grad {
            acc.xtw += &st.xtw;
            for k in 0..p1 {
                acc.trace1[k] += b.s as f64 * g.tr_inv_deriv[k];
                acc.g1[k] += st.g1[k];
            }
            for k in 0..p2 {
                acc.trace2[k] += b.t as f64 * o.tr_inv_deriv[k];
                acc.g2[k] += st.g2[k];
            }
        }
    }
    Ok(acc)
}

/// Full log-likelihood at a given common variance `sigma2`.
pub fn loglik(ds: &Dataset, theta: &ThetaVector, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(KronError::Domain(format!("sigma2 must be positive, got {sigma2}")));
    }
    let acc = accumulate(ds, theta, false)?;
    let n = ds.n as f64;
    Ok(-0.5 * n * (2.0 * PI).ln() - 0.5 * (n * sigma2.ln() + acc.logdet) - acc.quad / (2.0 * sigma2))
}

/// Maximizer of [`loglik`] over the common variance at fixed `theta`.
pub fn profile_sigma2(ds: &Dataset, theta: &ThetaVector) -> Result<f64> {
    let acc = accumulate(ds, theta, false)?;
    sigma2_from(acc.quad, ds.n)
}

fn sigma2_from(quad: f64, n: usize) -> Result<f64> {
    let v = quad / n as f64;
    if !(v > SIGMA2_FLOOR) {
        return Err(KronError::DegenerateResiduals(v));
    }
    Ok(v)
}

fn profile_value(acc: &Accumulated, n: usize) -> Result<f64> {
    sigma2_from(acc.quad, n)?;
    let nf = n as f64;
    Ok(-0.5 * acc.logdet - 0.5 * nf * acc.quad.ln() + 0.5 * nf * nf.ln() - 0.5 * nf - 0.5 * nf * (2.0 * PI).ln())
}

/// Profile log-likelihood; equals `loglik(theta, profile_sigma2(theta))`.
pub fn profile_loglik(ds: &Dataset, theta: &ThetaVector) -> Result<f64> {
    let acc = accumulate(ds, theta, false)?;
    profile_value(&acc, ds.n)
}

/// Profile log-likelihood together with its gradient in flattened order.
pub fn profile_value_and_gradient(ds: &Dataset, theta: &ThetaVector) -> Result<(f64, Vec<f64>)> {
    let acc = accumulate(ds, theta, true)?;
    let value = profile_value(&acc, ds.n)?;
    let n = ds.n as f64;
    let ratio = n / acc.quad;
    let mut grad: Vec<f64> = acc.xtw.iter().map(|v| ratio * v).collect();
    for k in 0..acc.g1.len() {
        grad.push(-0.5 * acc.trace1[k] + 0.5 * ratio * acc.g1[k]);
    }
    for k in 0..acc.g2.len() {
        grad.push(-0.5 * acc.trace2[k] + 0.5 * ratio * acc.g2[k]);
    }
    Ok((value, grad))
}

/// Analytic gradient of [`profile_loglik`] in flattened order.
pub fn profile_gradient(ds: &Dataset, theta: &ThetaVector) -> Result<Vec<f64>> {
    Ok(profile_value_and_gradient(ds, theta)?.1)
}

/// Machine epsilon to a fractional power times `max(|x|, scale)`.
fn step(x: f64, scale: f64, power: f64) -> f64 {
    f64::EPSILON.powf(power) * x.abs().max(scale)
}

/// Central-difference Hessian of a scalar function, symmetrized.
///
/// Step per coordinate is `eps^(1/4) * max(|theta_j|, scale_j)`. A failed
/// evaluation halves the steps of the coordinate pair once before the error
/// is returned.
pub fn fd_hessian<F>(f: F, theta0: &[f64], scale: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let p = theta0.len();
    if scale.len() != p {
        return Err(KronError::Dimension("scale length differs from theta length".into()));
    }
    let h: Vec<f64> = (0..p).map(|j| step(theta0[j], scale[j], 0.25)).collect();
    let f0 = f(theta0)?;
    let eval = |j: usize, k: usize, sj: f64, sk: f64, hj: f64, hk: f64| -> Result<f64> {
        let mut x = theta0.to_vec();
        x[j] += sj * hj;
        x[k] += sk * hk;
        f(&x)
    };
    let entry = |j: usize, k: usize, hj: f64, hk: f64| -> Result<f64> {
        if j == k {
            let up = eval(j, j, 1.0, 0.0, hj, 0.0)?;
            let dn = eval(j, j, -1.0, 0.0, hj, 0.0)?;
            Ok((up - 2.0 * f0 + dn) / (hj * hj))
        } else {
            let pp = eval(j, k, 1.0, 1.0, hj, hk)?;
            let pm = eval(j, k, 1.0, -1.0, hj, hk)?;
            let mp = eval(j, k, -1.0, 1.0, hj, hk)?;
            let mm = eval(j, k, -1.0, -1.0, hj, hk)?;
            Ok((pp - pm - mp + mm) / (4.0 * hj * hk))
        }
    };
    let mut hess = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in 0..=j {
            let v = match entry(j, k, h[j], h[k]) {
                Ok(v) => v,
                Err(_) => entry(j, k, 0.5 * h[j], 0.5 * h[k])?,
            };
            hess[(j, k)] = v;
            hess[(k, j)] = v;
        }
    }
    Ok(hess)
}

/// Hessian as the finite-difference Jacobian of an analytic gradient.
///
/// Steps are `eps^(1/3) * max(|theta_j|, scale_j)`; a coordinate whose central
/// stencil leaves `[lower_j, upper_j]` is differenced one-sidedly. A failed
/// evaluation halves that coordinate's step once. The result is symmetrized.
pub fn fd_hessian_from_gradient<G>(
    grad: G,
    theta0: &[f64],
    scale: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> Result<DMatrix<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let p = theta0.len();
    let mut g0: Option<Vec<f64>> = None;
    let mut jac = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut h = step(theta0[j], scale[j], 1.0 / 3.0);
        let mut column = None;
        for attempt in 0..2 {
            let up_ok = theta0[j] + h <= upper[j];
            let dn_ok = theta0[j] - h >= lower[j];
            let shifted = |s: f64| {
                let mut x = theta0.to_vec();
                x[j] += s;
                grad(&x)
            };
            let res: Result<Vec<f64>> = (|| {
                if up_ok && dn_ok {
                    let a = shifted(h)?;
                    let b = shifted(-h)?;
                    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect())
                } else {
                    if g0.is_none() {
                        g0 = Some(grad(theta0)?);
                    }
                    let base = g0.as_ref().expect("base gradient");
                    let s = if up_ok { h } else { -h };
                    let a = shifted(s)?;
                    Ok(a.iter().zip(base).map(|(x, y)| (x - y) / s).collect())
                }
            })();
            match res {
                Ok(c) => {
                    column = Some(c);
                    break;
                }
                Err(e) if attempt == 1 => return Err(e),
                Err(_) => h *= 0.5,
            }
        }
        let c = column.expect("column computed or error returned");
        for (i, v) in c.into_iter().enumerate() {
            jac[(i, j)] = v;
        }
    }
    Ok((&jac + jac.transpose()) * 0.5)
}
