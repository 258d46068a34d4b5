//! Maximum-likelihood fitting: the profile log-likelihood is maximized over
//! the mean coefficients and both factors' correlation parameters by a
//! box-constrained, ridge-modified Newton-Raphson iteration.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corr::{CorrFamily, CorrSpec, DistanceConstants};
use crate::data::{validate, Dataset, Patterns};
use crate::error::{KronError, Result};
use crate::likelihood::{
    fd_hessian, fd_hessian_from_gradient, profile_gradient, profile_loglik, profile_sigma2,
    profile_value_and_gradient, SigmaSqEstimate, ThetaVector,
};

/// Upper bound for the DE shape parameter.
const NU_CAP: f64 = 50.0;
/// Upper bound for range parameters, as a multiple of the largest distance.
const RANGE_CAP: f64 = 1e4;
/// Relative slack under which two profile values are considered equal.
const VALUE_ROUNDOFF: f64 = 1e-12;
/// Relative distance under which an iterate is moved onto a bound.
const BOUND_SNAP: f64 = 1e-12;
/// Ridge escalations tried after a failed line search.
const RIDGE_ESCALATIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative change in the profile log-likelihood.
    pub tol_loglik: f64,
    /// Max-norm of the projected gradient.
    pub tol_grad: f64,
    pub step_halvings: usize,
    pub bounds_margin: f64,
    /// LEAR decay cap as a multiple of `d_max - d_min`.
    pub delta_cap: f64,
    /// Diagnostic threshold on rho.
    pub small_rho: f64,
    /// Diagnostic threshold on the scaled LEAR decay.
    pub fast_decay: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol_loglik: 1e-8,
            tol_grad: 1e-6,
            step_halvings: 20,
            bounds_margin: 1e-6,
            delta_cap: 50.0,
            small_rho: 0.2,
            fast_decay: 1.0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("tol_loglik", self.tol_loglik),
            ("tol_grad", self.tol_grad),
            ("bounds_margin", self.bounds_margin),
            ("delta_cap", self.delta_cap),
            ("small_rho", self.small_rho),
            ("fast_decay", self.fast_decay),
        ];
        for (name, v) in reals {
            if !(v > 0.0) || !v.is_finite() {
                return Err(KronError::Input(format!("fit option {name} must be positive, got {v}")));
            }
        }
        if self.max_iter == 0 || self.step_halvings == 0 {
            return Err(KronError::Input("max_iter and step_halvings must be positive".into()));
        }
        if self.bounds_margin >= 0.5 {
            return Err(KronError::Input("bounds_margin must be below 0.5".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loglik: f64,
    /// Max-norm of the projected gradient.
    pub max_grad: f64,
    /// Accepted step length (0 on the starting row).
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: ThetaVector,
    pub beta_hat: DVector<f64>,
    pub tau_hat: (CorrSpec, CorrSpec),
    pub sigma2: SigmaSqEstimate,
    pub loglik: f64,
    /// Profile gradient at the returned iterate, flattened order.
    pub gradient: Vec<f64>,
    /// Inverse of the negated profile Hessian over `(beta, tau)`.
    pub vcov: DMatrix<f64>,
    pub aic: f64,
    pub bic: f64,
    /// Parameter count used by the information criteria.
    pub k: usize,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
    pub warnings: Vec<String>,
    /// `delta / (d_max - d_min)` for a LEAR factor 1.
    pub scaled_decay1: Option<f64>,
    pub scaled_decay2: Option<f64>,
    pub param_names: Vec<String>,
    /// Box `(lo, hi)` per parameter; infinite for the mean coefficients.
    pub bounds: Vec<(f64, f64)>,
    pub n: usize,
    pub constants1: DistanceConstants,
    pub constants2: DistanceConstants,
}

impl FitResult {
    /// Standard errors from the vcov diagonal; NaN where the diagonal is not
    /// positive.
    pub fn standard_errors(&self) -> Vec<f64> {
        self.vcov.diagonal().iter().map(|&v| if v > 0.0 { v.sqrt() } else { f64::NAN }).collect()
    }

    /// The mean-coefficient block of the vcov.
    pub fn beta_vcov(&self) -> DMatrix<f64> {
        let q = self.beta_hat.len();
        self.vcov.view((0, 0), (q, q)).into_owned()
    }

    pub fn n_corr_params(&self) -> usize {
        self.theta.n_corr_params()
    }
}

/// Ordinary least squares over the stacked design.
pub fn ols(ds: &Dataset) -> Result<DVector<f64>> {
    let q = ds.q;
    let mut xtx = DMatrix::zeros(q, q);
    let mut xty = DVector::zeros(q);
    for b in &ds.subjects {
        xtx += b.x.transpose() * &b.x;
        xty += b.x.transpose() * &b.y;
    }
    let scale = xtx.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let full_rank = Cholesky::new(xtx.clone()).filter(|c| {
        let l = c.l_dirty();
        (0..q).all(|j| l[(j, j)] * l[(j, j)] > 1e-10 * scale.max(f64::MIN_POSITIVE))
    });
    match full_rank {
        Some(c) => Ok(c.solve(&xty)),
        None => Err(KronError::RankDeficient { rank: validate(ds).rank.min(q.saturating_sub(1)), q }),
    }
}

/// Index pairs `(j, k)` with `k` the nearest other level to `j`.
fn nearest_pairs(d: &DMatrix<f64>) -> BTreeSet<(usize, usize)> {
    let m = d.nrows();
    let mut pairs = BTreeSet::new();
    for j in 0..m {
        let mut best: Option<(f64, usize)> = None;
        for k in (0..m).filter(|&k| k != j) {
            if best.map_or(true, |(bd, _)| d[(j, k)] < bd) {
                best = Some((d[(j, k)], k));
            }
        }
        if let Some((_, k)) = best {
            pairs.insert((j.min(k), j.max(k)));
        }
    }
    pairs
}

/// Pooled correlation of OLS residuals at nearest-neighbour pairs, per factor.
fn nearest_residual_corr(ds: &Dataset, beta: &DVector<f64>) -> (Option<f64>, Option<f64>) {
    let mut acc = [[0.0f64; 3]; 2];
    let mut push = |f: usize, a: f64, b: f64| {
        acc[f][0] += a * b;
        acc[f][1] += a * a;
        acc[f][2] += b * b;
    };
    for b in &ds.subjects {
        let r = &b.y - &b.x * beta;
        let s = b.s;
        for (j, k) in nearest_pairs(&b.dist1) {
            for l in 0..s {
                push(0, r[j * s + l], r[k * s + l]);
            }
        }
        for (a, c) in nearest_pairs(&b.dist2) {
            for j in 0..b.t {
                push(1, r[j * s + a], r[j * s + c]);
            }
        }
    }
    let corr = |a: [f64; 3]| {
        let v = a[0] / (a[1] * a[2]).sqrt();
        v.is_finite().then_some(v)
    };
    (corr(acc[0]), corr(acc[1]))
}

/// Median off-diagonal distance, each distinct matrix weighted by the number
/// of subjects sharing it. `None` when there are no pairs.
fn median_distance(p: &Patterns) -> Option<f64> {
    let mut counts = vec![0usize; p.unique.len()];
    for &i in &p.of_subject {
        counts[i] += 1;
    }
    let mut vals: Vec<(f64, usize)> = Vec::new();
    for (m, &c) in p.unique.iter().zip(&counts) {
        for j in 0..m.nrows() {
            for k in 0..j {
                vals.push((m[(j, k)], c));
            }
        }
    }
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: usize = vals.iter().map(|v| v.1).sum();
    let mut seen = 0;
    for (v, c) in &vals {
        seen += c;
        if 2 * seen >= total {
            return Some(*v);
        }
    }
    vals.last().map(|v| v.0)
}

fn spherical_at(d: f64, phi: f64) -> f64 {
    if d <= phi {
        1.0 - 1.5 * d / phi + 0.5 * (d / phi).powi(3)
    } else {
        0.0
    }
}

/// Starting parameters for one factor: rho-type families take `rho0`, range
/// families are chosen so the correlation at `dbar` equals `rho0`.
fn family_start(fam: CorrFamily, rho0: f64, c: &DistanceConstants, dbar: f64) -> Vec<f64> {
    match fam {
        CorrFamily::Lear => vec![rho0, c.span()],
        CorrFamily::Ar1 | CorrFamily::Cs => vec![rho0],
        CorrFamily::De => vec![rho0, 1.0],
        CorrFamily::Exponential => vec![-dbar / rho0.ln()],
        CorrFamily::Gaussian => vec![dbar / (-rho0.ln()).sqrt()],
        CorrFamily::Linear => vec![(1.0 - rho0) / dbar],
        CorrFamily::Spherical => {
            let mut lo = dbar;
            let mut hi = 2.0 * dbar;
            while spherical_at(dbar, hi) < rho0 {
                lo = hi;
                hi *= 2.0;
            }
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if spherical_at(dbar, mid) < rho0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            vec![0.5 * (lo + hi)]
        }
        CorrFamily::Independence => vec![],
    }
}

/// OLS coefficients plus moment-based correlation parameters.
pub fn starting_values(ds: &Dataset, fam1: CorrFamily, fam2: CorrFamily) -> Result<ThetaVector> {
    let beta = ols(ds)?;
    let (c1, c2) = nearest_residual_corr(ds, &beta);
    let clamp = |c: Option<f64>| c.unwrap_or(0.0).clamp(0.05, 0.95);
    let d1 = median_distance(&ds.patterns1).filter(|d| *d > 0.0).unwrap_or(1.0);
    let d2 = median_distance(&ds.patterns2).filter(|d| *d > 0.0).unwrap_or(1.0);
    let tau1 = CorrSpec { family: fam1, params: family_start(fam1, clamp(c1), &ds.constants1, d1) };
    let tau2 = CorrSpec { family: fam2, params: family_start(fam2, clamp(c2), &ds.constants2, d2) };
    Ok(ThetaVector::new(beta, tau1, tau2))
}

/// Box and finite-difference scale for each correlation parameter.
fn corr_box(fam: CorrFamily, c: &DistanceConstants, opts: &FitOptions) -> Vec<(f64, f64, f64)> {
    let m = opts.bounds_margin;
    let rho = (m, 1.0 - m, 0.1);
    let d_scale = c.d_max.max(m);
    match fam {
        CorrFamily::Lear => vec![rho, (0.0, opts.delta_cap * c.span(), 0.1 * c.span().max(m))],
        CorrFamily::Ar1 | CorrFamily::Cs => vec![rho],
        CorrFamily::De => vec![rho, (0.0, NU_CAP, 0.1)],
        CorrFamily::Exponential | CorrFamily::Gaussian | CorrFamily::Spherical => {
            vec![(m, RANGE_CAP * d_scale, 0.1 * d_scale)]
        }
        CorrFamily::Linear => {
            let inv = 1.0 / c.d_min.max(m).min(d_scale);
            vec![(m, RANGE_CAP * inv, 0.1 * inv)]
        }
        CorrFamily::Independence => vec![],
    }
}

struct Problem<'a> {
    ds: &'a Dataset,
    template: ThetaVector,
    lo: Vec<f64>,
    hi: Vec<f64>,
    scale: Vec<f64>,
}

impl Problem<'_> {
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        profile_value_and_gradient(self.ds, &self.template.with_flat(x))
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let grad = |y: &[f64]| profile_gradient(self.ds, &self.template.with_flat(y));
        match fd_hessian_from_gradient(grad, x, &self.scale, &self.lo, &self.hi) {
            Ok(h) if h.iter().all(|v| v.is_finite()) => Ok(h),
            first => {
                let value = |y: &[f64]| profile_loglik(self.ds, &self.template.with_flat(y));
                match fd_hessian(value, x, &self.scale) {
                    Ok(h) if h.iter().all(|v| v.is_finite()) => Ok(h),
                    Ok(_) => Err(KronError::Evaluation("Hessian has non-finite entries".into())),
                    Err(e) => Err(first.err().unwrap_or(e)),
                }
            }
        }
    }

    fn at_lo(&self, x: &[f64], j: usize) -> bool {
        x[j] <= self.lo[j] + BOUND_SNAP * self.lo[j].abs().max(1.0)
    }

    fn at_hi(&self, x: &[f64], j: usize) -> bool {
        x[j] >= self.hi[j] - BOUND_SNAP * self.hi[j].abs().max(1.0)
    }

    /// Moves coordinates within snapping distance of a bound onto it.
    fn snap(&self, x: &mut [f64]) {
        for j in 0..x.len() {
            x[j] = x[j].clamp(self.lo[j], self.hi[j]);
            if self.at_lo(x, j) {
                x[j] = self.lo[j];
            } else if self.at_hi(x, j) {
                x[j] = self.hi[j];
            }
        }
    }

    /// Whether coordinate `j` sits on a bound with the gradient pointing out.
    fn held(&self, x: &[f64], g: &[f64], j: usize) -> bool {
        (self.at_lo(x, j) && g[j] < 0.0) || (self.at_hi(x, j) && g[j] > 0.0)
    }

    fn projected_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        (0..x.len()).filter(|&j| !self.held(x, g, j)).map(|j| g[j].abs()).fold(0.0, f64::max)
    }
}

/// Solves `(-H_FF + lambda I) d = g_F`, raising `lambda` (from `1e-6`,
/// doubling) until the system is positive definite.
fn ridge_direction(h: &DMatrix<f64>, g: &[f64], free: &[usize], lambda: &mut f64) -> Option<DVector<f64>> {
    let k = free.len();
    let a = DMatrix::from_fn(k, k, |i, j| -h[(free[i], free[j])]);
    let rhs = DVector::from_fn(k, |i, _| g[free[i]]);
    for _ in 0..2100 {
        let mut shifted = a.clone();
        for i in 0..k {
            shifted[(i, i)] += *lambda;
        }
        if let Some(c) = Cholesky::new(shifted) {
            let l = c.l_dirty();
            if (0..k).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
                let d = c.solve(&rhs);
                if d.iter().all(|v| v.is_finite()) {
                    return Some(d);
                }
            }
        }
        *lambda = if *lambda == 0.0 { 1e-6 } else { 2.0 * *lambda };
        if !lambda.is_finite() {
            return None;
        }
    }
    None
}

/// Fits the model by maximizing the profile log-likelihood.
///
/// Families come from `spec1`/`spec2`; non-empty parameter lists are used as
/// starting values, empty ones are filled by [`starting_values`].
pub fn fit_ml(ds: &Dataset, spec1: &CorrSpec, spec2: &CorrSpec, opts: &FitOptions) -> Result<FitResult> {
    fit_ml_observed(ds, spec1, spec2, opts, &mut |_| {})
}

/// [`fit_ml`] that reports each trace row as it is produced.
pub fn fit_ml_observed(
    ds: &Dataset,
    spec1: &CorrSpec,
    spec2: &CorrSpec,
    opts: &FitOptions,
    observer: &mut dyn FnMut(&TraceEntry),
) -> Result<FitResult> {
    opts.validate()?;
    let mut start = starting_values(ds, spec1.family, spec2.family)?;
    for (given, slot) in [(spec1, &mut start.tau1), (spec2, &mut start.tau2)] {
        if !given.params.is_empty() {
            given.validate()?;
            slot.params = given.params.clone();
        }
    }

    let q = ds.q;
    let mut lo = vec![f64::NEG_INFINITY; q];
    let mut hi = vec![f64::INFINITY; q];
    let mut scale = vec![1.0; q];
    for (fam, c) in [(spec1.family, &ds.constants1), (spec2.family, &ds.constants2)] {
        for (l, h, s) in corr_box(fam, c, opts) {
            lo.push(l);
            hi.push(h);
            scale.push(s);
        }
    }
    let problem = Problem { ds, template: start.clone(), lo, hi, scale };
    let p = start.len();
    let mut x: Vec<f64> = start.flatten();
    problem.snap(&mut x);

    let (mut f, mut g) = problem.value_grad(&x)?;
    let mut pg = problem.projected_norm(&x, &g);
    let mut trace = vec![TraceEntry { iteration: 0, loglik: f, max_grad: pg, step: 0.0 }];
    observer(&trace[0]);
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut stalled = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let h = problem.hessian(&x)?;
        let mut free: Vec<usize> = (0..p).filter(|&j| !problem.held(&x, &g, j)).collect();
        if free.is_empty() {
            converged = true;
            break;
        }
        let mut lambda: f64 = 0.0;
        let mut accepted = None;
        for escalation in 0..=RIDGE_ESCALATIONS {
            if escalation > 0 {
                let diag = free.iter().map(|&j| h[(j, j)].abs()).fold(0.0, f64::max);
                lambda = (10.0 * lambda).max(1e-3 * diag).max(1e-6);
            }
            // Drop bound coordinates the direction would push further out.
            let d = loop {
                let Some(d) = ridge_direction(&h, &g, &free, &mut lambda) else {
                    return Err(KronError::NotPositiveDefinite {
                        what: "ridge-shifted Newton system".into(),
                        pivot: f64::NAN,
                    });
                };
                let blocked: Vec<usize> = free
                    .iter()
                    .enumerate()
                    .filter(|(i, &j)| {
                        (problem.at_lo(&x, j) && d[*i] < 0.0) || (problem.at_hi(&x, j) && d[*i] > 0.0)
                    })
                    .map(|(_, &j)| j)
                    .collect();
                if blocked.is_empty() {
                    break d;
                }
                free.retain(|j| !blocked.contains(j));
                if free.is_empty() {
                    break DVector::zeros(0);
                }
            };
            if free.is_empty() {
                break;
            }
            let mut alpha_max = f64::INFINITY;
            for (i, &j) in free.iter().enumerate() {
                if d[i] > 0.0 {
                    alpha_max = alpha_max.min((problem.hi[j] - x[j]) / d[i]);
                } else if d[i] < 0.0 {
                    alpha_max = alpha_max.min((problem.lo[j] - x[j]) / d[i]);
                }
            }
            let mut alpha = alpha_max.min(1.0);
            for _ in 0..=opts.step_halvings {
                let mut xn = x.clone();
                for (i, &j) in free.iter().enumerate() {
                    xn[j] = x[j] + alpha * d[i];
                }
                problem.snap(&mut xn);
                if let Ok((fn_, gn)) = problem.value_grad(&xn) {
                    let pgn = problem.projected_norm(&xn, &gn);
                    let slack = VALUE_ROUNDOFF * f.abs().max(1.0);
                    if fn_ > f || (fn_ >= f - slack && pgn < pg) {
                        accepted = Some((xn, fn_, gn, pgn, alpha));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted.is_some() || pg <= opts.tol_grad {
                break;
            }
        }
        let Some((xn, fn_, gn, pgn, alpha)) = accepted else {
            if pg <= opts.tol_grad {
                converged = true;
            } else {
                stalled = true;
            }
            break;
        };
        let rel = (fn_ - f).abs() / fn_.abs().max(1.0);
        x = xn;
        f = fn_;
        g = gn;
        pg = pgn;
        let entry = TraceEntry { iteration: iterations, loglik: f, max_grad: pg, step: alpha };
        observer(&entry);
        trace.push(entry);
        if rel < opts.tol_loglik && pg < opts.tol_grad {
            converged = true;
            break;
        }
    }
    if stalled {
        warnings.push(format!(
            "line search failed at iteration {iterations}: projected gradient {pg:.3e} above tolerance"
        ));
    } else if !converged {
        warnings.push(format!("no convergence within {} iterations", opts.max_iter));
    }

    let theta = problem.template.with_flat(&x);
    let h = problem.hessian(&x)?;
    let vcov = match (-&h).try_inverse() {
        Some(v) if v.iter().all(|e| e.is_finite()) => v,
        _ => {
            warnings.push("negated Hessian is singular; covariance matrix unavailable".into());
            DMatrix::from_element(p, p, f64::NAN)
        }
    };
    let sigma2 = SigmaSqEstimate::new(profile_sigma2(ds, &theta)?, ds.n);
    let k = q + theta.n_corr_params() + 1;
    let n = ds.n;
    let scaled = |spec: &CorrSpec, c: &DistanceConstants| {
        (spec.family == CorrFamily::Lear).then(|| spec.params[1] / c.span())
    };
    for (idx, spec, c) in [(1, &theta.tau1, &ds.constants1), (2, &theta.tau2, &ds.constants2)] {
        if spec.family == CorrFamily::Lear && spec.params[1] >= opts.delta_cap * c.span() {
            warnings.push(format!(
                "factor {idx} delta reached its cap of {} x (d_max - d_min)",
                opts.delta_cap
            ));
        }
    }
    let mut result = FitResult {
        beta_hat: theta.beta.clone(),
        tau_hat: (theta.tau1.clone(), theta.tau2.clone()),
        sigma2,
        loglik: f,
        gradient: g,
        vcov,
        aic: -2.0 * f + 2.0 * k as f64,
        bic: -2.0 * f + k as f64 * (n as f64).ln(),
        k,
        converged,
        iterations,
        trace,
        warnings,
        scaled_decay1: scaled(&theta.tau1, &ds.constants1),
        scaled_decay2: scaled(&theta.tau2, &ds.constants2),
        param_names: theta.param_names(&ds.covariate_names),
        bounds: problem.lo.iter().copied().zip(problem.hi.iter().copied()).collect(),
        n,
        constants1: ds.constants1,
        constants2: ds.constants2,
        theta,
    };
    let report = negative_variance_diagnostic(&result, opts);
    for flag in &report.flags {
        result.warnings.push(format!(
            "nonpositive variance {:.4e} for {} (factor {})",
            flag.variance, flag.parameter, flag.factor
        ));
    }
    for flag in &report.weak {
        result.warnings.push(format!(
            "standard error of {} (factor {}) exceeds the width of its admissible range",
            flag.parameter, flag.factor
        ));
    }
    for rec in &report.recommendations {
        result.warnings.push(rec.message.clone());
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceFlag {
    pub factor: usize,
    pub parameter: String,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub factor: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct VarianceReport {
    /// Nonpositive or non-finite variances.
    pub flags: Vec<VarianceFlag>,
    /// Positive variances whose square root exceeds the parameter's box width.
    pub weak: Vec<VarianceFlag>,
    pub recommendations: Vec<Recommendation>,
}

impl VarianceReport {
    pub fn is_empty(&self) -> bool {
        self.flags.is_empty() && self.weak.is_empty() && self.recommendations.is_empty()
    }

    pub fn flags_factor(&self, factor: usize) -> bool {
        self.flags.iter().any(|f| f.factor == factor)
    }
}

/// Flags nonpositive or non-finite vcov diagonal entries of correlation
/// parameters, separately lists finite ones wider than their box, and
/// recommends an independence refit for a factor with either kind of entry
/// whose rho is below `opts.small_rho` and, for LEAR, whose scaled decay
/// exceeds `opts.fast_decay`.
pub fn negative_variance_diagnostic(result: &FitResult, opts: &FitOptions) -> VarianceReport {
    let q = result.beta_hat.len();
    let p1 = result.tau_hat.0.params.len();
    let mut report = VarianceReport::default();
    for idx in q..result.vcov.nrows() {
        let v = result.vcov[(idx, idx)];
        let flag = VarianceFlag {
            factor: if idx < q + p1 { 1 } else { 2 },
            parameter: result.param_names[idx].clone(),
            variance: v,
        };
        let (lo, hi) = result.bounds[idx];
        if !(v > 0.0) || !v.is_finite() {
            report.flags.push(flag);
        } else if v.sqrt() > hi - lo {
            report.weak.push(flag);
        }
    }
    for (factor, spec, scaled) in
        [(1, &result.tau_hat.0, result.scaled_decay1), (2, &result.tau_hat.1, result.scaled_decay2)]
    {
        if !report.flags_factor(factor) && !report.weak.iter().any(|f| f.factor == factor) {
            continue;
        }
        let has_rho = matches!(spec.family, CorrFamily::Lear | CorrFamily::Ar1 | CorrFamily::De | CorrFamily::Cs);
        if !has_rho || spec.params[0] >= opts.small_rho {
            continue;
        }
        if spec.family == CorrFamily::Lear && !scaled.is_some_and(|s| s > opts.fast_decay) {
            continue;
        }
        report.recommendations.push(Recommendation {
            factor,
            message: format!(
                "factor {factor}: rho {:.4} is small with fast decay; refit this factor as independence",
                spec.params[0]
            ),
        });
    }
    report
}
