//! Stationary correlation functions of distance and the factor correlation
//! matrices built from them.
//!
//! Every family is evaluated only off the diagonal; the diagonal of a factor
//! matrix is set to exactly one by branch.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KronError, Result};
use crate::kron::checked_cholesky;

/// Correlation structure family for one repeated factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrFamily {
    Lear,
    Ar1,
    De,
    Exponential,
    Gaussian,
    Linear,
    Spherical,
    Cs,
    Independence,
}

impl CorrFamily {
    pub const ALL: [CorrFamily; 9] = [
        CorrFamily::Lear,
        CorrFamily::Ar1,
        CorrFamily::De,
        CorrFamily::Exponential,
        CorrFamily::Gaussian,
        CorrFamily::Linear,
        CorrFamily::Spherical,
        CorrFamily::Cs,
        CorrFamily::Independence,
    ];

    pub fn n_params(self) -> usize {
        match self {
            CorrFamily::Lear | CorrFamily::De => 2,
            CorrFamily::Independence => 0,
            _ => 1,
        }
    }

    /// Parameter names in storage order.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            CorrFamily::Lear => &["rho", "delta"],
            CorrFamily::De => &["rho", "nu"],
            CorrFamily::Ar1 | CorrFamily::Cs => &["rho"],
            CorrFamily::Exponential
            | CorrFamily::Gaussian
            | CorrFamily::Linear
            | CorrFamily::Spherical => &["phi"],
            CorrFamily::Independence => &[],
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            CorrFamily::Lear => "lear",
            CorrFamily::Ar1 => "ar1",
            CorrFamily::De => "de",
            CorrFamily::Exponential => "exponential",
            CorrFamily::Gaussian => "gaussian",
            CorrFamily::Linear => "linear",
            CorrFamily::Spherical => "spherical",
            CorrFamily::Cs => "cs",
            CorrFamily::Independence => "independence",
        }
    }

    /// Families whose correlation is nonincreasing in distance with values in [0, 1].
    pub fn is_monotone(self) -> bool {
        !matches!(self, CorrFamily::Independence)
    }
}

impl fmt::Display for CorrFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CorrFamily {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        CorrFamily::ALL
            .iter()
            .copied()
            .find(|f| f.tag() == lower)
            .ok_or_else(|| KronError::Input(format!("unknown correlation family '{s}'")))
    }
}

/// Pooled minimum and maximum off-diagonal distance for one factor.
///
/// These are fixed once per dataset and never refit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceConstants {
    pub d_min: f64,
    pub d_max: f64,
}

impl DistanceConstants {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min.is_finite() && d_max.is_finite()) || d_min < 0.0 || d_max < d_min {
            return Err(KronError::Domain(format!(
                "distance constants require 0 <= d_min <= d_max, got ({d_min}, {d_max})"
            )));
        }
        Ok(Self { d_min, d_max })
    }

    /// Placeholder constants for a factor without any off-diagonal pairs.
    pub fn unit() -> Self {
        Self { d_min: 0.0, d_max: 1.0 }
    }

    pub fn span(&self) -> f64 {
        self.d_max - self.d_min
    }

    /// LEAR divides by `d_max - d_min`; reject a vanishing span.
    pub fn require_span(&self, factor: usize) -> Result<()> {
        if self.span() > 0.0 {
            Ok(())
        } else {
            Err(KronError::DegenerateConstants { factor, value: self.d_min })
        }
    }

    fn contains(&self, d: f64) -> bool {
        let tol = 1e-9 * self.d_max.max(1.0);
        d >= self.d_min - tol && d <= self.d_max + tol
    }
}

/// A correlation family together with its parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrSpec {
    pub family: CorrFamily,
    pub params: Vec<f64>,
}

impl CorrSpec {
    pub fn new(family: CorrFamily, params: Vec<f64>) -> Result<Self> {
        let spec = Self { family, params };
        spec.validate()?;
        Ok(spec)
    }

    pub fn independence() -> Self {
        Self { family: CorrFamily::Independence, params: Vec::new() }
    }

    pub fn lear(rho: f64, delta: f64) -> Result<Self> {
        Self::new(CorrFamily::Lear, vec![rho, delta])
    }

    pub fn ar1(rho: f64) -> Result<Self> {
        Self::new(CorrFamily::Ar1, vec![rho])
    }

    /// Checks parameter count and the family's parameter box.
    pub fn validate(&self) -> Result<()> {
        let fam = self.family;
        if self.params.len() != fam.n_params() {
            return Err(KronError::Domain(format!(
                "{fam} expects {} parameter(s), got {}",
                fam.n_params(),
                self.params.len()
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(KronError::Domain(format!("{fam} parameters must be finite")));
        }
        let bad = |msg: &str| Err(KronError::Domain(format!("{fam}: {msg}, got {:?}", self.params)));
        match fam {
            CorrFamily::Lear | CorrFamily::Ar1 | CorrFamily::De | CorrFamily::Cs => {
                let rho = self.params[0];
                if !(0.0..1.0).contains(&rho) {
                    return bad("requires 0 <= rho < 1");
                }
                if fam == CorrFamily::Lear && self.params[1] < 0.0 {
                    return bad("requires delta >= 0");
                }
                if fam == CorrFamily::De && self.params[1] < 0.0 {
                    return bad("requires nu >= 0");
                }
            }
            CorrFamily::Exponential
            | CorrFamily::Gaussian
            | CorrFamily::Linear
            | CorrFamily::Spherical => {
                if self.params[0] <= 0.0 {
                    return bad("requires phi > 0");
                }
            }
            CorrFamily::Independence => {}
        }
        Ok(())
    }

    /// Off-diagonal correlation at distance `d`, without validation.
    pub(crate) fn corr_unchecked(&self, d: f64, c: &DistanceConstants) -> f64 {
        let p = &self.params;
        match self.family {
            CorrFamily::Lear => p[0].powf(lear_exponent(p[1], d, c)),
            CorrFamily::Ar1 => p[0].powf(d),
            CorrFamily::De => p[0].powf(d.powf(p[1])),
            CorrFamily::Exponential => (-d / p[0]).exp(),
            CorrFamily::Gaussian => (-(d * d) / (p[0] * p[0])).exp(),
            CorrFamily::Linear => {
                let pd = p[0] * d;
                if pd <= 1.0 {
                    1.0 - pd
                } else {
                    0.0
                }
            }
            CorrFamily::Spherical => {
                let phi = p[0];
                if d <= phi {
                    1.0 - 1.5 * d / phi + 0.5 * (d / phi).powi(3)
                } else {
                    0.0
                }
            }
            CorrFamily::Cs => p[0],
            CorrFamily::Independence => 0.0,
        }
    }

    /// Partial derivatives of the off-diagonal correlation with respect to each
    /// parameter, written into `out` (length `n_params`).
    pub(crate) fn corr_grad_unchecked(&self, d: f64, c: &DistanceConstants, out: &mut [f64]) {
        let p = &self.params;
        match self.family {
            CorrFamily::Lear => {
                let (rho, delta) = (p[0], p[1]);
                let e = lear_exponent(delta, d, c);
                out[0] = e * rho.powf(e - 1.0);
                out[1] = if rho < 1e-12 {
                    0.0
                } else {
                    rho.powf(e) * rho.ln() * lear_fraction(d, c)
                };
            }
            CorrFamily::Ar1 => out[0] = d * p[0].powf(d - 1.0),
            CorrFamily::De => {
                let (rho, nu) = (p[0], p[1]);
                let e = d.powf(nu);
                out[0] = e * rho.powf(e - 1.0);
                out[1] = if rho < 1e-12 || d <= 0.0 {
                    0.0
                } else {
                    rho.powf(e) * rho.ln() * e * d.ln()
                };
            }
            CorrFamily::Exponential => {
                let phi = p[0];
                out[0] = (-d / phi).exp() * d / (phi * phi);
            }
            CorrFamily::Gaussian => {
                let phi = p[0];
                out[0] = (-(d * d) / (phi * phi)).exp() * 2.0 * d * d / phi.powi(3);
            }
            CorrFamily::Linear => out[0] = if p[0] * d <= 1.0 { -d } else { 0.0 },
            CorrFamily::Spherical => {
                let phi = p[0];
                out[0] = if d <= phi {
                    1.5 * d / (phi * phi) - 1.5 * d.powi(3) / phi.powi(4)
                } else {
                    0.0
                };
            }
            CorrFamily::Cs => out[0] = 1.0,
            CorrFamily::Independence => {}
        }
    }
}

impl fmt::Display for CorrSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.family)?;
        if !self.params.is_empty() {
            let parts: Vec<String> = self.params.iter().map(|p| p.to_string()).collect();
            write!(f, ":{}", parts.join(","))?;
        }
        Ok(())
    }
}

/// Parses `family` or `family:p1,p2`.
impl FromStr for CorrSpec {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        let (fam, rest) = match s.split_once(':') {
            Some((f, r)) => (f, Some(r)),
            None => (s, None),
        };
        let family: CorrFamily = fam.parse()?;
        let params = match rest {
            None => Vec::new(),
            Some(r) => r
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| KronError::Input(format!("bad parameter '{x}' in '{s}'")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if params.is_empty() && family.n_params() > 0 {
            return Ok(Self { family, params });
        }
        CorrSpec::new(family, params)
    }
}

#[inline]
fn lear_fraction(d: f64, c: &DistanceConstants) -> f64 {
    (d - c.d_min) / (c.d_max - c.d_min)
}

#[inline]
fn lear_exponent(delta: f64, d: f64, c: &DistanceConstants) -> f64 {
    c.d_min + delta * lear_fraction(d, c)
}

/// LEAR correlation `rho^(d_min + delta (d - d_min) / (d_max - d_min))` for an
/// off-diagonal pair at distance `d`.
pub fn lear_corr(rho: f64, delta: f64, d: f64, constants: &DistanceConstants) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) || !(delta >= 0.0) {
        return Err(KronError::Domain(format!(
            "lear requires 0 <= rho < 1 and delta >= 0, got rho={rho}, delta={delta}"
        )));
    }
    if constants.span() <= 0.0 {
        return Err(KronError::Domain("lear requires d_min < d_max".into()));
    }
    if !constants.contains(d) {
        return Err(KronError::Domain(format!(
            "distance {d} outside [{}, {}]",
            constants.d_min, constants.d_max
        )));
    }
    Ok(rho.powf(lear_exponent(delta, d, constants)))
}

/// Off-diagonal correlation of `spec` at distance `d`.
pub fn eval_family(spec: &CorrSpec, d: f64, constants: &DistanceConstants) -> Result<f64> {
    spec.validate()?;
    if !(d >= 0.0) {
        return Err(KronError::Domain(format!("distance must be nonnegative, got {d}")));
    }
    if spec.family == CorrFamily::Lear {
        return lear_corr(spec.params[0], spec.params[1], d, constants);
    }
    Ok(spec.corr_unchecked(d, constants))
}

fn check_distances(distances: &DMatrix<f64>) -> Result<()> {
    let n = distances.nrows();
    if distances.ncols() != n {
        return Err(KronError::Dimension(format!(
            "distance matrix must be square, got {}x{}",
            n,
            distances.ncols()
        )));
    }
    for j in 0..n {
        if distances[(j, j)] != 0.0 {
            return Err(KronError::Domain(format!("distance diagonal entry {j} is nonzero")));
        }
        for k in 0..j {
            let d = distances[(j, k)];
            if !(d >= 0.0) || d != distances[(k, j)] {
                return Err(KronError::Domain(format!(
                    "distance matrix must be symmetric and nonnegative at ({j}, {k})"
                )));
            }
        }
    }
    Ok(())
}

fn check_lear_range(spec: &CorrSpec, distances: &DMatrix<f64>, c: &DistanceConstants) -> Result<()> {
    if spec.family != CorrFamily::Lear {
        return Ok(());
    }
    let n = distances.nrows();
    if n > 1 && c.span() <= 0.0 {
        return Err(KronError::Domain("lear requires d_min < d_max".into()));
    }
    for j in 0..n {
        for k in 0..j {
            let d = distances[(j, k)];
            if !c.contains(d) {
                return Err(KronError::Domain(format!(
                    "distance {d} outside [{}, {}]",
                    c.d_min, c.d_max
                )));
            }
        }
    }
    Ok(())
}

/// Correlation matrix without validation or positive-definiteness check.
pub(crate) fn fill_factor_matrix(
    spec: &CorrSpec,
    distances: &DMatrix<f64>,
    c: &DistanceConstants,
) -> DMatrix<f64> {
    let n = distances.nrows();
    let mut m = DMatrix::identity(n, n);
    for j in 0..n {
        for k in 0..j {
            let v = spec.corr_unchecked(distances[(j, k)], c);
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
    }
    m
}

/// Elementwise parameter derivatives of the factor matrix (zero diagonal).
pub(crate) fn factor_matrix_derivs(
    spec: &CorrSpec,
    distances: &DMatrix<f64>,
    c: &DistanceConstants,
) -> Vec<DMatrix<f64>> {
    let n = distances.nrows();
    let np = spec.family.n_params();
    let mut out = vec![DMatrix::zeros(n, n); np];
    let mut g = [0.0; 2];
    for j in 0..n {
        for k in 0..j {
            spec.corr_grad_unchecked(distances[(j, k)], c, &mut g[..np]);
            for (m, &v) in out.iter_mut().zip(&g[..np]) {
                m[(j, k)] = v;
                m[(k, j)] = v;
            }
        }
    }
    out
}

/// Builds the factor correlation matrix for `distances` and checks that it is
/// positive definite.
pub fn build_factor_matrix(
    spec: &CorrSpec,
    distances: &DMatrix<f64>,
    constants: &DistanceConstants,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_distances(distances)?;
    check_lear_range(spec, distances, constants)?;
    let n = distances.nrows();
    for j in 0..n {
        for k in 0..j {
            if distances[(j, k)] == 0.0 && spec.family != CorrFamily::Independence {
                log::warn!(
                    "duplicate location at indices ({j}, {k}); {} matrix may be near-singular",
                    spec.family
                );
            }
        }
    }
    let m = fill_factor_matrix(spec, distances, constants);
    checked_cholesky(&m, &format!("{} factor matrix", spec.family))?;
    Ok(m)
}
