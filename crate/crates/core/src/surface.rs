//! Correlation surfaces over (factor-1 distance, factor-2 distance): the
//! model-implied product of factor correlations and binned empirical
//! residual correlations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::corr::{eval_family, CorrSpec, DistanceConstants};
use crate::data::Dataset;
use crate::error::{KronError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// `values[(i, j)]` is the correlation at `(d1[i], d2[j])`.
    pub values: DMatrix<f64>,
}

/// Model correlation at every `(d1, d2)` pair; a zero distance contributes 1.
/// LEAR distances must lie within the factor's `[d_min, d_max]`.
pub fn correlation_surface(
    spec1: &CorrSpec,
    c1: &DistanceConstants,
    spec2: &CorrSpec,
    c2: &DistanceConstants,
    d1: &[f64],
    d2: &[f64],
) -> Result<SurfaceGrid> {
    let eval = |spec: &CorrSpec, c: &DistanceConstants, d: f64| -> Result<f64> {
        if d == 0.0 {
            Ok(1.0)
        } else {
            eval_family(spec, d, c)
        }
    };
    let r1: Vec<f64> = d1.iter().map(|&d| eval(spec1, c1, d)).collect::<Result<_>>()?;
    let r2: Vec<f64> = d2.iter().map(|&d| eval(spec2, c2, d)).collect::<Result<_>>()?;
    Ok(SurfaceGrid {
        d1: d1.to_vec(),
        d2: d2.to_vec(),
        values: DMatrix::from_fn(d1.len(), d2.len(), |i, j| r1[i] * r2[j]),
    })
}

/// Zero followed by `count + 1` evenly spaced points from `d_min` to `d_max`.
pub fn distance_axis(c: &DistanceConstants, count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(KronError::Input("distance axis needs at least one interval".into()));
    }
    let mut axis = vec![0.0];
    for i in 0..=count {
        let d = c.d_min + c.span() * i as f64 / count as f64;
        if d > *axis.last().expect("nonempty") {
            axis.push(d);
        }
    }
    Ok(axis)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalCell {
    /// Bin centres.
    pub d1: f64,
    pub d2: f64,
    pub correlation: f64,
    pub pairs: usize,
}

/// Pooled residual correlation `sum r_a r_b / (pairs * sigma2)` over all
/// within-subject observation pairs, binned by rounding each distance to a
/// multiple of its bin width. Residuals are taken at `beta`; `sigma2` is the
/// mean squared residual.
pub fn empirical_surface(ds: &Dataset, beta: &DVector<f64>, width1: f64, width2: f64) -> Result<Vec<EmpiricalCell>> {
    if !(width1 > 0.0 && width2 > 0.0) {
        return Err(KronError::Input("bin widths must be positive".into()));
    }
    if beta.len() != ds.q {
        return Err(KronError::Dimension(format!("beta has length {}, design has {} columns", beta.len(), ds.q)));
    }
    let mut bins: BTreeMap<(i64, i64), (f64, usize)> = BTreeMap::new();
    let mut ss = 0.0;
    for b in &ds.subjects {
        let r = &b.y - &b.x * beta;
        ss += r.norm_squared();
        let s = b.s;
        for u in 0..b.n_obs() {
            for v in 0..u {
                let d1 = b.dist1[(u / s, v / s)];
                let d2 = b.dist2[(u % s, v % s)];
                let key = ((d1 / width1).round() as i64, (d2 / width2).round() as i64);
                let e = bins.entry(key).or_insert((0.0, 0));
                e.0 += r[u] * r[v];
                e.1 += 1;
            }
        }
    }
    let sigma2 = ss / ds.n as f64;
    if !(sigma2 > 0.0) {
        return Err(KronError::DegenerateResiduals(sigma2));
    }
    Ok(bins
        .into_iter()
        .map(|((k1, k2), (sum, pairs))| EmpiricalCell {
            d1: k1 as f64 * width1,
            d2: k2 as f64 * width2,
            correlation: sum / (pairs as f64 * sigma2),
            pairs,
        })
        .collect())
}
