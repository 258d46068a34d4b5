//! Synthetic data from the separable model and a brute-force maximizer used
//! to cross-check the optimizer.
//!
//! Randomness comes from ChaCha20 (a counter-based generator): the design
//! seed selects the key and subject `i` reads stream `i`, so each subject's
//! draws do not depend on how many other subjects exist or in which order
//! they are generated. Normal variates use the inverse-CDF transform.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::corr::{fill_factor_matrix, CorrFamily, CorrSpec, DistanceConstants};
use crate::data::{compute_distance_constants, Dataset, Factor2Layout, SubjectBlock, INTERCEPT};
use crate::error::{KronError, Result};
use crate::kron::{checked_cholesky, kron_cholesky, kron_dense, kron_matvec, KronPair};
use crate::likelihood::ThetaVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSampler {
    /// `0, spacing, 2 spacing, ...`
    Regular { spacing: f64 },
    /// Sorted random subset of the given grid.
    Subset { grid: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpaceLayout {
    /// Equally spaced points on a line.
    Line { count: usize, spacing: f64 },
    /// `nx x ny` lattice, row by row.
    Grid { nx: usize, ny: usize, spacing: f64 },
    /// Named levels with a user distance matrix (row-major).
    Explicit { ids: Vec<String>, distances: Vec<Vec<f64>> },
}

impl SpaceLayout {
    pub fn build(&self) -> Result<Factor2Layout> {
        match self {
            SpaceLayout::Line { count, spacing } => {
                let ids = (0..*count).map(|i| format!("L{i}")).collect();
                let coords: Vec<Vec<f64>> = (0..*count).map(|i| vec![i as f64 * spacing]).collect();
                Factor2Layout::from_coords(ids, &coords)
            }
            SpaceLayout::Grid { nx, ny, spacing } => {
                let mut ids = Vec::new();
                let mut coords = Vec::new();
                for iy in 0..*ny {
                    for ix in 0..*nx {
                        ids.push(format!("G{ix}_{iy}"));
                        coords.push(vec![ix as f64 * spacing, iy as f64 * spacing]);
                    }
                }
                Factor2Layout::from_coords(ids, &coords)
            }
            SpaceLayout::Explicit { ids, distances } => {
                let k = ids.len();
                if distances.len() != k || distances.iter().any(|r| r.len() != k) {
                    return Err(KronError::Input("explicit layout distances must be square".into()));
                }
                let d = DMatrix::from_fn(k, k, |a, b| distances[a][b]);
                Factor2Layout::new(ids.clone(), d)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDist {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
    /// The factor-1 coordinate itself (e.g. time since baseline).
    Factor1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCovariate {
    pub name: String,
    #[serde(flatten)]
    pub dist: CovariateDist,
    /// Draw per observation instead of once per subject.
    #[serde(default)]
    pub within_subject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    pub n_subjects: usize,
    pub t_range: (usize, usize),
    pub s_range: (usize, usize),
    pub time_sampler: TimeSampler,
    pub space_layout: SpaceLayout,
    /// Take a random subset of layout levels rather than the first `s`.
    #[serde(default)]
    pub random_space_subset: bool,
    #[serde(default)]
    pub covariates: Vec<SimCovariate>,
    /// Intercept first, then one coefficient per covariate.
    pub beta_true: Vec<f64>,
    pub sigma2_true: f64,
    pub spec1_true: CorrSpec,
    pub spec2_true: CorrSpec,
    pub seed: u64,
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KronError::Input(m));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive".into());
        }
        let (t0, t1) = self.t_range;
        let (s0, s1) = self.s_range;
        if t0 == 0 || t0 > t1 || s0 == 0 || s0 > s1 {
            return bad(format!("invalid t_range {:?} or s_range {:?}", self.t_range, self.s_range));
        }
        if !(self.sigma2_true > 0.0) {
            return bad("sigma2_true must be positive".into());
        }
        if self.beta_true.len() != self.covariates.len() + 1 {
            return bad(format!(
                "beta_true has {} entries; expected intercept plus {} covariate(s)",
                self.beta_true.len(),
                self.covariates.len()
            ));
        }
        if let TimeSampler::Subset { grid } = &self.time_sampler {
            if grid.len() < t1 {
                return bad("time grid is smaller than t_range max".into());
            }
        }
        if self.space_layout.build()?.len() < s1 {
            return bad("space layout has fewer levels than s_range max".into());
        }
        self.spec1_true.validate()?;
        self.spec2_true.validate()?;
        Ok(())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        let mut v = vec![INTERCEPT.to_string()];
        v.extend(self.covariates.iter().map(|c| c.name.clone()));
        v
    }

    pub fn true_theta(&self) -> ThetaVector {
        ThetaVector::new(
            DVector::from_column_slice(&self.beta_true),
            self.spec1_true.clone(),
            self.spec2_true.clone(),
        )
    }
}

/// Uniform on the open interval (0, 1) from 53 random bits.
fn open_unit<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    normal_quantile(open_unit(rng))
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64);
    rng
}

struct Skeleton {
    times: Vec<f64>,
    levels: Vec<usize>,
    x: DMatrix<f64>,
    rng: ChaCha20Rng,
}

/// Draws a dataset from `y_i = X_i beta + e_i`, `e_i ~ N(0, sigma2 Gamma_i ⊗ Omega_i)`.
pub fn sample_dataset(design: &SimDesign) -> Result<Dataset> {
    design.validate()?;
    let layout = design.space_layout.build()?;
    let q = design.beta_true.len();

    let skeletons: Vec<Skeleton> = (0..design.n_subjects)
        .map(|i| {
            let mut rng = subject_rng(design.seed, i);
            let t = rng.gen_range(design.t_range.0..=design.t_range.1);
            let s = rng.gen_range(design.s_range.0..=design.s_range.1);
            let times: Vec<f64> = match &design.time_sampler {
                TimeSampler::Regular { spacing } => (0..t).map(|j| j as f64 * spacing).collect(),
                TimeSampler::Subset { grid } => {
                    let mut idx = rand::seq::index::sample(&mut rng, grid.len(), t).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|k| grid[k]).collect()
                }
            };
            let levels: Vec<usize> = if design.random_space_subset {
                let mut idx = rand::seq::index::sample(&mut rng, layout.len(), s).into_vec();
                idx.sort_unstable();
                idx
            } else {
                (0..s).collect()
            };
            let mut x = DMatrix::zeros(t * s, q);
            x.column_mut(0).fill(1.0);
            for (c, cov) in design.covariates.iter().enumerate() {
                let draw = |rng: &mut ChaCha20Rng, time: f64| match cov.dist {
                    CovariateDist::Normal { mean, sd } => mean + sd * standard_normal(rng),
                    CovariateDist::Bernoulli { p } => {
                        if open_unit(rng) < p {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    CovariateDist::Factor1 => time,
                };
                let subject_value = draw(&mut rng, 0.0);
                for (j, &time) in times.iter().enumerate() {
                    for a in 0..s {
                        x[(j * s + a, c + 1)] = if cov.within_subject || matches!(cov.dist, CovariateDist::Factor1) {
                            draw(&mut rng, time)
                        } else {
                            subject_value
                        };
                    }
                }
            }
            Skeleton { times, levels, x, rng }
        })
        .collect();

    // constants must be known before any correlation matrix is built
    let placeholder: Vec<SubjectBlock> = skeletons
        .iter()
        .enumerate()
        .map(|(i, sk)| {
            let n = sk.times.len() * sk.levels.len();
            SubjectBlock::new(format!("S{i:05}"), sk.times.clone(), sk.levels.clone(), &layout, DVector::zeros(n), DMatrix::zeros(n, q))
        })
        .collect::<Result<_>>()?;
    let (c1, c2) = compute_distance_constants(&placeholder);
    if design.spec1_true.family == CorrFamily::Lear && placeholder.iter().any(|b| b.t > 1) {
        c1.require_span(1)?;
    }
    if design.spec2_true.family == CorrFamily::Lear && placeholder.iter().any(|b| b.s > 1) {
        c2.require_span(2)?;
    }
    let beta = DVector::from_column_slice(&design.beta_true);
    let sigma = design.sigma2_true.sqrt();

    let subjects: Vec<SubjectBlock> = skeletons
        .into_par_iter()
        .zip(placeholder.into_par_iter())
        .map(|(mut sk, block)| {
            let gamma = fill_factor_matrix(&design.spec1_true, &block.dist1, &c1);
            let omega = fill_factor_matrix(&design.spec2_true, &block.dist2, &c2);
            let chol = kron_cholesky(&KronPair { gamma, omega })
                .map_err(|e| e.in_context(&format!("subject '{}'", block.subject_id)))?;
            let z: Vec<f64> = (0..block.n_obs()).map(|_| standard_normal(&mut sk.rng)).collect();
            let e = kron_matvec(&chol.gamma, &chol.omega, &z) * sigma;
            let y = &sk.x * &beta + e;
            SubjectBlock::new(block.subject_id, sk.times, sk.levels, &layout, y, sk.x)
        })
        .collect::<Result<_>>()?;
    Dataset::new(subjects, design.covariate_names(), layout)
}

/// Search box for one correlation parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBox {
    pub lo: f64,
    pub hi: f64,
    /// Whether `hi` itself is excluded (e.g. rho < 1).
    pub open_hi: bool,
}

/// Default oracle boxes: rho in [0, 1), LEAR delta in [0, 4 (d_max - d_min)],
/// DE nu in [0, 4], range parameters in [d_min / 10, 10 d_max].
pub fn default_boxes(family: CorrFamily, c: &DistanceConstants) -> Vec<ParamBox> {
    let rho = ParamBox { lo: 0.0, hi: 1.0, open_hi: true };
    let range = ParamBox { lo: (c.d_min / 10.0).max(1e-3), hi: 10.0 * c.d_max.max(1e-3), open_hi: false };
    match family {
        CorrFamily::Lear => vec![rho, ParamBox { lo: 0.0, hi: 4.0 * c.span(), open_hi: false }],
        CorrFamily::De => vec![rho, ParamBox { lo: 0.0, hi: 4.0, open_hi: false }],
        CorrFamily::Ar1 | CorrFamily::Cs => vec![rho],
        CorrFamily::Linear => vec![ParamBox { lo: 1.0 / (10.0 * c.d_max.max(1e-3)), hi: 10.0 / c.d_min.max(1e-3), open_hi: false }],
        CorrFamily::Exponential | CorrFamily::Gaussian | CorrFamily::Spherical => vec![range],
        CorrFamily::Independence => vec![],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub theta: ThetaVector,
    pub value: f64,
    pub nodes: usize,
}

/// Largest node count the oracle will enumerate.
pub const ORACLE_NODE_CAP: usize = 20_000_000;
/// Largest per-subject dimension the dense oracle accepts.
pub const ORACLE_DENSE_CAP: usize = 64;

/// Dense generalized least squares: `(sum X' S^-1 X)^-1 sum X' S^-1 y` with
/// `S_i` the materialized Kronecker product. Also returns the profile
/// log-likelihood at that coefficient vector.
pub fn dense_gls(ds: &Dataset, tau1: &CorrSpec, tau2: &CorrSpec) -> Result<(DVector<f64>, f64)> {
    let q = ds.q;
    let mut xtx = DMatrix::zeros(q, q);
    let mut xty = DVector::zeros(q);
    let mut logdet = 0.0;
    let mut chols = Vec::with_capacity(ds.n_subjects());
    for b in &ds.subjects {
        let pair = KronPair {
            gamma: fill_factor_matrix(tau1, &b.dist1, &ds.constants1),
            omega: fill_factor_matrix(tau2, &b.dist2, &ds.constants2),
        };
        let sigma = kron_dense(&pair)?;
        let chol = checked_cholesky(&sigma, "dense covariance")?;
        logdet += 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let sx = chol.solve(&b.x);
        xtx += b.x.tr_mul(&sx);
        xty += sx.tr_mul(&b.y);
        chols.push(chol);
    }
    let beta = xtx
        .cholesky()
        .ok_or(KronError::RankDeficient { rank: 0, q })?
        .solve(&xty);
    let mut quad = 0.0;
    for (b, chol) in ds.subjects.iter().zip(&chols) {
        let r = &b.y - &b.x * &beta;
        quad += r.dot(&chol.solve(&r));
    }
    let n = ds.n as f64;
    let value = -0.5 * logdet - 0.5 * n * quad.ln() + 0.5 * n * n.ln()
        - 0.5 * n
        - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Ok((beta, value))
}

fn axis(b: &ParamBox, resolution: f64) -> Vec<f64> {
    let width = b.hi - b.lo;
    let k = (1.0 / resolution + 1e-9).floor() as usize;
    (0..=k)
        .map(|i| b.lo + width * (i as f64 * resolution))
        .filter(|v| if b.open_hi { *v < b.hi - 1e-12 } else { *v <= b.hi + 1e-12 })
        .collect()
}

/// Exhaustive maximization of the profile log-likelihood over a grid of
/// correlation parameters, profiling the mean by dense GLS at every node.
///
/// Node spacing is `resolution` times each box width; halving the
/// resolution refines the grid to a superset of nodes.
pub fn grid_search_oracle(
    ds: &Dataset,
    family1: CorrFamily,
    family2: CorrFamily,
    resolution: f64,
) -> Result<OracleResult> {
    let b1 = default_boxes(family1, &ds.constants1);
    let b2 = default_boxes(family2, &ds.constants2);
    grid_search_oracle_in(ds, family1, family2, &b1, &b2, resolution)
}

pub fn grid_search_oracle_in(
    ds: &Dataset,
    family1: CorrFamily,
    family2: CorrFamily,
    boxes1: &[ParamBox],
    boxes2: &[ParamBox],
    resolution: f64,
) -> Result<OracleResult> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(KronError::Domain(format!("resolution must be in (0, 1], got {resolution}")));
    }
    if boxes1.len() != family1.n_params() || boxes2.len() != family2.n_params() {
        return Err(KronError::Dimension("one box per correlation parameter required".into()));
    }
    let p = boxes1.len() + boxes2.len();
    if p > 4 {
        return Err(KronError::Input(format!("oracle supports at most 4 correlation parameters, got {p}")));
    }
    if let Some(b) = ds.subjects.iter().find(|b| b.n_obs() > ORACLE_DENSE_CAP) {
        return Err(KronError::SizeGuard { rows: b.n_obs(), cap: ORACLE_DENSE_CAP });
    }
    if family1 == CorrFamily::Lear {
        ds.constants1.require_span(1)?;
    }
    if family2 == CorrFamily::Lear {
        ds.constants2.require_span(2)?;
    }
    let axes: Vec<Vec<f64>> = boxes1.iter().chain(boxes2).map(|b| axis(b, resolution)).collect();
    let nodes = axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.len())).unwrap_or(usize::MAX);
    if nodes > ORACLE_NODE_CAP {
        return Err(KronError::SizeGuard { rows: nodes, cap: ORACLE_NODE_CAP });
    }
    let p1 = boxes1.len();
    let point = |mut idx: usize| -> Vec<f64> {
        let mut v = vec![0.0; p];
        for k in (0..p).rev() {
            let len = axes[k].len();
            v[k] = axes[k][idx % len];
            idx /= len;
        }
        v
    };
    let eval = |idx: usize| -> Option<(f64, usize)> {
        let v = point(idx);
        let t1 = CorrSpec::new(family1, v[..p1].to_vec()).ok()?;
        let t2 = CorrSpec::new(family2, v[p1..].to_vec()).ok()?;
        dense_gls(ds, &t1, &t2).ok().filter(|(_, val)| val.is_finite()).map(|(_, val)| (val, idx))
    };
    let better = |a: (f64, usize), b: (f64, usize)| {
        if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) {
            a
        } else {
            b
        }
    };
    let best = (0..nodes)
        .into_par_iter()
        .filter_map(eval)
        .reduce(|| (f64::NEG_INFINITY, usize::MAX), better);
    if best.1 == usize::MAX {
        return Err(KronError::Evaluation("no grid node produced a valid likelihood".into()));
    }
    let v = point(best.1);
    let tau1 = CorrSpec::new(family1, v[..p1].to_vec())?;
    let tau2 = CorrSpec::new(family2, v[p1..].to_vec())?;
    let (beta, value) = dense_gls(ds, &tau1, &tau2)?;
    Ok(OracleResult { theta: ThetaVector::new(beta, tau1, tau2), value, nodes })
}
