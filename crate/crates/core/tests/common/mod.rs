#![allow(dead_code)]

use kronfit::simulate::{CovariateDist, SimCovariate, SimDesign, SpaceLayout, TimeSampler};
use kronfit::CorrSpec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Unbalanced design with irregular times and a 2-D factor-2 grid.
pub fn random_design(seed: u64, spec1: CorrSpec, spec2: CorrSpec) -> SimDesign {
    SimDesign {
        n_subjects: 6,
        t_range: (2, 5),
        s_range: (2, 6),
        time_sampler: TimeSampler::Subset { grid: vec![0.0, 0.5, 1.5, 2.0, 3.5, 4.0] },
        space_layout: SpaceLayout::Grid { nx: 3, ny: 2, spacing: 1.0 },
        random_space_subset: true,
        covariates: vec![SimCovariate {
            name: "x".into(),
            dist: CovariateDist::Normal { mean: 0.0, sd: 1.0 },
            within_subject: true,
        }],
        beta_true: vec![0.5, -1.0],
        sigma2_true: 1.3,
        spec1_true: spec1,
        spec2_true: spec2,
        seed,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_lear(r: &mut ChaCha8Rng, span: f64) -> CorrSpec {
    CorrSpec::lear(r.gen_range(0.05..0.9), r.gen_range(0.1..3.0) * span).unwrap()
}

/// Naive Gaussian log-density of `y` under mean `mu` and covariance `sigma`.
pub fn mvn_logpdf(y: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let chol = sigma.clone().cholesky().expect("positive definite");
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let r = y - mu;
    let quad = r.dot(&chol.solve(&r));
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Random symmetric positive definite matrix with unit diagonal.
pub fn random_corr(r: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(k, k + 2, |_, _| r.gen_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(k, k) * 0.1;
    let d = DMatrix::from_diagonal(&m.diagonal().map(|v: f64| 1.0 / v.sqrt()));
    &d * m * &d
}

/// Line layout, regular times, one informative and one null covariate.
pub fn fit_design(seed: u64, n_subjects: usize) -> SimDesign {
    let normal = |name: &str| SimCovariate {
        name: name.into(),
        dist: CovariateDist::Normal { mean: 0.0, sd: 1.0 },
        within_subject: true,
    };
    SimDesign {
        n_subjects,
        t_range: (3, 4),
        s_range: (3, 5),
        time_sampler: TimeSampler::Regular { spacing: 1.0 },
        space_layout: SpaceLayout::Line { count: 5, spacing: 1.0 },
        random_space_subset: false,
        covariates: vec![normal("signal"), normal("null")],
        beta_true: vec![1.0, 0.8, 0.0],
        sigma2_true: 1.0,
        spec1_true: CorrSpec::lear(0.6, 1.0).unwrap(),
        spec2_true: CorrSpec::ar1(0.4).unwrap(),
        seed,
    }
}
