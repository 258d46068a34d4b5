//! Kronecker-structured linear algebra on a pair of factor matrices.
//!
//! Vectors of length `t * s` are ordered factor-1-major: entry `j * s + l`
//! belongs to factor-1 level `j` and factor-2 level `l`. Reshaped column-major
//! into an `s x t` matrix `R`, the product acts as
//! `(Gamma ⊗ Omega) vec(R) = vec(Omega R Gamma')`, so nothing here forms the
//! `ts x ts` matrix except [`kron_dense`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{KronError, Result};

/// Default cap on the row count of a materialized Kronecker product.
pub const DENSE_ROW_CAP: usize = 4096;

/// Cholesky factorization that also enforces the pivot floor
/// `min pivot > 1e-10 * dim`.
pub fn checked_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let floor = 1e-10 * n as f64;
    let chol = Cholesky::new(m.clone()).ok_or_else(|| KronError::NotPositiveDefinite {
        what: what.to_string(),
        pivot: f64::NAN,
    })?;
    let l = chol.l_dirty();
    let min_pivot = (0..n).map(|j| l[(j, j)] * l[(j, j)]).fold(f64::INFINITY, f64::min);
    if n > 0 && !(min_pivot > floor) {
        return Err(KronError::NotPositiveDefinite { what: what.to_string(), pivot: min_pivot });
    }
    Ok(chol)
}

fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|j| 2.0 * l[(j, j)].ln()).sum()
}

/// Factor-1 (`t x t`) and factor-2 (`s x s`) correlation matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct KronPair {
    pub gamma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

impl KronPair {
    pub fn new(gamma: DMatrix<f64>, omega: DMatrix<f64>) -> Result<Self> {
        if !gamma.is_square() || !omega.is_square() {
            return Err(KronError::Dimension("Kronecker factors must be square".into()));
        }
        Ok(Self { gamma, omega })
    }

    pub fn t(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn s(&self) -> usize {
        self.omega.nrows()
    }

    pub fn dim(&self) -> usize {
        self.t() * self.s()
    }
}

/// Explicit Kronecker product, capped at [`DENSE_ROW_CAP`] rows.
pub fn kron_dense(pair: &KronPair) -> Result<DMatrix<f64>> {
    kron_dense_capped(pair, DENSE_ROW_CAP)
}

pub fn kron_dense_capped(pair: &KronPair, cap: usize) -> Result<DMatrix<f64>> {
    let rows = pair.dim();
    if rows > cap {
        return Err(KronError::SizeGuard { rows, cap });
    }
    Ok(pair.gamma.kronecker(&pair.omega))
}

/// `s ln|Gamma| + t ln|Omega|`.
pub fn kron_logdet(pair: &KronPair) -> Result<f64> {
    Ok(KronFactors::new(pair)?.logdet())
}

/// `r' (Gamma^-1 ⊗ Omega^-1) r` via the reshape-and-trace route.
pub fn kron_quadform(r: &DVector<f64>, pair: &KronPair) -> Result<f64> {
    KronFactors::new(pair)?.quadform(r.as_slice())
}

/// Lower-triangular factors `(L_gamma, L_omega)` with
/// `chol(Gamma ⊗ Omega) = L_gamma ⊗ L_omega`.
pub fn kron_cholesky(pair: &KronPair) -> Result<KronPair> {
    let lg = checked_cholesky(&pair.gamma, "factor 1")?.l();
    let lo = checked_cholesky(&pair.omega, "factor 2")?.l();
    Ok(KronPair { gamma: lg, omega: lo })
}

/// `(A ⊗ B) vec(Z)` for `Z` stored as an `s x t` column-major slice.
pub fn kron_matvec(a: &DMatrix<f64>, b: &DMatrix<f64>, z: &[f64]) -> DVector<f64> {
    let t = a.ncols();
    let s = b.ncols();
    let zm = DMatrix::from_column_slice(s, t, z);
    let out = b * zm * a.transpose();
    DVector::from_column_slice(out.as_slice())
}

/// Factorized pair ready for repeated solves and quadratic forms.
#[derive(Debug, Clone)]
pub struct KronFactors {
    t: usize,
    s: usize,
    logdet_gamma: f64,
    logdet_omega: f64,
    gamma_inv: DMatrix<f64>,
    omega_inv: DMatrix<f64>,
}

impl KronFactors {
    pub fn new(pair: &KronPair) -> Result<Self> {
        let cg = checked_cholesky(&pair.gamma, "factor 1")?;
        let co = checked_cholesky(&pair.omega, "factor 2")?;
        Ok(Self {
            t: pair.t(),
            s: pair.s(),
            logdet_gamma: chol_logdet(&cg),
            logdet_omega: chol_logdet(&co),
            gamma_inv: cg.inverse(),
            omega_inv: co.inverse(),
        })
    }

    pub fn logdet_gamma(&self) -> f64 {
        self.logdet_gamma
    }

    pub fn logdet_omega(&self) -> f64 {
        self.logdet_omega
    }

    pub fn logdet(&self) -> f64 {
        self.s as f64 * self.logdet_gamma + self.t as f64 * self.logdet_omega
    }

    pub fn gamma_inv(&self) -> &DMatrix<f64> {
        &self.gamma_inv
    }

    pub fn omega_inv(&self) -> &DMatrix<f64> {
        &self.omega_inv
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.t * self.s {
            return Err(KronError::Dimension(format!(
                "vector of length {len} against a {}x{} Kronecker pair",
                self.t, self.s
            )));
        }
        Ok(())
    }

    /// `W = Omega^-1 R Gamma^-1` as an `s x t` matrix, i.e. the reshaped
    /// `(Gamma ⊗ Omega)^-1 r`.
    pub fn solve_reshaped(&self, r: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len(r.len())?;
        let rm = DMatrix::from_column_slice(self.s, self.t, r);
        Ok(&self.omega_inv * rm * &self.gamma_inv)
    }

    pub fn quadform(&self, r: &[f64]) -> Result<f64> {
        let w = self.solve_reshaped(r)?;
        Ok(w.as_slice().iter().zip(r).map(|(a, b)| a * b).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn g2() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])
    }

    fn o2() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0])
    }

    #[test]
    fn dense_examples() {
        let i = KronPair::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(kron_dense(&i).unwrap(), DMatrix::identity(4, 4));

        let p = KronPair::new(g2(), o2()).unwrap();
        let k = kron_dense(&p).unwrap();
        assert_abs_diff_eq!(k[(0, 3)], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(k[(0, 2)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(k[(0, 1)], 0.2, epsilon = 1e-15);

        let one = KronPair::new(DMatrix::identity(1, 1), o2()).unwrap();
        assert_eq!(kron_dense(&one).unwrap(), o2());
    }

    #[test]
    fn dense_cap() {
        let p = KronPair::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(kron_dense_capped(&p, 8), Err(KronError::SizeGuard { rows: 9, cap: 8 })));
    }

    #[test]
    fn logdet_examples() {
        let p = KronPair::new(DMatrix::identity(3, 3), DMatrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(kron_logdet(&p).unwrap(), 0.0, epsilon = 1e-15);
        let p = KronPair::new(g2(), o2()).unwrap();
        let expected = 2.0 * 0.75f64.ln() + 2.0 * 0.96f64.ln();
        assert_abs_diff_eq!(kron_logdet(&p).unwrap(), expected, epsilon = 1e-13);
        assert_abs_diff_eq!(kron_logdet(&p).unwrap(), -0.657008, epsilon = 1e-6);
    }

    #[test]
    fn quadform_examples() {
        let p = KronPair::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3)).unwrap();
        let r = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
        assert_abs_diff_eq!(kron_quadform(&r, &p).unwrap(), r.norm_squared(), epsilon = 1e-13);

        let p = KronPair::new(g2(), o2()).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        // (1/0.75) * (1/0.96)
        assert_abs_diff_eq!(kron_quadform(&e1, &p).unwrap(), 1.0 / 0.72, epsilon = 1e-13);
        assert_abs_diff_eq!(kron_quadform(&e1, &p).unwrap(), 1.38889, epsilon = 1e-5);
    }

    #[test]
    fn quadform_dimension_mismatch() {
        let p = KronPair::new(g2(), o2()).unwrap();
        let r = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(kron_quadform(&r, &p), Err(KronError::Dimension(_))));
    }

    #[test]
    fn cholesky_examples() {
        let p = KronPair::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3)).unwrap();
        let l = kron_cholesky(&p).unwrap();
        assert_eq!(l, p);

        let p = KronPair::new(DMatrix::identity(1, 1), o2()).unwrap();
        let l = kron_cholesky(&p).unwrap();
        assert_eq!(l.gamma, DMatrix::identity(1, 1));
        let lo = l.omega.clone();
        assert_abs_diff_eq!((&lo * lo.transpose() - o2()).abs().max(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn singular_factor_is_rejected() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = KronPair::new(g, o2()).unwrap();
        let err = kron_logdet(&p).unwrap_err();
        match err {
            KronError::NotPositiveDefinite { what, .. } => assert_eq!(what, "factor 1"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn pivot_floor_scales_with_dimension() {
        // pivot 1 - 0.99999999999^2 ~ 2e-11 sits under 1e-10 * 2
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.99999999999, 0.99999999999, 1.0]);
        assert!(checked_cholesky(&g, "g").is_err());
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.9999, 0.9999, 1.0]);
        assert!(checked_cholesky(&g, "g").is_ok());
    }

    #[test]
    fn matvec_matches_dense() {
        let p = KronPair::new(g2(), o2()).unwrap();
        let z = [0.3, -1.0, 2.0, 0.7];
        let dense = kron_dense(&p).unwrap() * DVector::from_column_slice(&z);
        let fast = kron_matvec(&p.gamma, &p.omega, &z);
        assert_abs_diff_eq!((dense - fast).abs().max(), 0.0, epsilon = 1e-15);
    }
}
