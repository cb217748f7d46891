//! SPD and symmetric matrix types plus the Log-Euclidean toolkit: matrix
//! log/exp, squared LEM distance and closed-form (weighted) Fréchet means.
//!
//! Under the Log-Euclidean metric the SPD manifold is flat in the log domain,
//! so the weighted Fréchet mean of `X_1..X_n` is simply
//! `exp(Σ w_i log X_i)`: the log-domain objective `Σ w_i ‖log P − log X_i‖²`
//! is a convex quadratic in `log P` whose stationary point is the weighted
//! average.

use alloc::vec::Vec;

use crate::eig::{check_symmetric, sym_eig, Eig};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::math;

/// Eigenvalue floor below which `spd_log` refuses to take the logarithm.
pub const LOG_EIGEN_FLOOR: f64 = 1e-14;

/// Tolerance on `Σ w_i = 1` for weighted means.
pub const WEIGHT_SUM_TOL: f64 = 1e-10;

/// A symmetric matrix; an element of the tangent space at the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(Mat);

impl SymMatrix {
    /// Validates symmetry (relative tolerance `1e-12`) and stores the exact
    /// symmetric part.
    pub fn new(m: Mat) -> Result<Self> {
        check_symmetric(&m)?;
        Ok(SymMatrix(m.sym()))
    }

    /// Stores `(m + mᵀ)/2` without checking how asymmetric `m` was.
    pub fn from_symmetrized(m: &Mat) -> Self {
        SymMatrix(m.sym())
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(Mat::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(Mat::identity(dim))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        SymMatrix(Mat::from_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn eig(&self) -> Eig {
        sym_eig(&self.0).expect("SymMatrix is symmetric by construction")
    }
}

/// A symmetric positive-definite matrix carrying its eigendecomposition.
///
/// The decomposition is computed once at construction (it is needed to
/// certify definiteness anyway) and reused by every spectral layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix {
    mat: Mat,
    eig: Eig,
}

impl SpdMatrix {
    pub fn new(m: Mat) -> Result<Self> {
        check_symmetric(&m)?;
        let m = m.sym();
        let eig = sym_eig(&m)?;
        if !(eig.min() > 0.0) {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: eig.min(),
            });
        }
        Ok(SpdMatrix { mat: m, eig })
    }

    pub fn from_sym(s: SymMatrix) -> Result<Self> {
        SpdMatrix::new(s.into_mat())
    }

    /// Builds `U diag(λ) Uᵀ` from a decomposition whose eigenvalues are
    /// ascending and positive.
    pub fn from_eig(eig: Eig) -> Result<Self> {
        if !(eig.min() > 0.0) || !eig.values.iter().all(|v| v.is_finite()) {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: eig.min(),
            });
        }
        debug_assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
        Ok(SpdMatrix {
            mat: eig.reconstruct(),
            eig,
        })
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix::new(Mat::identity(dim)).expect("identity is SPD")
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        SpdMatrix::new(Mat::from_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.mat
    }

    pub fn eig(&self) -> &Eig {
        &self.eig
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eig.min()
    }

    pub fn to_sym(&self) -> SymMatrix {
        SymMatrix(self.mat.clone())
    }

    /// `X⁻¹ = U diag(1/λ) Uᵀ`.
    pub fn inverse(&self) -> Mat {
        self.eig.map_reconstruct(|v| 1.0 / v)
    }
}

/// Matrix logarithm `U log(Σ) Uᵀ`.
pub fn spd_log(x: &SpdMatrix) -> Result<SymMatrix> {
    if x.min_eigenvalue() < LOG_EIGEN_FLOOR {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: x.min_eigenvalue(),
        });
    }
    Ok(SymMatrix(x.eig.map_reconstruct(math::ln)))
}

/// Matrix exponential `U exp(Σ) Uᵀ` of a symmetric matrix.
pub fn spd_exp(t: &SymMatrix) -> Result<SpdMatrix> {
    exp_from_eig(t.eig())
}

pub(crate) fn exp_from_eig(eig: Eig) -> Result<SpdMatrix> {
    let values = eig.values.iter().map(|&v| math::exp(v)).collect();
    SpdMatrix::from_eig(Eig {
        values,
        vectors: eig.vectors,
    })
}

fn same_dim(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// `‖log Y − log X‖²_F`.
pub fn lem_distance_sq(x: &SpdMatrix, y: &SpdMatrix) -> Result<f64> {
    same_dim(x.dim(), y.dim())?;
    let lx = spd_log(x)?;
    let ly = spd_log(y)?;
    Ok(ly.as_mat().sub(lx.as_mat()).frobenius_sq())
}

/// `exp[(1/n) Σ log X_i]`.
pub fn frechet_mean_lem(xs: &[SpdMatrix]) -> Result<SpdMatrix> {
    if xs.is_empty() {
        return Err(Error::Empty);
    }
    let n = xs.len() as f64;
    let weights: Vec<f64> = xs.iter().map(|_| 1.0 / n).collect();
    log_domain_mean(xs, &weights)
}

/// `exp[Σ w_i log X_i]` for convex weights.
pub fn weighted_frechet_mean_lem(xs: &[SpdMatrix], weights: &[f64]) -> Result<SpdMatrix> {
    if xs.is_empty() {
        return Err(Error::Empty);
    }
    same_dim(xs.len(), weights.len())?;
    check_convex_weights(weights)?;
    log_domain_mean(xs, weights)
}

pub(crate) fn check_convex_weights(weights: &[f64]) -> Result<()> {
    for (index, &value) in weights.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveWeight { index, value });
        }
    }
    let sum: f64 = weights.iter().sum();
    if math::abs(sum - 1.0) > WEIGHT_SUM_TOL {
        return Err(Error::WeightSum { sum });
    }
    Ok(())
}

fn log_domain_mean(xs: &[SpdMatrix], weights: &[f64]) -> Result<SpdMatrix> {
    let d = xs[0].dim();
    let mut acc = Mat::zeros(d, d);
    for (x, &w) in xs.iter().zip(weights) {
        same_dim(d, x.dim())?;
        acc.axpy(w, spd_log(x)?.as_mat());
    }
    spd_exp(&SymMatrix::from_symmetrized(&acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::E;

    #[test]
    fn log_of_identity_is_zero() {
        let l = spd_log(&SpdMatrix::identity(3)).unwrap();
        assert_eq!(l.as_mat(), &Mat::zeros(3, 3));
    }

    #[test]
    fn log_exp_diagonal() {
        let x = SpdMatrix::from_diag(&[E, E * E]).unwrap();
        let l = spd_log(&x).unwrap();
        assert!(l.as_mat().sub(&Mat::from_diag(&[1.0, 2.0])).max_abs() < 1e-15);

        let y = spd_exp(&SymMatrix::from_diag(&[1.0, -1.0])).unwrap();
        assert!(y.as_mat().sub(&Mat::from_diag(&[E, 1.0 / E])).max_abs() < 1e-15);
        assert_eq!(
            spd_exp(&SymMatrix::zeros(2)).unwrap().as_mat(),
            &Mat::identity(2)
        );
    }

    #[test]
    fn lem_distance_examples() {
        let x = SpdMatrix::from_diag(&[E, 1.0]).unwrap();
        let i = SpdMatrix::identity(2);
        assert!(math::abs(lem_distance_sq(&x, &i).unwrap() - 1.0) < 1e-15);
        assert_eq!(lem_distance_sq(&x, &x).unwrap(), 0.0);
        assert!(matches!(
            lem_distance_sq(&x, &SpdMatrix::identity(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mean_of_diagonals() {
        let a = SpdMatrix::from_diag(&[E * E, 1.0]).unwrap();
        let b = SpdMatrix::from_diag(&[1.0, E * E]).unwrap();
        let m = frechet_mean_lem(&[a.clone(), b]).unwrap();
        assert!(m.as_mat().sub(&Mat::from_diag(&[E, E])).max_abs() < 1e-14);
        let single = frechet_mean_lem(core::slice::from_ref(&a)).unwrap();
        assert!(single.as_mat().sub(a.as_mat()).max_abs() < 1e-13);
        assert_eq!(frechet_mean_lem(&[]), Err(Error::Empty));
    }

    #[test]
    fn weight_validation() {
        let a = SpdMatrix::identity(2);
        let xs = [a.clone(), a];
        assert!(matches!(
            weighted_frechet_mean_lem(&xs, &[0.5, 0.6]),
            Err(Error::WeightSum { .. })
        ));
        assert!(matches!(
            weighted_frechet_mean_lem(&xs, &[1.0, 0.0]),
            Err(Error::NonPositiveWeight { index: 1, .. })
        ));
        assert!(matches!(
            weighted_frechet_mean_lem(&xs, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn spd_rejects_indefinite() {
        let m = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(matches!(
            SpdMatrix::new(m),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn log_floor_is_an_error() {
        let x = SpdMatrix::from_diag(&[1e-15, 1.0]).unwrap();
        assert!(matches!(
            spd_log(&x),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
