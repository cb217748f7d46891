//! Symmetric eigendecomposition and thin QR.
//!
//! The eigensolver is cyclic Jacobi: slow for large matrices but accurate to
//! high relative precision on small eigenvalues, which matters for `log` of
//! nearly singular SPD matrices. Output order is ascending and each
//! eigenvector is sign-normalized so that its largest-magnitude entry is
//! positive, which makes results reproducible bit-for-bit.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::math;

/// Eigenvalues in ascending order with matching orthonormal eigenvector columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Eig {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl Eig {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U diag(values) Uᵀ`, symmetrized.
    pub fn reconstruct(&self) -> Mat {
        Mat::congruence_diag(&self.vectors, &self.values)
    }

    /// `U diag(f(values)) Uᵀ`, symmetrized.
    pub fn map_reconstruct(&self, f: impl Fn(f64) -> f64) -> Mat {
        let mapped: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        Mat::congruence_diag(&self.vectors, &mapped)
    }

    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(f64::NAN)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(f64::NAN)
    }

    /// Largest absolute eigenvalue.
    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(math::abs(v)))
    }
}

/// Relative symmetry tolerance used by every symmetric-input check.
pub const SYMMETRY_TOL: f64 = 1e-12;

pub(crate) fn check_symmetric(a: &Mat) -> Result<()> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOL * a.max_abs() {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix.
///
/// Rejects non-square, non-symmetric or non-finite input.
pub fn sym_eig(a: &Mat) -> Result<Eig> {
    check_symmetric(a)?;
    if !a.is_finite() {
        return Err(Error::NonFinite {
            location: "sym_eig input".into(),
        });
    }
    Ok(jacobi(a))
}

const MAX_SWEEPS: usize = 100;

#[inline]
fn rotate(a: &mut Mat, s: f64, tau: f64, i: usize, j: usize, k: usize, l: usize) {
    let g = a[(i, j)];
    let h = a[(k, l)];
    a[(i, j)] = g - s * (h + g * tau);
    a[(k, l)] = h + s * (g - h * tau);
}

/// Cyclic Jacobi on the upper triangle with the threshold strategy of the
/// classic Rutishauser formulation.
fn jacobi(input: &Mat) -> Eig {
    let n = input.rows();
    let mut a = input.sym();
    let mut v = Mat::identity(n);
    let mut d = a.diagonal();
    let mut b = d.clone();
    let mut z = vec![0.0; n];

    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += math::abs(a[(p, q)]);
            }
        }
        if off == 0.0 {
            break;
        }
        let thresh = if sweep < 3 {
            0.2 * off / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let g = 100.0 * math::abs(apq);
                if sweep > 3
                    && math::abs(d[p]) + g == math::abs(d[p])
                    && math::abs(d[q]) + g == math::abs(d[q])
                {
                    a[(p, q)] = 0.0;
                } else if math::abs(apq) > thresh {
                    let h = d[q] - d[p];
                    let t = if math::abs(h) + g == math::abs(h) {
                        apq / h
                    } else {
                        let theta = 0.5 * h / apq;
                        let t = 1.0 / (math::abs(theta) + math::sqrt(1.0 + theta * theta));
                        if theta < 0.0 {
                            -t
                        } else {
                            t
                        }
                    };
                    let c = 1.0 / math::sqrt(1.0 + t * t);
                    let s = t * c;
                    let tau = s / (1.0 + c);
                    let h = t * apq;
                    z[p] -= h;
                    z[q] += h;
                    d[p] -= h;
                    d[q] += h;
                    a[(p, q)] = 0.0;
                    for j in 0..p {
                        rotate(&mut a, s, tau, j, p, j, q);
                    }
                    for j in (p + 1)..q {
                        rotate(&mut a, s, tau, p, j, j, q);
                    }
                    for j in (q + 1)..n {
                        rotate(&mut a, s, tau, p, j, q, j);
                    }
                    for j in 0..n {
                        rotate(&mut v, s, tau, j, p, j, q);
                    }
                }
            }
        }
        for p in 0..n {
            b[p] += z[p];
            d[p] = b[p];
            z[p] = 0.0;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Mat::from_fn(n, n, |i, j| v[(i, order[j])]);
    normalize_signs(&mut vectors);
    Eig { values, vectors }
}

/// Flips each column so that its largest-magnitude entry (first on ties) is positive.
fn normalize_signs(vectors: &mut Mat) {
    let (rows, cols) = vectors.shape();
    for j in 0..cols {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..rows {
            let a = math::abs(vectors[(i, j)]);
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if vectors[(best, j)] < 0.0 {
            for i in 0..rows {
                vectors[(i, j)] = -vectors[(i, j)];
            }
        }
    }
}

/// Threshold below which a QR diagonal entry counts as rank collapse.
pub const QR_RANK_TOL: f64 = 1e-12;

/// Thin Householder QR of an `n × p` matrix (`n ≥ p`), returning the `Q`
/// factor with the signs fixed so that `diag(R) > 0`.
pub fn qr_q_factor(a: &Mat) -> Result<Mat> {
    let (n, p) = a.shape();
    if p > n {
        return Err(Error::Precondition(
            "QR needs at least as many rows as columns",
        ));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(p);
    for k in 0..p {
        let norm = math::sqrt((k..n).map(|i| r[(i, k)] * r[(i, k)]).sum::<f64>());
        let mut v: Vec<f64> = (k..n).map(|i| r[(i, k)]).collect();
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
        if vnorm_sq > 0.0 {
            for j in k..p {
                let dot: f64 = (k..n).map(|i| v[i - k] * r[(i, j)]).sum();
                let f = 2.0 * dot / vnorm_sq;
                for i in k..n {
                    r[(i, j)] -= f * v[i - k];
                }
            }
        }
        reflectors.push(v);
    }
    for k in 0..p {
        if math::abs(r[(k, k)]) < QR_RANK_TOL {
            return Err(Error::RetractionFailure {
                column: k,
                value: math::abs(r[(k, k)]),
            });
        }
    }
    // Q = H_0 H_1 … H_{p-1} applied to the first p identity columns.
    let mut q = Mat::identity_columns(n, p);
    for k in (0..p).rev() {
        let v = &reflectors[k];
        let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        for j in 0..p {
            let dot: f64 = (k..n).map(|i| v[i - k] * q[(i, j)]).sum();
            let f = 2.0 * dot / vnorm_sq;
            for i in k..n {
                q[(i, j)] -= f * v[i - k];
            }
        }
    }
    for k in 0..p {
        if r[(k, k)] < 0.0 {
            for i in 0..n {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruction_residual(a: &Mat, e: &Eig) -> f64 {
        e.reconstruct().sub(a).frobenius()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let e = sym_eig(&Mat::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        assert!(reconstruction_residual(&Mat::identity(3), &e) < 1e-15);
    }

    #[test]
    fn diagonal_sorted_ascending() {
        let a = Mat::from_diag(&[3.0, 1.0]);
        let e = sym_eig(&a).unwrap();
        assert_eq!(e.values, vec![1.0, 3.0]);
        assert_eq!(e.vectors, Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
    }

    #[test]
    fn rejects_asymmetric() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(sym_eig(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn dense_five_by_five() {
        let a = Mat::from_fn(5, 5, |i, j| {
            let (i, j) = (i.min(j) as f64, i.max(j) as f64);
            libm::sin(1.0 + i * 0.37 - j * 0.11) + if i == j { 2.0 } else { 0.0 }
        });
        let e = sym_eig(&a).unwrap();
        assert!(reconstruction_residual(&a, &e) < 1e-10 * a.frobenius());
        let gram = e.vectors.t_matmul(&e.vectors);
        assert!(gram.sub(&Mat::identity(5)).frobenius() < 1e-10);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn qr_orthonormal_with_positive_r() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.25]]);
        let q = qr_q_factor(&a).unwrap();
        let gram = q.t_matmul(&q);
        assert!(gram.sub(&Mat::identity(2)).frobenius() < 1e-14);
        let r = q.t_matmul(&a);
        assert!(r[(0, 0)] > 0.0 && r[(1, 1)] > 0.0);
        assert!(math::abs(r[(1, 0)]) < 1e-14);
        assert!(q.matmul(&r).sub(&a).frobenius() < 1e-13);
    }

    #[test]
    fn qr_detects_rank_collapse() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        assert!(matches!(
            qr_q_factor(&a),
            Err(Error::RetractionFailure { column: 1, .. })
        ));
    }
}
