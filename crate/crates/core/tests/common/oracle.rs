//! Eigensolver-free matrix functions and a gradient-descent Fréchet-mean
//! oracle used to cross-check the closed-form Log-Euclidean mean.

#![allow(dead_code)]

use smsa_core::{Mat, SpdMatrix};

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &Mat) -> Mat {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = Mat::identity(n);
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[(i, c)].abs().total_cmp(&m[(j, c)].abs()))
            .unwrap();
        for k in 0..n {
            let (t, u) = (m[(c, k)], inv[(c, k)]);
            m[(c, k)] = m[(p, k)];
            inv[(c, k)] = inv[(p, k)];
            m[(p, k)] = t;
            inv[(p, k)] = u;
        }
        let d = m[(c, c)];
        assert!(d.abs() > 1e-300, "singular matrix in oracle inverse");
        for k in 0..n {
            m[(c, k)] /= d;
            inv[(c, k)] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[(r, c)];
                if f != 0.0 {
                    for k in 0..n {
                        m[(r, k)] -= f * m[(c, k)];
                        inv[(r, k)] -= f * inv[(c, k)];
                    }
                }
            }
        }
    }
    inv
}

/// Principal square root by the Denman-Beavers iteration.
pub fn sqrtm(a: &Mat) -> Mat {
    let mut y = a.clone();
    let mut z = Mat::identity(a.rows());
    for _ in 0..100 {
        let yi = inverse(&y);
        let zi = inverse(&z);
        let y_next = y.add(&zi).scale(0.5);
        let z_next = z.add(&yi).scale(0.5);
        let delta = y_next.sub(&y).frobenius() / y_next.frobenius();
        y = y_next;
        z = z_next;
        if delta < 1e-15 {
            break;
        }
    }
    y.sym()
}

/// Matrix logarithm by inverse scaling and squaring with the Gregory series
/// `log Y = 2 Σ_{k odd} Z^k / k`, `Z = (Y − I)(Y + I)⁻¹`.
pub fn logm(a: &Mat) -> Mat {
    let n = a.rows();
    let id = Mat::identity(n);
    let mut y = a.clone();
    let mut roots = 0;
    while y.sub(&id).frobenius() > 0.05 {
        y = sqrtm(&y);
        roots += 1;
        assert!(roots < 60, "oracle log did not converge");
    }
    let z = y.sub(&id).matmul(&inverse(&y.add(&id)));
    let z2 = z.matmul(&z);
    let mut term = z.clone();
    let mut sum = z.clone();
    for k in (3..200).step_by(2) {
        term = term.matmul(&z2);
        let t = term.scale(1.0 / k as f64);
        sum = sum.add(&t);
        if t.max_abs() < 1e-20 {
            break;
        }
    }
    sum.scale(2.0 * f64::powi(2.0, roots)).sym()
}

/// Matrix exponential by scaling and squaring of the Taylor series.
pub fn expm(a: &Mat) -> Mat {
    let norm = a.frobenius();
    let mut s = 0;
    while norm / f64::powi(2.0, s) > 0.5 {
        s += 1;
    }
    let b = a.scale(1.0 / f64::powi(2.0, s));
    let mut term = Mat::identity(a.rows());
    let mut sum = term.clone();
    for k in 1..40 {
        term = term.matmul(&b).scale(1.0 / k as f64);
        sum = sum.add(&term);
    }
    for _ in 0..s {
        sum = sum.matmul(&sum);
    }
    sum.sym()
}

/// Minimiser of `Σ wᵢ ‖log P − log Xᵢ‖²_F` by gradient descent on `S = log P`,
/// starting at `S = 0` and stopping once the gradient norm is below `tol`.
pub fn frechet_gd(xs: &[SpdMatrix], w: &[f64], tol: f64) -> (Mat, usize) {
    let logs: Vec<Mat> = xs.iter().map(|x| logm(x.as_mat())).collect();
    let n = xs[0].dim();
    let mut s = Mat::zeros(n, n);
    let step = 0.2;
    for it in 0..10_000 {
        let mut grad = Mat::zeros(n, n);
        for (l, &wi) in logs.iter().zip(w) {
            grad.axpy(2.0 * wi, &s.sub(l));
        }
        if grad.frobenius() < tol {
            return (expm(&s), it);
        }
        s.axpy(-step, &grad);
    }
    panic!("gradient descent did not converge");
}
