mod common;

use common::oracle;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smsa_core::gradcheck::{random_orthogonal, random_sym};
use smsa_core::manifold::{
    frechet_mean_lem, lem_distance_sq, spd_exp, spd_log, weighted_frechet_mean_lem,
};
use smsa_core::{Mat, SpdMatrix, SymMatrix};

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
    let q = random_orthogonal(n, rng);
    let v: Vec<f64> = (0..n)
        .map(|_| f64::exp(rng.random_range(-2.0..2.0)))
        .collect();
    SpdMatrix::new(Mat::congruence_diag(&q, &v)).unwrap()
}

fn convex_weights(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

#[test]
fn oracle_functions_agree_with_eigen_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 2..=8 {
        let x = random_spd(n, &mut rng);
        let l = spd_log(&x).unwrap();
        assert!(oracle::logm(x.as_mat()).sub(l.as_mat()).max_abs() < 1e-10);
        assert!(oracle::expm(l.as_mat()).sub(x.as_mat()).max_abs() < 1e-9 * x.as_mat().max_abs());
    }
}

#[test]
fn closed_form_mean_matches_gradient_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let n = rng.random_range(3..=8);
        let k = rng.random_range(3..=5);
        let xs: Vec<SpdMatrix> = (0..k).map(|_| random_spd(n, &mut rng)).collect();
        let w = convex_weights(k, &mut rng);
        let closed = weighted_frechet_mean_lem(&xs, &w).unwrap();
        let (gd, _) = oracle::frechet_gd(&xs, &w, 1e-12);
        let d = lem_distance_sq(&closed, &SpdMatrix::new(gd).unwrap())
            .unwrap()
            .sqrt();
        assert!(d < 1e-6, "LEM distance {d:e}");
    }
}

#[test]
fn four_by_four_triple_matches_gradient_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<SpdMatrix> = (0..3).map(|_| random_spd(4, &mut rng)).collect();
    let (gd, _) = oracle::frechet_gd(&xs, &[1.0 / 3.0; 3], 1e-12);
    let d = lem_distance_sq(
        &frechet_mean_lem(&xs).unwrap(),
        &SpdMatrix::new(gd).unwrap(),
    )
    .unwrap();
    assert!(d.sqrt() < 1e-6);
}

#[test]
fn spd_closure_of_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let s = SymMatrix::new(random_sym(n, &mut rng).scale(rng.random_range(0.1..5.0))).unwrap();
        assert!(spd_exp(&s).unwrap().min_eigenvalue() > 0.0);
    }
}

fn seeds() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 2usize..=7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_axioms((seed, n) in seeds()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, z) = (random_spd(n, &mut rng), random_spd(n, &mut rng), random_spd(n, &mut rng));
        let d = |a: &SpdMatrix, b: &SpdMatrix| lem_distance_sq(a, b).unwrap().sqrt();
        prop_assert_eq!(d(&x, &y), d(&y, &x));
        prop_assert_eq!(d(&x, &x), 0.0);
        prop_assert!(d(&x, &y) > 0.0);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-9);
    }

    #[test]
    fn rotation_invariance((seed, n) in seeds()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_spd(n, &mut rng), random_spd(n, &mut rng));
        let r = random_orthogonal(n, &mut rng);
        let rot = |a: &SpdMatrix| SpdMatrix::new(r.matmul(a.as_mat()).matmul_t(&r).sym()).unwrap();
        let before = lem_distance_sq(&x, &y).unwrap();
        let after = lem_distance_sq(&rot(&x), &rot(&y)).unwrap();
        prop_assert!((before - after).abs() < 1e-8 * before.max(1.0));
    }

    #[test]
    fn weighted_mean_is_stationary((seed, n) in seeds(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<SpdMatrix> = (0..k).map(|_| random_spd(n, &mut rng)).collect();
        let w = convex_weights(k, &mut rng);
        let p = weighted_frechet_mean_lem(&xs, &w).unwrap();
        let lp = spd_log(&p).unwrap();
        let mut grad = Mat::zeros(n, n);
        for (x, &wi) in xs.iter().zip(&w) {
            grad.axpy(wi, &lp.as_mat().sub(spd_log(x).unwrap().as_mat()));
        }
        prop_assert!(grad.frobenius() < 1e-8);
    }

    #[test]
    fn log_exp_round_trip((seed, n) in seeds()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_spd(n, &mut rng);
        let back = spd_exp(&spd_log(&x).unwrap()).unwrap();
        prop_assert!(back.as_mat().sub(x.as_mat()).max_abs() < 1e-10 * x.as_mat().max_abs());
        prop_assert_eq!(back.as_mat().max_asymmetry(), 0.0);
    }

    #[test]
    fn mean_of_identical_points_is_that_point((seed, n) in seeds(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_spd(n, &mut rng);
        let m = frechet_mean_lem(&vec![x.clone(); k]).unwrap();
        prop_assert!(lem_distance_sq(&m, &x).unwrap() < 1e-20);
    }
}
