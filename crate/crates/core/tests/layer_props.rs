use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smsa_core::attention::{AttentionGradConfig, GradMode};
use smsa_core::gradcheck::{
    check_bimap, check_expeig, check_lem, check_logeig, check_reeig, check_sim, check_smsa,
    check_smx, check_wts, phi_arbitration, random_gapped_spd, random_orthogonal, variant_name,
    AttentionPath, CheckResult,
};
use smsa_core::layers::{
    bimap_fwd, expeig_fwd, logeig_fwd, reeig_fwd, EigGradOptions, PhiMode, StiefelParam,
};
use smsa_core::{Error, Mat, SpdMatrix};

fn assert_pass(r: &CheckResult) {
    assert!(
        r.passed(),
        "{} ({}): max relative error {:e}",
        r.name,
        r.variant,
        r.max_rel_err
    );
}

#[test]
fn exact_layer_backwards_match_finite_differences() {
    for r in check_bimap(1, 50).unwrap() {
        assert_pass(&r);
    }
    assert_pass(&check_reeig(2, 50, PhiMode::Difference).unwrap());
    assert_pass(&check_logeig(3, 50, PhiMode::Difference).unwrap());
    assert_pass(&check_expeig(4, 50, PhiMode::Difference).unwrap());
    assert_pass(&check_sim(5, 50).unwrap());
    assert_pass(&check_smx(6, 50, GradMode::Exact).unwrap());
    for r in check_wts(7, 50).unwrap() {
        assert_pass(&r);
    }
    assert_pass(&check_lem(8, 50, GradMode::Exact, false).unwrap());
    let exact = AttentionGradConfig::default();
    assert_pass(&check_smsa(9, 50, AttentionPath::Values, exact).unwrap());
    assert_pass(&check_smsa(10, 50, AttentionPath::QueryKeys, exact).unwrap());
}

#[test]
fn paper_lem_gradient_holds_on_commuting_inputs_only() {
    let on = check_lem(11, 20, GradMode::Paper, true).unwrap();
    assert_pass(&on);
    let off = check_lem(12, 20, GradMode::Paper, false).unwrap();
    assert_eq!(off.tolerance, None);
    assert!(
        off.max_rel_err > 1e-4,
        "non-commuting discrepancy {:e}",
        off.max_rel_err
    );
}

#[test]
fn one_kernel_wins_arbitration_and_is_the_default() {
    let (results, winner) = phi_arbitration(13, 50).unwrap();
    assert_eq!(winner, Some(PhiMode::Difference));
    assert_eq!(EigGradOptions::default().phi, PhiMode::Difference);
    let failing: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(
        !failing.is_empty()
            && failing
                .iter()
                .all(|r| r.variant == variant_name(PhiMode::DifferenceOfSquares))
    );
}

#[test]
fn paper_softmax_is_report_only() {
    let r = check_smx(14, 20, GradMode::Paper).unwrap();
    assert_eq!(r.tolerance, None);
    assert!(!r.is_fatal_failure());
}

#[test]
fn tapes_are_single_use() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_gapped_spd(4, &mut rng);
    let w = StiefelParam::random(4, 3, &mut rng).unwrap();
    let dy = Mat::identity(3);
    let (_, mut t) = bimap_fwd(&w, &x).unwrap();
    t.backward(&dy).unwrap();
    assert!(matches!(t.backward(&dy), Err(Error::TapeReused)));
    let o = EigGradOptions::default();
    let dx = Mat::identity(4);
    let (_, mut t) = reeig_fwd(&x, 0.5).unwrap();
    t.backward(&dx, o).unwrap();
    assert!(matches!(t.backward(&dx, o), Err(Error::TapeReused)));
    let (l, mut t) = logeig_fwd(&x).unwrap();
    t.backward(&dx, o).unwrap();
    assert!(matches!(t.backward(&dx, o), Err(Error::TapeReused)));
    let (_, mut t) = expeig_fwd(&l).unwrap();
    t.backward(&dx, o).unwrap();
    assert!(matches!(t.backward(&dx, o), Err(Error::TapeReused)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bimap_reeig_chains_stay_spd(seed in any::<u64>(), depth in 1usize..=20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = rng.random_range(4..=10);
        let q = random_orthogonal(d, &mut rng);
        let v: Vec<f64> = (0..d).map(|_| f64::exp(rng.random_range(-4.0..2.0))).collect();
        let mut x = SpdMatrix::new(Mat::congruence_diag(&q, &v)).unwrap();
        for _ in 0..depth {
            if rng.random_bool(0.5) {
                let d_out = rng.random_range(2.max(d - 2)..=d);
                let w = StiefelParam::random(d, d_out, &mut rng).unwrap();
                x = bimap_fwd(&w, &x).unwrap().0;
                d = d_out;
            } else {
                x = reeig_fwd(&x, rng.random_range(1e-6..1e-2)).unwrap().0;
            }
            prop_assert!(x.min_eigenvalue() > 0.0);
            prop_assert_eq!(x.as_mat().max_asymmetry(), 0.0);
        }
    }

    #[test]
    fn reeig_is_idempotent(seed in any::<u64>(), n in 2usize..=8, eps in 1e-4f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_gapped_spd(n, &mut rng);
        let (once, _) = reeig_fwd(&x, eps).unwrap();
        let (twice, _) = reeig_fwd(&once, eps).unwrap();
        prop_assert_eq!(once.as_mat(), twice.as_mat());
        prop_assert!(once.min_eigenvalue() >= eps);
    }

    #[test]
    fn random_seeds_pass_layer_checks(seed in any::<u64>()) {
        for r in check_bimap(seed, 2).unwrap() {
            prop_assert!(r.passed(), "{:?}", r);
        }
        for r in [
            check_reeig(seed, 2, PhiMode::Difference).unwrap(),
            check_logeig(seed, 2, PhiMode::Difference).unwrap(),
            check_expeig(seed, 2, PhiMode::Difference).unwrap(),
            check_smx(seed, 2, GradMode::Exact).unwrap(),
        ] {
            prop_assert!(r.passed(), "{:?}", r);
        }
    }
}
