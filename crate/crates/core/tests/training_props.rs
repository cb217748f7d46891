use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smsa_core::attention::AttentionMode;
use smsa_core::data::{covariance_descriptor, raw_covariance, synth_generate, VectorSequence};
use smsa_core::eig::sym_eig;
use smsa_core::layers::StiefelParam;
use smsa_core::network::{loss, model_fwd, sample_gradients, tiny_config, Gradients, ModelState};
use smsa_core::optim::{
    apply_gradients, lr_schedule, project_tangent, stiefel_step, train_epoch, OptimizerConfig,
    Sample, Sequential,
};
use smsa_core::Mat;

fn tiny_data(seed: u64, per_class: usize) -> Vec<Sample> {
    synth_generate(3, per_class, 8, 2.0, 40, seed)
        .unwrap()
        .into_items()
}

fn init(seed: u64, mode: AttentionMode) -> ModelState {
    ModelState::init(&tiny_config(mode), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn batch_loss(data: &[Sample], state: &ModelState, mode: AttentionMode) -> f64 {
    let cfg = tiny_config(mode);
    data.iter()
        .map(|s| {
            loss(&model_fwd(&s.x, state, &cfg).unwrap(), s.label, &cfg)
                .unwrap()
                .total
        })
        .sum::<f64>()
        / data.len() as f64
}

#[test]
fn one_small_step_descends() {
    let cfg = tiny_config(AttentionMode::Smsa);
    let data = tiny_data(99, 2);
    let mut descended = 0;
    for seed in 0..100 {
        let mut state = init(seed, AttentionMode::Smsa);
        let before = batch_loss(&data, &state, AttentionMode::Smsa);
        let mut total = Gradients::zeros_like(&state);
        for s in &data {
            total.axpy(
                1.0,
                &sample_gradients(&s.x, s.label, &state, &cfg).unwrap().2,
            );
        }
        total.scale(1.0 / data.len() as f64);
        apply_gradients(&mut state, &total, 1e-3, 1e-3).unwrap();
        descended += usize::from(batch_loss(&data, &state, AttentionMode::Smsa) < before);
    }
    assert!(descended >= 95, "descended on {descended} of 100 seeds");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let net = tiny_config(AttentionMode::Smsa);
    let data = tiny_data(5, 4);
    let opt = OptimizerConfig {
        lr: 0.0,
        batch_size: 5,
        ..OptimizerConfig::default()
    };
    let start = init(1, AttentionMode::Smsa);
    let mut state = start.clone();
    let m = train_epoch(&data, &mut state, &net, &opt, 0, &Sequential).unwrap();
    assert_eq!(state, start);
    assert!(m.loss.is_finite() && m.loss > 0.0);
    assert!((0.0..=1.0).contains(&m.train_acc));
}

#[test]
fn pinned_seed_training_is_bit_identical() {
    let net = tiny_config(AttentionMode::Smsa);
    let data = tiny_data(6, 5);
    let opt = OptimizerConfig {
        batch_size: 4,
        seed: 17,
        ..OptimizerConfig::default()
    };
    let run = || {
        let mut state = init(2, AttentionMode::Smsa);
        let metrics: Vec<_> = (0..3)
            .map(|e| train_epoch(&data, &mut state, &net, &opt, e, &Sequential).unwrap())
            .collect();
        (state, metrics)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(format!("{:?}", a.1), format!("{:?}", b.1));
}

#[test]
fn lr_schedule_is_non_increasing() {
    let opt = OptimizerConfig {
        decay_period: Some(7),
        ..OptimizerConfig::default()
    };
    let lrs: Vec<f64> = (0..100).map(|e| lr_schedule(e, &opt)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(lrs[0], 0.01);
    assert!((lrs[14] - 0.01 * 0.64).abs() < 1e-15);
    let flat = OptimizerConfig::default();
    assert!((0..100).all(|e| lr_schedule(e, &flat) == 0.01));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn steps_stay_on_the_stiefel_manifold(seed in any::<u64>(), d_in in 2usize..=9, lr in 1e-4f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_out = rng.random_range(1..=d_in);
        let mut w = StiefelParam::random(d_in, d_out, &mut rng).unwrap();
        for _ in 0..5 {
            let g = Mat::from_fn(d_in, d_out, |_, _| rng.random_range(-3.0..3.0));
            let p = project_tangent(w.as_mat(), &g);
            let skew = w.as_mat().t_matmul(&p);
            prop_assert!(skew.add(&skew.transpose()).max_abs() < 1e-10);
            w = stiefel_step(&w, &g, lr).unwrap();
            prop_assert!(w.orthogonality_residual() < 1e-10);
        }
    }

    #[test]
    fn forward_pass_invariants(seed in any::<u64>(), mode_ix in 0usize..3) {
        let mode = [AttentionMode::Smsa, AttentionMode::Eusa, AttentionMode::None][mode_ix];
        let cfg = tiny_config(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = ModelState::init(&cfg, &mut rng).unwrap();
        let x = &tiny_data(seed, 1)[rng.random_range(0..3)];
        let t = model_fwd(&x.x, &state, &cfg).unwrap();
        prop_assert!(t.r.min_eigenvalue() > 0.0);
        for h in t.hidden.iter().chain(&t.stage_out) {
            prop_assert!(h.min_eigenvalue() > 0.0);
        }
        for r in &t.recon {
            let e = sym_eig(r.as_mat()).unwrap();
            prop_assert!(e.min() > -1e-10);
            prop_assert!(e.values.iter().filter(|&&v| v > 1e-10).count() <= cfg.d_down);
        }
        let l = loss(&t, x.label, &cfg).unwrap();
        prop_assert!(l.ce >= 0.0 && l.recon >= 0.0 && l.total >= 0.0);
        let again = model_fwd(&x.x, &state, &cfg).unwrap();
        prop_assert_eq!(&t.logits, &again.logits);
        prop_assert_eq!(&t.recon, &again.recon);
    }

    #[test]
    fn descriptor_properties(seed in any::<u64>(), dim in 1usize..=6, len in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let seq = VectorSequence::new(frames.clone(), 1).unwrap();
        let c = covariance_descriptor(&seq).unwrap();
        prop_assert_eq!(c.as_mat().max_asymmetry(), 0.0);
        let raw = raw_covariance(&seq);
        let lambda = (raw.trace() * 1e-3).max(1e-12);
        prop_assert!(c.min_eigenvalue() >= lambda - 1e-12);

        let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-100.0..100.0)).collect();
        let shifted: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| f.iter().zip(&shift).map(|(a, b)| a + b).collect())
            .collect();
        let cs = covariance_descriptor(&VectorSequence::new(shifted, 1).unwrap()).unwrap();
        prop_assert!(cs.as_mat().sub(c.as_mat()).max_abs() < 1e-10);

        let alpha = rng.random_range(0.1..10.0);
        let scaled: Vec<Vec<f64>> = frames.iter().map(|f| f.iter().map(|v| alpha * v).collect()).collect();
        let rs = raw_covariance(&VectorSequence::new(scaled, 1).unwrap());
        prop_assert!(rs.sub(&raw.scale(alpha * alpha)).max_abs() < 1e-10 * rs.max_abs().max(1.0));
    }
}
