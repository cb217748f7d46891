//! Riemannian SGD on the Stiefel weights, plain SGD on the classifier, a
//! step-decay learning-rate schedule and the epoch loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eig::qr_q_factor;
use crate::error::{Error, Result};
use crate::layers::StiefelParam;
use crate::linalg::Mat;
use crate::manifold::SpdMatrix;
use crate::math;
use crate::network::{
    loss, model_fwd, sample_gradients, Gradients, LossBreakdown, ModelState, NetworkConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    /// Base learning rate ξ.
    pub lr: f64,
    /// Learning rate for the FC parameters; `None` shares ξ.
    pub fc_lr: Option<f64>,
    pub decay_factor: f64,
    /// Epochs between decays; `None` keeps the rate constant.
    pub decay_period: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            fc_lr: None,
            decay_factor: 0.8,
            decay_period: None,
            batch_size: 30,
            epochs: 200,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: alloc::string::String| {
            Err(Error::Config { field, reason })
        };
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be finite and nonnegative", self.lr));
        }
        if let Some(f) = self.fc_lr {
            if !(f >= 0.0 && f.is_finite()) {
                return bad("fc_lr", format!("{f} must be finite and nonnegative"));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(
                "decay_factor",
                format!("{} must lie in (0, 1]", self.decay_factor),
            );
        }
        if self.decay_period == Some(0) {
            return bad("decay_period", "must be at least 1 epoch".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        Ok(())
    }
}

/// `ξ · factor^⌊epoch/period⌋`.
pub fn lr_schedule(epoch: usize, cfg: &OptimizerConfig) -> f64 {
    match cfg.decay_period {
        None => cfg.lr,
        Some(p) => cfg.lr * math::powi(cfg.decay_factor, (epoch / p) as i32),
    }
}

/// Canonical tangent projection `G − W sym(WᵀG)`.
pub fn project_tangent(w: &Mat, g: &Mat) -> Mat {
    g.sub(&w.matmul(&w.t_matmul(g).sym()))
}

/// Projected step followed by QR retraction. A vanishing step returns `W`
/// unchanged.
pub fn stiefel_step(w: &StiefelParam, euclidean_grad: &Mat, lr: f64) -> Result<StiefelParam> {
    if euclidean_grad.shape() != w.as_mat().shape() {
        return Err(Error::DimensionMismatch {
            expected: w.d_in(),
            found: euclidean_grad.rows(),
        });
    }
    if !euclidean_grad.is_finite() {
        return Err(Error::NonFinite {
            location: "Stiefel gradient".into(),
        });
    }
    let tangent = project_tangent(w.as_mat(), euclidean_grad);
    if lr == 0.0 || tangent.max_abs() == 0.0 {
        return Ok(w.clone());
    }
    let mut moved = w.as_mat().clone();
    moved.axpy(-lr, &tangent);
    Ok(StiefelParam::new_unchecked(qr_q_factor(&moved)?))
}

/// Applies one step to every parameter.
pub fn apply_gradients(
    state: &mut ModelState,
    grads: &Gradients,
    lr: f64,
    fc_lr: f64,
) -> Result<()> {
    let groups = [
        (&mut state.backbone, &grads.backbone),
        (&mut state.down, &grads.down),
        (&mut state.up, &grads.up),
    ];
    for (params, gs) in groups {
        for (w, g) in params.iter_mut().zip(gs) {
            *w = stiefel_step(w, g, lr)?;
        }
    }
    for (w, g) in state.fc_w.iter_mut().zip(&grads.fc_w) {
        w.axpy(-fc_lr, g);
    }
    for (b, g) in state.fc_b.iter_mut().zip(&grads.fc_b) {
        b.axpy(-fc_lr, g);
    }
    Ok(())
}

/// Evaluates a closure for indices `0..n`, returning results in index order.
///
/// Implementations may run in parallel; callers reduce the output in order, so
/// results do not depend on the implementation.
pub trait SampleMap {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs every sample on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl SampleMap for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// A labelled SPD sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: SpdMatrix,
    pub label: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over samples.
    pub loss: f64,
    pub ce: f64,
    pub recon: f64,
    /// Accuracy of the pre-step predictions made during the epoch.
    pub train_acc: f64,
}

/// Random stream for one epoch, derived from `(seed, epoch)` so that a
/// resumed run sees the same shuffles.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn batch_error(e: Error, batch: usize) -> Error {
    match e {
        Error::NonFinite { location } => Error::NonFinite {
            location: format!("batch {batch}: {location}"),
        },
        other => other,
    }
}

/// One pass over `data` in shuffled mini-batches; gradients and losses are
/// averaged per actual batch size (the last batch may be short).
pub fn train_epoch<M: SampleMap>(
    data: &[Sample],
    state: &mut ModelState,
    net: &NetworkConfig,
    opt: &OptimizerConfig,
    epoch: usize,
    mapper: &M,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let lr = lr_schedule(epoch, opt);
    let fc_lr = opt.fc_lr.map_or(lr, |f| {
        lr_schedule(
            epoch,
            &OptimizerConfig {
                lr: f,
                ..opt.clone()
            },
        )
    });
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut epoch_rng(opt.seed, epoch));

    let (mut loss_sum, mut ce_sum, mut recon_sum, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for (b, batch) in order.chunks(opt.batch_size).enumerate() {
        let shared: &ModelState = state;
        let results = mapper.map(batch.len(), |i| {
            let s = &data[batch[i]];
            sample_gradients(&s.x, s.label, shared, net)
        });
        let mut total = Gradients::zeros_like(state);
        for (r, &i) in results.into_iter().zip(batch) {
            let (l, pred, g) = r.map_err(|e| batch_error(e, b))?;
            loss_sum += l.total;
            ce_sum += l.ce;
            recon_sum += l.recon;
            correct += usize::from(pred == data[i].label);
            total.axpy(1.0, &g);
        }
        total.scale(1.0 / batch.len() as f64);
        apply_gradients(state, &total, lr, fc_lr).map_err(|e| batch_error(e, b))?;
    }
    let n = data.len() as f64;
    Ok(EpochMetrics {
        epoch,
        lr,
        loss: loss_sum / n,
        ce: ce_sum / n,
        recon: recon_sum / n,
        train_acc: correct as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy of the deepest head and mean loss.
pub fn evaluate<M: SampleMap>(
    data: &[Sample],
    state: &ModelState,
    net: &NetworkConfig,
    mapper: &M,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let results = mapper.map(data.len(), |i| -> Result<(LossBreakdown, u32)> {
        let trace = model_fwd(&data[i].x, state, net)?;
        Ok((loss(&trace, data[i].label, net)?, trace.prediction()))
    });
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (r, s) in results.into_iter().zip(data) {
        let (l, pred) = r?;
        loss_sum += l.total;
        correct += usize::from(pred == s.label);
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        accuracy: correct as f64 / n,
        loss: loss_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn schedule() {
        let mut cfg = OptimizerConfig {
            decay_period: Some(50),
            ..OptimizerConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.01);
        assert_eq!(lr_schedule(49, &cfg), 0.01);
        assert!(math::abs(lr_schedule(50, &cfg) - 0.008) < 1e-18);
        cfg.decay_period = None;
        assert_eq!(lr_schedule(10_000, &cfg), 0.01);
    }

    #[test]
    fn zero_gradient_keeps_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = StiefelParam::random(5, 3, &mut rng).unwrap();
        let w2 = stiefel_step(&w, &Mat::zeros(5, 3), 0.1).unwrap();
        assert_eq!(w, w2);
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = StiefelParam::random(6, 3, &mut rng).unwrap();
        let g = Mat::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let p = project_tangent(w.as_mat(), &g);
        let pp = project_tangent(w.as_mat(), &p);
        assert!(p.sub(&pp).max_abs() < 1e-14);
        assert!(w.as_mat().t_matmul(&p).sym().max_abs() < 1e-14);
    }

    #[test]
    fn step_stays_on_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = StiefelParam::random(7, 4, &mut rng).unwrap();
        let g = Mat::from_fn(7, 4, |_, _| rng.random_range(-3.0..3.0));
        let w2 = stiefel_step(&w, &g, 0.5).unwrap();
        assert!(w2.orthogonality_residual() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = OptimizerConfig::default();
        cfg.validate().unwrap();
        cfg.batch_size = 0;
        assert!(matches!(
            cfg.validate(),
            Err(Error::Config {
                field: "batch_size",
                ..
            })
        ));
    }
}
