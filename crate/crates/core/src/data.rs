//! Covariance descriptors, labelled SPD datasets, a synthetic benchmark with
//! Log-Euclidean class structure and the nearest-centroid baseline.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::manifold::{frechet_mean_lem, lem_distance_sq, spd_exp, SpdMatrix, SymMatrix};
use crate::optim::Sample;

/// Regularizer scale: `λ = trace(raw) · 1e-3`.
pub const TRACE_REG: f64 = 1e-3;

/// Floor on `λ` for zero-variance sequences.
pub const REG_FLOOR: f64 = 1e-12;

/// `n` frames of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorSequence {
    dim: usize,
    frames: Vec<Vec<f64>>,
    pub label: u32,
}

impl VectorSequence {
    pub fn new(frames: Vec<Vec<f64>>, label: u32) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Precondition("a sequence needs at least two frames"));
        }
        let dim = frames[0].len();
        if dim == 0 {
            return Err(Error::Empty);
        }
        for f in &frames {
            if f.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: f.len(),
                });
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    location: "sequence frame".into(),
                });
            }
        }
        Ok(VectorSequence { dim, frames, label })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }
}

/// Unbiased sample covariance `(1/(n−1)) Σ (s − u)(s − u)ᵀ`, exactly symmetric.
pub fn raw_covariance(seq: &VectorSequence) -> Mat {
    let d = seq.dim;
    let n = seq.len() as f64;
    let mut mean = alloc::vec![0.0; d];
    for f in &seq.frames {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = Mat::zeros(d, d);
    for f in &seq.frames {
        for i in 0..d {
            let ci = f[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += ci * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// `raw + λI` with `λ = max(trace(raw) · 1e-3, 1e-12)`.
pub fn covariance_descriptor(seq: &VectorSequence) -> Result<SpdMatrix> {
    let mut cov = raw_covariance(seq);
    let lambda = (cov.trace() * TRACE_REG).max(REG_FLOOR);
    for i in 0..seq.dim {
        cov[(i, i)] += lambda;
    }
    SpdMatrix::new(cov)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Labelled SPD matrices of one dimension; labels are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdDataset {
    dim: usize,
    classes: usize,
    pub split: Split,
    items: Vec<Sample>,
}

impl SpdDataset {
    pub fn new(dim: usize, classes: usize, items: Vec<Sample>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty);
        }
        for s in &items {
            if s.x.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: s.x.dim(),
                });
            }
            if s.label == 0 || s.label as usize > classes {
                return Err(Error::InvalidLabel {
                    label: s.label,
                    classes,
                });
            }
        }
        Ok(SpdDataset {
            dim,
            classes,
            split: Split::Train,
            items,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    pub fn into_items(self) -> Vec<Sample> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Synthetic task: class `c` has anchor `A_c = exp(separation · Z_c)` with
/// `Z_c` a random symmetric matrix of unit Frobenius norm; a sample is the
/// covariance descriptor of `frames` Gaussian vectors with covariance `A_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTask {
    pub anchors: Vec<SpdMatrix>,
    /// `A_c^{1/2}`, used to colour white noise.
    roots: Vec<Mat>,
    pub frames: usize,
}

impl SynthTask {
    pub fn new<R: Rng + ?Sized>(
        classes: usize,
        dim: usize,
        separation: f64,
        frames: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config {
                field: "classes",
                reason: format!("{classes} < 2"),
            });
        }
        if dim < 4 {
            return Err(Error::Config {
                field: "dim",
                reason: format!("{dim} < 4"),
            });
        }
        if frames < 2 {
            return Err(Error::Config {
                field: "frames",
                reason: format!("{frames} < 2"),
            });
        }
        if !(separation >= 0.0 && separation.is_finite()) {
            return Err(Error::Config {
                field: "separation",
                reason: format!("{separation} must be finite and nonnegative"),
            });
        }
        let mut anchors = Vec::with_capacity(classes);
        let mut roots = Vec::with_capacity(classes);
        for _ in 0..classes {
            let g = Mat::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = g.sym();
            let norm = z.frobenius();
            let z = if norm > 0.0 { z.scale(1.0 / norm) } else { z };
            let t = SymMatrix::from_symmetrized(&z.scale(separation));
            anchors.push(spd_exp(&t)?);
            roots.push(
                spd_exp(&SymMatrix::from_symmetrized(&t.as_mat().scale(0.5)))?
                    .as_mat()
                    .clone(),
            );
        }
        Ok(SynthTask {
            anchors,
            roots,
            frames,
        })
    }

    pub fn classes(&self) -> usize {
        self.anchors.len()
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].dim()
    }

    /// One sequence drawn from class `label` (1-based).
    pub fn sequence<R: Rng + ?Sized>(&self, label: u32, rng: &mut R) -> Result<VectorSequence> {
        let c = label
            .checked_sub(1)
            .filter(|&c| (c as usize) < self.classes())
            .ok_or(Error::InvalidLabel {
                label,
                classes: self.classes(),
            })? as usize;
        let d = self.dim();
        let root = &self.roots[c];
        let frames = (0..self.frames)
            .map(|_| {
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                (0..d)
                    .map(|i| (0..d).map(|j| root[(i, j)] * z[j]).sum())
                    .collect()
            })
            .collect();
        VectorSequence::new(frames, label)
    }

    /// `n` samples with labels cycling through `1..=C`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SpdDataset> {
        let c = self.classes();
        let items = (0..n)
            .map(|i| {
                let label = (i % c) as u32 + 1;
                let x = covariance_descriptor(&self.sequence(label, rng)?)?;
                Ok(Sample { x, label })
            })
            .collect::<Result<Vec<_>>>()?;
        SpdDataset::new(self.dim(), c, items)
    }
}

/// `per_class` samples of each class from a freshly seeded task.
pub fn synth_generate(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    frames: usize,
    seed: u64,
) -> Result<SpdDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = SynthTask::new(classes, dim, separation, frames, &mut rng)?;
    task.sample(classes * per_class, &mut rng)
}

/// Train and test splits drawn from one task.
pub fn synth_split(
    classes: usize,
    dim: usize,
    separation: f64,
    frames: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(SpdDataset, SpdDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = SynthTask::new(classes, dim, separation, frames, &mut rng)?;
    let train = task.sample(n_train, &mut rng)?.with_split(Split::Train);
    let test = task.sample(n_test, &mut rng)?.with_split(Split::Test);
    Ok((train, test))
}

/// Nearest class centroid under the Log-Euclidean metric.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestCentroid {
    /// `None` for classes absent from the training data.
    pub centroids: Vec<Option<SpdMatrix>>,
}

impl NearestCentroid {
    pub fn fit(train: &SpdDataset) -> Result<Self> {
        let mut centroids = Vec::with_capacity(train.classes());
        for c in 1..=train.classes() as u32 {
            let members: Vec<SpdMatrix> = train
                .items()
                .iter()
                .filter(|s| s.label == c)
                .map(|s| s.x.clone())
                .collect();
            centroids.push(if members.is_empty() {
                None
            } else {
                Some(frechet_mean_lem(&members)?)
            });
        }
        Ok(NearestCentroid { centroids })
    }

    pub fn predict(&self, x: &SpdMatrix) -> Result<u32> {
        let mut best: Option<(f64, u32)> = None;
        for (i, c) in self.centroids.iter().enumerate() {
            if let Some(c) = c {
                let d = lem_distance_sq(c, x)?;
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, i as u32 + 1));
                }
            }
        }
        best.map(|(_, l)| l).ok_or(Error::Empty)
    }

    pub fn accuracy(&self, data: &SpdDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty);
        }
        let mut correct = 0usize;
        for s in data.items() {
            correct += usize::from(self.predict(&s.x)? == s.label);
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Nearest-centroid test accuracy fitted on `train`.
pub fn nearest_centroid_accuracy(train: &SpdDataset, test: &SpdDataset) -> Result<f64> {
    NearestCentroid::fit(train)?.accuracy(test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn one_dimensional_descriptor() {
        let seq = VectorSequence::new(vec![vec![0.0], vec![2.0]], 1).unwrap();
        let x = covariance_descriptor(&seq).unwrap();
        assert!(crate::math::abs(x.as_mat()[(0, 0)] - 2.002) < 1e-15);
    }

    #[test]
    fn constant_sequence_hits_floor() {
        let seq = VectorSequence::new(vec![vec![1.0, 2.0, 3.0]; 4], 1).unwrap();
        let x = covariance_descriptor(&seq).unwrap();
        assert_eq!(x.as_mat(), &Mat::identity(3).scale(1e-12));
    }

    #[test]
    fn short_sequence_rejected() {
        assert!(VectorSequence::new(vec![vec![1.0]], 1).is_err());
    }

    #[test]
    fn rank_deficient_is_definite() {
        let frames = vec![
            vec![1.0, 0.0, 2.0, 0.5, -1.0],
            vec![0.0, 1.0, 0.0, 0.3, 0.2],
            vec![0.4, -0.2, 1.0, 0.0, 0.9],
        ];
        let seq = VectorSequence::new(frames, 1).unwrap();
        let raw = raw_covariance(&seq);
        let x = covariance_descriptor(&seq).unwrap();
        assert!(x.min_eigenvalue() >= raw.trace() * TRACE_REG - 1e-12);
    }

    #[test]
    fn synthetic_labels_cycle() {
        let d = synth_generate(3, 4, 5, 1.0, 20, 9).unwrap();
        let labels: Vec<u32> = d.items().iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3]);
        assert_eq!(d, synth_generate(3, 4, 5, 1.0, 20, 9).unwrap());
    }
}
