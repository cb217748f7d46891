//! SPDNet layer family: BiMap, ReEig, LogEig, ExpEig and the transposed
//! BiMap used as the autoencoder up-map.
//!
//! Each forward returns a tape that its backward consumes exactly once.
//! Gradients follow the Euclidean convention `dL = ⟨G, dX⟩_F`; gradients with
//! respect to symmetric inputs are returned symmetrized.
//!
//! The eigen-based layers share one backward scaffold. For `Y = U f(Σ) Uᵀ`
//! with upstream gradient `G`:
//!
//! ```text
//! Ω₁ = ∂L/∂U = 2 G U f(Σ)          Ω₂ = ∂L/∂Σ = f'(Σ) ∘ diag(Uᵀ G U)
//! ∂L/∂X = U [ (Φᵀ ∘ (Uᵀ Ω₁))_sym + (Ω₂)_diag ] Uᵀ
//! ```
//!
//! with `Φ_ij = 1/(σ_i − σ_j)` off the diagonal ([`PhiMode::Difference`]).
//! [`PhiMode::DifferenceOfSquares`] swaps in `1/(σ_i² − σ_j²)`; it is kept for
//! comparison and fails finite-difference checks.

use alloc::format;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::eig::{qr_q_factor, Eig};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::manifold::{exp_from_eig, SpdMatrix, SymMatrix, LOG_EIGEN_FLOOR};
use crate::math;

/// Orthogonality tolerance `‖WᵀW − I‖_F` for Stiefel weights.
pub const STIEFEL_TOL: f64 = 1e-8;

/// Relative eigenvalue gap (times the spectral radius) treated as a tie.
pub const DEGENERACY_REL_GAP: f64 = 1e-6;

static DEGENERATE_PAIRS: AtomicUsize = AtomicUsize::new(0);

/// Number of near-tied eigenvalue pairs handled by the tie rule since start-up.
pub fn degenerate_pair_count() -> usize {
    DEGENERATE_PAIRS.load(Ordering::Relaxed)
}

/// Off-diagonal kernel used by the eigen backward scaffold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PhiMode {
    /// `Φ_ij = 1/(σ_i − σ_j)`.
    #[default]
    Difference,
    /// `Φ_ij = 1/(σ_i² − σ_j²)`.
    DifferenceOfSquares,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EigGradOptions {
    pub phi: PhiMode,
    /// Return [`Error::DegenerateSpectrum`] on near-ties instead of using the
    /// divided-difference limit.
    pub strict: bool,
}

/// Semi-orthogonal `d_in × d_out` weight (`d_out ≤ d_in`, `WᵀW = I`).
#[derive(Clone, Debug, PartialEq)]
pub struct StiefelParam(Mat);

impl StiefelParam {
    pub fn new(w: Mat) -> Result<Self> {
        let (d_in, d_out) = w.shape();
        if d_out > d_in || d_out == 0 {
            return Err(Error::Config {
                field: "stiefel shape",
                reason: format!("{d_in}x{d_out} needs 0 < d_out <= d_in"),
            });
        }
        let residual = orthogonality_residual(&w);
        if !(residual <= STIEFEL_TOL) {
            return Err(Error::Config {
                field: "stiefel weight",
                reason: format!("‖WᵀW − I‖_F = {residual:e} exceeds {STIEFEL_TOL:e}"),
            });
        }
        Ok(StiefelParam(w))
    }

    /// Skips the orthogonality check. Used for finite-difference probes that
    /// move the weight off the manifold.
    pub fn new_unchecked(w: Mat) -> Self {
        StiefelParam(w)
    }

    pub fn identity_columns(d_in: usize, d_out: usize) -> Result<Self> {
        StiefelParam::new(Mat::identity_columns(d_in, d_out))
    }

    /// Q factor of a Gaussian `d_in × d_out` matrix.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let g = Mat::from_fn(d_in, d_out, |_, _| rng.sample(StandardNormal));
        StiefelParam::new(qr_q_factor(&g)?)
    }

    pub fn d_in(&self) -> usize {
        self.0.rows()
    }

    pub fn d_out(&self) -> usize {
        self.0.cols()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn orthogonality_residual(&self) -> f64 {
        orthogonality_residual(&self.0)
    }
}

fn orthogonality_residual(w: &Mat) -> f64 {
    w.t_matmul(w).sub(&Mat::identity(w.cols())).frobenius()
}

/// Layer kinds, used for tagging tapes and naming failures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    BiMap,
    UpMap,
    ReEig,
    LogEig,
    ExpEig,
}

impl core::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let name = match self {
            LayerKind::BiMap => "BiMap",
            LayerKind::UpMap => "UpMap",
            LayerKind::ReEig => "ReEig",
            LayerKind::LogEig => "LogEig",
            LayerKind::ExpEig => "ExpEig",
        };
        f.write_str(name)
    }
}

fn check_grad(g: &Mat, dim: usize, kind: LayerKind) -> Result<Mat> {
    if g.shape() != (dim, dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: g.rows(),
        });
    }
    if !g.is_finite() {
        return Err(Error::NonFinite {
            location: format!("{kind} upstream gradient"),
        });
    }
    Ok(g.sym())
}

fn consume(consumed: &mut bool) -> Result<()> {
    if core::mem::replace(consumed, true) {
        return Err(Error::TapeReused);
    }
    Ok(())
}

/// Anything whose symmetric eigendecomposition is available.
pub trait Spectral {
    fn dim(&self) -> usize;
    fn spectrum(&self) -> Eig;
}

impl Spectral for SpdMatrix {
    fn dim(&self) -> usize {
        SpdMatrix::dim(self)
    }

    fn spectrum(&self) -> Eig {
        self.eig().clone()
    }
}

impl Spectral for SymMatrix {
    fn dim(&self) -> usize {
        SymMatrix::dim(self)
    }

    fn spectrum(&self) -> Eig {
        self.eig()
    }
}

/// Backward pass through `Y = U f(Σ) Uᵀ`.
///
/// `f` and `df` hold `f(σ_i)` and `f'(σ_i)`. Pairs whose eigenvalue gap is at
/// most [`DEGENERACY_REL_GAP`] times the spectral radius use the
/// divided-difference limit `ĝ_ij (f'(σ_i) + f'(σ_j)) / 2` in place of the
/// `Φ` quotient (or fail, in strict mode). Pairs lying in a flat region of
/// `f` (equal values, zero derivative) contribute exactly zero either way.
pub fn spectral_backward(
    eig: &Eig,
    f: &[f64],
    df: &[f64],
    grad_out: &Mat,
    opts: EigGradOptions,
) -> Result<SymMatrix> {
    let n = eig.dim();
    let u = &eig.vectors;
    let s = &eig.values;
    let g = grad_out.sym();

    // Ω₁ = 2 G U f(Σ); Uᵀ Ω₁ = 2 Ĝ f(Σ) with Ĝ = Uᵀ G U.
    let g_hat = u.t_matmul(&g.matmul(u));
    let u_omega1 = Mat::from_fn(n, n, |i, j| 2.0 * g_hat[(i, j)] * f[j]);

    let threshold = DEGENERACY_REL_GAP * eig.spectral_radius().max(f64::MIN_POSITIVE);
    let mut inner = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let gap = s[j] - s[i];
            let denom = match opts.phi {
                PhiMode::Difference => gap,
                PhiMode::DifferenceOfSquares => s[j] * s[j] - s[i] * s[i],
            };
            // (Φᵀ)_ij = Φ_ji = 1/(σ_j − σ_i)
            if math::abs(gap) > threshold && math::abs(denom) > threshold {
                inner[(i, j)] = u_omega1[(i, j)] / denom;
                continue;
            }
            let flat = f[i] == f[j] && df[i] == 0.0 && df[j] == 0.0;
            if flat {
                continue;
            }
            if opts.strict {
                return Err(Error::DegenerateSpectrum {
                    gap: math::abs(gap),
                    threshold,
                });
            }
            if i < j {
                DEGENERATE_PAIRS.fetch_add(1, Ordering::Relaxed);
            }
            inner[(i, j)] = g_hat[(i, j)] * 0.5 * (df[i] + df[j]);
        }
    }
    let mut k = inner.sym();
    for i in 0..n {
        // Ω₂ = f'(Σ) diag(Ĝ)
        k[(i, i)] = df[i] * g_hat[(i, i)];
    }
    let dx = u.matmul(&k).matmul_t(u);
    Ok(SymMatrix::from_symmetrized(&dx))
}

// ---------------------------------------------------------------- BiMap

#[derive(Debug)]
pub struct BiMapTape {
    weight: Mat,
    input: Mat,
    consumed: bool,
}

/// `Y = Wᵀ X W`.
pub fn bimap_fwd(w: &StiefelParam, x: &SpdMatrix) -> Result<(SpdMatrix, BiMapTape)> {
    if x.dim() != w.d_in() {
        return Err(Error::DimensionMismatch {
            expected: w.d_in(),
            found: x.dim(),
        });
    }
    let y = w.as_mat().t_matmul(&x.as_mat().matmul(w.as_mat()));
    let y = SpdMatrix::new(y.sym())?;
    Ok((
        y,
        BiMapTape {
            weight: w.as_mat().clone(),
            input: x.as_mat().clone(),
            consumed: false,
        },
    ))
}

impl BiMapTape {
    pub fn kind(&self) -> LayerKind {
        LayerKind::BiMap
    }

    /// Returns `(∂L/∂X, ∂L/∂W)` with `∂L/∂X = W Ĝ Wᵀ` and
    /// `∂L/∂W = 2 X W Ĝ`, `Ĝ = sym(dY)`.
    pub fn backward(&mut self, dy: &Mat) -> Result<(SymMatrix, Mat)> {
        let g = check_grad(dy, self.weight.cols(), LayerKind::BiMap)?;
        consume(&mut self.consumed)?;
        let w = &self.weight;
        let dx = w.matmul(&g).matmul_t(w);
        let dw = self.input.matmul(w).matmul(&g).scale(2.0);
        Ok((SymMatrix::from_symmetrized(&dx), dw))
    }
}

// ---------------------------------------------------------------- UpMap

#[derive(Debug)]
pub struct UpMapTape {
    weight: Mat,
    input: Mat,
    consumed: bool,
}

/// `Ĥ = W H Wᵀ` for a `d_up × d_down` Stiefel weight. The result has rank at
/// most `d_down`, so it is only positive semi-definite.
pub fn upmap_fwd(w: &StiefelParam, h: &SpdMatrix) -> Result<(SymMatrix, UpMapTape)> {
    if h.dim() != w.d_out() {
        return Err(Error::DimensionMismatch {
            expected: w.d_out(),
            found: h.dim(),
        });
    }
    let y = w.as_mat().matmul(h.as_mat()).matmul_t(w.as_mat());
    Ok((
        SymMatrix::from_symmetrized(&y),
        UpMapTape {
            weight: w.as_mat().clone(),
            input: h.as_mat().clone(),
            consumed: false,
        },
    ))
}

impl UpMapTape {
    pub fn kind(&self) -> LayerKind {
        LayerKind::UpMap
    }

    /// Returns `(∂L/∂H, ∂L/∂W)` with `∂L/∂H = Wᵀ Ĝ W`, `∂L/∂W = 2 Ĝ W H`.
    pub fn backward(&mut self, dy: &Mat) -> Result<(SymMatrix, Mat)> {
        let g = check_grad(dy, self.weight.rows(), LayerKind::UpMap)?;
        consume(&mut self.consumed)?;
        let w = &self.weight;
        let dh = w.t_matmul(&g.matmul(w));
        let dw = g.matmul(w).matmul(&self.input).scale(2.0);
        Ok((SymMatrix::from_symmetrized(&dh), dw))
    }
}

// ---------------------------------------------------------------- ReEig

#[derive(Debug)]
pub struct ReEigTape {
    eig: Eig,
    eps: f64,
    mask: Vec<bool>,
    consumed: bool,
}

/// `Y = U max(εI, Σ) Uᵀ`. Accepts any symmetric input; positive
/// semi-definite inputs are lifted to definiteness by the clamp.
pub fn reeig_fwd<X: Spectral + ?Sized>(x: &X, eps: f64) -> Result<(SpdMatrix, ReEigTape)> {
    if !(eps > 0.0) {
        return Err(Error::Precondition("ReEig threshold must be positive"));
    }
    let eig = x.spectrum();
    let mask: Vec<bool> = eig.values.iter().map(|&v| v > eps).collect();
    let values = eig.values.iter().map(|&v| v.max(eps)).collect();
    let y = SpdMatrix::from_eig(Eig {
        values,
        vectors: eig.vectors.clone(),
    })?;
    Ok((
        y,
        ReEigTape {
            eig,
            eps,
            mask,
            consumed: false,
        },
    ))
}

impl ReEigTape {
    pub fn kind(&self) -> LayerKind {
        LayerKind::ReEig
    }

    /// Eigenvalues above the threshold (the active, identity-mapped directions).
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn backward(&mut self, dy: &Mat, opts: EigGradOptions) -> Result<SymMatrix> {
        let g = check_grad(dy, self.eig.dim(), LayerKind::ReEig)?;
        consume(&mut self.consumed)?;
        let f: Vec<f64> = self.eig.values.iter().map(|&v| v.max(self.eps)).collect();
        let df: Vec<f64> = self
            .mask
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        spectral_backward(&self.eig, &f, &df, &g, opts)
    }
}

// ---------------------------------------------------------------- LogEig

#[derive(Debug)]
pub struct LogEigTape {
    eig: Eig,
    consumed: bool,
}

/// `Y = U log(Σ) Uᵀ`.
pub fn logeig_fwd(x: &SpdMatrix) -> Result<(SymMatrix, LogEigTape)> {
    if x.min_eigenvalue() < LOG_EIGEN_FLOOR {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: x.min_eigenvalue(),
        });
    }
    let eig = x.eig().clone();
    let y = SymMatrix::from_symmetrized(&eig.map_reconstruct(math::ln));
    Ok((
        y,
        LogEigTape {
            eig,
            consumed: false,
        },
    ))
}

impl LogEigTape {
    pub(crate) fn from_eig(eig: Eig) -> Self {
        LogEigTape {
            eig,
            consumed: false,
        }
    }

    pub fn kind(&self) -> LayerKind {
        LayerKind::LogEig
    }

    pub fn backward(&mut self, dy: &Mat, opts: EigGradOptions) -> Result<SymMatrix> {
        let g = check_grad(dy, self.eig.dim(), LayerKind::LogEig)?;
        consume(&mut self.consumed)?;
        logeig_backward_from(&self.eig, &g, opts)
    }
}

pub(crate) fn logeig_backward_from(eig: &Eig, g: &Mat, opts: EigGradOptions) -> Result<SymMatrix> {
    let f: Vec<f64> = eig.values.iter().map(|&v| math::ln(v)).collect();
    let df: Vec<f64> = eig.values.iter().map(|&v| 1.0 / v).collect();
    spectral_backward(eig, &f, &df, g, opts)
}

// ---------------------------------------------------------------- ExpEig

#[derive(Debug)]
pub struct ExpEigTape {
    eig: Eig,
    consumed: bool,
}

/// `Y = U exp(Σ) Uᵀ`.
pub fn expeig_fwd(t: &SymMatrix) -> Result<(SpdMatrix, ExpEigTape)> {
    let eig = t.eig();
    let y = exp_from_eig(eig.clone())?;
    Ok((
        y,
        ExpEigTape {
            eig,
            consumed: false,
        },
    ))
}

impl ExpEigTape {
    pub fn kind(&self) -> LayerKind {
        LayerKind::ExpEig
    }

    pub fn backward(&mut self, dy: &Mat, opts: EigGradOptions) -> Result<SymMatrix> {
        let g = check_grad(dy, self.eig.dim(), LayerKind::ExpEig)?;
        consume(&mut self.consumed)?;
        let f: Vec<f64> = self.eig.values.iter().map(|&v| math::exp(v)).collect();
        spectral_backward(&self.eig, &f, &f, &g, opts)
    }
}
