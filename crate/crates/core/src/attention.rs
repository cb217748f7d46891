//! SPD-manifold self-attention (SMSA) over the hidden states of the stacked
//! autoencoders, plus the Euclidean ablation (EuSA).
//!
//! Forward chain for one query `H₁`, keys `H₂..H_h` and values
//! `H_{h+1}..H_{E−x+1}`:
//!
//! ```text
//! LEM  D_j   = ‖log H₁ − log H_j‖²_F
//! SIM  D'_j  = 1 / (1 + log(1 + D_j))
//! SMX  D''_j = softmax(D')_j
//! LOG  H̄_t   = log H_t                      (values)
//! WTS  Υ     = Σ_j D''_j H̄_{j+h−1}
//! EXP  Ύ     = exp(Υ)
//! ```
//!
//! `Ύ` is the Log-Euclidean weighted Fréchet mean of the values under the
//! attention weights.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{expeig_fwd, logeig_backward_from, EigGradOptions, ExpEigTape, LogEigTape};
use crate::linalg::Mat;
use crate::manifold::{spd_log, SpdMatrix, SymMatrix};
use crate::math;

/// How the hidden states are aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    #[default]
    Smsa,
    Eusa,
    None,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Smsa => "smsa",
            AttentionMode::Eusa => "eusa",
            AttentionMode::None => "none",
        }
    }
}

impl core::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smsa" => Ok(AttentionMode::Smsa),
            "eusa" => Ok(AttentionMode::Eusa),
            "none" => Ok(AttentionMode::None),
            other => Err(Error::Config {
                field: "attention",
                reason: format!("unknown mode `{other}` (expected smsa, eusa or none)"),
            }),
        }
    }
}

/// Gradient formula variant for the LEM and SMX backward passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum GradMode {
    /// Exact derivative of the forward computation.
    #[default]
    Exact,
    /// Closed-form per-element expressions: `2 H₁⁻¹ (log H₁ − log H_j)` for
    /// LEM and the diagonal softmax-Jacobian term for SMX.
    Paper,
}

impl GradMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GradMode::Exact => "exact",
            GradMode::Paper => "paper",
        }
    }
}

impl core::str::FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(GradMode::Exact),
            "paper" => Ok(GradMode::Paper),
            other => Err(Error::Config {
                field: "grad_mode",
                reason: format!("unknown mode `{other}` (expected exact or paper)"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionGradConfig {
    pub lem: GradMode,
    pub smx: GradMode,
    pub eig: EigGradOptions,
}

/// Query/key/value partition of the hidden states `H₁..H_E` (1-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QkvSelection {
    pub stages: usize,
    /// Parity offset: 1 for odd `E`, 2 for even `E`.
    pub x: usize,
    /// Index of the last key, `(E − x)/2 + 1`.
    pub h: usize,
    pub query: usize,
    pub keys: Vec<usize>,
    pub values: Vec<usize>,
}

impl QkvSelection {
    /// Number of LEM evaluations (`h − 1`).
    pub fn n_lem(&self) -> usize {
        self.keys.len()
    }

    /// Number of weighted-mean aggregations; always one query.
    pub fn n_wfm(&self) -> usize {
        1
    }

    /// The hidden state replaced by the module output, `E − x + 1`.
    pub fn output_stage(&self) -> usize {
        self.stages - self.x + 1
    }
}

/// Query/key/value selection for `E` stacked autoencoders.
///
/// `Q = {H₁}`, `K = {H₂..H_h}`, `V = {H_{h+1}..H_{E−x+1}}` with `x = 1` for odd
/// `E`, `x = 2` for even `E` and `h = (E − x)/2 + 1`. Depths 3 and 4 cannot
/// give `|K| = |V| ≥ 2`.
pub fn select_qkv(stages: usize) -> Result<QkvSelection> {
    if stages < 3 {
        return Err(Error::InvalidDepth { stages });
    }
    if stages <= 4 {
        return Err(Error::UnsupportedDepth { stages });
    }
    let x = if stages % 2 == 1 { 1 } else { 2 };
    let h = (stages - x) / 2 + 1;
    Ok(QkvSelection {
        stages,
        x,
        h,
        query: 1,
        keys: (2..=h).collect(),
        values: (h + 1..=stages - x + 1).collect(),
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

/// LEM layer: `‖log H₁ − log H_j‖²_F`.
pub fn lem_layer(h1: &SpdMatrix, hj: &SpdMatrix) -> Result<f64> {
    crate::manifold::lem_distance_sq(h1, hj)
}

/// SIM layer: `1 / (1 + log(1 + D))`.
pub fn sim_layer(d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::Precondition(
            "SIM input must be a nonnegative distance",
        ));
    }
    Ok(1.0 / (1.0 + math::ln_1p(d)))
}

/// `∂D'/∂D · g = −g / ((1 + log(1+D))² (1 + D))`.
pub fn sim_backward(d: f64, g: f64) -> f64 {
    let s = 1.0 + math::ln_1p(d);
    -g / (s * s * (1.0 + d))
}

/// SMX layer: softmax over at least two entries.
pub fn smx_layer(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::Precondition("SMX needs at least two scores"));
    }
    if !scores.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            location: "SMX input".into(),
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| math::exp(s - max)).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Gradient of the softmax inputs given softmax outputs `p` and upstream `g`.
///
/// `Exact` applies the full Jacobian `p_i (g_i − Σ_k p_k g_k)`; `Paper` keeps
/// only the diagonal term `p_i (1 − p_i) g_i`.
pub fn smx_backward(p: &[f64], g: &[f64], mode: GradMode) -> Vec<f64> {
    match mode {
        GradMode::Exact => {
            let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            p.iter()
                .zip(g)
                .map(|(&pi, &gi)| pi * (gi - inner))
                .collect()
        }
        GradMode::Paper => p
            .iter()
            .zip(g)
            .map(|(&pi, &gi)| pi * (1.0 - pi) * gi)
            .collect(),
    }
}

/// WTS layer: `Σ_j w_j L_j`.
pub fn wts_layer(weights: &[f64], logs: &[SymMatrix]) -> Result<SymMatrix> {
    same_dim(weights.len(), logs.len())?;
    let first = logs.first().ok_or(Error::Empty)?;
    let d = first.dim();
    let mut acc = Mat::zeros(d, d);
    for (&w, l) in weights.iter().zip(logs) {
        same_dim(d, l.dim())?;
        acc.axpy(w, l.as_mat());
    }
    Ok(SymMatrix::from_symmetrized(&acc))
}

/// WTS backward: `(∂L/∂L_j, ∂L/∂w_j) = (w_j G, tr(L_j G))`.
pub fn wts_backward(weights: &[f64], logs: &[SymMatrix], g: &Mat) -> (Vec<SymMatrix>, Vec<f64>) {
    let dlogs = weights
        .iter()
        .map(|&w| SymMatrix::from_symmetrized(&g.scale(w)))
        .collect();
    let dweights = logs.iter().map(|l| l.as_mat().dot(g)).collect();
    (dlogs, dweights)
}

/// LEM backward for one pair given `∂L/∂D = g`.
///
/// `Exact` chains `2 (log H₁ − log H_j) g` through the LogEig backward of each
/// argument. `Paper` returns `sym(±2 H⁻¹ (log H₁ − log H_j)) g`, which is exact
/// only when `H₁` and `H_j` commute.
pub fn lem_backward(
    h1: &SpdMatrix,
    hj: &SpdMatrix,
    g: f64,
    mode: GradMode,
    eig: EigGradOptions,
) -> Result<(SymMatrix, SymMatrix)> {
    same_dim(h1.dim(), hj.dim())?;
    let diff = spd_log(h1)?.as_mat().sub(spd_log(hj)?.as_mat());
    match mode {
        GradMode::Exact => {
            let d_log = diff.scale(2.0 * g);
            let d1 = logeig_backward_from(h1.eig(), &d_log, eig)?;
            let dj = logeig_backward_from(hj.eig(), &d_log.scale(-1.0), eig)?;
            Ok((d1, dj))
        }
        GradMode::Paper => {
            let d1 = h1.inverse().matmul(&diff).scale(2.0 * g);
            let dj = hj.inverse().matmul(&diff).scale(-2.0 * g);
            Ok((
                SymMatrix::from_symmetrized(&d1),
                SymMatrix::from_symmetrized(&dj),
            ))
        }
    }
}

/// Gradients returned by the attention backward, one per contributing hidden
/// state, symmetrized.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub query: SymMatrix,
    pub keys: Vec<SymMatrix>,
    pub values: Vec<SymMatrix>,
}

impl AttentionGrads {
    /// Pairs of (1-based hidden index, gradient).
    pub fn by_index<'a>(
        &'a self,
        sel: &'a QkvSelection,
    ) -> impl Iterator<Item = (usize, &'a SymMatrix)> + 'a {
        core::iter::once((sel.query, &self.query))
            .chain(sel.keys.iter().copied().zip(self.keys.iter()))
            .chain(sel.values.iter().copied().zip(self.values.iter()))
    }
}

/// Forward cache of the attention module.
#[derive(Debug)]
pub struct AttentionTape {
    mode: AttentionMode,
    query: SpdMatrix,
    keys: Vec<SpdMatrix>,
    values: Vec<SpdMatrix>,
    distances: Vec<f64>,
    similarities: Vec<f64>,
    weights: Vec<f64>,
    /// Log-domain values (SMSA) or raw values (EuSA).
    mixed: Vec<SymMatrix>,
    upsilon: Option<SymMatrix>,
    exp_tape: Option<ExpEigTape>,
    consumed: bool,
}

impl AttentionTape {
    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    /// Raw distances `D_1j`.
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    /// SIM outputs `D'_1j`.
    pub fn similarities(&self) -> &[f64] {
        &self.similarities
    }

    /// Attention weights `D''_1j`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Tangent-space aggregate `Υ` (SMSA only).
    pub fn upsilon(&self) -> Option<&SymMatrix> {
        self.upsilon.as_ref()
    }

    /// Value logs `H̄_t` (SMSA) or values (EuSA).
    pub fn mixed(&self) -> &[SymMatrix] {
        &self.mixed
    }

    pub fn backward(&mut self, d_out: &Mat, cfg: AttentionGradConfig) -> Result<AttentionGrads> {
        let d = self.query.dim();
        if d_out.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: d_out.rows(),
            });
        }
        if !d_out.is_finite() {
            return Err(Error::NonFinite {
                location: "attention upstream gradient".into(),
            });
        }
        if self.consumed {
            return Err(Error::TapeReused);
        }
        self.consumed = true;
        match self.mode {
            AttentionMode::Smsa => self.backward_smsa(d_out, cfg),
            AttentionMode::Eusa => self.backward_eusa(d_out, cfg),
            AttentionMode::None => Err(Error::Precondition("attention disabled")),
        }
    }

    fn weight_path(&self, d_weights: &[f64], cfg: AttentionGradConfig) -> Vec<f64> {
        let d_sim = smx_backward(&self.weights, d_weights, cfg.smx);
        self.distances
            .iter()
            .zip(&d_sim)
            .map(|(&dist, &g)| sim_backward(dist, g))
            .collect()
    }

    fn backward_smsa(&mut self, d_out: &Mat, cfg: AttentionGradConfig) -> Result<AttentionGrads> {
        let mut exp_tape = self.exp_tape.take().ok_or(Error::TapeReused)?;
        let d_upsilon = exp_tape.backward(d_out, cfg.eig)?;
        let (d_logs, d_weights) = wts_backward(&self.weights, &self.mixed, d_upsilon.as_mat());
        let values = self
            .values
            .iter()
            .zip(&d_logs)
            .map(|(v, g)| LogEigTape::from_eig(v.eig().clone()).backward(g.as_mat(), cfg.eig))
            .collect::<Result<Vec<_>>>()?;
        let d_dist = self.weight_path(&d_weights, cfg);

        let d = self.query.dim();
        let mut query = Mat::zeros(d, d);
        let mut keys = Vec::with_capacity(self.keys.len());
        for (k, &g) in self.keys.iter().zip(&d_dist) {
            let (dq, dk) = lem_backward(&self.query, k, g, cfg.lem, cfg.eig)?;
            query.axpy(1.0, dq.as_mat());
            keys.push(dk);
        }
        Ok(AttentionGrads {
            query: SymMatrix::from_symmetrized(&query),
            keys,
            values,
        })
    }

    fn backward_eusa(&mut self, d_out: &Mat, cfg: AttentionGradConfig) -> Result<AttentionGrads> {
        let g = d_out.sym();
        let (d_vals, d_weights) = wts_backward(&self.weights, &self.mixed, &g);
        let d_dist = self.weight_path(&d_weights, cfg);
        let d = self.query.dim();
        let mut query = Mat::zeros(d, d);
        let mut keys = Vec::with_capacity(self.keys.len());
        for (k, &gd) in self.keys.iter().zip(&d_dist) {
            let diff = self.query.as_mat().sub(k.as_mat());
            query.axpy(2.0 * gd, &diff);
            keys.push(SymMatrix::from_symmetrized(&diff.scale(-2.0 * gd)));
        }
        Ok(AttentionGrads {
            query: SymMatrix::from_symmetrized(&query),
            keys,
            values: d_vals,
        })
    }
}

fn gather(
    hidden: &[SpdMatrix],
    sel: &QkvSelection,
) -> Result<(SpdMatrix, Vec<SpdMatrix>, Vec<SpdMatrix>)> {
    let needed = sel.output_stage();
    if hidden.len() < needed {
        return Err(Error::DimensionMismatch {
            expected: needed,
            found: hidden.len(),
        });
    }
    let d = hidden[0].dim();
    for h in &hidden[..needed] {
        same_dim(d, h.dim())?;
    }
    let pick = |idx: &[usize]| {
        idx.iter()
            .map(|&i| hidden[i - 1].clone())
            .collect::<Vec<_>>()
    };
    Ok((
        hidden[sel.query - 1].clone(),
        pick(&sel.keys),
        pick(&sel.values),
    ))
}

fn attention_weights(distances: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let similarities = distances
        .iter()
        .map(|&d| sim_layer(d))
        .collect::<Result<Vec<_>>>()?;
    let weights = smx_layer(&similarities)?;
    Ok((similarities, weights))
}

/// SMSA forward: LEM → SIM → SMX → LogEig → WTS → ExpEig.
pub fn smsa_glm_fwd(
    hidden: &[SpdMatrix],
    sel: &QkvSelection,
) -> Result<(SpdMatrix, AttentionTape)> {
    let (query, keys, values) = gather(hidden, sel)?;
    let distances = keys
        .iter()
        .map(|k| lem_layer(&query, k))
        .collect::<Result<Vec<_>>>()?;
    let (similarities, weights) = attention_weights(&distances)?;
    let logs = values.iter().map(spd_log).collect::<Result<Vec<_>>>()?;
    let upsilon = wts_layer(&weights, &logs)?;
    let (out, exp_tape) = expeig_fwd(&upsilon)?;
    Ok((
        out,
        AttentionTape {
            mode: AttentionMode::Smsa,
            query,
            keys,
            values,
            distances,
            similarities,
            weights,
            mixed: logs,
            upsilon: Some(upsilon),
            exp_tape: Some(exp_tape),
            consumed: false,
        },
    ))
}

/// EuSA forward: Frobenius distances, the same SIM/SMX weighting, and a
/// convex combination of the raw values.
pub fn eusa_glm_fwd(
    hidden: &[SpdMatrix],
    sel: &QkvSelection,
) -> Result<(SpdMatrix, AttentionTape)> {
    let (query, keys, values) = gather(hidden, sel)?;
    let distances: Vec<f64> = keys
        .iter()
        .map(|k| query.as_mat().sub(k.as_mat()).frobenius_sq())
        .collect();
    let (similarities, weights) = attention_weights(&distances)?;
    let raw: Vec<SymMatrix> = values.iter().map(SpdMatrix::to_sym).collect();
    let mixed = wts_layer(&weights, &raw)?;
    let out = SpdMatrix::from_sym(mixed)?;
    Ok((
        out,
        AttentionTape {
            mode: AttentionMode::Eusa,
            query,
            keys,
            values,
            distances,
            similarities,
            weights,
            mixed: raw,
            upsilon: None,
            exp_tape: None,
            consumed: false,
        },
    ))
}

/// Dispatches on `mode`; `None` is rejected.
pub fn glm_fwd(
    mode: AttentionMode,
    hidden: &[SpdMatrix],
    sel: &QkvSelection,
) -> Result<(SpdMatrix, AttentionTape)> {
    match mode {
        AttentionMode::Smsa => smsa_glm_fwd(hidden, sel),
        AttentionMode::Eusa => eusa_glm_fwd(hidden, sel),
        AttentionMode::None => Err(Error::Precondition("attention disabled")),
    }
}

/// Number of layer instances the module adds: one LEM, SIM and LogEig per
/// key/value pair plus one SMX, WTS and ExpEig.
pub fn glm_layer_instances(sel: &QkvSelection) -> usize {
    3 * sel.n_lem() + 3
}
