//! The full model: a BiMap/ReEig backbone, `E` stacked SPD autoencoders
//! (SMAEs) with a LogEig/FC/cross-entropy head on every hidden state, the
//! optional attention module, and the composite objective
//!
//! ```text
//! L = λ₁ Σ_e CE(logits_e, y) + λ₂ ‖R − Ĥ_E‖²_F
//! ```
//!
//! Stage `e` maps its input (the backbone output `R` for `e = 1`, otherwise
//! `Ĥ_{e−1}`) through `H_e = W_e1ᵀ ReEig(input) W_e1` and
//! `Ĥ_e = W_e2 s_e W_e2ᵀ`, where `s_e = H_e` except at the attention output
//! stage `E − x + 1`, where `s_e` is the module output `´Υ`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{
    glm_fwd, glm_layer_instances, select_qkv, AttentionGradConfig, AttentionMode, AttentionTape,
    QkvSelection,
};
use crate::error::{Error, Result};
use crate::layers::{
    bimap_fwd, logeig_fwd, reeig_fwd, upmap_fwd, BiMapTape, EigGradOptions, LogEigTape, ReEigTape,
    StiefelParam, UpMapTape,
};
use crate::linalg::Mat;
use crate::manifold::{SpdMatrix, SymMatrix};
use crate::math;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Backbone dimensions `d_0 > d_1 > … > d_k`; `d_0` is the input size and
    /// `d_k` the SMAE outer size.
    pub backbone: Vec<usize>,
    /// Number of stacked autoencoders `E`.
    pub stages: usize,
    /// SMAE hidden size.
    pub d_down: usize,
    pub classes: usize,
    /// ReEig threshold ε.
    pub eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub attention: AttentionMode,
    pub grad: AttentionGradConfig,
}

impl NetworkConfig {
    /// Input matrix size.
    pub fn input_dim(&self) -> usize {
        self.backbone[0]
    }

    /// SMAE outer size (backbone output).
    pub fn d_up(&self) -> usize {
        *self.backbone.last().expect("validated backbone")
    }

    pub fn eig_options(&self) -> EigGradOptions {
        self.grad.eig
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::Config { field, reason });
        if self.backbone.len() < 2 {
            return bad(
                "backbone",
                "needs at least an input and an output size".into(),
            );
        }
        if self.backbone.windows(2).any(|w| w[1] >= w[0]) || self.backbone.contains(&0) {
            return bad(
                "backbone",
                format!(
                    "sizes {:?} must be positive and strictly decreasing",
                    self.backbone
                ),
            );
        }
        if self.d_down == 0 || self.d_down > self.d_up() {
            return bad(
                "d_down",
                format!("{} must lie in 1..={}", self.d_down, self.d_up()),
            );
        }
        if self.stages == 0 {
            return Err(Error::InvalidDepth { stages: 0 });
        }
        if self.classes < 2 {
            return bad("classes", format!("{} < 2", self.classes));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", format!("{} must be positive", self.eps));
        }
        for (field, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("{v} must be finite and nonnegative"));
            }
        }
        if self.attention != AttentionMode::None {
            select_qkv(self.stages)?;
        }
        Ok(())
    }

    /// Attention selection, if the module is enabled.
    pub fn selection(&self) -> Result<Option<QkvSelection>> {
        match self.attention {
            AttentionMode::None => Ok(None),
            _ => select_qkv(self.stages).map(Some),
        }
    }

    /// Layer count under the published-depth convention: ten layers per
    /// stacked autoencoder minus three, plus one instance per attention
    /// sub-layer (`3(h − 1) + 3`). Gives 47 / 97 without attention and
    /// 56 / 112 with it for `E = 5 / 10`.
    pub fn published_layer_count(&self) -> Result<usize> {
        if self.stages == 0 {
            return Err(Error::InvalidDepth { stages: 0 });
        }
        let base = 10 * self.stages - 3;
        Ok(base + self.selection()?.map_or(0, |s| glm_layer_instances(&s)))
    }

    /// Counts every layer instance actually built: `2k − 1` backbone layers,
    /// six per stage (ReEig, down BiMap, up BiMap, LogEig, FC, CE) and the
    /// attention sub-layers.
    pub fn structural_layer_count(&self) -> Result<usize> {
        let k = self.backbone.len() - 1;
        let glm = self.selection()?.map_or(0, |s| glm_layer_instances(&s));
        Ok(2 * k - 1 + 6 * self.stages + glm)
    }
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub backbone: Vec<StiefelParam>,
    /// `W_e1`: `d_up × d_down`.
    pub down: Vec<StiefelParam>,
    /// `W_e2`: `d_up × d_down`.
    pub up: Vec<StiefelParam>,
    /// FC weights, `C × d_down²`.
    pub fc_w: Vec<Mat>,
    /// FC biases, `C × 1`.
    pub fc_b: Vec<Mat>,
}

impl ModelState {
    /// Gaussian-QR Stiefel weights, FC weights uniform in `±1/√fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = cfg
            .backbone
            .windows(2)
            .map(|w| StiefelParam::random(w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        let (d_up, d_down) = (cfg.d_up(), cfg.d_down);
        let fan_in = d_down * d_down;
        let bound = 1.0 / math::sqrt(fan_in as f64);
        let mut down = Vec::with_capacity(cfg.stages);
        let mut up = Vec::with_capacity(cfg.stages);
        let mut fc_w = Vec::with_capacity(cfg.stages);
        let mut fc_b = Vec::with_capacity(cfg.stages);
        for _ in 0..cfg.stages {
            down.push(StiefelParam::random(d_up, d_down, rng)?);
            up.push(StiefelParam::random(d_up, d_down, rng)?);
            fc_w.push(Mat::from_fn(cfg.classes, fan_in, |_, _| {
                rng.random_range(-bound..bound)
            }));
            fc_b.push(Mat::zeros(cfg.classes, 1));
        }
        Ok(ModelState {
            backbone,
            down,
            up,
            fc_w,
            fc_b,
        })
    }

    /// Checks every shape against `cfg`.
    pub fn check_shapes(&self, cfg: &NetworkConfig) -> Result<()> {
        let mismatch = |what: &str| Error::Config {
            field: "model",
            reason: format!("{what} does not match the network configuration"),
        };
        if self.backbone.len() != cfg.backbone.len() - 1 {
            return Err(mismatch("backbone depth"));
        }
        for (w, d) in self.backbone.iter().zip(cfg.backbone.windows(2)) {
            if (w.d_in(), w.d_out()) != (d[0], d[1]) {
                return Err(mismatch("backbone weight shape"));
            }
        }
        let e = cfg.stages;
        if self.down.len() != e
            || self.up.len() != e
            || self.fc_w.len() != e
            || self.fc_b.len() != e
        {
            return Err(mismatch("stage count"));
        }
        let smae = (cfg.d_up(), cfg.d_down);
        for i in 0..e {
            if (self.down[i].d_in(), self.down[i].d_out()) != smae
                || (self.up[i].d_in(), self.up[i].d_out()) != smae
                || self.fc_w[i].shape() != (cfg.classes, cfg.d_down * cfg.d_down)
                || self.fc_b[i].shape() != (cfg.classes, 1)
            {
                return Err(mismatch("stage weight shape"));
            }
        }
        Ok(())
    }

    /// Parameters in canonical order: backbone, then `(W_e1, W_e2)` per
    /// stage, then `(FC W, FC b)` per stage.
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out: Vec<&Mat> = self.backbone.iter().map(StiefelParam::as_mat).collect();
        for (d, u) in self.down.iter().zip(&self.up) {
            out.push(d.as_mat());
            out.push(u.as_mat());
        }
        for (w, b) in self.fc_w.iter().zip(&self.fc_b) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Rebuilds a state from tensors in [`tensors`](Self::tensors) order,
    /// checking Stiefel constraints and shapes.
    pub fn from_tensors(cfg: &NetworkConfig, tensors: Vec<Mat>) -> Result<Self> {
        let k = cfg.backbone.len() - 1;
        let e = cfg.stages;
        if tensors.len() != k + 4 * e {
            return Err(Error::DimensionMismatch {
                expected: k + 4 * e,
                found: tensors.len(),
            });
        }
        let mut it = tensors.into_iter();
        let backbone = (&mut it)
            .take(k)
            .map(StiefelParam::new)
            .collect::<Result<Vec<_>>>()?;
        let mut down = Vec::with_capacity(e);
        let mut up = Vec::with_capacity(e);
        for _ in 0..e {
            down.push(StiefelParam::new(it.next().expect("counted"))?);
            up.push(StiefelParam::new(it.next().expect("counted"))?);
        }
        let mut fc_w = Vec::with_capacity(e);
        let mut fc_b = Vec::with_capacity(e);
        for _ in 0..e {
            fc_w.push(it.next().expect("counted"));
            fc_b.push(it.next().expect("counted"));
        }
        let state = ModelState {
            backbone,
            down,
            up,
            fc_w,
            fc_b,
        };
        state.check_shapes(cfg)?;
        Ok(state)
    }
}

/// Parameter gradients, laid out like [`ModelState`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<Mat>,
    pub down: Vec<Mat>,
    pub up: Vec<Mat>,
    pub fc_w: Vec<Mat>,
    pub fc_b: Vec<Mat>,
}

impl Gradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows(), m.cols());
        Gradients {
            backbone: state.backbone.iter().map(|w| z(w.as_mat())).collect(),
            down: state.down.iter().map(|w| z(w.as_mat())).collect(),
            up: state.up.iter().map(|w| z(w.as_mat())).collect(),
            fc_w: state.fc_w.iter().map(z).collect(),
            fc_b: state.fc_b.iter().map(z).collect(),
        }
    }

    fn groups_mut(&mut self) -> [&mut Vec<Mat>; 5] {
        [
            &mut self.backbone,
            &mut self.down,
            &mut self.up,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    fn groups(&self) -> [&Vec<Mat>; 5] {
        [&self.backbone, &self.down, &self.up, &self.fc_w, &self.fc_b]
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Gradients) {
        for (a, b) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, y) in a.iter_mut().zip(b) {
                x.axpy(s, y);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.groups_mut() {
            for m in g.iter_mut() {
                *m = m.scale(s);
            }
        }
    }

    /// Sum of Frobenius inner products over all tensors.
    pub fn dot(&self, other: &Gradients) -> f64 {
        self.groups()
            .into_iter()
            .zip(other.groups())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.dot(y)))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.groups().into_iter().flatten().all(Mat::is_finite)
    }
}

#[derive(Debug)]
pub enum BackboneTape {
    BiMap(BiMapTape),
    ReEig(ReEigTape),
}

/// Backbone forward: BiMap, then ReEig between consecutive BiMaps.
pub fn backbone_fwd(
    x: &SpdMatrix,
    state: &ModelState,
    cfg: &NetworkConfig,
) -> Result<(SpdMatrix, Vec<BackboneTape>)> {
    if x.dim() != cfg.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: cfg.input_dim(),
            found: x.dim(),
        });
    }
    let mut tapes = Vec::with_capacity(2 * state.backbone.len());
    let mut cur = x.clone();
    for (i, w) in state.backbone.iter().enumerate() {
        if i > 0 {
            let (y, t) = reeig_fwd(&cur, cfg.eps)?;
            tapes.push(BackboneTape::ReEig(t));
            cur = y;
        }
        let (y, t) = bimap_fwd(w, &cur)?;
        tapes.push(BackboneTape::BiMap(t));
        cur = y;
    }
    Ok((cur, tapes))
}

/// Tapes of one SMAE.
#[derive(Debug)]
pub struct SmaeTape {
    pub reeig: ReEigTape,
    pub down: BiMapTape,
    pub up: Option<UpMapTape>,
}

/// One autoencoder stage without attention substitution:
/// `H = W_e1ᵀ ReEig(input) W_e1`, `Ĥ = W_e2 H W_e2ᵀ`.
pub fn smae_fwd<X: crate::layers::Spectral + ?Sized>(
    input: &X,
    down: &StiefelParam,
    up: &StiefelParam,
    eps: f64,
) -> Result<(SpdMatrix, SymMatrix, SmaeTape)> {
    let (h, mut tape) = smae_down(input, down, eps)?;
    let (h_hat, up_tape) = upmap_fwd(up, &h)?;
    tape.up = Some(up_tape);
    Ok((h, h_hat, tape))
}

fn smae_down<X: crate::layers::Spectral + ?Sized>(
    input: &X,
    down: &StiefelParam,
    eps: f64,
) -> Result<(SpdMatrix, SmaeTape)> {
    if input.dim() != down.d_in() {
        return Err(Error::DimensionMismatch {
            expected: down.d_in(),
            found: input.dim(),
        });
    }
    let (a, reeig) = reeig_fwd(input, eps)?;
    let (h, down_tape) = bimap_fwd(down, &a)?;
    Ok((
        h,
        SmaeTape {
            reeig,
            down: down_tape,
            up: None,
        },
    ))
}

/// Classification head tape.
#[derive(Debug)]
pub struct HeadTape {
    log: SymMatrix,
    logeig: LogEigTape,
}

/// `logits = W_fc · vec(log H) + b` with row-major `d²` flattening.
pub fn head_fwd(h: &SpdMatrix, fc_w: &Mat, fc_b: &Mat) -> Result<(Vec<f64>, HeadTape)> {
    let d = h.dim();
    if fc_w.cols() != d * d || fc_b.shape() != (fc_w.rows(), 1) {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            found: fc_w.cols(),
        });
    }
    let (log, logeig) = logeig_fwd(h)?;
    let v = log.as_mat().as_slice();
    let logits = (0..fc_w.rows())
        .map(|c| {
            let row = &fc_w.as_slice()[c * d * d..(c + 1) * d * d];
            row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + fc_b[(c, 0)]
        })
        .collect();
    Ok((logits, HeadTape { log, logeig }))
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug)]
pub struct ForwardTrace {
    /// Backbone output `R`.
    pub r: SpdMatrix,
    /// Hidden states `H_1..H_E` as computed by the down-maps.
    pub hidden: Vec<SpdMatrix>,
    /// Stage outputs `s_e` (equal to `H_e` except at the attention stage).
    pub stage_out: Vec<SpdMatrix>,
    /// Reconstructions `Ĥ_1..Ĥ_E`.
    pub recon: Vec<SymMatrix>,
    /// Attention output `´Υ`.
    pub upsilon: Option<SpdMatrix>,
    pub logits: Vec<Vec<f64>>,
    selection: Option<QkvSelection>,
    backbone_tapes: Vec<BackboneTape>,
    smae_tapes: Vec<SmaeTape>,
    head_tapes: Vec<HeadTape>,
    attention_tape: Option<AttentionTape>,
    consumed: bool,
}

impl ForwardTrace {
    pub fn selection(&self) -> Option<&QkvSelection> {
        self.selection.as_ref()
    }

    pub fn attention(&self) -> Option<&AttentionTape> {
        self.attention_tape.as_ref()
    }

    /// Final reconstruction `Ĥ_E`.
    pub fn reconstruction(&self) -> &SymMatrix {
        self.recon.last().expect("at least one stage")
    }

    /// Per-stage log-domain head inputs.
    pub fn head_logs(&self) -> impl Iterator<Item = &SymMatrix> {
        self.head_tapes.iter().map(|t| &t.log)
    }

    /// Predicted class (1-based) from the deepest head.
    pub fn prediction(&self) -> u32 {
        argmax(self.logits.last().expect("at least one stage")) as u32 + 1
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Full forward pass.
pub fn model_fwd(x: &SpdMatrix, state: &ModelState, cfg: &NetworkConfig) -> Result<ForwardTrace> {
    let selection = cfg.selection()?;
    let (r, backbone_tapes) = backbone_fwd(x, state, cfg)?;
    let e_total = cfg.stages;
    let attn_stage = selection.as_ref().map(QkvSelection::output_stage);

    let mut hidden = Vec::with_capacity(e_total);
    let mut stage_out = Vec::with_capacity(e_total);
    let mut recon: Vec<SymMatrix> = Vec::with_capacity(e_total);
    let mut smae_tapes = Vec::with_capacity(e_total);
    let mut upsilon = None;
    let mut attention_tape = None;

    for e in 0..e_total {
        let (h, mut tape) = if e == 0 {
            smae_down(&r, &state.down[0], cfg.eps)?
        } else {
            smae_down(&recon[e - 1], &state.down[e], cfg.eps)?
        };
        hidden.push(h);
        let s = if attn_stage == Some(e + 1) {
            let sel = selection
                .as_ref()
                .expect("attention stage implies selection");
            let (out, t) = glm_fwd(cfg.attention, &hidden, sel)?;
            attention_tape = Some(t);
            upsilon = Some(out.clone());
            out
        } else {
            hidden[e].clone()
        };
        let (h_hat, up_tape) = upmap_fwd(&state.up[e], &s)?;
        tape.up = Some(up_tape);
        smae_tapes.push(tape);
        stage_out.push(s);
        recon.push(h_hat);
    }

    let mut logits = Vec::with_capacity(e_total);
    let mut head_tapes = Vec::with_capacity(e_total);
    for (e, s) in stage_out.iter().enumerate() {
        let (l, t) = head_fwd(s, &state.fc_w[e], &state.fc_b[e])?;
        if !l.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("stage {} FC logits", e + 1),
            });
        }
        logits.push(l);
        head_tapes.push(t);
    }

    Ok(ForwardTrace {
        r,
        hidden,
        stage_out,
        recon,
        upsilon,
        logits,
        selection,
        backbone_tapes,
        smae_tapes,
        head_tapes,
        attention_tape,
        consumed: false,
    })
}

/// Class prediction (1-based) from the deepest head.
pub fn predict(x: &SpdMatrix, state: &ModelState, cfg: &NetworkConfig) -> Result<u32> {
    Ok(model_fwd(x, state, cfg)?.prediction())
}

/// Loss value split into its terms; `total = λ₁·ce + λ₂·recon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted sum of per-stage cross-entropies.
    pub ce: f64,
    /// Unweighted `‖R − Ĥ_E‖²_F`.
    pub recon: f64,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + math::ln(logits.iter().map(|&z| math::exp(z - max)).sum::<f64>());
    logits.iter().map(|&z| z - lse).collect()
}

/// Cross-entropy of `logits` against a 1-based label.
pub fn cross_entropy(logits: &[f64], label: u32) -> Result<f64> {
    let idx = label_index(label, logits.len())?;
    Ok(-log_softmax(logits)[idx])
}

fn label_index(label: u32, classes: usize) -> Result<usize> {
    if label == 0 || label as usize > classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    Ok(label as usize - 1)
}

pub fn loss(trace: &ForwardTrace, label: u32, cfg: &NetworkConfig) -> Result<LossBreakdown> {
    let mut ce = 0.0;
    for l in &trace.logits {
        ce += cross_entropy(l, label)?;
    }
    let recon = trace
        .r
        .as_mat()
        .sub(trace.reconstruction().as_mat())
        .frobenius_sq();
    let total = cfg.lambda1 * ce + cfg.lambda2 * recon;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            location: "loss".into(),
        });
    }
    Ok(LossBreakdown { total, ce, recon })
}

fn located<T>(r: Result<T>, loc: impl FnOnce() -> String) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { location } => Error::NonFinite {
            location: format!("{}: {location}", loc()),
        },
        other => other,
    })
}

fn finite(m: &Mat, loc: impl FnOnce() -> String) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { location: loc() })
    }
}

/// Backward pass. Consumes the trace's tapes; a second call fails with
/// [`Error::TapeReused`].
pub fn model_bwd(
    trace: &mut ForwardTrace,
    label: u32,
    state: &ModelState,
    cfg: &NetworkConfig,
) -> Result<Gradients> {
    if trace.consumed {
        return Err(Error::TapeReused);
    }
    let idx = label_index(label, cfg.classes)?;
    trace.consumed = true;
    let opts = cfg.eig_options();
    let e_total = cfg.stages;
    let d_down = cfg.d_down;
    let d_up = cfg.d_up();
    let mut grads = Gradients::zeros_like(state);

    // Heads.
    let mut d_s: Vec<Mat> = Vec::with_capacity(e_total);
    for e in 0..e_total {
        let p = log_softmax(&trace.logits[e]);
        let d_logits: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(c, &lp)| cfg.lambda1 * (math::exp(lp) - if c == idx { 1.0 } else { 0.0 }))
            .collect();
        let tape = &mut trace.head_tapes[e];
        let v = tape.log.as_mat().as_slice();
        let gw = &mut grads.fc_w[e];
        let mut d_log = Mat::zeros(d_down, d_down);
        for (c, &g) in d_logits.iter().enumerate() {
            grads.fc_b[e][(c, 0)] = g;
            let row = c * d_down * d_down;
            for (j, &vj) in v.iter().enumerate() {
                gw.as_mut_slice()[row + j] = g * vj;
                d_log.as_mut_slice()[j] += g * state.fc_w[e].as_slice()[row + j];
            }
        }
        let ds = located(tape.logeig.backward(&d_log, opts), || {
            format!("stage {} head LogEig", e + 1)
        })?;
        d_s.push(ds.into_mat());
    }

    // Reconstruction term.
    let diff = trace.r.as_mat().sub(trace.reconstruction().as_mat());
    let mut d_r = diff.scale(2.0 * cfg.lambda2);
    let mut d_recon_next = diff.scale(-2.0 * cfg.lambda2);

    let attn_stage = trace.selection.as_ref().map(QkvSelection::output_stage);
    let mut d_h: Vec<Mat> = (0..e_total).map(|_| Mat::zeros(d_down, d_down)).collect();

    for e in (0..e_total).rev() {
        let stage = e + 1;
        let tape = &mut trace.smae_tapes[e];
        let mut up = tape.up.take().ok_or(Error::TapeReused)?;
        let (ds_up, dw_up) = located(up.backward(&d_recon_next), || {
            format!("stage {stage} up BiMap")
        })?;
        finite(&dw_up, || format!("stage {stage} up BiMap weight gradient"))?;
        grads.up[e] = dw_up;
        let mut ds = core::mem::replace(&mut d_s[e], Mat::zeros(0, 0));
        ds.axpy(1.0, ds_up.as_mat());

        if attn_stage == Some(stage) {
            let sel = trace.selection.as_ref().expect("attention stage");
            let at = trace.attention_tape.as_mut().ok_or(Error::TapeReused)?;
            let ag = located(at.backward(&ds, cfg.grad), || {
                format!("stage {stage} attention")
            })?;
            for (i, g) in ag.by_index(sel) {
                finite(g.as_mat(), || format!("attention gradient for H_{i}"))?;
                d_h[i - 1].axpy(1.0, g.as_mat());
            }
        } else {
            d_h[e].axpy(1.0, &ds);
        }

        let (da, dw_down) = located(tape.down.backward(&d_h[e]), || {
            format!("stage {stage} down BiMap")
        })?;
        finite(&dw_down, || {
            format!("stage {stage} down BiMap weight gradient")
        })?;
        grads.down[e] = dw_down;
        let d_in = located(tape.reeig.backward(da.as_mat(), opts), || {
            format!("stage {stage} ReEig")
        })?;
        finite(d_in.as_mat(), || format!("stage {stage} ReEig"))?;
        if e == 0 {
            d_r.axpy(1.0, d_in.as_mat());
        } else {
            d_recon_next = d_in.into_mat();
        }
    }
    debug_assert_eq!(d_r.rows(), d_up);

    let mut g = d_r;
    let mut bimap_idx = state.backbone.len();
    for (li, tape) in trace.backbone_tapes.iter_mut().enumerate().rev() {
        match tape {
            BackboneTape::BiMap(t) => {
                bimap_idx -= 1;
                let (dx, dw) = located(t.backward(&g), || {
                    format!("backbone layer {} BiMap", li + 1)
                })?;
                finite(&dw, || {
                    format!("backbone layer {} BiMap weight gradient", li + 1)
                })?;
                grads.backbone[bimap_idx] = dw;
                g = dx.into_mat();
            }
            BackboneTape::ReEig(t) => {
                g = located(t.backward(&g, opts), || {
                    format!("backbone layer {} ReEig", li + 1)
                })?
                .into_mat();
            }
        }
        finite(&g, || format!("backbone layer {}", li + 1))?;
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            location: "parameter gradients".into(),
        });
    }
    Ok(grads)
}

/// Forward, loss and backward for one labelled sample.
pub fn sample_gradients(
    x: &SpdMatrix,
    label: u32,
    state: &ModelState,
    cfg: &NetworkConfig,
) -> Result<(LossBreakdown, u32, Gradients)> {
    let mut trace = model_fwd(x, state, cfg)?;
    let l = loss(&trace, label, cfg)?;
    let pred = trace.prediction();
    let g = model_bwd(&mut trace, label, state, cfg)?;
    Ok((l, pred, g))
}

/// Small configuration used by tests and the gradient checker: backbone
/// 8→6→4, SMAE 4→3→4, `E = 5`, three classes, exact gradient modes.
pub fn tiny_config(attention: AttentionMode) -> NetworkConfig {
    NetworkConfig {
        backbone: vec![8, 6, 4],
        stages: 5,
        d_down: 3,
        classes: 3,
        eps: 1e-4,
        lambda1: 1.0,
        lambda2: 1e-2,
        attention,
        grad: AttentionGradConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
        let a = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        SpdMatrix::new(a.t_matmul(&a).add(&Mat::identity(d).scale(0.5)).sym()).unwrap()
    }

    #[test]
    fn layer_counts() {
        let mut cfg = tiny_config(AttentionMode::None);
        assert_eq!(cfg.published_layer_count().unwrap(), 47);
        cfg.stages = 10;
        assert_eq!(cfg.published_layer_count().unwrap(), 97);
        cfg.attention = AttentionMode::Smsa;
        assert_eq!(cfg.published_layer_count().unwrap(), 112);
        cfg.stages = 5;
        assert_eq!(cfg.published_layer_count().unwrap(), 56);
        assert_eq!(cfg.structural_layer_count().unwrap(), 3 + 30 + 9);
    }

    #[test]
    fn validation() {
        let mut cfg = tiny_config(AttentionMode::Smsa);
        cfg.validate().unwrap();
        cfg.stages = 4;
        assert_eq!(cfg.validate(), Err(Error::UnsupportedDepth { stages: 4 }));
        cfg.attention = AttentionMode::None;
        cfg.validate().unwrap();
        cfg.backbone = vec![8, 8];
        assert!(matches!(
            cfg.validate(),
            Err(Error::Config {
                field: "backbone",
                ..
            })
        ));
    }

    #[test]
    fn forward_shapes_and_loss_breakdown() {
        let cfg = tiny_config(AttentionMode::Smsa);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = ModelState::init(&cfg, &mut rng).unwrap();
        let x = random_spd(8, &mut rng);
        let trace = model_fwd(&x, &state, &cfg).unwrap();
        assert_eq!(trace.hidden.len(), 5);
        assert_eq!(trace.r.dim(), 4);
        assert!(trace.upsilon.is_some());
        assert_eq!(&trace.stage_out[4], trace.upsilon.as_ref().unwrap());
        let l = loss(&trace, 2, &cfg).unwrap();
        assert!(math::abs(l.total - (cfg.lambda1 * l.ce + cfg.lambda2 * l.recon)) < 1e-12);
        assert!(loss(&trace, 4, &cfg).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_c_per_stage() {
        let mut cfg = tiny_config(AttentionMode::None);
        cfg.lambda2 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = ModelState::init(&cfg, &mut rng).unwrap();
        for w in &mut state.fc_w {
            *w = Mat::zeros(w.rows(), w.cols());
        }
        let trace = model_fwd(&random_spd(8, &mut rng), &state, &cfg).unwrap();
        let l = loss(&trace, 1, &cfg).unwrap();
        assert!(math::abs(l.total - 5.0 * math::ln(3.0)) < 1e-12);
    }

    #[test]
    fn trace_is_single_use() {
        let cfg = tiny_config(AttentionMode::Smsa);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = ModelState::init(&cfg, &mut rng).unwrap();
        let mut trace = model_fwd(&random_spd(8, &mut rng), &state, &cfg).unwrap();
        model_bwd(&mut trace, 1, &state, &cfg).unwrap();
        assert_eq!(
            model_bwd(&mut trace, 1, &state, &cfg),
            Err(Error::TapeReused)
        );
    }

    #[test]
    fn tensor_round_trip() {
        let cfg = tiny_config(AttentionMode::Eusa);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = ModelState::init(&cfg, &mut rng).unwrap();
        let tensors = state.tensors().into_iter().cloned().collect();
        assert_eq!(ModelState::from_tensors(&cfg, tensors).unwrap(), state);
    }
}
