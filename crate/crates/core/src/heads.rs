//! Classification heads over frozen encoder features.
//!
//! One linear classifier (`shared_w`, `shared_b`) scores both the image
//! class token and text features; the visual tokens go through a trainable
//! projection and then either mean pooling or second-order pooling into a
//! second classifier (`so_w`, `so_b`). Only the image path is used at
//! inference time.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::{self, Purpose};
use crate::sopool::{sopool_backward, sopool_forward, vech_len, SoPoolConfig, SoPoolOutput, TokenMatrix};

/// Which statistics of the visual tokens feed the image logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadMode {
    /// Class token only.
    #[serde(rename = "cls")]
    ClsOnly,
    /// Class token plus mean of the projected visual tokens.
    #[serde(rename = "cls+avg")]
    ClsPlusAvg,
    /// Class token plus square-root-normalised covariance of the projected tokens.
    #[serde(rename = "cls+so")]
    ClsPlusSo,
}

impl HeadMode {
    pub const ALL: [HeadMode; 3] = [HeadMode::ClsOnly, HeadMode::ClsPlusAvg, HeadMode::ClsPlusSo];

    /// Width of the token-derived feature for projected width `r`.
    pub fn token_feature_dim(self, r: usize) -> usize {
        match self {
            HeadMode::ClsOnly => 0,
            HeadMode::ClsPlusAvg => r,
            HeadMode::ClsPlusSo => vech_len(r),
        }
    }

    pub fn uses_tokens(self) -> bool {
        self != HeadMode::ClsOnly
    }

    /// Row label used in ablation tables.
    pub fn table_label(self) -> &'static str {
        match self {
            HeadMode::ClsOnly => "cls",
            HeadMode::ClsPlusAvg => "cls+visual_avg",
            HeadMode::ClsPlusSo => "cls+visual_so",
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::ClsOnly => "cls",
            HeadMode::ClsPlusAvg => "cls+avg",
            HeadMode::ClsPlusSo => "cls+so",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "cls_only" => Ok(HeadMode::ClsOnly),
            "cls+avg" | "cls_plus_avg" => Ok(HeadMode::ClsPlusAvg),
            "cls+so" | "cls_plus_so" => Ok(HeadMode::ClsPlusSo),
            other => Err(Error::Config(format!(
                "unknown head mode `{other}` (expected cls, cls+avg or cls+so)"
            ))),
        }
    }
}

/// Feature widths a head is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub classes: usize,
    /// Joint embedding width of class tokens and text features.
    pub d_cls: usize,
    /// Backbone width of the raw visual tokens.
    pub d_tok: usize,
    /// Width after the token projection.
    pub reduced_dim: usize,
}

/// Trainable head parameters. Weights are stored output-major
/// (`C x features`) except the projection, which is `d_tok x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub proj_weight: Mat,
    pub proj_bias: Vec<f64>,
    /// The one classifier shared by the image class token and text features.
    pub shared_w: Mat,
    pub shared_b: Vec<f64>,
    pub so_w: Mat,
    pub so_b: Vec<f64>,
}

/// Parameter names in the order of [`HeadParams::tensors_mut`].
pub const PARAM_NAMES: [&str; 6] = [
    "proj_weight",
    "proj_bias",
    "shared_w",
    "shared_b",
    "so_w",
    "so_b",
];

fn uniform_rows(rows: usize, cols: usize, fan_in: usize, seed: u64, slot: u32) -> Mat {
    let mut rng = rng::stream(seed, Purpose::Init, slot);
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl HeadParams {
    /// Seeded init: weights uniform in `±1/sqrt(fan_in)`, biases zero.
    /// Token projection and second-order classifier are empty in `cls` mode.
    pub fn init(dims: HeadDims, mode: HeadMode, seed: u64) -> Self {
        let r = if mode.uses_tokens() { dims.reduced_dim } else { 0 };
        let s = mode.token_feature_dim(r);
        Self {
            // the projection is `W^T x` per token, fan_in = d_tok
            proj_weight: uniform_rows(dims.d_tok, r, dims.d_tok, seed, 0),
            proj_bias: vec![0.0; r],
            shared_w: uniform_rows(dims.classes, dims.d_cls, dims.d_cls, seed, 1),
            shared_b: vec![0.0; dims.classes],
            so_w: uniform_rows(dims.classes, s, s, seed, 2),
            so_b: vec![0.0; dims.classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.shared_w.rows()
    }

    pub fn d_cls(&self) -> usize {
        self.shared_w.cols()
    }

    pub fn reduced_dim(&self) -> usize {
        self.proj_weight.cols()
    }

    /// Classifier applied to image class tokens.
    pub fn image_classifier(&self) -> &Mat {
        &self.shared_w
    }

    /// Classifier applied to text features; the same object as
    /// [`image_classifier`](Self::image_classifier).
    pub fn text_classifier(&self) -> &Mat {
        &self.shared_w
    }

    /// Replaces the shared classifier rows with per-class text prototypes.
    pub fn init_shared_from_text(&mut self, class_prototypes: &[Vec<f64>]) -> Result<()> {
        if class_prototypes.len() != self.classes() {
            return Err(Error::Shape(format!(
                "{} prototypes for {} classes",
                class_prototypes.len(),
                self.classes()
            )));
        }
        self.shared_w = Mat::from_rows(class_prototypes)?;
        Ok(())
    }

    pub fn check_mode(&self, mode: HeadMode) -> Result<()> {
        let r = self.reduced_dim();
        let want = mode.token_feature_dim(r);
        if self.so_w.cols() != want || self.so_w.rows() != self.classes() || self.so_b.len() != self.classes() {
            return Err(Error::Shape(format!(
                "mode {mode} with r = {r} needs a {}x{want} second classifier, have {}x{}",
                self.classes(),
                self.so_w.rows(),
                self.so_w.cols()
            )));
        }
        if self.proj_bias.len() != r || self.shared_b.len() != self.classes() {
            return Err(Error::Shape("bias length does not match its weight".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.proj_weight.data(),
            &self.proj_bias,
            self.shared_w.data(),
            &self.shared_b,
            self.so_w.data(),
            &self.so_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.proj_weight.data_mut(),
            &mut self.proj_bias,
            self.shared_w.data_mut(),
            &mut self.shared_b,
            self.so_w.data_mut(),
            &mut self.so_b,
        ]
    }

    pub fn zeros_like(&self) -> HeadParams {
        HeadParams {
            proj_weight: Mat::zeros(self.proj_weight.rows(), self.proj_weight.cols()),
            proj_bias: vec![0.0; self.proj_bias.len()],
            shared_w: Mat::zeros(self.shared_w.rows(), self.shared_w.cols()),
            shared_b: vec![0.0; self.shared_b.len()],
            so_w: Mat::zeros(self.so_w.rows(), self.so_w.cols()),
            so_b: vec![0.0; self.so_b.len()],
        }
    }
}

/// Gradients share the parameter layout.
pub type HeadGrads = HeadParams;

fn add_outer(target: &mut Mat, left: &[f64], right: &[f64]) {
    for (i, &l) in left.iter().enumerate() {
        for (t, &r) in target.row_mut(i).iter_mut().zip(right) {
            *t += l * r;
        }
    }
}

fn add_into(target: &mut [f64], src: &[f64]) {
    for (t, s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

fn linear(w: &Mat, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let mut out = w.matvec(x)?;
    add_into(&mut out, b);
    Ok(out)
}

/// Per-token affine map `y_i = W^T x_i + b` (a 1x1 convolution).
pub fn project_tokens(tokens: &TokenMatrix, params: &HeadParams) -> Result<TokenMatrix> {
    let w = &params.proj_weight;
    if tokens.dim() != w.rows() {
        return Err(Error::Shape(format!(
            "tokens have width {}, projection expects {}",
            tokens.dim(),
            w.rows()
        )));
    }
    let mut y = tokens.as_mat().matmul(w)?;
    for i in 0..y.rows() {
        add_into(y.row_mut(i), &params.proj_bias);
    }
    TokenMatrix::new(y)
}

/// Backward of [`project_tokens`]: accumulates weight/bias gradients and
/// returns the gradient with respect to the raw tokens.
pub fn project_tokens_backward(
    tokens: &TokenMatrix,
    grad_projected: &Mat,
    params: &HeadParams,
    grads: &mut HeadGrads,
) -> Mat {
    accumulate_projection_grads(tokens, grad_projected, grads);
    grad_projected * &params.proj_weight.transpose()
}

fn accumulate_projection_grads(tokens: &TokenMatrix, grad_projected: &Mat, grads: &mut HeadGrads) {
    let x = tokens.as_mat();
    let gw = &x.transpose() * grad_projected;
    grads.proj_weight.axpy(1.0, &gw);
    for i in 0..grad_projected.rows() {
        add_into(&mut grads.proj_bias, grad_projected.row(i));
    }
}

enum TokenBranch {
    None,
    Avg {
        raw_mean: Vec<f64>,
        pooled: Vec<f64>,
    },
    So {
        out: SoPoolOutput,
    },
}

/// Image logits plus what the backward pass needs.
pub struct VisualForward<'a> {
    pub logits: Vec<f64>,
    cls: &'a [f64],
    tokens: &'a TokenMatrix,
    branch: TokenBranch,
}

impl VisualForward<'_> {
    /// Token-derived feature that entered the second classifier, if any.
    pub fn token_features(&self) -> Option<&[f64]> {
        match &self.branch {
            TokenBranch::None => None,
            TokenBranch::Avg { pooled, .. } => Some(pooled),
            TokenBranch::So { out } => Some(&out.features),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(&self.branch, TokenBranch::So { out } if out.is_degenerate())
    }
}

pub fn visual_forward<'a>(
    cls: &'a [f64],
    tokens: &'a TokenMatrix,
    params: &HeadParams,
    mode: HeadMode,
    cfg: &SoPoolConfig,
) -> Result<VisualForward<'a>> {
    params.check_mode(mode)?;
    let mut logits = linear(&params.shared_w, &params.shared_b, cls)?;
    let branch = match mode {
        HeadMode::ClsOnly => TokenBranch::None,
        HeadMode::ClsPlusAvg => {
            if tokens.dim() != params.proj_weight.rows() {
                return Err(Error::Shape(format!(
                    "tokens have width {}, projection expects {}",
                    tokens.dim(),
                    params.proj_weight.rows()
                )));
            }
            // mean commutes with the affine projection
            let x = tokens.as_mat();
            let n = x.rows() as f64;
            let mut raw_mean = vec![0.0; x.cols()];
            for i in 0..x.rows() {
                add_into(&mut raw_mean, x.row(i));
            }
            raw_mean.iter_mut().for_each(|v| *v /= n);
            let pooled = linear(&params.proj_weight.transpose(), &params.proj_bias, &raw_mean)?;
            add_into(&mut logits, &linear(&params.so_w, &params.so_b, &pooled)?);
            TokenBranch::Avg { raw_mean, pooled }
        }
        HeadMode::ClsPlusSo => {
            let projected = project_tokens(tokens, params)?;
            let out = sopool_forward(&projected, cfg)?;
            add_into(&mut logits, &linear(&params.so_w, &params.so_b, &out.features)?);
            TokenBranch::So { out }
        }
    };
    Ok(VisualForward {
        logits,
        cls,
        tokens,
        branch,
    })
}

/// Image logits for one sample.
pub fn visual_logits(
    cls: &[f64],
    tokens: &TokenMatrix,
    params: &HeadParams,
    mode: HeadMode,
    cfg: &SoPoolConfig,
) -> Result<Vec<f64>> {
    visual_forward(cls, tokens, params, mode, cfg).map(|f| f.logits)
}

/// Accumulates parameter gradients of a loss whose gradient with respect to
/// the image logits is `grad_logits`.
pub fn visual_backward(
    fwd: &VisualForward<'_>,
    grad_logits: &[f64],
    params: &HeadParams,
    grads: &mut HeadGrads,
) -> Result<()> {
    if grad_logits.len() != params.classes() {
        return Err(Error::Shape(format!(
            "{} logit gradients for {} classes",
            grad_logits.len(),
            params.classes()
        )));
    }
    add_outer(&mut grads.shared_w, grad_logits, fwd.cls);
    add_into(&mut grads.shared_b, grad_logits);
    match &fwd.branch {
        TokenBranch::None => {}
        TokenBranch::Avg { raw_mean, pooled } => {
            add_outer(&mut grads.so_w, grad_logits, pooled);
            add_into(&mut grads.so_b, grad_logits);
            let g_pooled = params.so_w.matvec_transposed(grad_logits)?;
            add_outer(&mut grads.proj_weight, raw_mean, &g_pooled);
            add_into(&mut grads.proj_bias, &g_pooled);
        }
        TokenBranch::So { out } => {
            add_outer(&mut grads.so_w, grad_logits, &out.features);
            add_into(&mut grads.so_b, grad_logits);
            if !out.is_degenerate() {
                let g_features = params.so_w.matvec_transposed(grad_logits)?;
                let g_projected = sopool_backward(&g_features, &out.tape)?;
                accumulate_projection_grads(fwd.tokens, &g_projected, grads);
            }
        }
    }
    Ok(())
}

/// Text logits through the shared classifier.
pub fn text_logits(text_feature: &[f64], params: &HeadParams) -> Result<Vec<f64>> {
    if text_feature.len() != params.d_cls() {
        return Err(Error::Shape(format!(
            "text feature has width {}, classifier expects {}",
            text_feature.len(),
            params.d_cls()
        )));
    }
    linear(params.text_classifier(), &params.shared_b, text_feature)
}

/// Accumulates shared-classifier gradients and returns the gradient with
/// respect to the text feature.
pub fn text_backward(
    text_feature: &[f64],
    grad_logits: &[f64],
    params: &HeadParams,
    grads: &mut HeadGrads,
) -> Result<Vec<f64>> {
    add_outer(&mut grads.shared_w, grad_logits, text_feature);
    add_into(&mut grads.shared_b, grad_logits);
    params.text_classifier().matvec_transposed(grad_logits)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of widths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Validation("cosine similarity of a zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Zero-shot class probabilities: softmax of cosine similarity over `temperature`.
pub fn zero_shot_probs(cls: &[f64], class_text_features: &[Vec<f64>], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    if class_text_features.is_empty() {
        return Err(Error::Validation("no class text features".into()));
    }
    let sims = class_text_features
        .iter()
        .map(|t| cosine(cls, t).map(|s| s / temperature))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&sims))
}
