//! A small frozen causal transformer standing in for a pretrained text
//! encoder.
//!
//! Pre-LN blocks (`x + attn(ln1(x))`, `x + mlp(ln2(x))`), QuickGELU MLP,
//! learned positional embeddings, final LayerNorm, and a linear projection
//! of the last (EOS) position into the joint embedding space. All weights
//! are drawn once from a seeded stream and never updated; the backward pass
//! only produces gradients with respect to the input embeddings.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::{self, Purpose};

use super::coop::{coop_assemble, CoopContext};
use super::tokenizer::{EOS_ID, MAX_SEQ_LEN, VOCAB_SIZE};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Output width (joint embedding space).
    pub d_cls: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            d_cls: 64,
            seed: 0x5eed_7e47,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    wq: Mat,
    bq: Vec<f64>,
    wk: Mat,
    bk: Vec<f64>,
    wv: Mat,
    bv: Vec<f64>,
    wo: Mat,
    bo: Vec<f64>,
    ln2: LayerNorm,
    w1: Mat,
    b1: Vec<f64>,
    w2: Mat,
    b2: Vec<f64>,
}

/// Frozen toy text encoder.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    cfg: EncoderConfig,
    token_embedding: Mat,
    positional: Mat,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    proj: Mat,
}

/// What to run the encoder on.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a> {
    /// Token ids ending in EOS.
    Ids(&'a [u32]),
    /// A pre-embedded sequence (`L x embed_dim`), e.g. an assembled CoOp prompt.
    Embedded(&'a Mat),
}

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

struct BlockTape {
    ln1: LnCache,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per head, `L x L` causal attention weights.
    probs: Vec<Mat>,
    ln2: LnCache,
    u: Mat,
}

/// Forward intermediates for [`ToyTextEncoder::backward`].
pub struct EncoderTape {
    seq_len: usize,
    blocks: Vec<BlockTape>,
    ln_final: LnCache,
}

fn normal_mat(rng: &mut impl rand::RngCore, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("valid std");
    Mat::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn layer_norm(d: usize) -> LayerNorm {
    LayerNorm {
        gamma: vec![1.0; d],
        beta: vec![0.0; d],
    }
}

fn add_bias_rows(m: &mut Mat, b: &[f64]) {
    for i in 0..m.rows() {
        for (v, bb) in m.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn ln_forward(x: &Mat, ln: &LayerNorm) -> (Mat, LnCache) {
    let (l, d) = (x.rows(), x.cols());
    let mut xhat = Mat::zeros(l, d);
    let mut inv_std = Vec::with_capacity(l);
    for i in 0..l {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        inv_std.push(s);
    }
    let y = Mat::from_fn(l, d, |i, j| xhat.get(i, j) * ln.gamma[j] + ln.beta[j]);
    (y, LnCache { xhat, inv_std })
}

fn ln_backward(gy: &Mat, cache: &LnCache, ln: &LayerNorm) -> Mat {
    let (l, d) = (gy.rows(), gy.cols());
    let mut gx = Mat::zeros(l, d);
    for i in 0..l {
        let xhat = cache.xhat.row(i);
        let gxhat: Vec<f64> = gy.row(i).iter().zip(&ln.gamma).map(|(g, w)| g * w).collect();
        let mean_g = gxhat.iter().sum::<f64>() / d as f64;
        let mean_gx = gxhat.iter().zip(xhat).map(|(g, x)| g * x).sum::<f64>() / d as f64;
        let s = cache.inv_std[i];
        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
            *o = s * (gxhat[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    gx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const QUICK_GELU_K: f64 = 1.702;

fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(QUICK_GELU_K * x)
}

fn quick_gelu_grad(x: f64) -> f64 {
    let s = sigmoid(QUICK_GELU_K * x);
    s + QUICK_GELU_K * x * s * (1.0 - s)
}

impl ToyTextEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.heads == 0 || cfg.embed_dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                cfg.embed_dim, cfg.heads
            )));
        }
        if cfg.d_cls == 0 || cfg.mlp_ratio == 0 {
            return Err(Error::Config("d_cls and mlp_ratio must be positive".into()));
        }
        let d = cfg.embed_dim;
        let f = d * cfg.mlp_ratio;
        let mut rng = rng::stream(cfg.seed, Purpose::Encoder, 0);
        let attn_std = 1.0 / (d as f64).sqrt();
        let token_embedding = normal_mat(&mut rng, VOCAB_SIZE, d, 0.02);
        let positional = normal_mat(&mut rng, MAX_SEQ_LEN, d, 0.01);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1: layer_norm(d),
                wq: normal_mat(&mut rng, d, d, attn_std),
                bq: vec![0.0; d],
                wk: normal_mat(&mut rng, d, d, attn_std),
                bk: vec![0.0; d],
                wv: normal_mat(&mut rng, d, d, attn_std),
                bv: vec![0.0; d],
                wo: normal_mat(&mut rng, d, d, attn_std),
                bo: vec![0.0; d],
                ln2: layer_norm(d),
                w1: normal_mat(&mut rng, d, f, attn_std),
                b1: vec![0.0; f],
                w2: normal_mat(&mut rng, f, d, 1.0 / (f as f64).sqrt()),
                b2: vec![0.0; d],
            })
            .collect();
        let proj = normal_mat(&mut rng, d, cfg.d_cls, attn_std);
        Ok(Self {
            cfg,
            token_embedding,
            positional,
            blocks,
            ln_final: layer_norm(d),
            proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn d_cls(&self) -> usize {
        self.cfg.d_cls
    }

    /// Looks up token embeddings (`len x embed_dim`).
    pub fn embed_ids(&self, ids: &[u32]) -> Result<Mat> {
        let d = self.cfg.embed_dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= VOCAB_SIZE {
                return Err(Error::Validation(format!("token id {id} outside vocabulary")));
            }
            data.extend_from_slice(self.token_embedding.row(id as usize));
        }
        Mat::new(ids.len(), d, data)
    }

    pub fn eos_embedding(&self) -> &[f64] {
        self.token_embedding.row(EOS_ID as usize)
    }

    /// `[context; classname bytes; EOS]` as an embedded sequence.
    pub fn coop_sequence(&self, ctx: &CoopContext, classname: &str) -> Result<Mat> {
        if classname.is_empty() {
            return Err(Error::Validation("empty class name".into()));
        }
        let ids: Vec<u32> = classname.bytes().map(u32::from).collect();
        coop_assemble(ctx, &self.embed_ids(&ids)?, self.eos_embedding())
    }

    /// SHA-256 over every weight, in a fixed order, as hex.
    pub fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |v: &[f64]| {
            for x in v {
                h.update(x.to_le_bytes());
            }
        };
        feed(self.token_embedding.data());
        feed(self.positional.data());
        for b in &self.blocks {
            for ln in [&b.ln1, &b.ln2] {
                feed(&ln.gamma);
                feed(&ln.beta);
            }
            for (w, bias) in [
                (&b.wq, &b.bq),
                (&b.wk, &b.bk),
                (&b.wv, &b.bv),
                (&b.wo, &b.bo),
                (&b.w1, &b.b1),
                (&b.w2, &b.b2),
            ] {
                feed(w.data());
                feed(bias);
            }
        }
        feed(&self.ln_final.gamma);
        feed(&self.ln_final.beta);
        feed(self.proj.data());
        hex::encode(h.finalize())
    }

    /// Encodes a sequence and returns the projected EOS-position feature.
    pub fn encode(&self, input: EncoderInput<'_>) -> Result<(Vec<f64>, EncoderTape)> {
        let embedded;
        let x_in = match input {
            EncoderInput::Ids(ids) => {
                if ids.last() != Some(&EOS_ID) {
                    return Err(Error::Validation("token sequence must end with EOS".into()));
                }
                if ids.len() > MAX_SEQ_LEN {
                    return Err(Error::Validation(format!(
                        "sequence of {} tokens exceeds {MAX_SEQ_LEN}",
                        ids.len()
                    )));
                }
                embedded = self.embed_ids(ids)?;
                &embedded
            }
            EncoderInput::Embedded(m) => m,
        };
        let (l, d) = (x_in.rows(), x_in.cols());
        if l == 0 {
            return Err(Error::Validation("empty input sequence".into()));
        }
        if l > MAX_SEQ_LEN {
            return Err(Error::Validation(format!(
                "sequence of {l} positions exceeds {MAX_SEQ_LEN}"
            )));
        }
        if d != self.cfg.embed_dim {
            return Err(Error::Shape(format!(
                "input width {d}, encoder width {}",
                self.cfg.embed_dim
            )));
        }

        let mut x = Mat::from_fn(l, d, |i, j| x_in.get(i, j) + self.positional.get(i, j));
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (x_next, tape) = self.block_forward(block, &x);
            x = x_next;
            tapes.push(tape);
        }
        let last = Mat::new(1, d, x.row(l - 1).to_vec())?;
        let (z, ln_final) = ln_forward(&last, &self.ln_final);
        let feature = self.proj.matvec_transposed(z.row(0))?;
        Ok((
            feature,
            EncoderTape {
                seq_len: l,
                blocks: tapes,
                ln_final,
            },
        ))
    }

    fn block_forward(&self, b: &Block, x: &Mat) -> (Mat, BlockTape) {
        let (l, d) = (x.rows(), x.cols());
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (h, ln1) = ln_forward(x, &b.ln1);
        let mut q = &h * &b.wq;
        add_bias_rows(&mut q, &b.bq);
        let mut k = &h * &b.wk;
        add_bias_rows(&mut k, &b.bk);
        let mut v = &h * &b.wv;
        add_bias_rows(&mut v, &b.bv);

        let mut o = Mat::zeros(l, d);
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let c0 = hd * dh;
            let mut p = Mat::zeros(l, l);
            for i in 0..l {
                let mut row: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..dh).fold(0.0, |acc, c| acc + q.get(i, c0 + c) * k.get(j, c0 + c)) * scale
                    })
                    .collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in &mut row {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for (j, s) in row.iter().enumerate() {
                    p.set(i, j, s / total);
                }
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += p.get(i, j) * v.get(j, c0 + c);
                    }
                    o.set(i, c0 + c, acc);
                }
            }
            probs.push(p);
        }
        let mut attn = &o * &b.wo;
        add_bias_rows(&mut attn, &b.bo);
        let x_mid = x + &attn;

        let (h2, ln2) = ln_forward(&x_mid, &b.ln2);
        let mut u = &h2 * &b.w1;
        add_bias_rows(&mut u, &b.b1);
        let act = Mat::from_fn(u.rows(), u.cols(), |i, j| quick_gelu(u.get(i, j)));
        let mut m = &act * &b.w2;
        add_bias_rows(&mut m, &b.b2);
        let out = &x_mid + &m;

        let tape = BlockTape {
            ln1,
            q,
            k,
            v,
            probs,
            ln2,
            u,
        };
        (out, tape)
    }

    fn block_backward(&self, b: &Block, tape: &BlockTape, g_out: &Mat) -> Mat {
        let d = g_out.cols();
        let l = g_out.rows();
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // out = x_mid + mlp(ln2(x_mid))
        let g_act = g_out * &b.w2.transpose();
        let g_u = Mat::from_fn(l, g_act.cols(), |i, j| g_act.get(i, j) * quick_gelu_grad(tape.u.get(i, j)));
        let g_h2 = &g_u * &b.w1.transpose();
        let mut g_mid = ln_backward(&g_h2, &tape.ln2, &b.ln2);
        g_mid.axpy(1.0, g_out);

        // x_mid = x + attn(ln1(x))
        let g_o = &g_mid * &b.wo.transpose();
        let mut g_q = Mat::zeros(l, d);
        let mut g_k = Mat::zeros(l, d);
        let mut g_v = Mat::zeros(l, d);
        for hd in 0..heads {
            let c0 = hd * dh;
            let p = &tape.probs[hd];
            for i in 0..l {
                // dL/dp_ij for j <= i
                let g_p: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).fold(0.0, |acc, c| acc + g_o.get(i, c0 + c) * tape.v.get(j, c0 + c)))
                    .collect();
                let dot: f64 = (0..=i).map(|j| p.get(i, j) * g_p[j]).sum();
                for j in 0..=i {
                    let pij = p.get(i, j);
                    for c in 0..dh {
                        let gv = g_v.get(j, c0 + c) + pij * g_o.get(i, c0 + c);
                        g_v.set(j, c0 + c, gv);
                    }
                    let g_s = pij * (g_p[j] - dot) * scale;
                    for c in 0..dh {
                        g_q.set(i, c0 + c, g_q.get(i, c0 + c) + g_s * tape.k.get(j, c0 + c));
                        g_k.set(j, c0 + c, g_k.get(j, c0 + c) + g_s * tape.q.get(i, c0 + c));
                    }
                }
            }
        }
        let mut g_h = &g_q * &b.wq.transpose();
        g_h.axpy(1.0, &(&g_k * &b.wk.transpose()));
        g_h.axpy(1.0, &(&g_v * &b.wv.transpose()));
        let mut g_x = ln_backward(&g_h, &tape.ln1, &b.ln1);
        g_x.axpy(1.0, &g_mid);
        g_x
    }

    /// Gradient of a loss with respect to the input embeddings, given its
    /// gradient with respect to the output feature. Weights stay frozen.
    pub fn backward(&self, grad_feature: &[f64], tape: &EncoderTape) -> Result<Mat> {
        if grad_feature.len() != self.cfg.d_cls {
            return Err(Error::Shape(format!(
                "feature gradient width {}, encoder output width {}",
                grad_feature.len(),
                self.cfg.d_cls
            )));
        }
        if tape.blocks.len() != self.blocks.len() {
            return Err(Error::Validation("tape was recorded by a different encoder".into()));
        }
        let d = self.cfg.embed_dim;
        let l = tape.seq_len;
        let g_z = self.proj.matvec(grad_feature)?;
        let g_last = ln_backward(&Mat::new(1, d, g_z)?, &tape.ln_final, &self.ln_final);
        let mut g = Mat::zeros(l, d);
        g.row_mut(l - 1).copy_from_slice(g_last.row(0));
        for (block, bt) in self.blocks.iter().zip(&tape.blocks).rev() {
            g = self.block_backward(block, bt, &g);
        }
        // positional embeddings are additive constants
        Ok(g)
    }
}
