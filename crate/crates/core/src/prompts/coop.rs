use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::{self, Purpose};

use super::MAX_SEQ_LEN;

/// Learnable context vectors `[V]_1 .. [V]_M`, shared by every class.
#[derive(Debug, Clone, PartialEq)]
pub struct CoopContext {
    pub context: Mat,
}

impl CoopContext {
    /// Gaussian init, std 0.02.
    pub fn init(context_len: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if context_len < 1 {
            return Err(Error::Config("CoOp needs at least one context vector".into()));
        }
        let mut rng = rng::stream(seed, Purpose::Context, 0);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        Ok(Self {
            context: Mat::from_fn(context_len, embed_dim, |_, _| normal.sample(&mut rng)),
        })
    }

    pub fn zeros(context_len: usize, embed_dim: usize) -> Self {
        Self {
            context: Mat::zeros(context_len, embed_dim),
        }
    }

    pub fn len(&self) -> usize {
        self.context.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.context.rows() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.context.cols()
    }
}

/// Stacks `[context; class-name embeddings; EOS embedding]` row-wise.
pub fn coop_assemble(ctx: &CoopContext, class_embeddings: &Mat, eos_embedding: &[f64]) -> Result<Mat> {
    let d = ctx.embed_dim();
    if class_embeddings.cols() != d || eos_embedding.len() != d {
        return Err(Error::Shape(format!(
            "context width {d}, class embedding width {}, EOS width {}",
            class_embeddings.cols(),
            eos_embedding.len()
        )));
    }
    let len = ctx.len() + class_embeddings.rows() + 1;
    if len > MAX_SEQ_LEN {
        return Err(Error::Validation(format!(
            "assembled prompt has {len} positions, limit is {MAX_SEQ_LEN}"
        )));
    }
    let mut data = Vec::with_capacity(len * d);
    data.extend_from_slice(ctx.context.data());
    data.extend_from_slice(class_embeddings.data());
    data.extend_from_slice(eos_embedding);
    Mat::new(len, d, data)
}
