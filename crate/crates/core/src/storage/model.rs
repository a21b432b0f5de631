//! Trained-head files.
//!
//! Layout: magic `PM2P`, u32 version, u32 metadata length, metadata JSON,
//! then every tensor as f64 little-endian in [`PARAM_NAMES`] order,
//! followed by the CoOp context if present.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};
use crate::heads::{HeadDims, HeadMode, HeadParams, PARAM_NAMES};
use crate::linalg::Mat;
use crate::prompts::CoopContext;
use crate::trainer::TrainConfig;

use super::write_bytes;

pub const MODEL_MAGIC: [u8; 4] = *b"PM2P";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub head_mode: HeadMode,
    pub dims: HeadDims,
    pub train_config: TrainConfig,
    pub classnames: Vec<String>,
    /// `[rows, cols]` of each tensor in [`PARAM_NAMES`] order (biases are `[len, 1]`).
    pub shapes: Vec<[usize; 2]>,
    pub context_shape: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub meta: ModelMeta,
    pub params: HeadParams,
    pub context: Option<CoopContext>,
}

fn shapes_of(p: &HeadParams) -> Vec<[usize; 2]> {
    vec![
        [p.proj_weight.rows(), p.proj_weight.cols()],
        [p.proj_bias.len(), 1],
        [p.shared_w.rows(), p.shared_w.cols()],
        [p.shared_b.len(), 1],
        [p.so_w.rows(), p.so_w.cols()],
        [p.so_b.len(), 1],
    ]
}

impl SavedModel {
    pub fn new(
        params: HeadParams,
        context: Option<CoopContext>,
        dims: HeadDims,
        train_config: TrainConfig,
        classnames: Vec<String>,
    ) -> Self {
        let meta = ModelMeta {
            head_mode: train_config.head_mode,
            dims,
            shapes: shapes_of(&params),
            context_shape: context.as_ref().map(|c| [c.len(), c.embed_dim()]),
            train_config,
            classnames,
        };
        Self { meta, params, context }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let ctx = self.context.as_ref().map(|c| c.context.data());
        for t in self.params.tensors().into_iter().chain(ctx) {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |kind, offset| Error::Parse { kind, offset };
        let truncated = |needed: usize| {
            err(
                ParseErrorKind::Truncated {
                    needed: needed as u64,
                    available: bytes.len() as u64,
                },
                bytes.len() as u64,
            )
        };
        if bytes.len() < 12 {
            return Err(truncated(12));
        }
        if bytes[..4] != MODEL_MAGIC {
            return Err(err(ParseErrorKind::BadMagic(bytes[..4].try_into().expect("4 bytes")), 0));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != MODEL_VERSION {
            return Err(err(ParseErrorKind::UnsupportedVersion(version), 4));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 12 + meta_len {
            return Err(truncated(12 + meta_len));
        }
        let meta: ModelMeta = serde_json::from_slice(&bytes[12..12 + meta_len])?;
        if meta.shapes.len() != PARAM_NAMES.len() {
            return Err(err(ParseErrorKind::Malformed("wrong tensor count".into()), 12));
        }
        let mut sizes: Vec<usize> = meta.shapes.iter().map(|[r, c]| r * c).collect();
        if let Some([r, c]) = meta.context_shape {
            sizes.push(r * c);
        }
        let body = 12 + meta_len;
        let needed = body + 8 * sizes.iter().sum::<usize>();
        if bytes.len() < needed {
            return Err(truncated(needed));
        }
        if bytes.len() > needed {
            return Err(err(ParseErrorKind::TrailingBytes((bytes.len() - needed) as u64), needed as u64));
        }
        let mut at = body;
        let mut tensors = Vec::with_capacity(sizes.len());
        for n in sizes {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let x = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
                if !x.is_finite() {
                    return Err(err(ParseErrorKind::NonFinite, at as u64));
                }
                v.push(x);
                at += 8;
            }
            tensors.push(v);
        }
        let mut it = tensors.into_iter();
        let mut mat = |shape: [usize; 2]| Mat::new(shape[0], shape[1], it.next().expect("tensor"));
        let params = HeadParams {
            proj_weight: mat(meta.shapes[0])?,
            proj_bias: mat(meta.shapes[1])?.into_data(),
            shared_w: mat(meta.shapes[2])?,
            shared_b: mat(meta.shapes[3])?.into_data(),
            so_w: mat(meta.shapes[4])?,
            so_b: mat(meta.shapes[5])?.into_data(),
        };
        let context = match meta.context_shape {
            Some(s) => Some(CoopContext { context: mat(s)? }),
            None => None,
        };
        params.check_mode(meta.head_mode)?;
        Ok(Self { meta, params, context })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
