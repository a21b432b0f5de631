//! In-memory labelled image features.

use crate::error::{Error, Result};
use crate::sopool::TokenMatrix;

/// One image: its label, class token (joint space) and raw visual tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub cls: Vec<f64>,
    pub tokens: TokenMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    classes: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Checks labels against `classes` and that all samples share widths.
    pub fn new(classes: usize, samples: Vec<Sample>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Validation("dataset needs at least one class".into()));
        }
        if let Some(first) = samples.first() {
            let (dc, n, dt) = (first.cls.len(), first.tokens.n_tokens(), first.tokens.dim());
            for (i, s) in samples.iter().enumerate() {
                if s.label >= classes {
                    return Err(Error::Validation(format!(
                        "sample {i} has label {} but there are {classes} classes",
                        s.label
                    )));
                }
                if s.cls.len() != dc || s.tokens.n_tokens() != n || s.tokens.dim() != dt {
                    return Err(Error::Shape(format!("sample {i} differs in shape from sample 0")));
                }
            }
        }
        Ok(Self { classes, samples })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn d_cls(&self) -> usize {
        self.samples.first().map_or(0, |s| s.cls.len())
    }

    pub fn n_tokens(&self) -> usize {
        self.samples.first().map_or(0, |s| s.tokens.n_tokens())
    }

    pub fn d_tok(&self) -> usize {
        self.samples.first().map_or(0, |s| s.tokens.dim())
    }
}
