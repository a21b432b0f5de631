//! Synthetic feature sets with controlled first- and second-order class
//! statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigh, Mat};
use crate::rng::{self, Purpose};
use crate::sopool::TokenMatrix;

use super::pm2f::{dataset_to_pm2f, encode_pm2f};
use super::{sha256_hex, write_bytes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub cls_mean: Vec<f64>,
    pub token_mean: Vec<f64>,
    /// `d_tok x k` factor `F`; tokens are `token_mean + F z` with `z ~ N(0, I_k)`.
    pub token_factor: Vec<Vec<f64>>,
}

fn default_train_fraction() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<SynthClass>,
    pub n_tokens: usize,
    pub samples_per_class: usize,
    /// Std of the isotropic noise added to each class token.
    pub noise_scale: f64,
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl SynthSpec {
    pub fn d_cls(&self) -> usize {
        self.classes.first().map_or(0, |c| c.cls_mean.len())
    }

    pub fn d_tok(&self) -> usize {
        self.classes.first().map_or(0, |c| c.token_mean.len())
    }

    pub fn factor(&self, class: usize) -> Result<Mat> {
        Mat::from_rows(&self.classes[class].token_factor)
    }

    /// Population token covariance `F F^T` of a class.
    pub fn token_covariance(&self, class: usize) -> Result<Mat> {
        let f = self.factor(class)?;
        f.matmul(&f.transpose())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Validation("synth spec has no classes".into()));
        }
        if self.n_tokens < 1 || self.samples_per_class < 1 {
            return Err(Error::Validation("n_tokens and samples_per_class must be >= 1".into()));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::Validation("noise_scale must be finite and >= 0".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Validation("train_fraction must be in (0, 1)".into()));
        }
        let (dc, dt) = (self.d_cls(), self.d_tok());
        if dc == 0 || dt == 0 {
            return Err(Error::Validation("class-token and token widths must be >= 1".into()));
        }
        for (c, class) in self.classes.iter().enumerate() {
            if class.cls_mean.len() != dc || class.token_mean.len() != dt {
                return Err(Error::Validation(format!("class {c} has inconsistent mean widths")));
            }
            if class.token_factor.len() != dt {
                return Err(Error::Validation(format!(
                    "class {c}: token factor has {} rows, expected {dt}",
                    class.token_factor.len()
                )));
            }
            let f = self.factor(c)?;
            let k = f.cols();
            if k == 0 || k > dt {
                return Err(Error::Validation(format!("class {c}: factor has {k} columns for width {dt}")));
            }
            // full column rank <=> F^T F is positive definite
            let gram = f.transpose().matmul(&f)?;
            let eig = jacobi_eigh(&gram)?;
            let max = eig.values.last().copied().unwrap_or(0.0);
            let min = eig.values.first().copied().unwrap_or(0.0);
            if !(max > 0.0) || min <= 1e-10 * max {
                return Err(Error::Validation(format!(
                    "class {c} (`{}`): token factor is rank deficient",
                    class.name
                )));
            }
        }
        Ok(())
    }

    /// Every class shares one class-token mean and one token mean; class `c`
    /// has token variance `strong` on coordinates `c` and `c + classes`
    /// (mod `d_tok`) and 1 elsewhere. Only second-order statistics separate
    /// the classes.
    pub fn equal_mean_distinct_covariance(
        classes: usize,
        d_cls: usize,
        d_tok: usize,
        n_tokens: usize,
        samples_per_class: usize,
        strong: f64,
        seed: u64,
    ) -> Self {
        let classes = (0..classes)
            .map(|c| {
                let mut factor = vec![vec![0.0; d_tok]; d_tok];
                for (i, row) in factor.iter_mut().enumerate() {
                    row[i] = 1.0;
                }
                for j in [c % d_tok, (c + classes) % d_tok] {
                    factor[j][j] = strong.sqrt();
                }
                SynthClass {
                    name: format!("class{c}"),
                    cls_mean: vec![0.5; d_cls],
                    token_mean: vec![0.0; d_tok],
                    token_factor: factor,
                }
            })
            .collect();
        Self {
            classes,
            n_tokens,
            samples_per_class,
            noise_scale: 1.0,
            seed,
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub classnames: Vec<String>,
    pub seed: u64,
    pub train_fraction: f64,
    pub train_per_class: Vec<usize>,
    pub val_per_class: Vec<usize>,
    pub n_tokens: usize,
    pub d_cls: usize,
    pub d_tok: usize,
    /// File name -> SHA-256 of its bytes.
    pub sha256: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Dataset,
    pub val: Dataset,
    pub manifest: SynthManifest,
}

/// Draws every class from its own stream and splits each class
/// `round(train_fraction * n)` / rest, keeping draw order.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let (dc, dt) = (spec.d_cls(), spec.d_tok());
    let n = spec.samples_per_class;
    let n_train = ((n as f64 * spec.train_fraction).round() as usize).clamp(0, n);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c, class) in spec.classes.iter().enumerate() {
        let mut rng = rng::stream(spec.seed, Purpose::Synth, c as u32);
        let f = spec.factor(c)?;
        let k = f.cols();
        for i in 0..n {
            let cls: Vec<f64> = class
                .cls_mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.noise_scale * z
                })
                .collect();
            let mut tokens = Mat::zeros(spec.n_tokens, dt);
            for t in 0..spec.n_tokens {
                let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
                let fz = f.matvec(&z)?;
                for (j, v) in tokens.row_mut(t).iter_mut().enumerate() {
                    *v = class.token_mean[j] + fz[j];
                }
            }
            let sample = Sample {
                label: c,
                cls,
                tokens: TokenMatrix::new(tokens)?,
            };
            if i < n_train {
                train.push(sample);
            } else {
                val.push(sample);
            }
        }
    }
    let classes = spec.classes.len();
    let manifest = SynthManifest {
        classnames: spec.classes.iter().map(|c| c.name.clone()).collect(),
        seed: spec.seed,
        train_fraction: spec.train_fraction,
        train_per_class: vec![n_train; classes],
        val_per_class: vec![n - n_train; classes],
        n_tokens: spec.n_tokens,
        d_cls: dc,
        d_tok: dt,
        sha256: BTreeMap::new(),
    };
    Ok(SynthOutput {
        train: Dataset::new(classes, train)?,
        val: Dataset::new(classes, val)?,
        manifest,
    })
}

/// Writes `train.pm2f`, `val.pm2f` and `manifest.json` (with file hashes).
pub fn write_synth(dir: &Path, out: &SynthOutput) -> Result<SynthManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = out.manifest.clone();
    for (name, data) in [("train.pm2f", &out.train), ("val.pm2f", &out.val)] {
        let (h, r) = dataset_to_pm2f(data)?;
        let bytes = encode_pm2f(&h, &r)?;
        manifest.sha256.insert(name.to_string(), sha256_hex(&bytes));
        write_bytes(&dir.join(name), &bytes)?;
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_bytes(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<SynthManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
