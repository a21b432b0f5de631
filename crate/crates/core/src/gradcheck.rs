//! Central-difference checks of the hand-written backward passes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::heads::{visual_backward, visual_forward, visual_logits, HeadDims, HeadMode, HeadParams};
use crate::linalg::Mat;
use crate::prompts::{EncoderConfig, ToyTextEncoder};
use crate::rng::{self, Purpose};
use crate::sopool::{sopool_backward, sopool_forward, SoPoolConfig, TokenMatrix};
use crate::trainer::{cross_entropy, TextSource, TrainConfig, Trainer};

pub const STEP: f64 = 1e-5;
/// Denominator floor for coordinates whose true gradient is zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Sopool,
    Head,
    Coop,
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::Sopool => "sopool",
            Which::Head => "head",
            Which::Coop => "coop",
        })
    }
}

impl FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sopool" => Ok(Which::Sopool),
            "head" => Ok(Which::Head),
            "coop" => Ok(Which::Coop),
            other => Err(Error::Config(format!("unknown gradient check `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub which: Which,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst: (f64, f64),
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Tally {
    which: Which,
    coordinates: usize,
    max_rel_err: f64,
    worst: (f64, f64),
}

impl Tally {
    fn new(which: Which) -> Self {
        Self {
            which,
            coordinates: 0,
            max_rel_err: 0.0,
            worst: (0.0, 0.0),
        }
    }

    fn add(&mut self, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        if e >= self.max_rel_err {
            self.max_rel_err = e;
            self.worst = (analytic, numeric);
        }
        self.coordinates += 1;
    }

    fn report(self) -> GradcheckReport {
        GradcheckReport {
            which: self.which,
            coordinates: self.coordinates,
            max_rel_err: self.max_rel_err,
            worst: self.worst,
        }
    }
}

fn central(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(STEP)? - f(-STEP)?) / (2.0 * STEP))
}

fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn run(which: Which, coordinates: usize, seed: u64) -> Result<GradcheckReport> {
    match which {
        Which::Sopool => check_sopool(coordinates, seed),
        Which::Head => check_head(coordinates, seed),
        Which::Coop => check_coop(coordinates, seed),
    }
}

/// Tokens -> pooled features, loss `<probe, features>`; 20 coordinates per
/// random instance.
pub fn check_sopool(coordinates: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng::stream(seed, Purpose::Gradcheck, 0);
    let cfg = SoPoolConfig::default();
    let mut tally = Tally::new(Which::Sopool);
    while tally.coordinates < coordinates {
        let (n, r) = (10, 6);
        let x = random_mat(&mut rng, n, r);
        let tokens = TokenMatrix::new(x.clone())?;
        let out = sopool_forward(&tokens, &cfg)?;
        let probe: Vec<f64> = (0..out.features.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = sopool_backward(&probe, &out.tape)?;
        for _ in 0..20.min(coordinates - tally.coordinates) {
            let idx = rng::below(&mut rng, n * r);
            let numeric = central(|h| {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let f = sopool_forward(&TokenMatrix::new(xp)?, &cfg)?.features;
                Ok(f.iter().zip(&probe).map(|(a, b)| a * b).sum())
            })?;
            tally.add(g.data()[idx], numeric);
        }
    }
    Ok(tally.report())
}

/// Full visual head (projection, covariance, Newton-Schulz, compensation,
/// vech, linear) under cross-entropy, over every parameter tensor.
pub fn check_head(coordinates: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng::stream(seed, Purpose::Gradcheck, 1);
    let cfg = SoPoolConfig {
        reduced_dim: 4,
        ..SoPoolConfig::default()
    };
    let dims = HeadDims {
        classes: 3,
        d_cls: 6,
        d_tok: 7,
        reduced_dim: 4,
    };
    let mode = HeadMode::ClsPlusSo;
    let mut tally = Tally::new(Which::Head);
    let mut instance = 0u64;
    while tally.coordinates < coordinates {
        let params = HeadParams::init(dims, mode, seed.wrapping_add(instance));
        instance += 1;
        let cls: Vec<f64> = (0..dims.d_cls).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tokens = TokenMatrix::new(random_mat(&mut rng, 9, dims.d_tok))?;
        let label = rng::below(&mut rng, dims.classes);
        let fwd = visual_forward(&cls, &tokens, &params, mode, &cfg)?;
        let (_, g_logits) = cross_entropy(&fwd.logits, label)?;
        let mut grads = params.zeros_like();
        visual_backward(&fwd, &g_logits, &params, &mut grads)?;
        let loss = |p: &HeadParams| -> Result<f64> {
            let l = visual_logits(&cls, &tokens, p, mode, &cfg)?;
            Ok(cross_entropy(&l, label)?.0)
        };
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        for _ in 0..25.min(coordinates - tally.coordinates) {
            let t = rng::below(&mut rng, sizes.len());
            let j = rng::below(&mut rng, sizes[t]);
            let numeric = central(|h| {
                let mut p = params.clone();
                p.tensors_mut()[t][j] += h;
                loss(&p)
            })?;
            tally.add(grads.tensors()[t][j], numeric);
        }
    }
    Ok(tally.report())
}

/// CoOp context -> frozen toy encoder -> shared classifier, text
/// cross-entropy only, over context coordinates.
pub fn check_coop(coordinates: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng::stream(seed, Purpose::Gradcheck, 2);
    let encoder = ToyTextEncoder::new(EncoderConfig {
        embed_dim: 16,
        d_cls: 8,
        seed,
        ..EncoderConfig::default()
    })?;
    let classnames: Vec<String> = ["Normal", "Benign", "In Situ Carcinoma"].iter().map(|s| s.to_string()).collect();
    let samples = (0..3)
        .map(|label| {
            Ok(Sample {
                label,
                cls: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
                tokens: TokenMatrix::new(random_mat(&mut rng, 2, 2))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::new(3, samples)?;
    let cfg = TrainConfig {
        head_mode: HeadMode::ClsOnly,
        seed,
        ..TrainConfig::default()
    };
    let text = TextSource::Coop {
        encoder: &encoder,
        classnames: &classnames,
        context_len: 4,
    };
    let mut trainer = Trainer::new(&data, text, &cfg)?;
    let (_, _, ctx_grad) = trainer.gradients(&[])?;
    let ctx_grad = ctx_grad.expect("CoOp source yields a context gradient");
    let mut tally = Tally::new(Which::Coop);
    let n = ctx_grad.data().len();
    for _ in 0..coordinates {
        let idx = rng::below(&mut rng, n);
        let orig = trainer.context().expect("context").context.data()[idx];
        let mut at = |h: f64| -> Result<f64> {
            trainer.context_mut().expect("context").context.data_mut()[idx] = orig + h;
            Ok(trainer.gradients(&[])?.0.loss)
        };
        let numeric = central(&mut at)?;
        trainer.context_mut().expect("context").context.data_mut()[idx] = orig;
        tally.add(ctx_grad.data()[idx], numeric);
    }
    Ok(tally.report())
}
