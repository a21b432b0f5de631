//! Few-shot training: the joint image/text loss, AdamW under warmup plus
//! cosine annealing, episode sampling, and the shots x seeds protocol.

mod optim;
mod protocol;
mod sampler;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::heads::{
    argmax, text_backward, text_logits, visual_backward, visual_forward, visual_logits, HeadDims, HeadGrads,
    HeadMode, HeadParams, PARAM_NAMES,
};
use crate::linalg::Mat;
use crate::prompts::{coop_assemble, CoopContext, EncoderInput, TextFeature, ToyTextEncoder};
use crate::sopool::SoPoolConfig;

pub use optim::{lr_at, AdamW};
pub use protocol::{
    run_protocol, sweep_grid, EpisodeRecord, GridPoint, ProtocolConfig, ProtocolData, ProtocolReport, RowSpec,
    SummaryRow, SummaryTable, SweepOutcome, DEFAULT_LR_GRID, DEFAULT_SHOTS, DEFAULT_WD_GRID,
};
pub use sampler::{sample_few_shot, BatchCursor, EpisodeSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub text_loss_weight: f64,
    pub head_mode: HeadMode,
    pub sopool: SoPoolConfig,
    pub seed: u64,
    /// Start the shared classifier from per-class mean text features
    /// instead of the random init.
    pub init_head_from_text: bool,
    /// Record the training loss every this many iterations (and at the last).
    pub loss_log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            weight_decay: 0.0,
            warmup_iters: 50,
            total_iters: 12800,
            batch_size: 2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            text_loss_weight: 1.0,
            head_mode: HeadMode::ClsPlusSo,
            sopool: SoPoolConfig::default(),
            seed: 0,
            init_head_from_text: false,
            loss_log_every: 100,
        }
    }
}

impl TrainConfig {
    /// `total_iters = 0` is allowed and means "no training".
    pub fn validate(&self) -> Result<()> {
        if self.total_iters > 0 && self.warmup_iters >= self.total_iters {
            return Err(Error::Config(format!(
                "warmup_iters {} must be < total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0) || !(self.text_loss_weight >= 0.0) {
            return Err(Error::Config("weight_decay and text_loss_weight must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps > 0".into()));
        }
        if self.loss_log_every == 0 {
            return Err(Error::Config("loss_log_every must be >= 1".into()));
        }
        self.sopool.validate()
    }
}

/// Where the text half of the loss comes from.
#[derive(Debug, Clone, Copy)]
pub enum TextSource<'a> {
    /// Image loss only.
    None,
    /// Precomputed text features, one per (class, prompt).
    Fixed(&'a [TextFeature]),
    /// Learnable context vectors in front of each class name, re-encoded by
    /// the frozen encoder every step.
    Coop {
        encoder: &'a ToyTextEncoder,
        classnames: &'a [String],
        context_len: usize,
    },
}

impl TextSource<'_> {
    pub fn is_none(&self) -> bool {
        matches!(self, TextSource::None)
    }
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Validation(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, l)| (l - lse).exp() - if i == label { 1.0 } else { 0.0 })
        .collect();
    Ok((lse - logits[label], grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub image_loss: f64,
    pub text_loss: f64,
    pub grad_image: Vec<Vec<f64>>,
    pub grad_text: Vec<Vec<f64>>,
}

/// `mean CE(image) + text_weight * mean CE(text)`. An empty side contributes 0.
pub fn compute_loss(
    image_logits: &[Vec<f64>],
    image_labels: &[usize],
    text_logits: &[Vec<f64>],
    text_labels: &[usize],
    text_weight: f64,
) -> Result<LossOutput> {
    if image_logits.len() != image_labels.len() || text_logits.len() != text_labels.len() {
        return Err(Error::Shape("logits and labels differ in count".into()));
    }
    let mean_ce = |logits: &[Vec<f64>], labels: &[usize], weight: f64| -> Result<(f64, Vec<Vec<f64>>)> {
        let n = logits.len().max(1) as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(logits.len());
        for (l, &y) in logits.iter().zip(labels) {
            let (ce, mut g) = cross_entropy(l, y)?;
            total += ce;
            g.iter_mut().for_each(|v| *v *= weight / n);
            grads.push(g);
        }
        Ok((total / n, grads))
    };
    let (image_loss, grad_image) = mean_ce(image_logits, image_labels, 1.0)?;
    let (text_loss, grad_text) = mean_ce(text_logits, text_labels, text_weight)?;
    Ok(LossOutput {
        loss: image_loss + text_weight * text_loss,
        image_loss,
        text_loss,
        grad_image,
        grad_text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub image_loss: f64,
    pub text_loss: f64,
}

struct CoopState<'a> {
    encoder: &'a ToyTextEncoder,
    /// Embedded class-name bytes, one matrix per class.
    class_embeddings: Vec<Mat>,
    context: CoopContext,
}

/// Mutable training state for one episode.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a Dataset,
    fixed_text: &'a [TextFeature],
    coop: Option<CoopState<'a>>,
    params: HeadParams,
    opt: AdamW,
}

pub fn class_means(features: &[TextFeature], classes: usize) -> Result<Vec<Vec<f64>>> {
    let d = features.first().map_or(0, |f| f.feature.len());
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for f in features {
        let norm = f.feature.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Validation("zero text feature".into()));
        }
        for (s, x) in sums[f.label].iter_mut().zip(&f.feature) {
            *s += x / norm;
        }
        counts[f.label] += 1;
    }
    for (c, (s, n)) in sums.iter_mut().zip(&counts).enumerate() {
        if *n == 0 {
            return Err(Error::Validation(format!("no text feature for class {c}")));
        }
        s.iter_mut().for_each(|v| *v /= *n as f64);
    }
    Ok(sums)
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a Dataset, text: TextSource<'a>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Validation("empty training set".into()));
        }
        let classes = train.classes();
        let dims = HeadDims {
            classes,
            d_cls: train.d_cls(),
            d_tok: train.d_tok(),
            reduced_dim: cfg.sopool.reduced_dim,
        };
        let mut params = HeadParams::init(dims, cfg.head_mode, cfg.seed);
        let mut fixed_text: &[TextFeature] = &[];
        let mut coop = None;
        match text {
            TextSource::None => {}
            TextSource::Fixed(features) => {
                for f in features {
                    if f.label >= classes || f.feature.len() != dims.d_cls {
                        return Err(Error::Shape(format!(
                            "text feature for label {} has width {}, expected a label < {classes} and width {}",
                            f.label,
                            f.feature.len(),
                            dims.d_cls
                        )));
                    }
                }
                fixed_text = features;
            }
            TextSource::Coop {
                encoder,
                classnames,
                context_len,
            } => {
                if classnames.len() != classes {
                    return Err(Error::Shape(format!("{} class names for {classes} classes", classnames.len())));
                }
                if encoder.d_cls() != dims.d_cls {
                    return Err(Error::Shape(format!(
                        "encoder output width {} but class tokens have width {}",
                        encoder.d_cls(),
                        dims.d_cls
                    )));
                }
                let class_embeddings = classnames
                    .iter()
                    .map(|n| {
                        if n.is_empty() {
                            return Err(Error::Validation("empty class name".into()));
                        }
                        let ids: Vec<u32> = n.bytes().map(u32::from).collect();
                        encoder.embed_ids(&ids)
                    })
                    .collect::<Result<Vec<_>>>()?;
                coop = Some(CoopState {
                    encoder,
                    class_embeddings,
                    context: CoopContext::init(context_len, encoder.embed_dim(), cfg.seed)?,
                });
            }
        }
        if cfg.init_head_from_text && !text.is_none() {
            let features = match &coop {
                Some(state) => coop_features(state)?.into_iter().map(|(f, _)| f).collect(),
                None => fixed_text.to_vec(),
            };
            params.init_shared_from_text(&class_means(&features, classes)?)?;
        }
        let mut sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        if let Some(state) = &coop {
            sizes.push(state.context.context.data().len());
        }
        Ok(Self {
            cfg: cfg.clone(),
            train,
            fixed_text,
            opt: AdamW::from_config(&sizes, cfg),
            coop,
            params,
        })
    }

    pub fn params(&self) -> &HeadParams {
        &self.params
    }

    pub fn context(&self) -> Option<&CoopContext> {
        self.coop.as_ref().map(|c| &c.context)
    }

    pub fn into_parts(self) -> (HeadParams, Option<CoopContext>) {
        (self.params, self.coop.map(|c| c.context))
    }

    /// Current text features (CoOp prompts are re-encoded).
    pub fn text_features(&self) -> Result<Vec<TextFeature>> {
        match &self.coop {
            Some(state) => Ok(coop_features(state)?.into_iter().map(|(f, _)| f).collect()),
            None => Ok(self.fixed_text.to_vec()),
        }
    }

    pub fn params_mut(&mut self) -> &mut HeadParams {
        &mut self.params
    }

    pub fn context_mut(&mut self) -> Option<&mut CoopContext> {
        self.coop.as_mut().map(|c| &mut c.context)
    }

    /// Loss on the given training-set indices plus every text prompt, with
    /// gradients for the head and (under CoOp) the context vectors. An empty
    /// batch gives the text term alone.
    pub fn gradients(&self, batch: &[usize]) -> Result<(StepStats, HeadGrads, Option<Mat>)> {
        let mode = self.cfg.head_mode;
        let sp = &self.cfg.sopool;
        let samples = self.train.samples();
        let mut fwds = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = samples
                .get(i)
                .ok_or_else(|| Error::Validation(format!("batch index {i} outside training set")))?;
            fwds.push(visual_forward(&s.cls, &s.tokens, &self.params, mode, sp)?);
        }
        let image_logits: Vec<Vec<f64>> = fwds.iter().map(|f| f.logits.clone()).collect();
        let image_labels: Vec<usize> = batch.iter().map(|&i| samples[i].label).collect();

        let coop_out = match &self.coop {
            Some(state) => Some(coop_features(state)?),
            None => None,
        };
        let text: Vec<&TextFeature> = match &coop_out {
            Some(v) => v.iter().map(|(f, _)| f).collect(),
            None => self.fixed_text.iter().collect(),
        };
        let text_logit: Vec<Vec<f64>> = text
            .iter()
            .map(|t| text_logits(&t.feature, &self.params))
            .collect::<Result<_>>()?;
        let text_labels: Vec<usize> = text.iter().map(|t| t.label).collect();

        let loss = compute_loss(
            &image_logits,
            &image_labels,
            &text_logit,
            &text_labels,
            self.cfg.text_loss_weight,
        )?;

        let mut grads = self.params.zeros_like();
        for (f, g) in fwds.iter().zip(&loss.grad_image) {
            visual_backward(f, g, &self.params, &mut grads)?;
        }
        let mut ctx_grad = self.coop.as_ref().map(|s| Mat::zeros(s.context.len(), s.context.embed_dim()));
        for (k, (t, g)) in text.iter().zip(&loss.grad_text).enumerate() {
            let g_feat = text_backward(&t.feature, g, &self.params, &mut grads)?;
            if let (Some(state), Some(out), Some(cg)) = (&self.coop, &coop_out, ctx_grad.as_mut()) {
                let g_seq = state.encoder.backward(&g_feat, &out[k].1)?;
                for r in 0..cg.rows() {
                    for (a, b) in cg.row_mut(r).iter_mut().zip(g_seq.row(r)) {
                        *a += b;
                    }
                }
            }
        }
        let stats = StepStats {
            loss: loss.loss,
            image_loss: loss.image_loss,
            text_loss: loss.text_loss,
        };
        Ok((stats, grads, ctx_grad))
    }

    /// One AdamW step at learning rate `lr`.
    pub fn step(&mut self, lr: f64, batch: &[usize]) -> Result<StepStats> {
        let (stats, grads, ctx_grad) = self.gradients(batch)?;
        let mut names: Vec<&str> = PARAM_NAMES.to_vec();
        let mut grad_refs: Vec<&[f64]> = grads.tensors().to_vec();
        if let Some(cg) = &ctx_grad {
            grad_refs.push(cg.data());
            names.push("coop_context");
        }
        let mut param_refs: Vec<&mut [f64]> = self.params.tensors_mut().into_iter().collect();
        if let Some(state) = self.coop.as_mut() {
            param_refs.push(state.context.context.data_mut());
        }
        self.opt.step(&mut param_refs, &grad_refs, &names, lr)?;
        Ok(stats)
    }
}

fn coop_features(state: &CoopState<'_>) -> Result<Vec<(TextFeature, crate::prompts::EncoderTape)>> {
    let eos = state.encoder.eos_embedding();
    state
        .class_embeddings
        .iter()
        .enumerate()
        .map(|(label, emb)| {
            let seq = coop_assemble(&state.context, emb, eos)?;
            let (feature, tape) = state.encoder.encode(EncoderInput::Embedded(&seq))?;
            Ok((TextFeature { label, feature }, tape))
        })
        .collect()
}

/// Parameters and curves from one training run.
#[derive(Debug, Clone)]
pub struct TrainedEpisode {
    pub params: HeadParams,
    pub context: Option<CoopContext>,
    /// `(iteration, loss)` pairs.
    pub loss_history: Vec<(usize, f64)>,
    /// Top-1 on the support set after training.
    pub train_accuracy: f64,
}

/// Trains a fresh head on one episode's support set.
pub fn train_episode(
    train: &Dataset,
    text: TextSource<'_>,
    episode: &EpisodeSpec,
    cfg: &TrainConfig,
) -> Result<TrainedEpisode> {
    if episode.indices.len() != train.classes() {
        return Err(Error::Validation(format!(
            "episode covers {} classes, dataset has {}",
            episode.indices.len(),
            train.classes()
        )));
    }
    let support = episode.flat();
    if let Some(&bad) = support.iter().find(|&&i| i >= train.len()) {
        return Err(Error::Validation(format!("episode index {bad} outside training set")));
    }
    let mut trainer = Trainer::new(train, text, cfg)?;
    let mut cursor = BatchCursor::new(support.clone(), cfg.seed);
    let mut loss_history = Vec::new();
    for iter in 0..cfg.total_iters {
        let lr = lr_at(iter, cfg)?;
        let batch = cursor.next_batch(cfg.batch_size);
        let stats = trainer.step(lr, &batch)?;
        if iter % cfg.loss_log_every == 0 || iter + 1 == cfg.total_iters {
            loss_history.push((iter, stats.loss));
        }
    }
    let support_set = Dataset::new(
        train.classes(),
        support.iter().map(|&i| train.samples()[i].clone()).collect(),
    )?;
    let train_accuracy = evaluate_top1(trainer.params(), &support_set, cfg.head_mode, &cfg.sopool)?;
    let (params, context) = trainer.into_parts();
    Ok(TrainedEpisode {
        params,
        context,
        loss_history,
        train_accuracy,
    })
}

/// Image-only predictions (the text path is never consulted).
pub fn predict(params: &HeadParams, data: &Dataset, mode: HeadMode, cfg: &SoPoolConfig) -> Result<Vec<usize>> {
    data.samples()
        .iter()
        .map(|s| visual_logits(&s.cls, &s.tokens, params, mode, cfg).map(|l| argmax(&l)))
        .collect()
}

/// Fraction of samples whose top logit is the label. Ties pick the lowest class.
pub fn evaluate_top1(params: &HeadParams, data: &Dataset, mode: HeadMode, cfg: &SoPoolConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty set".into()));
    }
    let pred = predict(params, data, mode, cfg)?;
    let hits = pred.iter().zip(data.samples()).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests;
