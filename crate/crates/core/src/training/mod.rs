//! Joint training over all three query families.
//!
//! Every supervision instance is an independent example: instances from all
//! sentences and query kinds are shuffled together each epoch, and each
//! batch sums its non-restrictive, restrictive, and sentiment losses.

pub mod gradcheck;
pub mod loss;
pub mod optim;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, DatasetSplit, Triplet};
use crate::encoder::{CombinedInput, Mode};
use crate::error::{Error, Result};
use crate::eval::SubtaskScores;
use crate::heads::{predict_sentiment, predict_span_probs, sentiment_backward, span_backward};
use crate::inference::{extract_triplets, InferenceConfig, TripletPrediction};
use crate::model::{Model, ModelParams};
use crate::queries::{derive_supervision, Answer, QueryKind};

pub use loss::{sentiment_loss, span_loss, total_loss, LossBreakdown};
pub use optim::AdamW;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub head_lr: f64,
    pub encoder_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once dev triplet F1 reaches this value.
    pub stop_at_dev_f1: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            head_lr: 1e-3,
            encoder_lr: 1e-5,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            batch_size: 4,
            epochs: 40,
            seed: 0,
            stop_at_dev_f1: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.head_lr >= 0.0 && self.encoder_lr >= 0.0) {
            return Err(Error::Config("step sizes must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// A supervision instance with its encoder input resolved.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub kind: QueryKind,
    pub input: CombinedInput,
    pub answer: Answer,
}

pub fn prepare_sentence(model: &Model, sentence: &AnnotatedSentence) -> Result<Vec<PreparedInstance>> {
    derive_supervision(sentence)?
        .into_iter()
        .map(|inst| {
            Ok(PreparedInstance {
                kind: inst.query.kind,
                input: model.input(&inst.query, sentence)?,
                answer: inst.answer,
            })
        })
        .collect()
}

pub fn prepare(model: &Model, sentences: &[AnnotatedSentence]) -> Result<Vec<PreparedInstance>> {
    let mut out = Vec::new();
    for s in sentences {
        out.extend(prepare_sentence(model, s)?);
    }
    Ok(out)
}

/// Loss of one instance; with `grads`, also accumulates its gradient.
pub fn instance_loss(
    model: &Model,
    params: &ModelParams,
    inst: &PreparedInstance,
    mode: Mode<'_>,
    grads: Option<&mut ModelParams>,
) -> Result<LossBreakdown> {
    let (hidden, cache) = params.encoder.forward(&inst.input, &model.config, mode)?;
    match &inst.answer {
        Answer::Spans(labels) => {
            let probs = predict_span_probs(&hidden, inst.input.query_len, &params.span)?;
            let value = span_loss(&[(labels, &probs)])?;
            if let Some(g) = grads {
                let (d_start, d_end) = loss::span_logit_grads(labels, &probs);
                let d_hidden = span_backward(
                    &hidden,
                    inst.input.query_len,
                    &params.span,
                    &d_start,
                    &d_end,
                    &mut g.span,
                )?;
                params.encoder.backward(&cache, &d_hidden, &model.config, &mut g.encoder);
            }
            Ok(match inst.kind {
                QueryKind::NonRestrictive => total_loss(value, 0.0, 0.0),
                _ => total_loss(0.0, value, 0.0),
            })
        }
        Answer::Sentiment(gold) => {
            let dist = predict_sentiment(&hidden, &params.sentiment)?;
            let value = sentiment_loss(&[(*gold, &dist)]);
            if let Some(g) = grads {
                let d_logits = loss::sentiment_logit_grads(*gold, &dist);
                let d_hidden = sentiment_backward(&hidden, &params.sentiment, &d_logits, &mut g.sentiment);
                params.encoder.backward(&cache, &d_hidden, &model.config, &mut g.encoder);
            }
            Ok(total_loss(0.0, 0.0, value))
        }
    }
}

/// Eval-mode loss summed over `instances`.
pub fn dataset_loss(model: &Model, instances: &[PreparedInstance]) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for inst in instances {
        acc.add(&instance_loss(model, &model.params, inst, Mode::Eval, None)?);
    }
    Ok(acc)
}

/// Runs full inference over a split and scores it.
pub fn evaluate(
    model: &Model,
    sentences: &[AnnotatedSentence],
    config: &InferenceConfig,
) -> Result<(SubtaskScores, Vec<Vec<TripletPrediction>>)> {
    let predictions = sentences
        .iter()
        .map(|s| extract_triplets(model, s, config))
        .collect::<Result<Vec<_>>>()?;
    let pred_triplets: Vec<Vec<Triplet>> = predictions
        .iter()
        .map(|p| p.iter().map(TripletPrediction::triplet).collect())
        .collect();
    let pairs: Vec<(&[Triplet], &[Triplet])> = pred_triplets
        .iter()
        .zip(sentences)
        .map(|(p, s)| (p.as_slice(), s.triplets.as_slice()))
        .collect();
    Ok((SubtaskScores::compute(&pairs), predictions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0 is the untrained model, evaluated without dropout.
    pub epoch: usize,
    pub l_n: f64,
    pub l_r: f64,
    pub l_s: f64,
    pub total: f64,
    pub dev: SubtaskScores,
}

impl EpochMetrics {
    fn new(epoch: usize, loss: LossBreakdown, dev: SubtaskScores) -> Self {
        Self {
            epoch,
            l_n: loss.l_n,
            l_r: loss.l_r,
            l_s: loss.l_s,
            total: loss.total,
            dev,
        }
    }

    pub fn loss(&self) -> LossBreakdown {
        total_loss(self.l_n, self.l_r, self.l_s)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the best dev epoch, rounded to checkpoint precision.
    pub best: Model,
    pub best_epoch: usize,
    /// Entry 0 is the initial model; entry `e` holds the summed training
    /// loss over epoch `e`'s steps.
    pub history: Vec<EpochMetrics>,
}

impl FitOutcome {
    pub fn best_metrics(&self) -> &EpochMetrics {
        &self.history[self.best_epoch]
    }
}

/// Trains `model` on `train`, selecting the epoch with the best dev
/// triplet F1. Dev scoring uses the `f32`-rounded parameters that a
/// checkpoint would hold, so reloaded checkpoints reproduce it exactly.
pub fn fit(
    mut model: Model,
    train: &DatasetSplit,
    dev: &DatasetSplit,
    config: &OptimizerConfig,
    inference: &InferenceConfig,
) -> Result<FitOutcome> {
    config.validate()?;
    inference.validate()?;
    let mut instances = prepare(&model, &train.sentences)?;

    let snapshot = |m: &Model| {
        let mut s = m.clone();
        s.params.round_to_f32();
        s
    };
    let initial = snapshot(&model);
    let (dev0, _) = evaluate(&initial, &dev.sentences, inference)?;
    let mut history = vec![EpochMetrics::new(0, dataset_loss(&model, &instances)?, dev0)];
    let mut best = initial;
    let mut best_epoch = 0;

    let steps_per_epoch = instances.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps = (config.warmup_fraction * total_steps as f64).ceil() as usize;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let mut optimizer = AdamW::new(&model.params, config.head_lr, config.encoder_lr, config.weight_decay);
    let mut grads = model.params.zeros_like();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        instances.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossBreakdown::default();
        for batch in instances.chunks(config.batch_size) {
            step += 1;
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            let mut batch_loss = LossBreakdown::default();
            for inst in batch {
                let l = instance_loss(
                    &model,
                    &model.params,
                    inst,
                    Mode::Train(&mut dropout_rng),
                    Some(&mut grads),
                )?;
                batch_loss.add(&l);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            epoch_loss.add(&batch_loss);
            let scale = optim::warmup_scale(step, warmup_steps);
            optimizer.step(&mut model.params, &mut grads, scale);
        }

        let current = snapshot(&model);
        let (dev_scores, _) = evaluate(&current, &dev.sentences, inference)?;
        info!(
            "epoch {epoch}: loss {:.4} (N {:.4}, R {:.4}, S {:.4}), dev T-F1 {:.4}",
            epoch_loss.total, epoch_loss.l_n, epoch_loss.l_r, epoch_loss.l_s, dev_scores.triplet.f1
        );
        history.push(EpochMetrics::new(epoch, epoch_loss, dev_scores));
        if dev_scores.triplet.f1 > history[best_epoch].dev.triplet.f1 {
            best = current;
            best_epoch = epoch;
        }
        if config.stop_at_dev_f1.is_some_and(|target| dev_scores.triplet.f1 >= target) {
            break;
        }
    }

    Ok(FitOutcome {
        best,
        best_epoch,
        history,
    })
}
