use std::time::Instant;

use dslab_tensor::{clip_grad_norm, sgd_step};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{contrastive_loss, Encoder, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::grammar::{fill, ZERO_SHOT_PROMPT};
use crate::pairs::{apply_sampling, argmax, TrainingPair};
use crate::rng::rng_for;
use crate::scene::{DepthImage, SceneRecord};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochStat>,
}

impl LossCurve {
    pub fn means(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// `epoch,mean_loss,wall_secs` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,wall_secs\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.12},{:.3}\n", e.epoch, e.mean_loss, e.wall_secs));
        }
        s
    }
}

/// Minibatch SGD over `pairs`, reshuffled every epoch from `seed`.
/// Parameters are updated in place.
pub fn train_encoder(enc: &Encoder, pairs: &[TrainingPair], seed: u64) -> Result<LossCurve> {
    if pairs.is_empty() {
        return Err(CoreError::Contract("no training pairs".into()));
    }
    let cfg = enc.config();
    let groups = enc.groups();
    let masks: Vec<Vec<f64>> = pairs.iter().map(TrainingPair::mask_f64).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = LossCurve::default();
    let mut step = 0;
    let total_steps = cfg.epochs * pairs.len().div_ceil(cfg.batch_size);
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(seed, &[0x7a1, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let vis: Vec<(&DepthImage, &[f64])> = batch.iter().map(|&i| (&pairs[i].depth, &masks[i][..])).collect();
            let txt: Vec<&str> = batch.iter().map(|&i| pairs[i].caption.as_str()).collect();
            let v = enc.encode_vision_batch(&vis)?;
            let t = enc.encode_text_batch(&txt)?;
            let loss = contrastive_loss(&v, &t, enc.logit_scale())?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(CoreError::Training {
                    step,
                    msg: format!("loss became {value}"),
                });
            }
            loss.backward()?;
            clip_grad_norm(&groups, cfg.grad_clip);
            sgd_step(&groups, scheduled_lr(cfg.lr, cfg.lr_decay, cfg.warmup_steps, step, total_steps));
            total += value;
            batches += 1;
            step += 1;
        }
        curve.epochs.push(EpochStat {
            epoch,
            mean_loss: total / batches as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok(curve)
}

/// Learning rate at `step` of `total`: linear warmup over `warmup` steps,
/// then constant or linearly decaying to zero.
pub fn scheduled_lr(lr: f64, decay: bool, warmup: usize, step: usize, total: usize) -> f64 {
    let warm = if step < warmup { (step + 1) as f64 / warmup as f64 } else { 1.0 };
    let tail = if decay && total > 0 { 1.0 - step as f64 / total as f64 } else { 1.0 };
    lr * warm * tail
}

/// Cosine of the image (with an all-ones mask) against each label prompt;
/// returns the argmax index, ties to the lowest.
pub fn zero_shot_classify(enc: &Encoder, depth: &DepthImage, labels: &[String], template: &str) -> Result<(usize, Vec<f64>)> {
    if labels.is_empty() {
        return Err(CoreError::Contract("zero-shot classification needs labels".into()));
    }
    let prompts: Vec<String> = labels.iter().map(|l| fill(template, &[("label", l)])).collect();
    let prompts: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let text = enc.encode_text_batch(&prompts)?.to_vec();
    let img = enc.encode_vision(depth, &vec![1.0; depth.width * depth.height])?.to_vec();
    let scores = scores_against(&text, &img);
    Ok((argmax(&scores), scores))
}

fn scores_against(text: &[f64], img: &[f64]) -> Vec<f64> {
    text.chunks(img.len())
        .map(|row| row.iter().zip(img).map(|(a, b)| a * b).sum())
        .collect()
}

/// Top-1 scene-label accuracy with the default prompt template.
pub fn zero_shot_accuracy(enc: &Encoder, scenes: &[SceneRecord], labels: &[String]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(CoreError::Contract("no evaluation scenes".into()));
    }
    let prompts: Vec<String> = labels.iter().map(|l| fill(ZERO_SHOT_PROMPT, &[("label", l)])).collect();
    let prompts: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let text = enc.encode_text_batch(&prompts)?.to_vec();
    let ones = vec![1.0; enc.config().image_size.pow(2)];
    let mut correct = 0;
    for chunk in scenes.chunks(64) {
        let inputs: Vec<(&DepthImage, &[f64])> = chunk.iter().map(|s| (&s.image, &ones[..])).collect();
        let img = enc.encode_vision_batch(&inputs)?.to_vec();
        let d = enc.config().dim;
        for (s, row) in chunk.iter().zip(img.chunks(d)) {
            if labels[argmax(&scores_against(&text, row))] == s.scene_label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / scenes.len() as f64)
}

/// `0, 0.05, …, 0.30`.
pub fn ratio_grid() -> Vec<f64> {
    (0..=6).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub ratio: f64,
    pub accuracy: f64,
    pub final_loss: f64,
}

/// Trains one encoder per ratio from the same initialisation and seed and
/// measures zero-shot accuracy on `eval`.
pub fn ratio_search(
    cfg: &EncoderConfig,
    vocab: &Vocab,
    pairs: &[TrainingPair],
    eval: &[SceneRecord],
    labels: &[String],
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<RatioPoint>> {
    ratios
        .iter()
        .map(|&r| {
            let sampled = apply_sampling(pairs, r, seed)?;
            let enc = Encoder::new(cfg, vocab.clone(), seed)?;
            let curve = train_encoder(&enc, &sampled, seed)?;
            Ok(RatioPoint {
                ratio: r,
                accuracy: zero_shot_accuracy(&enc, eval, labels)?,
                final_loss: curve.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
            })
        })
        .collect()
}
