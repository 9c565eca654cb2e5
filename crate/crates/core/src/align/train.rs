use std::collections::HashMap;
use std::time::Instant;

use dslab_tensor::{clip_grad_norm, sgd_step, ParamGroup, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{MultimodalModel, StagePolicy};
use crate::bench::{score_answers, Response, ScoreReport};
use crate::bench::{QaItem, Task};
use crate::encoder::{scheduled_lr, EpochStat, LossCurve};
use crate::error::{CoreError, Result};
use crate::pairs::{InstructionSample, Role};
use crate::pairs::{argmax, TrainingPair};
use crate::rng::rng_for;
use crate::scene::{DepthImage, SceneRecord};
use crate::vocab::{ASSISTANT, EOS, USER};

/// One training sequence: cached image features and token ids, with
/// `supervised[j]` marking `ids[j]` as a prediction target.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: Tensor,
    pub ids: Vec<usize>,
    pub supervised: Vec<bool>,
}

pub type StageData = Vec<Example>;

/// `USER: {question} ASSISTANT:`
pub fn chat_prompt(question: &str) -> String {
    format!("{USER} {question} {ASSISTANT}")
}

fn check_fits(model: &MultimodalModel, ex: &Example) -> Result<()> {
    let len = model.image_token_count() + ex.ids.len();
    if len > model.cfg.context {
        return Err(CoreError::Contract(format!(
            "sequence of {len} tokens exceeds the context of {}",
            model.cfg.context
        )));
    }
    Ok(())
}

/// Caption-only sequences: the whole caption plus `<eos>` is the target.
pub fn alignment_data(model: &MultimodalModel, pairs: &[TrainingPair]) -> Result<StageData> {
    let eos = model.vocab().special(EOS);
    pairs
        .iter()
        .map(|p| {
            let mut ids = model.vocab().encode(&p.caption);
            ids.push(eos);
            let ex = Example {
                features: model.vision_features(&p.depth, &p.mask_f64())?,
                supervised: vec![true; ids.len()],
                ids,
            };
            check_fits(model, &ex)?;
            Ok(ex)
        })
        .collect()
}

/// Dialogue sequences over whole-scene images. User turns, wrapped in role
/// markers, are context; assistant turns plus `<eos>` are targets.
pub fn sft_data(model: &MultimodalModel, scenes: &[SceneRecord], samples: &[InstructionSample]) -> Result<StageData> {
    let by_id: HashMap<&str, &SceneRecord> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let eos = model.vocab().special(EOS);
    let mut cache: HashMap<&str, Tensor> = HashMap::new();
    let mut out = Vec::with_capacity(samples.len());
    for sample in samples {
        let rec = by_id
            .get(sample.scene_id.as_str())
            .ok_or_else(|| CoreError::Contract(format!("instruction refers to unknown scene {}", sample.scene_id)))?;
        let features = match cache.get(rec.scene_id.as_str()) {
            Some(f) => f.clone(),
            None => {
                let ones = vec![1.0; rec.image.width * rec.image.height];
                let f = model.vision_features(&rec.image, &ones)?;
                cache.insert(rec.scene_id.as_str(), f.clone());
                f
            }
        };
        let mut ids = Vec::new();
        let mut supervised = Vec::new();
        for turn in &sample.turns {
            let (mut t, sup) = match turn.role {
                Role::User => (model.vocab().encode(&chat_prompt(&turn.text)), false),
                Role::Assistant => (model.vocab().encode(&turn.text), true),
            };
            if sup {
                t.push(eos);
            }
            supervised.extend(std::iter::repeat_n(sup, t.len()));
            ids.extend(t);
        }
        let ex = Example { features, ids, supervised };
        check_fits(model, &ex)?;
        out.push(ex);
    }
    Ok(out)
}

fn stage_groups(model: &MultimodalModel, policy: &StagePolicy) -> Vec<ParamGroup> {
    let mut groups: Vec<ParamGroup> = model
        .encoder_groups()
        .into_iter()
        .map(|g| g.frozen(policy.encoder_frozen))
        .collect();
    groups.push(model.projection_group().frozen(policy.projection_frozen));
    groups.extend(model.lm_groups().into_iter().map(|g| g.frozen(policy.lm_frozen)));
    groups
}

/// Minibatch SGD over `data` under `policy`; frozen groups are left
/// untouched. Returns the per-epoch mean loss.
pub fn train_stage(
    model: &MultimodalModel,
    policy: &StagePolicy,
    data: &[Example],
    epochs: usize,
    seed: u64,
) -> Result<LossCurve> {
    policy.validate()?;
    if data.is_empty() {
        return Err(CoreError::Contract(format!("no {:?} examples", policy.stage)));
    }
    let groups = stage_groups(model, policy);
    let saved: Vec<Vec<bool>> = groups
        .iter()
        .map(|g| g.tensors.iter().map(Tensor::requires_grad).collect())
        .collect();
    // frozen tensors need no gradient, so the graph skips them
    for g in groups.iter().filter(|g| g.frozen) {
        g.tensors.iter().for_each(|t| t.set_requires_grad(false));
    }
    let result = run_epochs(model, &groups, data, epochs, seed, policy);
    for (g, flags) in groups.iter().zip(saved) {
        g.tensors.iter().zip(flags).for_each(|(t, on)| t.set_requires_grad(on));
    }
    result
}

fn run_epochs(
    model: &MultimodalModel,
    groups: &[ParamGroup],
    data: &[Example],
    epochs: usize,
    seed: u64,
    policy: &StagePolicy,
) -> Result<LossCurve> {
    let cfg = &model.cfg;
    let stage_key = policy.stage as u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total_steps = epochs * data.len().div_ceil(cfg.batch_size);
    let mut curve = LossCurve::default();
    let mut step = 0;
    let start = Instant::now();
    for epoch in 0..epochs {
        order.shuffle(&mut rng_for(seed, &[0x5f7, stage_key, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<(&Tensor, &[usize], &[bool])> = batch
                .iter()
                .map(|&i| (&data[i].features, &data[i].ids[..], &data[i].supervised[..]))
                .collect();
            let loss = model.batch_loss(&seqs)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(CoreError::Training {
                    step,
                    msg: format!("loss became {value}"),
                });
            }
            loss.backward()?;
            clip_grad_norm(groups, cfg.grad_clip);
            sgd_step(groups, scheduled_lr(cfg.lr, cfg.lr_decay, cfg.warmup_steps, step, total_steps));
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

/// Greedy decoding after `[image, prompt]`. Emits at most `max_tokens`
/// ids, the last of which may be `<eos>`; also stops when the context is
/// full. Ties go to the lowest token id.
pub fn generate_ids(model: &MultimodalModel, features: &Tensor, prompt: &str, max_tokens: usize) -> Result<Vec<usize>> {
    let eos = model.vocab().special(EOS);
    let mut ids = model.vocab().encode(prompt);
    let k = model.image_token_count();
    let mut out = Vec::new();
    let img = model.projection.forward(features)?.detach();
    while out.len() < max_tokens && k + ids.len() < model.cfg.context {
        let x = if ids.is_empty() {
            img.clone()
        } else {
            Tensor::concat_rows(&[img.clone(), model.lm.embed(&ids)?])?
        };
        let len = k + ids.len();
        let h = model.lm.hidden(&x, &[len])?.slice_rows(len - 1, 1)?;
        let next = argmax(&model.lm.logits(&h)?.to_vec());
        out.push(next);
        if next == eos {
            break;
        }
        ids.push(next);
    }
    Ok(out)
}

/// Greedy response text for one image and prompt.
pub fn generate(model: &MultimodalModel, depth: &DepthImage, mask: &[f64], prompt: &str, max_tokens: usize) -> Result<String> {
    let features = model.vision_features(depth, mask)?;
    Ok(model.vocab().decode(&generate_ids(model, &features, prompt, max_tokens)?))
}

/// Answers every item by greedy decoding on its scene's whole image.
pub fn answer_items(
    model: &MultimodalModel,
    items: &[QaItem],
    scenes: &[SceneRecord],
    max_tokens: usize,
) -> Result<Vec<Response>> {
    let by_id: HashMap<&str, &SceneRecord> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let _no_grad = NoGrad::new(model);
    items
        .iter()
        .map(|item| {
            let rec = by_id.get(item.provenance.scene_id.as_str()).ok_or_else(|| {
                CoreError::Contract(format!("{} refers to unknown scene {}", item.item_id, item.provenance.scene_id))
            })?;
            let ones = vec![1.0; rec.image.width * rec.image.height];
            let features = model.vision_features(&rec.image, &ones)?;
            Ok(Response {
                item_id: item.item_id.clone(),
                text: model.vocab().decode(&generate_ids(model, &features, &chat_prompt(&item.prompt), max_tokens)?),
            })
        })
        .collect()
}

/// Disables gradient tracking on every parameter while alive.
struct NoGrad(Vec<(Tensor, bool)>);

impl NoGrad {
    fn new(model: &MultimodalModel) -> Self {
        let saved = model
            .groups()
            .into_iter()
            .flat_map(|g| g.tensors)
            .map(|t| {
                let on = t.requires_grad();
                t.set_requires_grad(false);
                (t, on)
            })
            .collect();
        Self(saved)
    }
}

impl Drop for NoGrad {
    fn drop(&mut self) {
        for (t, on) in &self.0 {
            t.set_requires_grad(*on);
        }
    }
}

/// Which components an SFT run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    MlpOnly,
    LlmOnly,
    Both,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::MlpOnly, Ablation::LlmOnly, Ablation::Both];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::MlpOnly => "mlp_only",
            Ablation::LlmOnly => "llm_only",
            Ablation::Both => "both",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown ablation {s:?}; expected mlp_only, llm_only or both")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub final_loss: f64,
    pub probe_accuracy: f64,
}

/// Longest greedy answer considered when probing the benchmark.
pub const ANSWER_TOKENS: usize = 24;

/// Runs SFT from copies of `base` once per ablation and scores each on the
/// DistanceJudge items of `probe`.
pub fn ablate_sft(
    base: &MultimodalModel,
    data: &[Example],
    probe: &[QaItem],
    scenes: &[SceneRecord],
    which: &[Ablation],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let dj: Vec<QaItem> = probe.iter().filter(|i| i.task == Task::DistanceJudge).cloned().collect();
    which
        .iter()
        .copied()
        .map(|which| {
            let model = base.deep_clone()?;
            let curve = train_stage(&model, &StagePolicy::sft_ablation(which), data, model.cfg.sft_epochs, seed)?;
            let report: ScoreReport = score_answers(&dj, &answer_items(&model, &dj, scenes, ANSWER_TOKENS)?);
            Ok(AblationRow {
                ablation: which,
                final_loss: curve.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
                probe_accuracy: report.get(Task::DistanceJudge).accuracy,
            })
        })
        .collect()
}
