//! Vision-to-language alignment at toy scale: an MLP projects the frozen
//! encoder's output into the token space of a small causal LM, trained
//! first alone (alignment) and then together with the LM (SFT).

mod train;

pub use train::{
    ablate_sft, alignment_data, answer_items, chat_prompt, generate, generate_ids, sft_data, train_stage, Ablation, AblationRow,
    Example, StageData, ANSWER_TOKENS,
};

use dslab_tensor::param::uniform_param;
use dslab_tensor::{ModelCheckpoint, ParamGroup, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::nn::{segments, stack_tensors, Block, LayerNorm, Linear};
use crate::rng::rng_for;
use crate::scene::DepthImage;
use crate::vocab::Vocab;

/// How the image enters the LM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageTokens {
    /// One token from the pooled, normalised vision embedding.
    Pooled,
    /// One token per final-layer vision state (class token and patches).
    Patches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub image_tokens: ImageTokens,
    pub lr: f64,
    pub grad_clip: f64,
    pub lr_decay: bool,
    pub warmup_steps: usize,
    pub align_epochs: usize,
    pub sft_epochs: usize,
    pub batch_size: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 2,
            context: 96,
            image_tokens: ImageTokens::Pooled,
            lr: 0.1,
            grad_clip: 1.0,
            lr_decay: true,
            warmup_steps: 30,
            align_epochs: 3,
            sft_epochs: 10,
            batch_size: 16,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.context < 2 || self.batch_size == 0 {
            return Err(CoreError::Config("LM dims, heads and batch size must be >= 1, context >= 2".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(CoreError::Config(format!("LM dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if !(self.lr >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(CoreError::Config("LM lr must be >= 0 and grad_clip > 0".into()));
        }
        Ok(())
    }
}

/// `D → E → GELU → E`.
#[derive(Clone, Debug)]
pub struct Projection {
    l1: Linear,
    l2: Linear,
}

impl Projection {
    pub fn new(d: usize, e: usize, rng: &mut crate::rng::Rng) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(d, e, rng)?,
            l2: Linear::new(e, e, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.gelu())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut t = self.l1.tensors();
        t.extend(self.l2.tensors());
        t
    }
}

/// Decoder-only LM whose output head is the transposed token embedding.
#[derive(Clone, Debug)]
pub struct ToyLm {
    tok_emb: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    context: usize,
}

impl ToyLm {
    pub fn new(vocab_size: usize, cfg: &AlignConfig, rng: &mut crate::rng::Rng) -> Result<Self> {
        let e = cfg.dim;
        Ok(Self {
            tok_emb: uniform_param(&[vocab_size, e], e, rng)?,
            pos: uniform_param(&[cfg.context, e], e, rng)?,
            blocks: (0..cfg.layers)
                .map(|_| Block::new(e, cfg.heads, rng))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(e),
            context: cfg.context,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.shape()[0]
    }

    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        Ok(self.tok_emb.embedding(ids)?)
    }

    pub fn embedding_table(&self) -> &Tensor {
        &self.tok_emb
    }

    /// Final hidden states of stacked sequences `[Σ len, E]`.
    pub fn hidden(&self, x: &Tensor, lens: &[usize]) -> Result<Tensor> {
        if let Some(&too_long) = lens.iter().find(|&&l| l > self.context) {
            return Err(CoreError::Contract(format!(
                "sequence of {too_long} tokens exceeds the context of {}",
                self.context
            )));
        }
        let pos = lens
            .iter()
            .map(|&l| self.pos.slice_rows(0, l))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut h = x.add(&Tensor::concat_rows(&pos)?)?;
        let segs = segments(lens);
        for b in &self.blocks {
            h = b.forward(&h, &segs, true)?;
        }
        self.ln.forward(&h)
    }

    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        Ok(hidden.matmul(&self.tok_emb.transpose()?)?)
    }

    fn group_tensors(&self) -> [Vec<Tensor>; 3] {
        [
            vec![self.tok_emb.clone(), self.pos.clone()],
            stack_tensors(&self.blocks),
            self.ln.tensors(),
        ]
    }
}

pub const LM_GROUPS: [&str; 3] = ["lm.embed", "lm.blocks", "lm.final"];
pub const PROJECTION_GROUP: &str = "projection";

/// Frozen encoder, projection and LM sharing one vocabulary.
pub struct MultimodalModel {
    pub encoder: Encoder,
    pub projection: Projection,
    pub lm: ToyLm,
    pub cfg: AlignConfig,
}

impl MultimodalModel {
    pub fn new(encoder: Encoder, cfg: &AlignConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &[0xa11e]);
        let d = encoder.config().dim;
        let projection = Projection::new(d, cfg.dim, &mut rng)?;
        let lm = ToyLm::new(encoder.vocab().len(), cfg, &mut rng)?;
        Ok(Self {
            encoder,
            projection,
            lm,
            cfg: cfg.clone(),
        })
    }

    /// Rebuilds a model from a checkpoint holding encoder, projection and LM groups.
    pub fn from_checkpoint(
        enc_cfg: &EncoderConfig,
        cfg: &AlignConfig,
        vocab: Vocab,
        ckpt: &ModelCheckpoint,
    ) -> Result<Self> {
        let model = Self::new(Encoder::new(enc_cfg, vocab, 0)?, cfg, 0)?;
        ckpt.restore(&model.groups())?;
        Ok(model)
    }

    /// A parameter-independent copy.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_checkpoint(self.encoder.config(), &self.cfg, self.vocab().clone(), &self.checkpoint())
    }

    pub fn vocab(&self) -> &Vocab {
        self.encoder.vocab()
    }

    pub fn encoder_groups(&self) -> Vec<ParamGroup> {
        self.encoder.groups()
    }

    pub fn projection_group(&self) -> ParamGroup {
        ParamGroup::new(PROJECTION_GROUP, self.projection.tensors())
    }

    pub fn lm_groups(&self) -> Vec<ParamGroup> {
        LM_GROUPS
            .iter()
            .zip(self.lm.group_tensors())
            .map(|(name, t)| ParamGroup::new(*name, t))
            .collect()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = self.encoder_groups();
        g.push(self.projection_group());
        g.extend(self.lm_groups());
        g
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::capture(&self.groups())
    }

    /// Encoder output for one image, as a constant: the encoder is never
    /// trained here.
    pub fn vision_features(&self, depth: &DepthImage, mask: &[f64]) -> Result<Tensor> {
        let t = match self.cfg.image_tokens {
            ImageTokens::Pooled => self.encoder.encode_vision(depth, mask)?,
            ImageTokens::Patches => self.encoder.vision_tokens(depth, mask)?,
        };
        Ok(t.detach())
    }

    pub fn image_token_count(&self) -> usize {
        match self.cfg.image_tokens {
            ImageTokens::Pooled => 1,
            ImageTokens::Patches => self.encoder.config().n_patches() + 1,
        }
    }

    /// Input embeddings of one sequence: projected image rows, then `ids`.
    fn sequence(&self, features: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let img = self.projection.forward(features)?;
        if ids.is_empty() {
            return Ok(img);
        }
        Ok(Tensor::concat_rows(&[img, self.lm.embed(ids)?])?)
    }

    /// Mean next-token cross-entropy over the supervised positions of a
    /// batch. `seqs[i]` is `(features, ids, supervised)` where
    /// `supervised[j]` marks `ids[j]` as a target.
    pub fn batch_loss(&self, seqs: &[(&Tensor, &[usize], &[bool])]) -> Result<Tensor> {
        let k = self.image_token_count();
        let mut inputs = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut offset = 0;
        for (features, ids, sup) in seqs {
            if ids.len() != sup.len() {
                return Err(CoreError::Contract("ids and supervision flags differ in length".into()));
            }
            inputs.push(self.sequence(features, ids)?);
            let len = k + ids.len();
            for (j, (&id, &s)) in ids.iter().zip(sup.iter()).enumerate() {
                if s {
                    // token j sits at position k + j and is predicted from the one before it
                    rows.push(offset + k + j - 1);
                    targets.push(id);
                }
            }
            lens.push(len);
            offset += len;
        }
        if targets.is_empty() {
            return Err(CoreError::Contract("no supervised target positions".into()));
        }
        let hidden = self.lm.hidden(&Tensor::concat_rows(&inputs)?, &lens)?;
        let picked = gather_rows(&hidden, &rows)?;
        Ok(self.lm.logits(&picked)?.softmax_cross_entropy(&targets)?)
    }

    /// Loss of `target` given the image and `prompt`; the sequence is
    /// `[image, prompt, target]` and only target positions are scored.
    pub fn forward_multimodal(&self, depth: &DepthImage, mask: &[f64], prompt: &[usize], target: &[usize]) -> Result<Tensor> {
        if target.is_empty() {
            return Err(CoreError::Contract("empty target".into()));
        }
        let features = self.vision_features(depth, mask)?;
        let ids: Vec<usize> = prompt.iter().chain(target).copied().collect();
        let sup: Vec<bool> = prompt.iter().map(|_| false).chain(target.iter().map(|_| true)).collect();
        self.batch_loss(&[(&features, &ids, &sup)])
    }
}

/// Rows `rows` of `x`, grouping contiguous runs into single slices.
fn gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let mut j = i + 1;
        while j < rows.len() && rows[j] == rows[j - 1] + 1 {
            j += 1;
        }
        parts.push(x.slice_rows(rows[i], j - i)?);
        i = j;
    }
    Ok(Tensor::concat_rows(&parts)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Alignment,
    Sft,
}

/// Which components a stage may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePolicy {
    pub stage: Stage,
    pub encoder_frozen: bool,
    pub projection_frozen: bool,
    pub lm_frozen: bool,
}

impl StagePolicy {
    pub fn alignment() -> Self {
        Self {
            stage: Stage::Alignment,
            encoder_frozen: true,
            projection_frozen: false,
            lm_frozen: true,
        }
    }

    pub fn sft() -> Self {
        Self {
            stage: Stage::Sft,
            encoder_frozen: true,
            projection_frozen: false,
            lm_frozen: false,
        }
    }

    pub fn sft_ablation(which: Ablation) -> Self {
        Self {
            projection_frozen: which == Ablation::LlmOnly,
            lm_frozen: which == Ablation::MlpOnly,
            ..Self::sft()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.encoder_frozen {
            return Err(CoreError::Config(format!("{:?} must keep the encoder frozen", self.stage)));
        }
        match self.stage {
            Stage::Alignment if self.lm_frozen && !self.projection_frozen => Ok(()),
            Stage::Alignment => Err(CoreError::Config(
                "alignment trains the projection only".into(),
            )),
            Stage::Sft if !(self.projection_frozen && self.lm_frozen) => Ok(()),
            Stage::Sft => Err(CoreError::Config("SFT with everything frozen trains nothing".into())),
        }
    }
}
