//! Dual-branch depth encoder: a depth patch projection and a mask patch
//! projection whose token matrices are summed, followed by a small
//! transformer, plus a text tower and a symmetric contrastive loss.

mod train;

pub use train::{
    ratio_grid, ratio_search, scheduled_lr, train_encoder, zero_shot_accuracy, zero_shot_classify, EpochStat, LossCurve,
    RatioPoint,
};

use dslab_tensor::param::{uniform_param, zeros_param};
use dslab_tensor::{ModelCheckpoint, ParamGroup, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{segments, stack_tensors, Block, LayerNorm, Linear};
use crate::pairs::Embedder;
use crate::rng::rng_for;
use crate::scene::DepthImage;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub max_text_len: usize,
    pub tau_init: f64,
    pub lr: f64,
    /// Global gradient-norm cap applied before each SGD step.
    pub grad_clip: f64,
    /// Linearly anneal the learning rate to zero over the run.
    pub lr_decay: bool,
    /// Steps of linear warmup from zero at the start of the run.
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub ratio: f64,
    pub freeze_text: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            dim: 64,
            vision_layers: 2,
            text_layers: 2,
            heads: 2,
            max_text_len: 16,
            tau_init: 0.07,
            lr: 0.15,
            grad_clip: 1.0,
            lr_decay: true,
            warmup_steps: 30,
            epochs: 30,
            batch_size: 32,
            ratio: 0.1,
            freeze_text: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("dim", self.dim),
            ("vision_layers", self.vision_layers),
            ("text_layers", self.text_layers),
            ("heads", self.heads),
            ("max_text_len", self.max_text_len),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::Config(format!("encoder {name} must be >= 1")));
        }
        if self.image_size % self.patch != 0 {
            return Err(CoreError::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(CoreError::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if !(self.tau_init > 0.0) || !(self.lr >= 0.0) || !(self.grad_clip > 0.0) || !(0.0..=1.0).contains(&self.ratio) {
            return Err(CoreError::Config("tau_init and grad_clip must be > 0, lr >= 0 and ratio in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }
}

#[derive(Clone, Debug)]
struct PatchConv {
    w: Tensor,
    b: Tensor,
}

impl PatchConv {
    fn tensors(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// Token matrices of one image: depth branch, mask branch and their sum.
pub struct FusedTokens {
    pub h_d: Tensor,
    pub h_m: Tensor,
    pub h_v: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    vocab: Vocab,
    depth_conv: PatchConv,
    bbox_conv: PatchConv,
    cls: Tensor,
    vis_pos: Tensor,
    vis_blocks: Vec<Block>,
    vis_ln: LayerNorm,
    vis_proj: Linear,
    tok_emb: Tensor,
    txt_pos: Tensor,
    txt_blocks: Vec<Block>,
    txt_ln: LayerNorm,
    txt_proj: Linear,
    /// `ln(1/τ)`; logits are scaled by its exponential.
    logit_scale: Tensor,
}

pub const TEXT_GROUPS: [&str; 3] = ["text.embed", "text.blocks", "text.proj"];

impl Encoder {
    pub fn new(cfg: &EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &[0xe1c0]);
        let (d, p) = (cfg.dim, cfg.patch);
        let conv = |rng: &mut _| -> Result<PatchConv> {
            Ok(PatchConv {
                w: uniform_param(&[d, 1, p, p], p * p, rng)?,
                b: zeros_param(&[d]),
            })
        };
        let depth_conv = conv(&mut rng)?;
        let bbox_conv = conv(&mut rng)?;
        let t = cfg.n_patches() + 1;
        let cls = uniform_param(&[1, d], d, &mut rng)?;
        let vis_pos = uniform_param(&[t, d], d, &mut rng)?;
        let vis_blocks = (0..cfg.vision_layers)
            .map(|_| Block::new(d, cfg.heads, &mut rng))
            .collect::<Result<_>>()?;
        let vis_proj = Linear::new(d, d, &mut rng)?;
        let tok_emb = uniform_param(&[vocab.len(), d], d, &mut rng)?;
        let txt_pos = uniform_param(&[cfg.max_text_len, d], d, &mut rng)?;
        let txt_blocks = (0..cfg.text_layers)
            .map(|_| Block::new(d, cfg.heads, &mut rng))
            .collect::<Result<_>>()?;
        let txt_proj = Linear::new(d, d, &mut rng)?;
        let logit_scale = Tensor::param(vec![(1.0 / cfg.tau_init).ln()], &[1])?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            depth_conv,
            bbox_conv,
            cls,
            vis_pos,
            vis_blocks,
            vis_ln: LayerNorm::new(d),
            vis_proj,
            tok_emb,
            txt_pos,
            txt_blocks,
            txt_ln: LayerNorm::new(d),
            txt_proj,
            logit_scale,
        })
    }

    pub fn from_checkpoint(cfg: &EncoderConfig, vocab: Vocab, ckpt: &ModelCheckpoint) -> Result<Self> {
        let enc = Self::new(cfg, vocab, 0)?;
        ckpt.restore(&enc.groups())?;
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Every parameter group; the text groups are frozen under `freeze_text`.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let ft = self.cfg.freeze_text;
        let mut vis_proj = self.vis_ln.tensors();
        vis_proj.extend(self.vis_proj.tensors());
        let mut txt_proj = self.txt_ln.tensors();
        txt_proj.extend(self.txt_proj.tensors());
        vec![
            ParamGroup::new("vision.depth_conv", self.depth_conv.tensors()),
            ParamGroup::new("vision.bbox_conv", self.bbox_conv.tensors()),
            ParamGroup::new("vision.embed", vec![self.cls.clone(), self.vis_pos.clone()]),
            ParamGroup::new("vision.blocks", stack_tensors(&self.vis_blocks)),
            ParamGroup::new("vision.proj", vis_proj),
            ParamGroup::new("text.embed", vec![self.tok_emb.clone(), self.txt_pos.clone()]).frozen(ft),
            ParamGroup::new("text.blocks", stack_tensors(&self.txt_blocks)).frozen(ft),
            ParamGroup::new("text.proj", txt_proj).frozen(ft),
            ParamGroup::new("logit_scale", vec![self.logit_scale.clone()]),
        ]
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::capture(&self.groups())
    }

    pub fn logit_scale(&self) -> &Tensor {
        &self.logit_scale
    }

    /// Zeroes the mask branch, making the encoder depth-only.
    pub fn zero_bbox_conv(&self) -> Result<()> {
        for t in self.bbox_conv.tensors() {
            t.set_data(&vec![0.0; t.numel()])?;
        }
        Ok(())
    }

    fn image_tensors(&self, depth: &DepthImage, mask: &[f64]) -> Result<(Tensor, Tensor)> {
        let s = self.cfg.image_size;
        if depth.width != s || depth.height != s {
            return Err(CoreError::Contract(format!(
                "encoder expects {s}x{s} depth, got {}x{}",
                depth.width, depth.height
            )));
        }
        if mask.len() != s * s {
            return Err(CoreError::Contract(format!("mask has {} pixels, depth has {}", mask.len(), s * s)));
        }
        Ok((
            Tensor::new(depth.normalized(), &[1, s, s])?,
            Tensor::new(mask.to_vec(), &[1, s, s])?,
        ))
    }

    /// `H_D = f(depth / max_range)`, `H_M = g(mask)`, `H_V = H_D + H_M`.
    pub fn fused_tokens(&self, depth: &DepthImage, mask: &[f64]) -> Result<FusedTokens> {
        let (d, m) = self.image_tensors(depth, mask)?;
        let h_d = d.patch_project(&self.depth_conv.w, &self.depth_conv.b)?;
        let h_m = m.patch_project(&self.bbox_conv.w, &self.bbox_conv.b)?;
        let h_v = h_d.add(&h_m)?;
        Ok(FusedTokens { h_d, h_m, h_v })
    }

    /// Final-layer token states `[B·T, D]` and each image's segment.
    fn vision_hidden(&self, inputs: &[(&DepthImage, &[f64])]) -> Result<(Tensor, Vec<(usize, usize)>)> {
        if inputs.is_empty() {
            return Err(CoreError::Contract("empty vision batch".into()));
        }
        let t = self.cfg.n_patches() + 1;
        let seqs = inputs
            .iter()
            .map(|(d, m)| {
                let h_v = self.fused_tokens(d, m)?.h_v;
                Ok(Tensor::concat_rows(&[self.cls.clone(), h_v])?.add(&self.vis_pos)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let segs = segments(&vec![t; inputs.len()]);
        let mut x = Tensor::concat_rows(&seqs)?;
        for b in &self.vis_blocks {
            x = b.forward(&x, &segs, false)?;
        }
        Ok((x, segs))
    }

    /// Unit-norm vision embeddings `[B, D]`, one row per `(depth, mask)`.
    pub fn encode_vision_batch(&self, inputs: &[(&DepthImage, &[f64])]) -> Result<Tensor> {
        let (x, segs) = self.vision_hidden(inputs)?;
        let cls = segs
            .iter()
            .map(|&(s, _)| x.slice_rows(s, 1))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let pooled = self.vis_ln.forward(&Tensor::concat_rows(&cls)?)?;
        Ok(self.vis_proj.forward(&pooled)?.l2_normalize_rows()?)
    }

    /// Layer-normed final states of the class token and every patch, `[T, D]`.
    pub fn vision_tokens(&self, depth: &DepthImage, mask: &[f64]) -> Result<Tensor> {
        let (x, _) = self.vision_hidden(&[(depth, mask)])?;
        self.vis_ln.forward(&x)
    }

    pub fn encode_vision(&self, depth: &DepthImage, mask: &[f64]) -> Result<Tensor> {
        self.encode_vision_batch(&[(depth, mask)])
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = self.vocab.encode(text);
        if ids.is_empty() {
            return Err(CoreError::Contract("cannot encode empty text".into()));
        }
        ids.truncate(self.cfg.max_text_len);
        Ok(ids)
    }

    /// Unit-norm text embeddings `[B, D]`, mean-pooled over tokens.
    pub fn encode_text_batch(&self, texts: &[&str]) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(CoreError::Contract("empty text batch".into()));
        }
        let ids = texts.iter().map(|t| self.tokenize(t)).collect::<Result<Vec<_>>>()?;
        let seqs = ids
            .iter()
            .map(|ids| Ok(self.tok_emb.embedding(ids)?.add(&self.txt_pos.slice_rows(0, ids.len())?)?))
            .collect::<Result<Vec<_>>>()?;
        let segs = segments(&ids.iter().map(Vec::len).collect::<Vec<_>>());
        let mut x = Tensor::concat_rows(&seqs)?;
        for b in &self.txt_blocks {
            x = b.forward(&x, &segs, false)?;
        }
        let x = self.txt_ln.forward(&x)?;
        let pooled = segs
            .iter()
            .map(|&(s, n)| x.slice_rows(s, n)?.mean_rows())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.txt_proj.forward(&Tensor::concat_rows(&pooled)?)?.l2_normalize_rows()?)
    }

    pub fn encode_text(&self, text: &str) -> Result<Tensor> {
        self.encode_text_batch(&[text])
    }
}

impl Embedder for Encoder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.encode_text(text)?.to_vec())
    }

    fn embed_depth(&self, img: &DepthImage) -> Result<Vec<f64>> {
        Ok(self.encode_vision(img, &vec![1.0; img.width * img.height])?.to_vec())
    }
}

/// Symmetric InfoNCE: `½[CE(s·VTᵀ, diag) + CE(s·TVᵀ, diag)]` with
/// `s = exp(logit_scale)`.
pub fn contrastive_loss(vision: &Tensor, text: &Tensor, logit_scale: &Tensor) -> Result<Tensor> {
    let (n, d) = vision.dims2("contrastive_loss")?;
    if n == 0 {
        return Err(CoreError::Contract("contrastive loss over an empty batch".into()));
    }
    if text.shape() != [n, d] {
        return Err(CoreError::Contract(format!(
            "vision batch {:?} and text batch {:?} differ",
            vision.shape(),
            text.shape()
        )));
    }
    let logits = vision.matmul(&text.transpose()?)?.mul_scalar(&logit_scale.exp())?;
    let diag: Vec<usize> = (0..n).collect();
    let i2t = logits.softmax_cross_entropy(&diag)?;
    let t2i = logits.transpose()?.softmax_cross_entropy(&diag)?;
    Ok(i2t.add(&t2i)?.scale(0.5))
}
