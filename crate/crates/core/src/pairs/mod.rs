//! Depth-text-bbox training pairs: caption scoring, pair construction,
//! mask-replacement sampling, and template instruction synthesis.

mod instruct;

pub use instruct::{synth_instructions, InstructionKind, InstructionSample, Role, Turn};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::rng_for;
use crate::scene::{DepthImage, SceneRecord};

/// Maps text and depth images into a shared embedding space.
pub trait Embedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_depth(&self, img: &DepthImage) -> Result<Vec<f64>>;
}

/// An [`Embedder`] built from two closures.
pub struct FnEmbedder<T, D> {
    pub text: T,
    pub depth: D,
}

impl<T, D> Embedder for FnEmbedder<T, D>
where
    T: Fn(&str) -> Vec<f64>,
    D: Fn(&DepthImage) -> Vec<f64>,
{
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok((self.text)(text))
    }

    fn embed_depth(&self, img: &DepthImage) -> Result<Vec<f64>> {
        Ok((self.depth)(img))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::Contract(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// First index of the maximum; NaN never wins.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] || xs[best].is_nan() {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionScores {
    pub best: usize,
    pub scores: Vec<f64>,
}

/// Cosine similarity of every caption against the depth image.
pub fn score_captions(rec: &SceneRecord, embedder: &dyn Embedder) -> Result<CaptionScores> {
    if rec.captions.is_empty() {
        return Err(CoreError::Contract(format!("{} has no captions", rec.scene_id)));
    }
    let img = embedder.embed_depth(&rec.image)?;
    let scores = rec
        .captions
        .iter()
        .map(|c| cosine(&embedder.embed_text(c)?, &img))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaptionScores { best: argmax(&scores), scores })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub scene_id: String,
    /// `None` for the global pair of an object-free scene.
    pub object_index: Option<usize>,
    pub depth: DepthImage,
    /// Row-major 0/1 raster, same size as `depth`.
    pub mask: Vec<u8>,
    pub caption: String,
    pub replaced: bool,
}

impl TrainingPair {
    pub fn validate(&self) -> Result<()> {
        if self.mask.len() != self.depth.width * self.depth.height {
            return Err(CoreError::Contract(format!("{}: mask size mismatch", self.scene_id)));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(CoreError::Contract(format!("{}: mask is not binary", self.scene_id)));
        }
        if self.replaced && self.mask.iter().any(|&m| m != 1) {
            return Err(CoreError::Contract(format!("{}: replaced mask is not all ones", self.scene_id)));
        }
        Ok(())
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| f64::from(m)).collect()
    }

    pub fn record(&self) -> PairRecord {
        PairRecord {
            scene_id: self.scene_id.clone(),
            object_index: self.object_index,
            caption: self.caption.clone(),
            replaced: self.replaced,
        }
    }
}

/// On-disk form of a pair; pixels come from the referenced scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub scene_id: String,
    pub object_index: Option<usize>,
    pub caption: String,
    pub replaced: bool,
}

impl PairRecord {
    pub fn resolve(&self, rec: &SceneRecord) -> Result<TrainingPair> {
        if rec.scene_id != self.scene_id {
            return Err(CoreError::Contract(format!("pair for {} resolved against {}", self.scene_id, rec.scene_id)));
        }
        let n = rec.image.width * rec.image.height;
        let mask = match (self.replaced, self.object_index) {
            (true, _) | (false, None) => vec![1; n],
            (false, Some(i)) => {
                if i >= rec.objects.len() {
                    return Err(CoreError::Contract(format!("{} has no object {i}", rec.scene_id)));
                }
                object_mask(rec, i)
            }
        };
        Ok(TrainingPair {
            scene_id: self.scene_id.clone(),
            object_index: self.object_index,
            depth: rec.image.clone(),
            mask,
            caption: self.caption.clone(),
            replaced: self.replaced,
        })
    }
}

fn object_mask(rec: &SceneRecord, object: usize) -> Vec<u8> {
    let mut m = vec![0; rec.image.width * rec.image.height];
    for &p in &rec.objects[object].mask {
        m[p as usize] = 1;
    }
    m
}

/// How the caption of each scene's pairs is chosen.
pub enum CaptionSource<'a> {
    /// The scene-level grammar caption, for bootstrapping before any
    /// scorer has been trained.
    SceneCaption,
    Scored(&'a dyn Embedder),
}

/// One pair per object sharing the scene's chosen caption; an object-free
/// scene yields a single pair with an all-ones mask.
pub fn build_pairs(scenes: &[SceneRecord], source: &CaptionSource) -> Result<Vec<TrainingPair>> {
    if scenes.is_empty() {
        return Err(CoreError::Contract("no scenes to build pairs from".into()));
    }
    let mut out = Vec::new();
    for rec in scenes {
        let caption = match source {
            CaptionSource::SceneCaption => rec
                .captions
                .first()
                .ok_or_else(|| CoreError::Contract(format!("{} has no captions", rec.scene_id)))?
                .clone(),
            CaptionSource::Scored(e) => rec.captions[score_captions(rec, *e)?.best].clone(),
        };
        let base = TrainingPair {
            scene_id: rec.scene_id.clone(),
            object_index: None,
            depth: rec.image.clone(),
            mask: vec![1; rec.image.width * rec.image.height],
            caption,
            replaced: false,
        };
        if rec.objects.is_empty() {
            out.push(base);
            continue;
        }
        for i in 0..rec.objects.len() {
            out.push(TrainingPair {
                object_index: Some(i),
                mask: object_mask(rec, i),
                ..base.clone()
            });
        }
    }
    Ok(out)
}

/// Independently replaces each pair's mask by all ones with probability `r`.
/// Pair `i` draws from a stream keyed by `(seed, i)`.
pub fn apply_sampling(pairs: &[TrainingPair], r: f64, seed: u64) -> Result<Vec<TrainingPair>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(CoreError::Config(format!("sample ratio {r} outside [0, 1]")));
    }
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let u: f64 = rng_for(seed, &[i as u64]).random();
            if u < r {
                TrainingPair {
                    mask: vec![1; p.mask.len()],
                    replaced: true,
                    ..p.clone()
                }
            } else {
                p.clone()
            }
        })
        .collect())
}
