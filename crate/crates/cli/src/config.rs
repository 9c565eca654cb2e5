use std::path::Path;

use anyhow::Context;
use dslab_core::align::AlignConfig;
use dslab_core::bench::Quotas;
use dslab_core::encoder::EncoderConfig;
use dslab_core::scene::SceneGenConfig;
use serde::{Deserialize, Serialize};

/// Everything a pipeline run depends on. Serialised into every output
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scenes: SceneGenConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Held-out scenes for zero-shot classification.
    pub holdout_scenes: usize,
    /// Benchmark size; the four task quotas keep the reference proportions.
    pub bench_items: usize,
    pub encoder: EncoderConfig,
    pub align: AlignConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            scenes: SceneGenConfig::default(),
            train_scenes: 256,
            eval_scenes: 64,
            holdout_scenes: 200,
            bench_items: 500,
            encoder: EncoderConfig::default(),
            align: AlignConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_slice(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn quotas(&self) -> Quotas {
        Quotas::TABLE1.scaled_to(self.bench_items)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.scenes.validate()?;
        self.encoder.validate()?;
        self.align.validate()?;
        anyhow::ensure!(
            self.encoder.image_size == self.scenes.width && self.encoder.image_size == self.scenes.height,
            "encoder image_size {} does not match {}x{} scenes",
            self.encoder.image_size,
            self.scenes.width,
            self.scenes.height
        );
        anyhow::ensure!(
            self.train_scenes > 0 && self.eval_scenes > 0 && self.holdout_scenes > 0,
            "scene counts must be positive"
        );
        Ok(())
    }

    pub fn to_json(&self) -> anyhow::Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}
