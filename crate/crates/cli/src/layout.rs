//! Fixed directory layout under the run root.

use std::path::{Path, PathBuf};

/// An input that an earlier subcommand failed to produce.
#[derive(Debug)]
pub struct MissingInput {
    pub path: PathBuf,
    pub producer: &'static str,
}

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "missing input {} (produced by `dslab {}`)",
            self.path.display(),
            self.producer
        )
    }
}

impl std::error::Error for MissingInput {}

pub struct Layout {
    root: PathBuf,
}

pub const SPLITS: [&str; 3] = ["train", "eval", "holdout"];

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn scenes(&self, split: &str) -> PathBuf {
        self.root.join("scenes").join(split)
    }

    pub fn benchmark(&self) -> PathBuf {
        self.dir("bench").join("benchmark.jsonl")
    }

    pub fn pairs(&self) -> PathBuf {
        self.dir("pairs").join("pairs.jsonl")
    }

    pub fn instructions(&self) -> PathBuf {
        self.dir("instructions").join("instructions.jsonl")
    }

    pub fn encoder_ckpt(&self) -> PathBuf {
        self.dir("encoder").join("encoder.ckpt")
    }

    pub fn aligned_ckpt(&self) -> PathBuf {
        self.dir("align").join("model.ckpt")
    }

    pub fn sft_ckpt(&self) -> PathBuf {
        self.dir("sft").join("model.ckpt")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.dir("eval").join("report.json")
    }

    pub fn zeroshot_report(&self) -> PathBuf {
        self.dir("zeroshot").join("report.json")
    }

    pub fn ratio_csv(&self) -> PathBuf {
        self.dir("ratio").join("ratio_search.csv")
    }

    pub fn ablation_report(&self) -> PathBuf {
        self.dir("ablation").join("report.json")
    }

    pub fn bench_stats(&self) -> PathBuf {
        self.dir("bench").join("stats.json")
    }
}

/// Fails with [`MissingInput`] unless `path` exists.
pub fn require(path: PathBuf, producer: &'static str) -> anyhow::Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(MissingInput { path, producer }.into())
    }
}
