//! The four-task depth question benchmark: item generation, quota-driven
//! construction and free-text scoring.

mod build;
mod gen;
mod score;

pub use build::{build_benchmark, BenchConfig, BenchmarkStats, Quotas, TaskStats};
pub use gen::{gen_distance_judge, gen_recognition, gen_scene_classification, gen_security, DEFAULT_TIE_EPS};
pub use score::{match_candidates, score_answers, Response, ScoreReport, TaskScore};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    SceneClassification,
    Recognition,
    DistanceJudge,
    Security,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::SceneClassification,
        Task::Recognition,
        Task::DistanceJudge,
        Task::Security,
    ];

    pub fn n_candidates(self) -> usize {
        match self {
            Task::SceneClassification => 3,
            Task::Recognition | Task::Security => 4,
            Task::DistanceJudge => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Task::SceneClassification => "sc",
            Task::Recognition => "rec",
            Task::DistanceJudge => "dist",
            Task::Security => "sec",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_id: String,
    /// Indices into the scene's object list that the question is about.
    pub objects: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub item_id: String,
    pub task: Task,
    pub prompt: String,
    pub candidates: Vec<String>,
    pub answer_index: usize,
    pub provenance: Provenance,
}

impl QaItem {
    pub fn answer(&self) -> &str {
        &self.candidates[self.answer_index]
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.task.n_candidates();
        if self.candidates.len() != want {
            return Err(CoreError::Contract(format!(
                "{}: {} needs {want} candidates, has {}",
                self.item_id,
                self.task,
                self.candidates.len()
            )));
        }
        if self.answer_index >= self.candidates.len() {
            return Err(CoreError::Contract(format!("{}: answer index out of range", self.item_id)));
        }
        for (i, a) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(a) {
                return Err(CoreError::Contract(format!("{}: duplicate candidate {a:?}", self.item_id)));
            }
        }
        Ok(())
    }
}
