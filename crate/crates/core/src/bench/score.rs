use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{QaItem, Task};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub item_id: String,
    pub text: String,
}

/// Indices of candidates that occur in `text` as whole words, ignoring case.
/// A candidate edge that is alphanumeric must not touch another
/// alphanumeric character in the response.
pub fn match_candidates(text: &str, candidates: &[String]) -> Vec<usize> {
    let hay = text.to_lowercase();
    let hb = hay.as_bytes();
    let word = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
    candidates
        .iter()
        .enumerate()
        .filter(|(_, cand)| {
            let needle = cand.to_lowercase();
            if needle.is_empty() {
                return false;
            }
            let nb = needle.as_bytes();
            let (first, last) = (nb[0], nb[nb.len() - 1]);
            hay.match_indices(&needle).any(|(at, _)| {
                let end = at + nb.len();
                let left_ok = !word(first) || at == 0 || !word(hb[at - 1]);
                let right_ok = !word(last) || end == hb.len() || !word(hb[end]);
                left_ok && right_ok
            })
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub total: usize,
    pub correct: usize,
    pub wrong: usize,
    /// More than one candidate matched.
    pub ambiguous: usize,
    pub no_match: usize,
    pub missing: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tasks: Vec<(Task, TaskScore)>,
    /// Unweighted mean over tasks that have at least one item.
    pub macro_accuracy: f64,
}

impl ScoreReport {
    pub fn get(&self, task: Task) -> &TaskScore {
        &self.tasks[task.index()].1
    }
}

/// A response is correct iff exactly one candidate matches and it is the
/// answer. Items without a response count as incorrect.
pub fn score_answers(items: &[QaItem], responses: &[Response]) -> ScoreReport {
    let by_id: HashMap<&str, &str> = responses
        .iter()
        .map(|r| (r.item_id.as_str(), r.text.as_str()))
        .collect();
    let mut scores: Vec<TaskScore> = vec![TaskScore::default(); 4];
    for item in items {
        let s = &mut scores[item.task.index()];
        s.total += 1;
        let Some(text) = by_id.get(item.item_id.as_str()) else {
            s.missing += 1;
            continue;
        };
        match match_candidates(text, &item.candidates).as_slice() {
            [] => s.no_match += 1,
            [i] if *i == item.answer_index => s.correct += 1,
            [_] => s.wrong += 1,
            _ => s.ambiguous += 1,
        }
    }
    let mut sum = 0.0;
    let mut n = 0;
    for s in &mut scores {
        if s.total > 0 {
            s.accuracy = s.correct as f64 / s.total as f64;
            sum += s.accuracy;
            n += 1;
        }
    }
    ScoreReport {
        tasks: Task::ALL.iter().copied().zip(scores).collect(),
        macro_accuracy: if n == 0 { 0.0 } else { sum / n as f64 },
    }
}
