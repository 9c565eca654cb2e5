use serde::{Deserialize, Serialize};

use super::gen::{gen_distance_judge, gen_recognition, gen_scene_classification, gen_security, DEFAULT_TIE_EPS};
use super::{QaItem, Task};
use crate::error::{CoreError, Result};
use crate::rng::derive_seed;
use crate::scene::{region_mean_depth, SceneRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quotas {
    pub scene_classification: usize,
    pub recognition: usize,
    pub distance_judge: usize,
    pub security: usize,
}

impl Quotas {
    /// Per-task counts of the reference benchmark: 13,473 items in total.
    pub const TABLE1: Quotas = Quotas {
        scene_classification: 1786,
        recognition: 3793,
        distance_judge: 5737,
        security: 2157,
    };

    pub fn get(&self, task: Task) -> usize {
        match task {
            Task::SceneClassification => self.scene_classification,
            Task::Recognition => self.recognition,
            Task::DistanceJudge => self.distance_judge,
            Task::Security => self.security,
        }
    }

    pub fn total(&self) -> usize {
        Task::ALL.iter().map(|&t| self.get(t)).sum()
    }

    /// Same proportions, `total` items, largest-remainder rounding.
    pub fn scaled_to(&self, total: usize) -> Quotas {
        let src = self.total().max(1);
        let exact: Vec<f64> = Task::ALL
            .iter()
            .map(|&t| self.get(t) as f64 * total as f64 / src as f64)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let short = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        Quotas {
            scene_classification: counts[0],
            recognition: counts[1],
            distance_judge: counts[2],
            security: counts[3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scene_vocab: Vec<String>,
    pub object_vocab: Vec<String>,
    pub tie_eps: f64,
}

impl BenchConfig {
    pub fn new(scene_vocab: Vec<String>, object_vocab: Vec<String>) -> Self {
        Self {
            scene_vocab,
            object_vocab,
            tie_eps: DEFAULT_TIE_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task: Task,
    pub count: usize,
    pub percentage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkStats {
    pub tasks: Vec<TaskStats>,
    pub total: usize,
}

impl BenchmarkStats {
    pub fn from_items(items: &[QaItem]) -> Self {
        let total = items.len();
        let tasks = Task::ALL
            .iter()
            .map(|&task| {
                let count = items.iter().filter(|i| i.task == task).count();
                TaskStats {
                    task,
                    count,
                    percentage: if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 },
                }
            })
            .collect();
        Self { tasks, total }
    }

    pub fn get(&self, task: Task) -> &TaskStats {
        &self.tasks[task.index()]
    }
}

/// Question slots a scene offers for one task. Each visit to the scene
/// takes the next slot, wrapping around with a fresh seed.
fn slots(rec: &SceneRecord, task: Task, cfg: &BenchConfig) -> Result<Vec<Vec<usize>>> {
    Ok(match task {
        Task::SceneClassification => vec![vec![]],
        Task::Recognition => (0..rec.objects.len()).map(|i| vec![i]).collect(),
        Task::DistanceJudge => {
            let means = rec
                .objects
                .iter()
                .map(|o| region_mean_depth(&rec.image, o))
                .collect::<Result<Vec<_>>>()?;
            let mut pairs = Vec::new();
            for i in 0..means.len() {
                for j in i + 1..means.len() {
                    if (means[i] - means[j]).abs() >= cfg.tie_eps && rec.object_ref(i) != rec.object_ref(j) {
                        pairs.push(vec![i, j]);
                    }
                }
            }
            pairs
        }
        Task::Security => {
            let present = rec.labels_present();
            let absent = cfg.object_vocab.iter().any(|l| !present.contains(&l.as_str()));
            if present.len() >= 3 && absent {
                vec![vec![]]
            } else {
                vec![]
            }
        }
    })
}

/// Emits exactly `quotas` items per task, visiting scenes round-robin.
/// Items are numbered `<task>-<nnnnn>` in emission order.
pub fn build_benchmark(
    scenes: &[SceneRecord],
    quotas: &Quotas,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<(Vec<QaItem>, BenchmarkStats)> {
    let mut items = Vec::with_capacity(quotas.total());
    for task in Task::ALL {
        let quota = quotas.get(task);
        if quota == 0 {
            continue;
        }
        let per_scene: Vec<Vec<Vec<usize>>> = scenes
            .iter()
            .map(|s| slots(s, task, cfg))
            .collect::<Result<_>>()?;
        if per_scene.iter().all(Vec::is_empty) {
            return Err(CoreError::Resource {
                task: task.to_string(),
                msg: format!("none of the {} scenes can produce a {task} item", scenes.len()),
            });
        }
        let mut visits = vec![0usize; scenes.len()];
        let mut emitted = 0;
        let mut cursor = 0;
        while emitted < quota {
            let s = cursor % scenes.len();
            cursor += 1;
            let slots = &per_scene[s];
            if slots.is_empty() {
                continue;
            }
            let visit = visits[s];
            visits[s] += 1;
            let slot = &slots[visit % slots.len()];
            let item_seed = derive_seed(seed, &[task.index() as u64, s as u64, visit as u64]);
            let rec = &scenes[s];
            let item = match task {
                Task::SceneClassification => Some(gen_scene_classification(rec, &cfg.scene_vocab, item_seed)?),
                Task::Recognition => Some(gen_recognition(rec, slot[0], &cfg.object_vocab, item_seed)?),
                Task::DistanceJudge => gen_distance_judge(rec, slot[0], slot[1], cfg.tie_eps, item_seed)?,
                Task::Security => gen_security(rec, &cfg.object_vocab, item_seed)?,
            };
            let Some(mut item) = item else {
                return Err(CoreError::Contract(format!(
                    "slot {slot:?} of {} yielded no {task} item",
                    rec.scene_id
                )));
            };
            item.item_id = format!("{}-{:05}", task.short(), emitted);
            items.push(item);
            emitted += 1;
        }
    }
    let stats = BenchmarkStats::from_items(&items);
    Ok((items, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_scaling_keeps_proportions() {
        let q = Quotas::TABLE1.scaled_to(500);
        assert_eq!(q.total(), 500);
        assert_eq!(q, Quotas { scene_classification: 66, recognition: 141, distance_judge: 213, security: 80 });
        assert_eq!(Quotas::TABLE1.scaled_to(13473), Quotas::TABLE1);
    }
}
