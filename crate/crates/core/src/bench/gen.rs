use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use super::{Provenance, QaItem, Task};
use crate::error::{CoreError, Result};
use crate::grammar::{self, enumerate, fill};
use crate::rng::{rng_for, Rng};
use crate::scene::{region_mean_depth, SceneRecord};

/// Pairs whose mean depths differ by less than this are never asked about.
pub const DEFAULT_TIE_EPS: f64 = 0.05;

/// `truth` plus `k` distinct distractors drawn uniformly from `pool`
/// (which excludes the truth), shuffled. Returns candidates and answer index.
fn shuffled_with_truth(truth: &str, pool: &[&str], k: usize, rng: &mut Rng) -> (Vec<String>, usize) {
    let mut cands: Vec<String> = index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].to_string())
        .collect();
    cands.push(truth.to_string());
    cands.shuffle(rng);
    let answer = cands.iter().position(|c| c == truth).expect("truth is present");
    (cands, answer)
}

fn item_id(rec: &SceneRecord, task: Task, objects: &[usize], seed: u64) -> String {
    let objs: Vec<String> = objects.iter().map(usize::to_string).collect();
    format!("{}/{}/{}/{seed:016x}", rec.scene_id, task.short(), objs.join("-"))
}

pub fn gen_scene_classification(rec: &SceneRecord, scene_vocab: &[String], seed: u64) -> Result<QaItem> {
    if scene_vocab.len() < 3 {
        return Err(CoreError::Config(format!(
            "scene classification needs >= 3 scene labels, have {}",
            scene_vocab.len()
        )));
    }
    if !scene_vocab.contains(&rec.scene_label) {
        return Err(CoreError::Contract(format!("{:?} not in the scene vocabulary", rec.scene_label)));
    }
    let mut rng = rng_for(seed, &[]);
    let pool: Vec<&str> = scene_vocab
        .iter()
        .map(String::as_str)
        .filter(|s| *s != rec.scene_label)
        .collect();
    let (candidates, answer_index) = shuffled_with_truth(&rec.scene_label, &pool, 2, &mut rng);
    Ok(QaItem {
        item_id: item_id(rec, Task::SceneClassification, &[], seed),
        task: Task::SceneClassification,
        prompt: fill(grammar::Q_SCENE, &[("options", &enumerate(&candidates, "or"))]),
        candidates,
        answer_index,
        provenance: Provenance {
            scene_id: rec.scene_id.clone(),
            objects: vec![],
        },
    })
}

pub fn gen_recognition(rec: &SceneRecord, object: usize, object_vocab: &[String], seed: u64) -> Result<QaItem> {
    if object_vocab.len() < 4 {
        return Err(CoreError::Config(format!(
            "recognition needs >= 4 object labels, have {}",
            object_vocab.len()
        )));
    }
    let obj = rec.objects.get(object).ok_or_else(|| {
        CoreError::Contract(format!("{} has no object {object}", rec.scene_id))
    })?;
    let mut rng = rng_for(seed, &[]);
    let pool: Vec<&str> = object_vocab
        .iter()
        .map(String::as_str)
        .filter(|s| *s != obj.label)
        .collect();
    let (candidates, answer_index) = shuffled_with_truth(&obj.label, &pool, 3, &mut rng);
    let region = obj.bbox.region_ref(rec.image.width, rec.image.height);
    Ok(QaItem {
        item_id: item_id(rec, Task::Recognition, &[object], seed),
        task: Task::Recognition,
        prompt: fill(
            grammar::Q_RECOGNITION,
            &[("region", &region), ("options", &enumerate(&candidates, "or"))],
        ),
        candidates,
        answer_index,
        provenance: Provenance {
            scene_id: rec.scene_id.clone(),
            objects: vec![object],
        },
    })
}

/// Asks which of objects `i` and `j` is farther away. `None` when their
/// region mean depths are within `tie_eps` or their references coincide.
pub fn gen_distance_judge(rec: &SceneRecord, i: usize, j: usize, tie_eps: f64, seed: u64) -> Result<Option<QaItem>> {
    if i == j || i >= rec.objects.len() || j >= rec.objects.len() {
        return Err(CoreError::Contract(format!(
            "distance judge needs two distinct objects of {}, got {i} and {j}",
            rec.scene_id
        )));
    }
    let di = region_mean_depth(&rec.image, &rec.objects[i])?;
    let dj = region_mean_depth(&rec.image, &rec.objects[j])?;
    if (di - dj).abs() < tie_eps {
        return Ok(None);
    }
    let (ri, rj) = (rec.object_ref(i), rec.object_ref(j));
    if ri == rj {
        return Ok(None);
    }
    let far = if di > dj { &ri } else { &rj };
    let mut rng = rng_for(seed, &[]);
    let mut candidates = vec![ri.clone(), rj.clone()];
    candidates.shuffle(&mut rng);
    let answer_index = candidates.iter().position(|c| c == far).expect("present");
    Ok(Some(QaItem {
        item_id: item_id(rec, Task::DistanceJudge, &[i, j], seed),
        task: Task::DistanceJudge,
        prompt: fill(grammar::Q_DISTANCE, &[("a", &candidates[0]), ("b", &candidates[1])]),
        candidates,
        answer_index,
        provenance: Provenance {
            scene_id: rec.scene_id.clone(),
            objects: vec![i, j],
        },
    }))
}

/// Three labels present in the scene and one absent; the absent one is
/// the answer. `None` when fewer than three distinct labels are present
/// or the vocabulary has nothing absent.
pub fn gen_security(rec: &SceneRecord, object_vocab: &[String], seed: u64) -> Result<Option<QaItem>> {
    let present = rec.labels_present();
    let absent: Vec<&str> = object_vocab
        .iter()
        .map(String::as_str)
        .filter(|l| !present.contains(l))
        .collect();
    if present.len() < 3 || absent.is_empty() {
        return Ok(None);
    }
    let mut rng = rng_for(seed, &[]);
    let truth = absent[rng.random_range(0..absent.len())];
    let (candidates, answer_index) = shuffled_with_truth(truth, &present, 3, &mut rng);
    let objects: Vec<usize> = candidates
        .iter()
        .filter_map(|c| rec.objects.iter().position(|o| &o.label == c))
        .collect();
    Ok(Some(QaItem {
        item_id: item_id(rec, Task::Security, &objects, seed),
        task: Task::Security,
        prompt: fill(grammar::Q_SECURITY, &[("options", &enumerate(&candidates, "or"))]),
        candidates,
        answer_index,
        provenance: Provenance {
            scene_id: rec.scene_id.clone(),
            objects,
        },
    }))
}
