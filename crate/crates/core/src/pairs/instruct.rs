use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bench::DEFAULT_TIE_EPS;
use crate::error::Result;
use crate::grammar::{self, enumerate, fill};
use crate::rng::{hash_str, rng_for};
use crate::scene::{region_mean_depth, SceneRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstructionKind {
    ComplexReasoning,
    MultiRoundDialogue,
    DetailedDescription,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub scene_id: String,
    pub kind: InstructionKind,
    pub turns: Vec<Turn>,
}

impl InstructionSample {
    fn new(rec: &SceneRecord, kind: InstructionKind, exchanges: Vec<(String, String)>) -> Self {
        let turns = exchanges
            .into_iter()
            .flat_map(|(q, a)| [Turn { role: Role::User, text: q }, Turn { role: Role::Assistant, text: a }])
            .collect();
        Self {
            scene_id: rec.scene_id.clone(),
            kind,
            turns,
        }
    }

    pub fn user_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::User).count()
    }
}

/// Pairs `(near, far)` whose region means differ by at least the tie threshold.
fn separable_pairs(means: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            if (means[i] - means[j]).abs() >= DEFAULT_TIE_EPS {
                out.push(if means[i] < means[j] { (i, j) } else { (j, i) });
            }
        }
    }
    out
}

fn describe(rec: &SceneRecord, means: &[f64]) -> String {
    let contents = if rec.objects.is_empty() {
        grammar::A_CONTENTS_EMPTY.to_string()
    } else {
        let items: Vec<String> = rec.objects.iter().map(|o| format!("a {}", o.label)).collect();
        fill(grammar::A_CONTENTS, &[("list", &enumerate(&items, "and"))])
    };
    let order = if rec.objects.len() < 2 {
        String::new()
    } else {
        let mut idx: Vec<usize> = (0..means.len()).collect();
        idx.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
        let labels: Vec<&str> = idx.iter().map(|&i| rec.objects[i].label.as_str()).collect();
        fill(grammar::A_ORDER, &[("labels", &labels.join(", "))])
    };
    fill(
        grammar::A_DESCRIBE,
        &[("scene", &rec.scene_label), ("contents", &contents), ("order", &order)],
    )
    .trim_end()
    .to_string()
}

/// Template instructions answerable from the record alone. Kinds that need
/// more objects than the scene has are skipped.
pub fn synth_instructions(rec: &SceneRecord, seed: u64) -> Result<Vec<InstructionSample>> {
    let means = rec
        .objects
        .iter()
        .map(|o| region_mean_depth(&rec.image, o))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = rng_for(seed, &[hash_str(&rec.scene_id)]);
    let mut out = vec![InstructionSample::new(
        rec,
        InstructionKind::DetailedDescription,
        vec![(grammar::I_DESCRIBE.to_string(), describe(rec, &means))],
    )];

    let pairs: Vec<(usize, usize)> = separable_pairs(&means)
        .into_iter()
        .filter(|&(a, b)| rec.object_ref(a) != rec.object_ref(b))
        .collect();
    if pairs.is_empty() {
        return Ok(out);
    }

    let (near, far) = pairs[rng.random_range(0..pairs.len())];
    let mut shown = [near, far];
    shown.shuffle(&mut rng);
    out.push(InstructionSample::new(
        rec,
        InstructionKind::ComplexReasoning,
        vec![(
            fill(grammar::I_CLOSER, &[("a", &rec.object_ref(shown[0])), ("b", &rec.object_ref(shown[1]))]),
            fill(grammar::A_CLOSER, &[("a", &rec.object_ref(near))]),
        )],
    ));

    let what = rng.random_range(0..rec.objects.len());
    let region = rec.objects[what].bbox.region_ref(rec.image.width, rec.image.height);
    let (near, far) = pairs[rng.random_range(0..pairs.len())];
    let mut shown = [near, far];
    shown.shuffle(&mut rng);
    out.push(InstructionSample::new(
        rec,
        InstructionKind::MultiRoundDialogue,
        vec![
            (
                fill(grammar::I_WHAT, &[("region", &region)]),
                fill(grammar::A_WHAT, &[("label", &rec.objects[what].label)]),
            ),
            (
                fill(grammar::Q_DISTANCE, &[("a", &rec.object_ref(shown[0])), ("b", &rec.object_ref(shown[1]))]),
                fill(grammar::A_FARTHER, &[("a", &rec.object_ref(far))]),
            ),
        ],
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BBox, DepthImage, ObjectInstance};

    fn scene(objects: &[(&str, BBox, f64)]) -> SceneRecord {
        let (w, h) = (8, 8);
        let mut depth = vec![9.0; w * h];
        let objects = objects
            .iter()
            .map(|(label, bbox, d)| {
                let mask = bbox.pixels(w);
                for &p in &mask {
                    depth[p as usize] = *d;
                }
                ObjectInstance { label: label.to_string(), bbox: *bbox, mask }
            })
            .collect();
        SceneRecord {
            scene_id: "t".into(),
            scene_label: "office".into(),
            image: DepthImage::new(w, h, depth, 10.0).unwrap(),
            objects,
            captions: vec!["an office".into()],
        }
    }

    #[test]
    fn closer_object_is_named() {
        let rec = scene(&[
            ("lamp", BBox { x: 4, y: 4, w: 4, h: 4 }, 4.0),
            ("desk", BBox { x: 0, y: 0, w: 2, h: 2 }, 1.0),
        ]);
        let out = synth_instructions(&rec, 0).unwrap();
        let kinds: Vec<InstructionKind> = out.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            [InstructionKind::DetailedDescription, InstructionKind::ComplexReasoning, InstructionKind::MultiRoundDialogue]
        );
        assert_eq!(out[1].turns[1].text, "desk region [0.00,0.00,0.25,0.25] is closer to the camera.");
        assert_eq!(
            out[0].turns[1].text,
            "this is a depth map of a office. it contains a lamp and a desk. from near to far: desk, lamp."
        );
        assert_eq!(out[2].user_turns(), 2);
        assert!(out[2].turns[3].text.starts_with("lamp region"));
    }

    #[test]
    fn empty_scene_only_describes() {
        let out = synth_instructions(&scene(&[]), 3).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].turns[1].text, "this is a depth map of a office. it contains no objects.");
    }
}
