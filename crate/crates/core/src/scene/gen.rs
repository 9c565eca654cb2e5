//! Seeded synthetic depth scenes.
//!
//! Each scene class owns a background profile: a base depth and the
//! direction of a planar depth gradient, both spread evenly over the
//! vocabulary. Objects are flat-ish rectangles or ellipses placed in front
//! of the background at pairwise-distinct depths; the nearest surface wins
//! each pixel and an object's mask is the set of pixels it wins.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{region_mean_depth, BBox, DepthImage, ObjectInstance, SceneRecord};
use crate::error::{CoreError, Result};
use crate::grammar;
use crate::rng::{derive_seed, rng_for, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub scene_vocab: Vec<String>,
    pub object_vocab: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Nearest depth an object may sit at, in meters.
    pub min_depth: f64,
    pub max_range: f64,
    /// Minimum gap between the nominal depths of two objects in a scene.
    pub depth_separation: f64,
    /// Placement attempts per object before giving up on the scene.
    pub max_retries: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect();
        Self {
            scene_vocab: words(&[
                "kitchen", "bedroom", "bathroom", "office", "classroom", "library", "corridor", "lounge",
            ]),
            object_vocab: words(&[
                "chair", "table", "bed", "sofa", "lamp", "desk", "sink", "shelf", "door", "cabinet", "monitor",
                "toilet",
            ]),
            width: 32,
            height: 32,
            min_objects: 2,
            max_objects: 5,
            min_depth: 0.5,
            max_range: 10.0,
            depth_separation: 0.2,
            max_retries: 200,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        if self.scene_vocab.len() < 3 {
            return fail(format!("scene vocabulary needs >= 3 labels, has {}", self.scene_vocab.len()));
        }
        if self.object_vocab.len() < 8 {
            return fail(format!("object vocabulary needs >= 8 labels, has {}", self.object_vocab.len()));
        }
        for vocab in [&self.scene_vocab, &self.object_vocab] {
            let mut sorted = vocab.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != vocab.len() {
                return fail("vocabulary labels must be distinct".into());
            }
            if let Some(bad) = vocab.iter().find(|w| w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase())) {
                return fail(format!("label {bad:?} must be a single lowercase word"));
            }
        }
        if self.width < 8 || self.height < 8 {
            return fail(format!("image {}x{} is too small", self.width, self.height));
        }
        if self.min_objects > self.max_objects {
            return fail(format!("object range {}..={} is empty", self.min_objects, self.max_objects));
        }
        if !(self.min_depth >= 0.0 && self.min_depth < self.max_range) {
            return fail(format!("depth range [{}, {}] is empty", self.min_depth, self.max_range));
        }
        Ok(())
    }

    /// The three object labels most typical of a scene class.
    fn typical_objects(&self, class: usize) -> [usize; 3] {
        let m = self.object_vocab.len();
        [(class * 3) % m, (class * 3 + 1) % m, (class * 3 + 2) % m]
    }
}

/// Background profile of scene class `class` out of `n`.
fn background_profile(class: usize, n: usize, max_range: f64) -> (f64, f64) {
    let t = class as f64 / (n - 1) as f64;
    let base = max_range * (0.35 + 0.5 * t);
    let angle = 2.0 * PI * class as f64 / n as f64;
    (base, angle)
}

struct Shape {
    bbox: BBox,
    ellipse: bool,
    depth: f64,
    tilt: (f64, f64),
}

impl Shape {
    fn covers(&self, x: usize, y: usize) -> bool {
        if !self.bbox.contains(x, y) {
            return false;
        }
        if !self.ellipse {
            return true;
        }
        let (cx, cy) = self.center();
        let (rx, ry) = (self.bbox.w as f64 / 2.0, self.bbox.h as f64 / 2.0);
        let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
        dx * dx + dy * dy <= 1.0
    }

    fn center(&self) -> (f64, f64) {
        (
            self.bbox.x as f64 + self.bbox.w as f64 / 2.0,
            self.bbox.y as f64 + self.bbox.h as f64 / 2.0,
        )
    }

    fn depth_at(&self, x: usize, y: usize) -> f64 {
        let (cx, cy) = self.center();
        let u = (x as f64 + 0.5 - cx) / self.bbox.w as f64;
        let v = (y as f64 + 0.5 - cy) / self.bbox.h as f64;
        self.depth + self.tilt.0 * u + self.tilt.1 * v
    }

    fn area(&self) -> usize {
        let w = self.bbox.x + self.bbox.w;
        (self.bbox.y..self.bbox.y + self.bbox.h)
            .map(|y| (self.bbox.x..w).filter(|&x| self.covers(x, y)).count())
            .sum()
    }
}

/// Owner of each pixel after z-buffering `shapes` over the background.
fn rasterize(shapes: &[Shape], background: &[f64], width: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut depth = background.to_vec();
    let mut owner = vec![None; background.len()];
    for (i, s) in shapes.iter().enumerate() {
        for y in s.bbox.y..s.bbox.y + s.bbox.h {
            for x in s.bbox.x..s.bbox.x + s.bbox.w {
                if !s.covers(x, y) {
                    continue;
                }
                let d = s.depth_at(x, y);
                let p = y * width + x;
                if d < depth[p] {
                    depth[p] = d;
                    owner[p] = Some(i);
                }
            }
        }
    }
    (depth, owner)
}

fn visible_counts(owner: &[Option<usize>], n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for o in owner.iter().flatten() {
        counts[*o] += 1;
    }
    counts
}

/// Deterministically builds one scene from `seed`.
pub fn generate_scene(seed: u64, config: &SceneGenConfig) -> Result<SceneRecord> {
    config.validate()?;
    let mut rng = rng_for(seed, &[]);
    let (w, h) = (config.width, config.height);
    let n_classes = config.scene_vocab.len();
    let class = rng.random_range(0..n_classes);

    let (base, angle) = background_profile(class, n_classes, config.max_range);
    let base = base + rng.random_range(-0.03..0.03) * config.max_range;
    let angle = angle + rng.random_range(-0.2..0.2);
    let slope = config.max_range * rng.random_range(0.12..0.18);
    let mut background = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 - 0.5;
            let v = (y as f64 + 0.5) / h as f64 - 0.5;
            let d = base + slope * (u * angle.cos() + v * angle.sin());
            background[y * w + x] = d.clamp(config.min_depth, config.max_range);
        }
    }

    let k = rng.random_range(config.min_objects..=config.max_objects);
    let typical = config.typical_objects(class);
    let mut shapes: Vec<Shape> = Vec::with_capacity(k);
    let mut labels = Vec::with_capacity(k);
    for obj in 0..k {
        let label = if rng.random_bool(0.6) {
            typical[rng.random_range(0..3)]
        } else {
            rng.random_range(0..config.object_vocab.len())
        };
        let mut placed = false;
        for _ in 0..config.max_retries {
            if let Some(shape) = propose(&mut rng, config, &background, &shapes) {
                shapes.push(shape);
                let (_, owner) = rasterize(&shapes, &background, w);
                let visible = visible_counts(&owner, shapes.len());
                let ok = shapes
                    .iter()
                    .zip(&visible)
                    .all(|(s, &v)| v >= 4 && v * 10 >= s.area() * 3);
                if ok {
                    placed = true;
                    break;
                }
                shapes.pop();
            }
        }
        if !placed {
            return Err(CoreError::Generation {
                seed,
                msg: format!("could not place object {obj} of {k} after {} attempts", config.max_retries),
            });
        }
        labels.push(label);
    }

    let (depth, owner) = rasterize(&shapes, &background, w);
    let image = DepthImage::new(w, h, depth, config.max_range)?;
    let mut masks = vec![Vec::new(); k];
    for (p, o) in owner.iter().enumerate() {
        if let Some(i) = o {
            masks[*i].push(p as u32);
        }
    }
    let objects: Vec<ObjectInstance> = shapes
        .iter()
        .zip(labels)
        .zip(masks)
        .map(|((s, l), mask)| ObjectInstance {
            label: config.object_vocab[l].clone(),
            bbox: s.bbox,
            mask,
        })
        .collect();

    let scene_label = config.scene_vocab[class].clone();
    let captions = captions_for(&scene_label, &image, &objects)?;
    Ok(SceneRecord {
        scene_id: format!("scene-{seed:016x}"),
        scene_label,
        image,
        objects,
        captions,
    })
}

fn propose(rng: &mut Rng, config: &SceneGenConfig, background: &[f64], existing: &[Shape]) -> Option<Shape> {
    let (w, h) = (config.width, config.height);
    let (min_side, max_side) = (4.max(w / 8), (w.min(h) / 2).max(5));
    let bw = rng.random_range(min_side..=max_side);
    let bh = rng.random_range(min_side..=max_side);
    let bbox = BBox {
        x: rng.random_range(0..=w - bw),
        y: rng.random_range(0..=h - bh),
        w: bw,
        h: bh,
    };
    if existing.iter().any(|s| s.bbox == bbox) {
        return None;
    }
    let ellipse = rng.random_bool(0.5);
    let behind = bbox
        .pixels(w)
        .iter()
        .map(|&p| background[p as usize])
        .fold(f64::INFINITY, f64::min);
    let tilt_mag = 0.01 * config.max_range;
    let tilt = (rng.random_range(-tilt_mag..tilt_mag), rng.random_range(-tilt_mag..tilt_mag));
    let near = config.min_depth + tilt_mag;
    let far = behind - config.depth_separation - tilt_mag;
    if far <= near {
        return None;
    }
    let depth = rng.random_range(near..far);
    if existing
        .iter()
        .any(|s| (s.depth - depth).abs() < config.depth_separation)
    {
        return None;
    }
    Some(Shape {
        bbox,
        ellipse,
        depth,
        tilt,
    })
}

/// Range word for a mean depth: near, middle or far thirds of `max_range`.
pub(crate) fn range_word(depth: f64, max_range: f64) -> &'static str {
    let [near, middle, far] = grammar::RANGE_WORDS;
    if depth < max_range / 3.0 {
        near
    } else if depth < 2.0 * max_range / 3.0 {
        middle
    } else {
        far
    }
}

/// Scene caption first, then one caption per object.
fn captions_for(scene: &str, image: &DepthImage, objects: &[ObjectInstance]) -> Result<Vec<String>> {
    let mut captions = vec![match objects {
        [] => grammar::fill(grammar::SCENE_CAPTION_EMPTY, &[("scene", scene)]),
        [a] => grammar::fill(grammar::SCENE_CAPTION_ONE, &[("scene", scene), ("a", &a.label)]),
        [a, b, ..] => grammar::fill(
            grammar::SCENE_CAPTION_TWO,
            &[("scene", scene), ("a", &a.label), ("b", &b.label)],
        ),
    }];
    for obj in objects {
        let d = region_mean_depth(image, obj)?;
        captions.push(grammar::fill(
            grammar::OBJECT_CAPTION,
            &[("label", &obj.label), ("range", range_word(d, image.max_range))],
        ));
    }
    Ok(captions)
}

/// Scenes for seeds derived from `base_seed`, indices `0..count`.
/// Runs on up to `threads` worker threads; output order is by index.
pub fn generate_scenes(base_seed: u64, count: usize, config: &SceneGenConfig, threads: usize) -> Result<Vec<SceneRecord>> {
    let seeds: Vec<u64> = (0..count as u64).map(|i| derive_seed(base_seed, &[i])).collect();
    let threads = threads.clamp(1, count.max(1));
    let chunk = count.div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| generate_scene(s, config)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scene worker panicked"))
            .collect()
    })
}
