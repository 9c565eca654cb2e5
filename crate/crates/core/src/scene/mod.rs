//! Depth scenes: images, object instances and their annotations.

mod gen;
mod io;

pub use gen::{generate_scene, generate_scenes, SceneGenConfig};
pub use io::{read_scene, write_scene, SCENE_SCHEMA};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Single-channel depth map in meters, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub max_range: f64,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, max_range: f64) -> Result<Self> {
        let img = Self {
            width,
            height,
            depth,
            max_range,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth.len() != self.width * self.height {
            return Err(CoreError::Contract(format!(
                "{}x{} depth image holds {} values",
                self.width,
                self.height,
                self.depth.len()
            )));
        }
        if !(self.max_range.is_finite() && self.max_range > 0.0) {
            return Err(CoreError::Contract(format!("max_range {} must be positive", self.max_range)));
        }
        if let Some((i, v)) = self
            .depth
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0 && **v <= self.max_range))
        {
            return Err(CoreError::Contract(format!(
                "depth[{i}] = {v} outside [0, {}]",
                self.max_range
            )));
        }
        Ok(())
    }

    /// Depth divided by `max_range`, in `[0, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.depth.iter().map(|d| d / self.max_range).collect()
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }
}

/// Axis-aligned box in pixels, `(x, y)` being the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    /// `[x0, y0, x1, y1]` as fractions of the image size.
    pub fn normalized(&self, width: usize, height: usize) -> [f64; 4] {
        [
            self.x as f64 / width as f64,
            self.y as f64 / height as f64,
            (self.x + self.w) as f64 / width as f64,
            (self.y + self.h) as f64 / height as f64,
        ]
    }

    /// `region [x0,y0,x1,y1]` with two decimals.
    pub fn region_ref(&self, width: usize, height: usize) -> String {
        let [x0, y0, x1, y1] = self.normalized(width, height);
        format!("region [{x0:.2},{y0:.2},{x1:.2},{y1:.2}]")
    }

    /// Every pixel index inside the box.
    pub fn pixels(&self, width: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.w * self.h);
        for y in self.y..self.y + self.h {
            for x in self.x..self.x + self.w {
                out.push((y * width + x) as u32);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub label: String,
    pub bbox: BBox,
    /// Sorted, de-duplicated flat pixel indices.
    pub mask: Vec<u32>,
}

impl ObjectInstance {
    /// Human-readable reference used in prompts: `chair region [..]`.
    pub fn reference(&self, width: usize, height: usize) -> String {
        format!("{} {}", self.label, self.bbox.region_ref(width, height))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub scene_label: String,
    pub image: DepthImage,
    pub objects: Vec<ObjectInstance>,
    pub captions: Vec<String>,
}

impl SceneRecord {
    /// Checks every structural invariant of the record against `scene_vocab`.
    pub fn validate(&self, scene_vocab: &[String]) -> Result<()> {
        self.image.validate()?;
        if !scene_vocab.contains(&self.scene_label) {
            return Err(CoreError::Contract(format!(
                "scene label {:?} not in vocabulary",
                self.scene_label
            )));
        }
        if self.captions.is_empty() {
            return Err(CoreError::Contract(format!("{} has no captions", self.scene_id)));
        }
        let (w, h) = (self.image.width, self.image.height);
        for (i, obj) in self.objects.iter().enumerate() {
            let b = obj.bbox;
            if b.w == 0 || b.h == 0 || b.x + b.w > w || b.y + b.h > h {
                return Err(CoreError::Contract(format!("object {i}: bbox {b:?} leaves the {w}x{h} image")));
            }
            if obj.mask.is_empty() {
                return Err(CoreError::Contract(format!("object {i}: empty mask")));
            }
            if obj.mask.windows(2).any(|p| p[0] >= p[1]) {
                return Err(CoreError::Contract(format!("object {i}: mask not sorted and unique")));
            }
            for &p in &obj.mask {
                let (px, py) = (p as usize % w, p as usize / w);
                if p as usize >= w * h || !b.contains(px, py) {
                    return Err(CoreError::Contract(format!("object {i}: mask pixel {p} outside bbox")));
                }
            }
        }
        Ok(())
    }

    pub fn labels_present(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.objects.iter().map(|o| o.label.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Binary `height × width` raster of one object's mask.
    pub fn mask_raster(&self, object: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.image.width * self.image.height];
        for &p in &self.objects[object].mask {
            m[p as usize] = 1.0;
        }
        m
    }

    pub fn object_ref(&self, object: usize) -> String {
        self.objects[object].reference(self.image.width, self.image.height)
    }
}

/// Arithmetic mean of the depth over the object's mask pixels, in meters.
///
/// Pixels are summed in ascending index order regardless of how the mask
/// lists them, so the result does not depend on enumeration order.
pub fn region_mean_depth(img: &DepthImage, obj: &ObjectInstance) -> Result<f64> {
    if obj.mask.is_empty() {
        return Err(CoreError::Contract(format!(
            "region mean of {:?} with an empty mask",
            obj.label
        )));
    }
    let mut idx = obj.mask.clone();
    idx.sort_unstable();
    let mut sum = 0.0;
    for &p in &idx {
        let v = img.depth.get(p as usize).ok_or_else(|| {
            CoreError::Contract(format!("mask pixel {p} outside {}x{} image", img.width, img.height))
        })?;
        sum += v;
    }
    Ok(sum / idx.len() as f64)
}
