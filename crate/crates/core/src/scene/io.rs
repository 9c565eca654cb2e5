//! On-disk scenes: `<id>.pgm` (16-bit binary PGM, depth scaled to the
//! full 0..=65535 range over `[0, max_range]`) plus a `<id>.json` sidecar.
//!
//! Sidecar schema `dslab.scene/1`:
//!
//! ```json
//! {
//!   "schema": "dslab.scene/1",
//!   "scene_id": "scene-…", "scene_label": "kitchen",
//!   "width": 32, "height": 32, "max_range": 10.0,
//!   "objects": [{"label": "chair", "bbox": {"x":1,"y":2,"w":5,"h":4},
//!                "mask_rle": [[start, len], …]}],
//!   "captions": ["…"]
//! }
//! ```
//!
//! `mask_rle` runs are over flat row-major pixel indices. An object
//! without `mask_rle` gets its full bbox rectangle as mask.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BBox, DepthImage, ObjectInstance, SceneRecord};
use crate::error::{CoreError, Result};
use crate::io::write_atomic;

pub const SCENE_SCHEMA: &str = "dslab.scene/1";
const PGM_MAXVAL: u32 = 65535;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    schema: String,
    scene_id: String,
    scene_label: String,
    width: usize,
    height: usize,
    max_range: f64,
    objects: Vec<ObjectJson>,
    captions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ObjectJson {
    label: String,
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_rle: Option<Vec<[u32; 2]>>,
}

fn rle_encode(mask: &[u32]) -> Vec<[u32; 2]> {
    let mut runs: Vec<[u32; 2]> = Vec::new();
    for &p in mask {
        match runs.last_mut() {
            Some([start, len]) if *start + *len == p => *len += 1,
            _ => runs.push([p, 1]),
        }
    }
    runs
}

fn rle_decode(runs: &[[u32; 2]]) -> Vec<u32> {
    let mut mask: Vec<u32> = runs.iter().flat_map(|&[s, l]| s..s + l).collect();
    mask.sort_unstable();
    mask.dedup();
    mask
}

fn encode_pgm(img: &DepthImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, PGM_MAXVAL).into_bytes();
    out.reserve(img.depth.len() * 2);
    for d in &img.depth {
        let q = (d / img.max_range * PGM_MAXVAL as f64).round().clamp(0.0, PGM_MAXVAL as f64) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Returns `(width, height, samples)`.
fn decode_pgm(bytes: &[u8], file: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let fail = |offset: usize, msg: String| CoreError::Format {
        file: file.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fail(0, "missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(start, format!("expected header field {} as a decimal number", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| fail(start, "header number out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "header must end with a single whitespace byte".into())),
    }
    let [w, h, maxval] = fields;
    if maxval != PGM_MAXVAL {
        return Err(fail(pos, format!("maxval must be {PGM_MAXVAL}, got {maxval}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w * h * 2;
    let body = &bytes[pos..];
    if body.len() != expected {
        return Err(fail(
            pos + body.len().min(expected),
            format!("expected {expected} sample bytes, found {}", body.len()),
        ));
    }
    let samples = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, samples))
}

fn scene_paths(dir: &Path, scene_id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{scene_id}.pgm")), dir.join(format!("{scene_id}.json")))
}

pub fn write_scene(rec: &SceneRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (pgm, json) = scene_paths(dir, &rec.scene_id);
    let sidecar = Sidecar {
        schema: SCENE_SCHEMA.into(),
        scene_id: rec.scene_id.clone(),
        scene_label: rec.scene_label.clone(),
        width: rec.image.width,
        height: rec.image.height,
        max_range: rec.image.max_range,
        objects: rec
            .objects
            .iter()
            .map(|o| ObjectJson {
                label: o.label.clone(),
                bbox: o.bbox,
                mask_rle: Some(rle_encode(&o.mask)),
            })
            .collect(),
        captions: rec.captions.clone(),
    };
    let mut text = serde_json::to_vec_pretty(&sidecar)?;
    text.push(b'\n');
    write_atomic(&pgm, &encode_pgm(&rec.image))?;
    write_atomic(&json, &text)?;
    Ok(())
}

/// Byte offset of a serde_json error position.
fn json_offset(text: &[u8], err: &serde_json::Error) -> usize {
    let mut line = 1;
    for (i, &b) in text.iter().enumerate() {
        if line == err.line() {
            return (i + err.column().saturating_sub(1)).min(text.len());
        }
        if b == b'\n' {
            line += 1;
        }
    }
    text.len()
}

/// Reads a scene back. Depth comes back in meters, quantised to
/// `max_range / 65535`; use [`DepthImage::normalized`] for `[0, 1]` values.
pub fn read_scene(dir: &Path, scene_id: &str) -> Result<SceneRecord> {
    let (pgm, json) = scene_paths(dir, scene_id);
    let text = fs::read(&json)?;
    let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| CoreError::Format {
        file: json.clone(),
        offset: json_offset(&text, &e),
        msg: e.to_string(),
    })?;
    let fail = |msg: String| CoreError::Format {
        file: json.clone(),
        offset: 0,
        msg,
    };
    if sidecar.schema != SCENE_SCHEMA {
        return Err(fail(format!("unsupported schema {:?}", sidecar.schema)));
    }
    if sidecar.scene_id != scene_id {
        return Err(fail(format!("sidecar describes {:?}", sidecar.scene_id)));
    }
    let (w, h, samples) = decode_pgm(&fs::read(&pgm)?, &pgm)?;
    if (w, h) != (sidecar.width, sidecar.height) {
        return Err(fail(format!(
            "sidecar says {}x{} but the PGM is {w}x{h}",
            sidecar.width, sidecar.height
        )));
    }
    let max_range = sidecar.max_range;
    let depth = samples
        .iter()
        .map(|&q| q as f64 / PGM_MAXVAL as f64 * max_range)
        .collect();
    let image = DepthImage::new(w, h, depth, max_range).map_err(|e| fail(e.to_string()))?;
    let objects = sidecar
        .objects
        .into_iter()
        .map(|o| ObjectInstance {
            mask: match &o.mask_rle {
                Some(runs) => rle_decode(runs),
                None => o.bbox.pixels(w),
            },
            label: o.label,
            bbox: o.bbox,
        })
        .collect();
    Ok(SceneRecord {
        scene_id: sidecar.scene_id,
        scene_label: sidecar.scene_label,
        image,
        objects,
        captions: sidecar.captions,
    })
}
