//! Deterministic synthetic segmentation scenes.
//!
//! Scenes are textured backgrounds with a few filled shapes, one class per
//! shape kind. Masks come from an exact point-in-shape test at each pixel
//! centre (topmost shape wins); images are anti-aliased by 4×4 supersampling.
//! Rendering uses only `+ − × ÷ sqrt` so output bytes do not depend on the
//! platform's transcendental functions.
//!
//! Out-of-distribution scenes use an alien style: loud per-pixel colour noise
//! and shape kinds absent from the class palette.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Sample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::io::{self, Manifest};
use crate::rng::{self, Slot, Stream};
use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;

/// Background base colours, one per style.
const STYLE_COLORS: [[f64; 3]; 6] = [
    [0.30, 0.42, 0.25],
    [0.64, 0.56, 0.42],
    [0.26, 0.32, 0.52],
    [0.52, 0.28, 0.30],
    [0.46, 0.46, 0.46],
    [0.16, 0.18, 0.16],
];

/// Mean object colour per foreground class.
const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.85, 0.30, 0.22],
    [0.30, 0.78, 0.34],
    [0.28, 0.40, 0.88],
    [0.88, 0.80, 0.26],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Foreground classes; labels are `1..=num_classes`, background is 0.
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Amplitude of per-pixel noise.
    pub noise: f64,
    /// Per-channel spread of object colours around their class colour.
    pub color_jitter: f64,
    /// Spread of the per-scene, per-channel illumination gain around 1.
    pub illumination: f64,
    pub style: usize,
    pub ood: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 4,
            noise: 0.04,
            color_jitter: 0.5,
            illumination: 0.0,
            style: 0,
            ood: false,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 4 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=4, got {}",
                self.num_classes
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be >= 8".into()));
        }
        Ok(())
    }
}

/// Geometric primitives in pixel coordinates (pixel `(x, y)` has centre
/// `(x + 0.5, y + 0.5)`).
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    /// Rectangle with half extents `(hw, hh)` along the unit axis `(ux, uy)`
    /// and its perpendicular.
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, ux: f64, uy: f64 },
    Triangle { pts: [(f64, f64); 3] },
    /// Band `|n·p − offset| ≤ half` with unit normal `n`.
    Stripe { nx: f64, ny: f64, offset: f64, half: f64 },
    /// Annulus (out-of-distribution only).
    Ring { cx: f64, cy: f64, r_in: f64, r_out: f64 },
    /// Plus sign (out-of-distribution only).
    Cross { cx: f64, cy: f64, arm: f64, half: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
            Shape::Rect { cx, cy, hw, hh, ux, uy } => {
                let (dx, dy) = (x - cx, y - cy);
                let a = dx * ux + dy * uy;
                let b = -dx * uy + dy * ux;
                a.abs() <= hw && b.abs() <= hh
            }
            Shape::Triangle { pts } => {
                let s = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                };
                let d0 = s(pts[0], pts[1]);
                let d1 = s(pts[1], pts[2]);
                let d2 = s(pts[2], pts[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            Shape::Stripe { nx, ny, offset, half } => (nx * x + ny * y - offset).abs() <= half,
            Shape::Ring { cx, cy, r_in, r_out } => {
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
            Shape::Cross { cx, cy, arm, half } => {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                (dx <= arm && dy <= half) || (dy <= arm && dx <= half)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    /// Class label written into the mask (background for OOD shapes).
    pub class: u16,
    pub color: [f64; 3],
}

fn unit_vector(rng: &mut Stream) -> (f64, f64) {
    loop {
        let x: f64 = rng.random_range(-1.0..1.0);
        let y: f64 = rng.random_range(-1.0..1.0);
        let n2 = x * x + y * y;
        if n2 > 0.01 && n2 <= 1.0 {
            let n = n2.sqrt();
            return (x / n, y / n);
        }
    }
}

fn sample_object(spec: &SceneSpec, rng: &mut Stream) -> SceneObject {
    let s = spec.image_size as f64;
    let scale = s / 64.0;
    let cx = rng.random_range(0.1 * s..0.9 * s);
    let cy = rng.random_range(0.1 * s..0.9 * s);
    if spec.ood {
        let color = [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ];
        let shape = if rng.random_bool(0.5) {
            let r_out = rng.random_range(8.0..16.0) * scale;
            Shape::Ring {
                cx,
                cy,
                r_in: r_out * rng.random_range(0.4..0.7),
                r_out,
            }
        } else {
            Shape::Cross {
                cx,
                cy,
                arm: rng.random_range(8.0..16.0) * scale,
                half: rng.random_range(1.5..4.0) * scale,
            }
        };
        return SceneObject { shape, class: 0, color };
    }
    let class = rng.random_range(1..=spec.num_classes as u16);
    let j = spec.color_jitter;
    let mut color = CLASS_COLORS[class as usize - 1];
    for c in &mut color {
        *c = (*c + rng.random_range(-j..=j)).clamp(0.0, 1.0);
    }
    let shape = match class {
        1 => Shape::Disk {
            cx,
            cy,
            r: rng.random_range(8.0..16.0) * scale,
        },
        2 => {
            let (ux, uy) = unit_vector(rng);
            Shape::Rect {
                cx,
                cy,
                hw: rng.random_range(6.0..14.0) * scale,
                hh: rng.random_range(6.0..14.0) * scale,
                ux,
                uy,
            }
        }
        3 => {
            let mut pts = [(0.0, 0.0); 3];
            let radius = rng.random_range(10.0..18.0) * scale;
            let (ux, uy) = unit_vector(rng);
            // roughly equilateral: rotate the unit vector by ~120° twice
            let (c, sn) = (-0.5, 0.866_025_403_784_438_6);
            let mut v = (ux, uy);
            for p in &mut pts {
                let jitter = rng.random_range(0.8..1.2);
                *p = (cx + v.0 * radius * jitter, cy + v.1 * radius * jitter);
                v = (v.0 * c - v.1 * sn, v.0 * sn + v.1 * c);
            }
            Shape::Triangle { pts }
        }
        _ => {
            let (nx, ny) = unit_vector(rng);
            Shape::Stripe {
                nx,
                ny,
                offset: nx * cx + ny * cy,
                half: rng.random_range(3.0..5.0) * scale,
            }
        }
    };
    SceneObject { shape, class, color }
}

/// Background colour at pixel-space point `(x, y)`: style base colour plus a
/// smooth lattice texture.
fn background(spec: &SceneSpec, lattice: &[[f64; 3]], cell: f64, cells: usize, x: f64, y: f64) -> [f64; 3] {
    let base = STYLE_COLORS[spec.style % STYLE_COLORS.len()];
    let gx = (x / cell).clamp(0.0, (cells - 1) as f64 - 1e-9);
    let gy = (y / cell).clamp(0.0, (cells - 1) as f64 - 1e-9);
    let (ix, iy) = (gx as usize, gy as usize);
    let (fx, fy) = (gx - ix as f64, gy - iy as f64);
    let at = |i: usize, j: usize| lattice[j * cells + i];
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = at(ix, iy)[c] * (1.0 - fx) + at(ix + 1, iy)[c] * fx;
        let bot = at(ix, iy + 1)[c] * (1.0 - fx) + at(ix + 1, iy + 1)[c] * fx;
        *o = base[c] + top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Render one scene from an explicit object list. Later objects are drawn on
/// top.
pub fn render(spec: &SceneSpec, objects: &[SceneObject], rng: &mut Stream) -> (Tensor, Vec<u16>) {
    let s = spec.image_size;
    let cell = 16.0 * s as f64 / 64.0;
    let cells = (s as f64 / cell).ceil() as usize + 2;
    let texture_amp = if spec.ood { 0.3 } else { 0.08 + 0.03 * (spec.style % 3) as f64 };
    let lattice: Vec<[f64; 3]> = (0..cells * cells)
        .map(|_| {
            let v: f64 = rng.random_range(-texture_amp..texture_amp);
            let tint = if spec.ood { rng.random_range(-0.3..0.3) } else { 0.0 };
            [v + tint, v, v - tint]
        })
        .collect();
    let noise_amp = if spec.ood { 0.35 } else { spec.noise };
    let il = spec.illumination;
    let gain: [f64; 3] = if il > 0.0 {
        let g: f64 = rng.random_range(1.0 - il..=1.0 + il);
        std::array::from_fn(|_| g * rng.random_range(1.0 - il / 2.0..=1.0 + il / 2.0))
    } else {
        [1.0; 3]
    };

    let mut image = vec![0.0; s * s * 3];
    let mut mask = vec![0u16; s * s];
    let sub = SUPERSAMPLE as f64;
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            mask[y * s + x] = objects
                .iter()
                .rev()
                .find(|o| o.shape.contains(px, py))
                .map_or(0, |o| o.class);
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let qx = x as f64 + (sx as f64 + 0.5) / sub;
                    let qy = y as f64 + (sy as f64 + 0.5) / sub;
                    let col = objects
                        .iter()
                        .rev()
                        .find(|o| o.shape.contains(qx, qy))
                        .map_or_else(|| background(spec, &lattice, cell, cells, qx, qy), |o| o.color);
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            for c in 0..3 {
                // Irwin-Hall(3) noise: zero mean, bounded, arithmetic only.
                let u: f64 = rng.random::<f64>() + rng.random::<f64>() + rng.random::<f64>() - 1.5;
                let v = acc[c] / (sub * sub) * gain[c] + noise_amp * u;
                image[(y * s + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    (Tensor::new(vec![s, s, 3], image).unwrap(), mask)
}

/// Sample and render one scene. Returns the objects as well so callers can
/// check masks against the analytic shapes.
pub fn gen_scene_with_objects(spec: &SceneSpec, rng: &mut Stream) -> (Tensor, Vec<u16>, Vec<SceneObject>) {
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let objects: Vec<SceneObject> = (0..n).map(|_| sample_object(spec, rng)).collect();
    let (image, mask) = render(spec, &objects, rng);
    (image, mask, objects)
}

pub fn gen_scene(spec: &SceneSpec, rng: &mut Stream) -> (Tensor, Vec<u16>) {
    let (image, mask, _) = gen_scene_with_objects(spec, rng);
    (image, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub labeled: usize,
    /// Held-out labeled scenes (split `val` of the labeled manifest).
    pub val: usize,
    pub unlabeled_clean: usize,
    pub unlabeled_ood: usize,
    /// Number of styles; labeled and clean scenes cycle through them and each
    /// style doubles as one dataset for multi-dataset fine-tuning.
    pub styles: usize,
    pub scene: SceneSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            labeled: 40,
            val: 40,
            unlabeled_clean: 800,
            unlabeled_ood: 0,
            styles: 1,
            scene: SceneSpec::default(),
        }
    }
}

/// Generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub labeled: Vec<Sample>,
    /// Unlabeled pool: clean and OOD scenes interleaved by a seeded shuffle.
    pub pool: Vec<Sample>,
    /// Pool ids that are OOD.
    pub ood_ids: Vec<String>,
}

pub fn style_name(style: usize) -> String {
    format!("style{style}")
}

fn scene_sample(config: &CorpusConfig, seed: u64, id: String, style: usize, ood: bool, split: &str, keep_mask: bool) -> Sample {
    let spec = SceneSpec {
        style,
        ood,
        ..config.scene.clone()
    };
    let mut rng = rng::stream(seed, &id, 0, Slot::Scene);
    let (image, mask) = gen_scene(&spec, &mut rng);
    Sample {
        id,
        image,
        mask: keep_mask.then_some(mask),
        dataset: if ood { "ood".into() } else { style_name(style) },
        split: split.into(),
    }
}

pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.scene.validate()?;
    if config.styles == 0 {
        return Err(Error::Config("styles must be >= 1".into()));
    }
    let t = config.styles;
    let labeled: Vec<Sample> = (0..config.labeled + config.val)
        .into_par_iter()
        .map(|i| {
            let split = if i < config.labeled { "train" } else { "val" };
            scene_sample(config, seed, format!("l{i:06}"), i % t, false, split, true)
        })
        .collect();
    let pool_size = config.unlabeled_clean + config.unlabeled_ood;
    let mut perm_rng = rng::stream(seed, "pool", 0, Slot::Split);
    let perm = rng::permutation(pool_size, &mut perm_rng);
    let pool: Vec<Sample> = (0..pool_size)
        .into_par_iter()
        .map(|i| {
            let ood = perm[i] >= config.unlabeled_clean;
            scene_sample(config, seed, format!("u{i:06}"), i % t, ood, "unlabeled", false)
        })
        .collect();
    let ood_ids = pool
        .iter()
        .filter(|s| s.dataset == "ood")
        .map(|s| s.id.clone())
        .collect();
    Ok(Corpus {
        labeled,
        pool,
        ood_ids,
    })
}

/// Manifest file names written by [`write_corpus`].
pub const LABELED_MANIFEST: &str = "labeled.jsonl";
pub const UNLABELED_MANIFEST: &str = "unlabeled.jsonl";
pub const OOD_MANIFEST: &str = "ood.jsonl";
pub const DATASETS_SPEC: &str = "datasets.json";

/// Write images, masks, the three manifests and a multi-dataset spec.
pub fn write_corpus(corpus: &Corpus, config: &CorpusConfig, outdir: &Path) -> Result<()> {
    if !outdir.is_dir() {
        return Err(Error::io(
            outdir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let labeled: Vec<_> = corpus
        .labeled
        .par_iter()
        .map(|s| data::write_sample(outdir, s))
        .collect::<Result<_>>()?;
    let pool: Vec<_> = corpus
        .pool
        .par_iter()
        .map(|s| data::write_sample(outdir, s))
        .collect::<Result<_>>()?;
    let (ood, clean): (Vec<_>, Vec<_>) = pool.into_iter().partition(|r| r.dataset == "ood");
    Manifest::new(outdir, labeled)?.write(&outdir.join(LABELED_MANIFEST))?;
    Manifest::new(outdir, clean)?.write(&outdir.join(UNLABELED_MANIFEST))?;
    Manifest::new(outdir, ood)?.write(&outdir.join(OOD_MANIFEST))?;

    let datasets: Vec<serde_json::Value> = (0..config.styles)
        .map(|t| {
            serde_json::json!({
                "name": style_name(t),
                "manifest": LABELED_MANIFEST,
                "num_classes": config.scene.num_classes + 1,
                "ignore_label": IGNORE_LABEL,
            })
        })
        .collect();
    let spec = serde_json::json!({ "datasets": datasets });
    let text = serde_json::to_string_pretty(&spec).expect("json") + "\n";
    io::write_bytes(&outdir.join(DATASETS_SPEC), text.as_bytes())
}
