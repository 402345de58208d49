//! Procedural shape dataset: ten anti-aliased primitives with position,
//! scale and rotation jitter.
//!
//! Jitter bounds: centre offset within +-3 px on each axis, scale in
//! `[0.8, 1.1]`, rotation within +-15 degrees. Background is -1 and full
//! coverage is +1.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConceptId, ConceptVocab};
use crate::error::{Error, Result};
use crate::io::write_png;
use crate::tensor::ImageTensor;

pub const SHAPE_CLASSES: [&str; 10] = [
    "circle", "square", "triangle", "cross", "ring", "star", "crescent", "bar", "diamond", "spiral",
];

pub const IMAGE_SIZE: usize = 32;
pub const MAX_SHIFT: f64 = 3.0;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.1);
pub const MAX_ROTATION_DEG: f64 = 15.0;
/// Radius in pixels of a shape at scale 1.
const BASE_RADIUS: f64 = 11.0;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub rotation_deg: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        rotation_deg: 0.0,
    };

    pub fn sample<G: Rng + ?Sized>(rng: &mut G) -> Self {
        Self {
            dx: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            dy: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }
}

pub fn shape_vocab() -> ConceptVocab {
    ConceptVocab::new(SHAPE_CLASSES.iter().map(|s| s.to_string()).collect()).expect("distinct names")
}

/// Membership test in the shape's own frame: `u` right, `v` up, unit radius.
fn inside(class: ConceptId, u: f64, v: f64) -> bool {
    let r = u.hypot(v);
    match class {
        0 => r <= 0.8,
        1 => u.abs() <= 0.7 && v.abs() <= 0.7,
        2 => v >= -0.6 && v <= 0.8 - 1.75 * u.abs(),
        3 => (u.abs() <= 0.25 && v.abs() <= 0.85) || (v.abs() <= 0.25 && u.abs() <= 0.85),
        4 => (0.5..=0.85).contains(&r),
        5 => {
            // Five points, one straight up; radius linear in angle between tips.
            let theta = v.atan2(u) - PI / 2.0;
            let seg = TAU / 5.0;
            let phase = (theta.rem_euclid(seg) / seg - 0.5).abs() * 2.0;
            r <= 0.38 + (0.92 - 0.38) * phase
        }
        6 => r <= 0.8 && (u - 0.3).hypot(v - 0.25) > 0.62,
        7 => u.abs() <= 0.9 && v.abs() <= 0.3,
        8 => u.abs() + v.abs() <= 0.85,
        9 => {
            // Two-turn Archimedean arm, counter-clockwise outward.
            if !(0.06..=0.92).contains(&r) {
                return false;
            }
            let pitch = 0.9 / 2.0;
            let b = pitch / TAU;
            let theta = v.atan2(u).rem_euclid(TAU);
            (0..3).any(|k| (r - b * (theta + TAU * k as f64)).abs() <= 0.13)
        }
        _ => false,
    }
}

/// Renders class `class` with explicit jitter.
pub fn render_with_jitter(class: ConceptId, jitter: &Jitter) -> Result<ImageTensor> {
    if class >= SHAPE_CLASSES.len() {
        return Err(Error::UnknownConcept {
            id: class,
            size: SHAPE_CLASSES.len(),
        });
    }
    let n = IMAGE_SIZE;
    let centre = n as f64 / 2.0;
    let (cx, cy) = (centre + jitter.dx, centre + jitter.dy);
    let radius = BASE_RADIUS * jitter.scale;
    let (sin, cos) = jitter.rotation_deg.to_radians().sin_cos();
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut data = Vec::with_capacity(n * n);
    for py in 0..n {
        for px in 0..n {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) * step - cx) / radius;
                    let y = (cy - (py as f64 + (sy as f64 + 0.5) * step)) / radius;
                    // Undo the rotation to land in the shape frame.
                    let u = cos * x + sin * y;
                    let v = -sin * x + cos * y;
                    hits += inside(class, u, v) as usize;
                }
            }
            let coverage = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            data.push((2.0 * coverage - 1.0) as f32);
        }
    }
    ImageTensor::from_vec(1, n, n, data)
}

/// Draws jitter from `rng` and renders.
pub fn render_shape<G: Rng + ?Sized>(class: ConceptId, rng: &mut G) -> Result<ImageTensor> {
    render_with_jitter(class, &Jitter::sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub label: ConceptId,
    pub label_name: String,
    pub seed: u64,
    pub jitter: Jitter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<ConceptId>,
    pub items: Vec<ItemMeta>,
    pub seed: u64,
    pub vocab: ConceptVocab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    n_per_class: usize,
    classes: Vec<String>,
    items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestItem {
    file: String,
    #[serde(flatten)]
    meta: ItemMeta,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// `n_per_class` items of every class in a seeded shuffled order.
pub fn make_dataset(n_per_class: usize, seed: u64) -> Result<ShapeDataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<(ConceptId, u64)> = (0..n_per_class)
        .flat_map(|_| 0..SHAPE_CLASSES.len())
        .map(|c| (c, 0))
        .collect();
    for slot in order.iter_mut() {
        slot.1 = rng.random();
    }
    order.shuffle(&mut rng);
    let vocab = shape_vocab();
    let mut ds = ShapeDataset {
        images: Vec::with_capacity(order.len()),
        labels: Vec::with_capacity(order.len()),
        items: Vec::with_capacity(order.len()),
        seed,
        vocab,
    };
    for (label, item_seed) in order {
        let jitter = Jitter::sample(&mut ChaCha8Rng::seed_from_u64(item_seed));
        ds.images.push(render_with_jitter(label, &jitter)?);
        ds.labels.push(label);
        ds.items.push(ItemMeta {
            label,
            label_name: SHAPE_CLASSES[label].to_string(),
            seed: item_seed,
            jitter,
        });
    }
    Ok(ds)
}

impl ShapeDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.vocab.len()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Writes one PNG per item plus `manifest.json`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut items = Vec::with_capacity(self.len());
        for (i, (img, meta)) in self.images.iter().zip(&self.items).enumerate() {
            let file = format!("{i:05}_{}.png", meta.label_name);
            write_png(&dir.join(&file), img)?;
            items.push(ManifestItem {
                file,
                meta: meta.clone(),
            });
        }
        let n_per_class = self.class_histogram().into_iter().max().unwrap_or(0);
        let manifest = Manifest {
            seed: self.seed,
            n_per_class,
            classes: self.vocab.names.clone(),
            items,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds a dumped dataset from its manifest. Images are re-rendered
    /// from the recorded jitter, so they are exact rather than 8-bit.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let vocab = ConceptVocab::new(manifest.classes)?;
        if vocab != shape_vocab() {
            return Err(Error::InvalidArgument("manifest classes differ from the shape classes".into()));
        }
        if manifest.items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut ds = ShapeDataset {
            images: Vec::with_capacity(manifest.items.len()),
            labels: Vec::with_capacity(manifest.items.len()),
            items: Vec::with_capacity(manifest.items.len()),
            seed: manifest.seed,
            vocab,
        };
        for item in manifest.items {
            ds.images.push(render_with_jitter(item.meta.label, &item.meta.jitter)?);
            ds.labels.push(item.meta.label);
            ds.items.push(item.meta);
        }
        Ok(ds)
    }
}
