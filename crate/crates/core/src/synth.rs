//! Synthetic shapes: small RGB images of disks, squares and triangles with
//! exact instance masks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{Category, CocoDocument, Dataset, ImageInfo, InstanceAnnotation};
use crate::error::{Result, WssisError};
use crate::image::RgbImage;
use crate::mask::BinaryMask;
use crate::rng::{derive_seed, rng_from};

pub const SHAPE_NAMES: [&str; 3] = ["disk", "square", "triangle"];

const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disk, Shape::Square, Shape::Triangle];

    pub fn category(self) -> u32 {
        match self {
            Shape::Disk => 1,
            Shape::Square => 2,
            Shape::Triangle => 3,
        }
    }

    /// Rasterizes the shape with bounding extent `size` and top-left corner
    /// `(x0, y0)`. A pixel is foreground when its center lies inside.
    pub fn rasterize(self, height: usize, width: usize, x0: f64, y0: f64, size: f64) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| {
            let (px, py) = (x as f64 + 0.5 - x0, y as f64 + 0.5 - y0);
            match self {
                Shape::Disk => {
                    let r = size / 2.0;
                    (px - r).powi(2) + (py - r).powi(2) <= r * r
                }
                Shape::Square => (0.0..size).contains(&px) && (0.0..size).contains(&py),
                // Apex at the top center, base along the bottom edge.
                Shape::Triangle => {
                    (0.0..size).contains(&py) && (px - size / 2.0).abs() <= py / 2.0
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Bounding extent of a shape in pixels, inclusive range.
    pub min_size: usize,
    pub max_size: usize,
    /// Largest permitted mask IoU between any two placed shapes.
    pub overlap_allowance: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 100,
            width: 64,
            height: 64,
            min_instances: 1,
            max_instances: 4,
            min_size: 8,
            max_size: 26,
            overlap_allowance: 0.1,
            noise_std: 6.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WssisError::Config(format!("synth: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if self.min_instances > self.max_instances {
            return bad("min_instances exceeds max_instances");
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return bad("size range must satisfy 2 <= min_size <= max_size");
        }
        if self.max_size > self.width.min(self.height) {
            return bad("max_size does not fit in the image");
        }
        if !(0.0..=1.0).contains(&self.overlap_allowance) {
            return bad("overlap_allowance must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        Ok(())
    }
}

/// Generated dataset plus the number of instances that could not be placed.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized {
    pub dataset: Dataset,
    pub skipped_instances: usize,
}

pub fn categories() -> Vec<Category> {
    SHAPE_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| Category {
            id: i as u32 + 1,
            name: (*name).to_string(),
        })
        .collect()
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter().zip(b).map(|(&x, y)| x.abs_diff(y) as u32).sum()
}

fn random_color(rng: &mut impl Rng, avoid: &[[u8; 3]]) -> [u8; 3] {
    loop {
        let c = [rng.random(), rng.random(), rng.random()];
        if avoid.iter().all(|&a| color_distance(a, c) >= 150) {
            return c;
        }
    }
}

struct Placed {
    amodal: BinaryMask,
    visible: BinaryMask,
    category: u32,
}

/// Draws one image. Returns the image, its instances (visible masks, in
/// drawing order) and the number of skipped placements.
fn generate_image(spec: &SynthSpec, seed: u64) -> (RgbImage, Vec<(u32, BinaryMask)>, usize) {
    let mut rng = rng_from(seed);
    let (h, w) = (spec.height, spec.width);
    let background = random_color(&mut rng, &[]);
    let n = rng.random_range(spec.min_instances..=spec.max_instances);
    let mut placed: Vec<Placed> = Vec::new();
    let mut colors = vec![background];
    let mut skipped = 0;
    for _ in 0..n {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let mut accepted = None;
        for _ in 0..MAX_REJECTIONS {
            let size = rng.random_range(spec.min_size..=spec.max_size);
            let x0 = rng.random_range(0..=w - size) as f64;
            let y0 = rng.random_range(0..=h - size) as f64;
            let mask = shape.rasterize(h, w, x0, y0, size as f64);
            if mask.is_empty() {
                continue;
            }
            let fits = placed.iter().all(|p| {
                let iou = p.amodal.iou(&mask).expect("same shape");
                let (inter, _) = p.visible.overlap(&mask).expect("same shape");
                // Earlier shapes must stay mostly visible once covered.
                iou <= spec.overlap_allowance && 2 * (p.visible.count() - inter) >= p.amodal.count()
            });
            if fits {
                accepted = Some(mask);
                break;
            }
        }
        match accepted {
            Some(mask) => {
                for p in &mut placed {
                    p.visible.subtract(&mask).expect("same shape");
                }
                placed.push(Placed {
                    visible: mask.clone(),
                    amodal: mask,
                    category: shape.category(),
                });
            }
            None => skipped += 1,
        }
    }

    let mut canvas = vec![background; h * w];
    for p in &placed {
        let color = random_color(&mut rng, &colors);
        colors.push(color);
        for (y, x) in p.amodal.pixels() {
            canvas[y * w + x] = color;
        }
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let base = canvas[y * w + x];
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = base[c] as f64
                    + if spec.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(y, x, px);
        }
    }
    let instances = placed.into_iter().map(|p| (p.category, p.visible)).collect();
    (img, instances, skipped)
}

/// Generates `spec.n_images` images with ids `1..=n`. Deterministic in
/// `spec.seed`; each image uses its own derived seed.
pub fn generate(spec: &SynthSpec) -> Result<Synthesized> {
    spec.validate()?;
    let mut doc = CocoDocument {
        categories: categories(),
        ..Default::default()
    };
    let mut pixels = BTreeMap::new();
    let mut skipped_instances = 0;
    let mut next_ann = 1u64;
    for i in 0..spec.n_images {
        let id = i as u64 + 1;
        let (img, instances, skipped) = generate_image(spec, derive_seed(spec.seed, id));
        skipped_instances += skipped;
        doc.images.push(ImageInfo {
            id,
            file_name: format!("images/{id:06}.png"),
            width: spec.width,
            height: spec.height,
        });
        for (category, mask) in instances {
            if mask.is_empty() {
                skipped_instances += 1;
                continue;
            }
            doc.annotations.push(InstanceAnnotation::from_mask(next_ann, id, category, &mask)?);
            next_ann += 1;
        }
        pixels.insert(id, img);
    }
    doc.validate()?;
    Ok(Synthesized {
        dataset: Dataset { doc, pixels },
        skipped_instances,
    })
}
