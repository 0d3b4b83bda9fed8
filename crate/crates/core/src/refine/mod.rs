//! Point-guided mask refinement. A rough mask, the image and a Gaussian
//! heatmap of the guiding point are cropped around the loosely expanded
//! mask box, stacked into one `(3 + 1 + C)`-channel input and passed through
//! a small encoder-decoder whose output is pasted back into the image.

mod net;
mod train;

use serde::{Deserialize, Serialize};
use wssis_nn::{ops, Tensor};

pub use net::RefineNet;
pub use net::RefineActivations;
pub use train::{fit_refiner, mean_dice_loss, refine_pseudo_set, refine_samples, train_refiner, RefineSample, RefinerReport};

use crate::annotations::{GuidingPoint, InstanceAnnotation, PointLabel};
use crate::error::{Result, WssisError};
use crate::image::RgbImage;
use crate::mask::BinaryMask;

/// Axis-aligned box in pixels; max edges exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl CropRegion {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Side of the square network input.
    pub input_size: usize,
    pub sigma: f64,
    pub box_scale: f64,
    /// Side of the point-centered crop used when the rough mask is empty.
    pub fallback_box: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub widths: [usize; 4],
    pub decoder_channels: usize,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            sigma: 6.0,
            box_scale: 2.0,
            fallback_box: 64,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            steps: 200,
            widths: [16, 24, 32, 48],
            decoder_channels: 16,
            hflip: true,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WssisError::Config(format!("refiner: {m}")));
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return bad("input_size must be a positive multiple of 16");
        }
        if !(self.box_scale >= 1.0) {
            return bad("box_scale must be at least 1");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if self.fallback_box == 0 || self.batch_size == 0 {
            return bad("fallback_box and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if self.widths.contains(&0) || self.decoder_channels == 0 {
            return bad("channel widths must be positive");
        }
        Ok(())
    }
}

/// Tightest box around the foreground.
pub fn box_from_mask(mask: &BinaryMask) -> Result<CropRegion> {
    let (x_min, y_min, x_max, y_max) = mask.bounds().ok_or(WssisError::EmptyMask)?;
    Ok(CropRegion {
        x_min,
        y_min,
        x_max,
        y_max,
    })
}

/// Scales width and height by `factor` about the box center, then clamps to
/// the image. At least one pixel of extent survives the clamp.
pub fn expand_box(region: CropRegion, factor: f64, width: usize, height: usize) -> CropRegion {
    let axis = |lo: usize, hi: usize, n: usize| {
        let c = (lo + hi) as f64 / 2.0;
        let half = (hi - lo) as f64 * factor / 2.0;
        let a = ((c - half).floor().max(0.0) as usize).min(n - 1);
        let b = ((c + half).ceil() as usize).min(n).max(a + 1);
        (a, b)
    };
    let (x_min, x_max) = axis(region.x_min, region.x_max, width);
    let (y_min, y_max) = axis(region.y_min, region.y_max, height);
    CropRegion {
        x_min,
        y_min,
        x_max,
        y_max,
    }
}

/// Square box of side `side` centered on the point, clamped to the image.
pub fn point_box(x: usize, y: usize, side: usize, width: usize, height: usize) -> CropRegion {
    let half = side / 2;
    let axis = |c: usize, n: usize| {
        let lo = c.saturating_sub(half);
        let hi = (lo + side).min(n);
        (hi.saturating_sub(side).min(lo), hi)
    };
    let (x_min, x_max) = axis(x, width);
    let (y_min, y_max) = axis(y, height);
    CropRegion {
        x_min,
        y_min,
        x_max,
        y_max,
    }
}

fn gaussian(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// `[C, H, W]` heatmap: channel `category - 1` holds an untruncated Gaussian
/// centered on the point, every other channel is zero.
pub fn encode_point_heatmap(point: &PointLabel, height: usize, width: usize, sigma: f64, num_classes: usize) -> Result<Tensor> {
    let full = CropRegion {
        x_min: 0,
        y_min: 0,
        x_max: width,
        y_max: height,
    };
    heatmap_window(point, full, width, height, sigma, num_classes)
}

fn heatmap_window(
    point: &PointLabel,
    region: CropRegion,
    width: usize,
    height: usize,
    sigma: f64,
    num_classes: usize,
) -> Result<Tensor> {
    if point.x >= width || point.y >= height {
        return Err(WssisError::Input(format!(
            "point ({}, {}) lies outside the {width}x{height} image",
            point.x, point.y
        )));
    }
    if point.category == 0 || point.category as usize > num_classes {
        return Err(WssisError::Input(format!("point category {} outside 1..={num_classes}", point.category)));
    }
    let (w, h) = (region.width(), region.height());
    let mut t = Tensor::zeros(&[num_classes, h, w]);
    let ch = t.channel_mut(point.category as usize - 1);
    for v in 0..h {
        for u in 0..w {
            let dx = (region.x_min + u) as f64 - point.x as f64;
            let dy = (region.y_min + v) as f64 - point.y as f64;
            ch[v * w + u] = gaussian(dx, dy, sigma);
        }
    }
    Ok(t)
}

/// Network input for one point together with the crop it was cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineInput {
    /// `[3 + 1 + C, S, S]`: image, rough mask, heatmap.
    pub tensor: Tensor,
    pub crop: CropRegion,
}

impl RefineInput {
    pub fn rough_channel(&self) -> &[f64] {
        self.tensor.channel(3)
    }
}

/// Crop region for a rough mask: the expanded mask box, or a point-centered
/// fallback box when the mask is empty.
pub fn crop_for(rough: &BinaryMask, point: &PointLabel, config: &RefineConfig) -> CropRegion {
    let (w, h) = (rough.width(), rough.height());
    match box_from_mask(rough) {
        Ok(b) => expand_box(b, config.box_scale, w, h),
        Err(_) => point_box(point.x, point.y, config.fallback_box, w, h),
    }
}

/// Crops image, rough mask and heatmap to the crop region and resizes them
/// to `input_size` (bilinear for image and heatmap, nearest for the mask).
pub fn assemble_input(
    image: &RgbImage,
    rough: &BinaryMask,
    point: &PointLabel,
    num_classes: usize,
    config: &RefineConfig,
) -> Result<RefineInput> {
    let (w, h) = (image.width(), image.height());
    if (rough.width(), rough.height()) != (w, h) {
        return Err(WssisError::InvalidShape(format!(
            "rough mask is {}x{} but the image is {w}x{h}",
            rough.width(),
            rough.height()
        )));
    }
    let crop = crop_for(rough, point, config);
    let s = config.input_size;
    let (cw, ch) = (crop.width(), crop.height());
    let heat = heatmap_window(point, crop, w, h, config.sigma, num_classes)?;
    let mut data = Vec::with_capacity((4 + num_classes) * s * s);
    let img = image.to_tensor();
    for c in 0..3 {
        let plane: Vec<f64> = (crop.y_min..crop.y_max)
            .flat_map(|y| (crop.x_min..crop.x_max).map(move |x| (y, x)))
            .map(|(y, x)| img.at3(c, y, x))
            .collect();
        data.extend(ops::resize_bilinear_plane(&plane, ch, cw, s, s));
    }
    let mask = rough.crop(crop.x_min, crop.y_min, crop.x_max, crop.y_max);
    let mask_plane: Vec<f64> = mask.data().iter().map(|&v| f64::from(v)).collect();
    data.extend(ops::resize_nearest_plane(&mask_plane, ch, cw, s, s));
    for c in 0..num_classes {
        data.extend(ops::resize_bilinear_plane(heat.channel(c), ch, cw, s, s));
    }
    Ok(RefineInput {
        tensor: Tensor::from_vec(&[4 + num_classes, s, s], data)?,
        crop,
    })
}

/// Resizes an `S x S` probability map back to the crop, binarizes at 0.5
/// and pastes it into an empty full-size canvas.
pub fn paste_back(probs: &[f64], size: usize, crop: CropRegion, width: usize, height: usize) -> BinaryMask {
    let local = ops::resize_bilinear_plane(probs, size, size, crop.height(), crop.width());
    let mut out = BinaryMask::new(height, width);
    for v in 0..crop.height() {
        for u in 0..crop.width() {
            if local[v * crop.width() + u] > 0.5 {
                out.set(crop.y_min + v, crop.x_min + u, true);
            }
        }
    }
    out
}

/// Result of refining one rough mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub annotation: InstanceAnnotation,
    /// The refiner predicted no foreground and the rough mask was kept.
    pub fell_back: bool,
}

/// Refined annotation for one point. When the refiner predicts nothing the
/// rough mask is kept and `fell_back` is set.
pub fn refine(refiner: &RefineNet, image: &RgbImage, rough: &BinaryMask, point: &PointLabel) -> Result<Refined> {
    let input = assemble_input(image, rough, point, refiner.num_classes(), refiner.config())?;
    let probs = refiner.predict(&input.tensor)?;
    let s = refiner.config().input_size;
    let refined = paste_back(&probs, s, input.crop, image.width(), image.height());
    let fell_back = refined.is_empty();
    let mask = if fell_back { rough } else { &refined };
    let mut annotation = InstanceAnnotation::from_mask(0, point.image_id, point.category, mask)?;
    annotation.empty = mask.is_empty();
    annotation.guiding_point = Some(GuidingPoint { x: point.x, y: point.y });
    Ok(Refined { annotation, fell_back })
}
