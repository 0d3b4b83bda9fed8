use std::sync::Arc;

use rand::Rng;

use super::{InstanceAnnotation, PointLabel};
use crate::error::{Result, WssisError};
use crate::registry::Registry;
use crate::rng::rng_from;

/// Centroid of the mask (per-axis mean, rounded half-up). When that pixel is
/// background the nearest foreground pixel is returned instead; distance ties
/// go to the smallest row, then the smallest column.
pub fn centroid_point(annotation: &InstanceAnnotation) -> Result<PointLabel> {
    let mask = annotation.decode_mask()?;
    let n = mask.count();
    if n == 0 {
        return Err(WssisError::DegenerateAnnotation { id: annotation.id });
    }
    let (sy, sx) = mask
        .pixels()
        .fold((0usize, 0usize), |(sy, sx), (y, x)| (sy + y, sx + x));
    let cy = ((sy as f64 / n as f64) + 0.5).floor() as usize;
    let cx = ((sx as f64 / n as f64) + 0.5).floor() as usize;
    let (cy, cx) = (cy.min(mask.height() - 1), cx.min(mask.width() - 1));
    let (y, x) = if mask.get(cy, cx) {
        (cy, cx)
    } else {
        // pixels() is row-major, so min_by_key keeps the smallest (row, col) on ties.
        mask.pixels()
            .min_by_key(|&(y, x)| {
                let dy = y as i64 - cy as i64;
                let dx = x as i64 - cx as i64;
                dy * dy + dx * dx
            })
            .expect("non-empty mask")
    };
    Ok(PointLabel {
        image_id: annotation.image_id,
        x,
        y,
        category: annotation.category,
        source_instance_id: Some(annotation.id),
    })
}

/// Uniformly random foreground pixel, deterministic in `(annotation, seed)`.
pub fn random_point(annotation: &InstanceAnnotation, seed: u64) -> Result<PointLabel> {
    let mask = annotation.decode_mask()?;
    let n = mask.count();
    if n == 0 {
        return Err(WssisError::DegenerateAnnotation { id: annotation.id });
    }
    let pick = rng_from(seed).random_range(0..n);
    let (y, x) = mask.pixels().nth(pick).expect("index below count");
    Ok(PointLabel {
        image_id: annotation.image_id,
        x,
        y,
        category: annotation.category,
        source_instance_id: Some(annotation.id),
    })
}

/// Strategy deriving a point label from a mask annotation.
pub trait PointSampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn sample(&self, annotation: &InstanceAnnotation, seed: u64) -> Result<PointLabel>;
}

pub struct CentroidSampler;

impl PointSampler for CentroidSampler {
    fn name(&self) -> &'static str {
        "centroid"
    }

    fn sample(&self, annotation: &InstanceAnnotation, _seed: u64) -> Result<PointLabel> {
        centroid_point(annotation)
    }
}

pub struct RandomSampler;

impl PointSampler for RandomSampler {
    fn name(&self) -> &'static str {
        "random"
    }

    fn sample(&self, annotation: &InstanceAnnotation, seed: u64) -> Result<PointLabel> {
        random_point(annotation, seed)
    }
}

/// Registry with the built-in `centroid` and `random` samplers.
pub fn point_sampler_registry() -> Registry<dyn PointSampler> {
    let mut r: Registry<dyn PointSampler> = Registry::new("point mode");
    r.register("centroid", Arc::new(CentroidSampler));
    r.register("random", Arc::new(RandomSampler));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;

    fn ann(mask: &BinaryMask, category: u32) -> InstanceAnnotation {
        InstanceAnnotation::from_mask(5, 1, category, mask).unwrap()
    }

    #[test]
    fn single_pixel_centroid() {
        let m = BinaryMask::from_fn(3, 3, |y, x| y == 1 && x == 1);
        let p = centroid_point(&ann(&m, 1)).unwrap();
        assert_eq!((p.x, p.y), (1, 1));
        assert_eq!(p.source_instance_id, Some(5));
    }

    #[test]
    fn full_square_rounds_half_up() {
        let m = BinaryMask::from_fn(4, 4, |_, _| true);
        let p = centroid_point(&ann(&m, 2)).unwrap();
        assert_eq!((p.x, p.y, p.category), (2, 2, 2));
    }

    /// Brute force: scan every foreground pixel for the smallest squared
    /// distance to the rounded mean, row-major so ties keep the first hit.
    fn nearest_foreground_oracle(m: &BinaryMask, cy: usize, cx: usize) -> (usize, usize) {
        let mut best = None;
        let mut best_d = i64::MAX;
        for y in 0..m.height() {
            for x in 0..m.width() {
                if !m.get(y, x) {
                    continue;
                }
                let d = (y as i64 - cy as i64).pow(2) + (x as i64 - cx as i64).pow(2);
                if d < best_d {
                    best_d = d;
                    best = Some((y, x));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn concave_c_shape_snaps_to_foreground() {
        // C opening to the right: left bar plus top and bottom arms.
        let m = BinaryMask::from_fn(9, 9, |y, x| {
            (1..8).contains(&y) && (1..8).contains(&x) && (x <= 2 || y <= 2 || y >= 6)
        });
        let a = ann(&m, 3);
        let n = m.count() as f64;
        let my = m.pixels().map(|(y, _)| y as f64).sum::<f64>() / n;
        let mx = m.pixels().map(|(_, x)| x as f64).sum::<f64>() / n;
        let (cy, cx) = ((my + 0.5).floor() as usize, (mx + 0.5).floor() as usize);
        assert!(!m.get(cy, cx), "mean must fall in the hole for this fixture");
        let p = centroid_point(&a).unwrap();
        assert!(m.get(p.y, p.x));
        assert_eq!((p.y, p.x), nearest_foreground_oracle(&m, cy, cx));
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let a = ann(&BinaryMask::new(4, 4), 1);
        assert!(matches!(centroid_point(&a), Err(WssisError::DegenerateAnnotation { id: 5 })));
        assert!(matches!(random_point(&a, 1), Err(WssisError::DegenerateAnnotation { .. })));
    }

    #[test]
    fn random_point_is_deterministic_and_uniform() {
        let single = BinaryMask::from_fn(5, 5, |y, x| y == 3 && x == 4);
        for seed in 0..10 {
            let p = random_point(&ann(&single, 1), seed).unwrap();
            assert_eq!((p.y, p.x), (3, 4));
        }
        let two = BinaryMask::from_fn(4, 4, |y, x| (y, x) == (0, 1) || (y, x) == (2, 3));
        let a = ann(&two, 1);
        assert_eq!(random_point(&a, 42).unwrap(), random_point(&a, 42).unwrap());
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|&s| random_point(&a, s).unwrap().y == 0)
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn registry_resolves_builtin_samplers() {
        let r = point_sampler_registry();
        assert_eq!(r.get("centroid").unwrap().name(), "centroid");
        assert_eq!(r.get("random").unwrap().name(), "random");
        assert!(r.get("corner").is_err());
    }
}
