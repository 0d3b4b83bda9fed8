use super::config::{NetConfig, PositiveCells};
use crate::error::{Result, WssisError};
use crate::mask::BinaryMask;

/// Instance to assign: category and full-resolution mask.
#[derive(Clone, Debug)]
pub struct TargetInstance {
    pub category: u32,
    pub mask: BinaryMask,
}

/// Positive cells of one level. `labels[row * size + col]` is the category
/// (0 for background) and `instance` the index of the owning instance.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub size: usize,
    pub labels: Vec<u32>,
    pub instance: Vec<Option<usize>>,
}

impl LevelTargets {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.instance
            .iter()
            .enumerate()
            .filter_map(|(cell, inst)| inst.map(|i| (cell / self.size, cell % self.size, i)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub levels: Vec<LevelTargets>,
    /// Per instance, the mask average-pooled to the mask-feature grid.
    pub mask_targets: Vec<Vec<f64>>,
    pub mask_height: usize,
    pub mask_width: usize,
}

impl Targets {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.positives().count()).sum()
    }
}

/// Grid cell containing image coordinate `(x, y)` at grid size `s`.
pub fn cell_of(x: usize, y: usize, height: usize, width: usize, s: usize) -> (usize, usize) {
    ((y * s / height).min(s - 1), (x * s / width).min(s - 1))
}

fn centroid(mask: &BinaryMask) -> (f64, f64) {
    let n = mask.count() as f64;
    let (sy, sx) = mask
        .pixels()
        .fold((0.0, 0.0), |(sy, sx), (y, x)| (sy + y as f64 + 0.5, sx + x as f64 + 0.5));
    (sx / n, sy / n)
}

/// Foreground pixel closest to the centroid.
fn anchor_pixel(mask: &BinaryMask) -> (usize, usize) {
    let (cx, cy) = centroid(mask);
    mask.pixels()
        .min_by(|a, b| {
            let da = (a.1 as f64 + 0.5 - cx).powi(2) + (a.0 as f64 + 0.5 - cy).powi(2);
            let db = (b.1 as f64 + 0.5 - cx).powi(2) + (b.0 as f64 + 0.5 - cy).powi(2);
            da.total_cmp(&db)
        })
        .map(|(y, x)| (x, y))
        .expect("non-empty mask")
}

/// Whether any pixel that `cell_of` maps to `(r, c)` is foreground.
fn cell_has_foreground(mask: &BinaryMask, r: usize, c: usize, s: usize) -> bool {
    let (h, w) = (mask.height(), mask.width());
    let (y0, y1) = ((r * h).div_ceil(s), ((r + 1) * h).div_ceil(s));
    let (x0, x1) = ((c * w).div_ceil(s), ((c + 1) * w).div_ceil(s));
    (y0..y1).any(|y| (x0..x1).any(|x| mask.get(y, x)))
}

/// Average-pools `mask` by `factor` in both directions.
pub fn pool_mask(mask: &BinaryMask, factor: usize) -> Vec<f64> {
    let (oh, ow) = (mask.height() / factor, mask.width() / factor);
    let mut out = vec![0.0; oh * ow];
    for (y, x) in mask.pixels() {
        let (py, px) = (y / factor, x / factor);
        if py < oh && px < ow {
            out[py * ow + px] += 1.0;
        }
    }
    let norm = (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Levels whose scale range contains `sqrt(area)`.
pub fn assigned_levels(area: usize, config: &NetConfig) -> Vec<usize> {
    let scale = (area as f64).sqrt();
    let levels: Vec<usize> = (0..config.levels())
        .filter(|&l| config.scale_ranges[l][0] <= scale && scale <= config.scale_upper(l))
        .collect();
    if levels.is_empty() {
        vec![0]
    } else {
        levels
    }
}

/// Positive cells and mask targets for one image.
///
/// Each instance is assigned to every level whose scale range contains the
/// square root of its area. There, every cell whose center pixel lies inside
/// the mask (any foreground pixel under `PositiveCells::Overlap`, and inside
/// the shrunk center box when `center_shrink` is set)
/// becomes positive. Larger instances are written first so smaller ones win
/// contested cells; an instance left without any cell on an assigned level
/// takes the cell under the foreground pixel nearest its centroid.
pub fn assign_targets(instances: &[TargetInstance], height: usize, width: usize, config: &NetConfig) -> Result<Targets> {
    if height % 4 != 0 || width % 4 != 0 {
        return Err(WssisError::InvalidShape(format!("image {height}x{width} is not divisible by 4")));
    }
    for (i, inst) in instances.iter().enumerate() {
        if inst.mask.is_empty() {
            return Err(WssisError::Input(format!("target instance {i} has an empty mask")));
        }
        if (inst.mask.height(), inst.mask.width()) != (height, width) {
            return Err(WssisError::InvalidShape(format!("target instance {i} mask size differs from the image")));
        }
        if inst.category == 0 || inst.category as usize > config.num_classes {
            return Err(WssisError::Input(format!("target instance {i} has category {}", inst.category)));
        }
    }
    let mut levels: Vec<LevelTargets> = config
        .grid_sizes
        .iter()
        .map(|&s| LevelTargets {
            size: s,
            labels: vec![0; s * s],
            instance: vec![None; s * s],
        })
        .collect();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(instances[i].mask.count()), i));

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); instances.len()];
    for &i in &order {
        let inst = &instances[i];
        let area = inst.mask.count();
        let region = config.center_shrink.map(|eps| {
            let (x0, y0, x1, y1) = inst.mask.bounds().expect("non-empty");
            let (cx, cy) = centroid(&inst.mask);
            let hw = eps * (x1 - x0) as f64 / 2.0;
            let hh = eps * (y1 - y0) as f64 / 2.0;
            (cx - hw, cy - hh, cx + hw, cy + hh)
        });
        let lv = assigned_levels(area, config);
        for &l in &lv {
            let level = &mut levels[l];
            let s = level.size;
            let mut any = false;
            for r in 0..s {
                for c in 0..s {
                    let cy = (r as f64 + 0.5) * height as f64 / s as f64;
                    let cx = (c as f64 + 0.5) * width as f64 / s as f64;
                    let hit = match config.positive_cells {
                        PositiveCells::Center => inst.mask.get((cy.floor() as usize).min(height - 1), (cx.floor() as usize).min(width - 1)),
                        PositiveCells::Overlap => cell_has_foreground(&inst.mask, r, c, s),
                    };
                    if !hit {
                        continue;
                    }
                    if let Some((x0, y0, x1, y1)) = region {
                        if cx < x0 || cx > x1 || cy < y0 || cy > y1 {
                            continue;
                        }
                    }
                    level.labels[r * s + c] = inst.category;
                    level.instance[r * s + c] = Some(i);
                    any = true;
                }
            }
            if !any {
                let (x, y) = anchor_pixel(&inst.mask);
                let (r, c) = cell_of(x, y, height, width, s);
                level.labels[r * s + c] = inst.category;
                level.instance[r * s + c] = Some(i);
            }
        }
        assignments[i] = lv;
    }
    // A smaller instance may have taken every cell of a larger one.
    for (i, inst) in instances.iter().enumerate() {
        let owned = levels.iter().any(|l| l.instance.contains(&Some(i)));
        if !owned {
            let l = assignments[i][0];
            let s = levels[l].size;
            let (x, y) = anchor_pixel(&inst.mask);
            let (r, c) = cell_of(x, y, height, width, s);
            levels[l].labels[r * s + c] = inst.category;
            levels[l].instance[r * s + c] = Some(i);
        }
    }
    Ok(Targets {
        levels,
        mask_targets: instances.iter().map(|inst| pool_mask(&inst.mask, 4)).collect(),
        mask_height: height / 4,
        mask_width: width / 4,
    })
}
