use serde::{Deserialize, Serialize};

use crate::error::{Result, WssisError};

/// Architecture, target assignment, loss, inference and training settings
/// of the segmentation network.
/// Which grid cells an instance claims on its assigned levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveCells {
    /// Cells whose center pixel is foreground.
    #[default]
    Center,
    /// Cells containing any foreground pixel.
    Overlap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub num_classes: usize,
    /// Channel widths of the stem and the four encoder stages.
    pub backbone_widths: [usize; 5],
    pub fpn_channels: usize,
    pub head_channels: usize,
    /// Mask-feature width E, which is also the kernel length.
    pub kernel_dim: usize,
    /// Grid size per pyramid level, finest level first.
    pub grid_sizes: Vec<usize>,
    /// `[lo, hi]` range of `sqrt(area)` (input pixels) per level. A
    /// non-positive `hi` means unbounded.
    pub scale_ranges: Vec<[f64; 2]>,
    /// When set, only cells inside the instance box shrunk by this factor
    /// about the mask centroid are positive. Unset means every cell whose
    /// center lies inside the mask.
    pub center_shrink: Option<f64>,
    pub positive_cells: PositiveCells,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub mask_loss_weight: f64,
    /// Prior probability the category bias is initialized to.
    pub prior_prob: f64,
    pub mask_threshold: f64,
    pub nms_iou: f64,
    /// Candidates kept (by score) before masks are computed.
    pub max_candidates: usize,
    pub max_detections: usize,
    pub train: TrainSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
    pub hflip: bool,
    /// Largest random translation in pixels.
    pub max_shift: usize,
    /// Random channel permutation and per-channel inversion.
    pub color_augment: bool,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            warmup_steps: 30,
            grad_clip: 5.0,
            hflip: true,
            max_shift: 6,
            color_augment: true,
            seed: 0,
        }
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            backbone_widths: [16, 24, 32, 48, 64],
            fpn_channels: 32,
            head_channels: 32,
            kernel_dim: 16,
            grid_sizes: vec![40, 36, 24, 16, 12],
            scale_ranges: vec![[0.0, 8.0], [4.0, 16.0], [8.0, 32.0], [16.0, 64.0], [32.0, 0.0]],
            center_shrink: None,
            positive_cells: PositiveCells::Center,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            mask_loss_weight: 3.0,
            prior_prob: 0.01,
            mask_threshold: 0.5,
            nms_iou: 0.6,
            max_candidates: 256,
            max_detections: 100,
            train: TrainSettings::default(),
        }
    }
}

pub const NUM_LEVELS: usize = 5;

impl NetConfig {
    pub fn levels(&self) -> usize {
        self.grid_sizes.len()
    }

    pub fn scale_upper(&self, level: usize) -> f64 {
        let hi = self.scale_ranges[level][1];
        if hi > 0.0 {
            hi
        } else {
            f64::INFINITY
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WssisError::Config(format!("segnet: {m}")));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.grid_sizes.len() != NUM_LEVELS || self.scale_ranges.len() != NUM_LEVELS {
            return bad(format!("exactly {NUM_LEVELS} grid sizes and scale ranges are required"));
        }
        if self.grid_sizes.contains(&0) || self.grid_sizes.windows(2).any(|w| w[0] <= w[1]) {
            return bad(format!("grid sizes {:?} must be positive and strictly decreasing", self.grid_sizes));
        }
        if self.scale_ranges[0][0] > 0.0 {
            return bad("the first scale range must start at 0".into());
        }
        for l in 0..NUM_LEVELS {
            if self.scale_ranges[l][0] > self.scale_upper(l) {
                return bad(format!("scale range {l} is inverted"));
            }
            if l > 0 && self.scale_ranges[l][0] > self.scale_upper(l - 1) {
                return bad(format!("scale ranges leave a gap before level {}", l + 1));
            }
        }
        if self.scale_upper(NUM_LEVELS - 1).is_finite() {
            return bad("the last scale range must be unbounded".into());
        }
        if [self.fpn_channels, self.head_channels, self.kernel_dim].contains(&0)
            || self.backbone_widths.contains(&0)
        {
            return bad("channel widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("mask_threshold and nms_iou must lie in [0, 1]".into());
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad("prior_prob must lie in (0, 1)".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.train.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NetConfig = toml::from_str(text).map_err(|e| WssisError::Parse {
            context: "segnet config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
