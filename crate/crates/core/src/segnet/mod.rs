//! Point-based instance segmentation network: a small convolutional encoder
//! with a top-down feature pyramid, per-level proposal heads that predict
//! category scores and mask kernels on an `S x S` grid, and a mask branch
//! whose shared feature map turns a kernel into a mask by a 1x1 dynamic
//! convolution.

mod config;
mod infer;
mod model;
mod targets;
mod train;

use std::path::Path;

use wssis_nn::{archive, ops, Tensor};

pub use config::{NetConfig, PositiveCells, TrainSettings, NUM_LEVELS};
pub use infer::{binarize, candidates, infer, infer_detailed, mask_nms, upsample_probabilities, InferOutput};
pub use model::{Activations, OutputGrads, SegNet};
pub use targets::{assign_targets, assigned_levels, cell_of, pool_mask, LevelTargets, TargetInstance, Targets};
pub use train::{compute_loss, samples_from_dataset, train_segnet, train_student, train_teacher, LossBreakdown, TrainReport, TrainSample};

use crate::error::{Result, WssisError};

/// Category confidences and mask kernels of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalGrid {
    /// 1-based level index, finest first.
    pub level: usize,
    pub size: usize,
    /// `[C, S, S]` probabilities.
    pub scores: Tensor,
    /// `[E, S, S]`.
    pub kernels: Tensor,
}

impl ProposalGrid {
    pub fn num_classes(&self) -> usize {
        self.scores.channels()
    }

    /// Score of 1-based `category` at `(row, col)`.
    pub fn score(&self, row: usize, col: usize, category: u32) -> f64 {
        self.scores.at3(category as usize - 1, row, col)
    }

    pub fn kernel(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.kernels.channels()).map(|e| self.kernels.at3(e, row, col)).collect()
    }

    /// Highest-scoring category at a cell; ties go to the smaller id.
    pub fn best(&self, row: usize, col: usize) -> (u32, f64) {
        let mut best = (1, self.score(row, col, 1));
        for c in 2..=self.num_classes() as u32 {
            let s = self.score(row, col, c);
            if s > best.1 {
                best = (c, s);
            }
        }
        best
    }

    pub fn proposal(&self, row: usize, col: usize, category: u32) -> Proposal {
        Proposal {
            level: self.level,
            row,
            col,
            category,
            score: self.score(row, col, category),
            kernel: self.kernel(row, col),
        }
    }
}

/// One grid cell read out as an instance candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub category: u32,
    pub score: f64,
    pub kernel: Vec<f64>,
}

/// `[E, H/4, W/4]` map shared by all proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFeature(pub Tensor);

impl MaskFeature {
    pub fn dim(&self) -> usize {
        self.0.channels()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }
}

/// Per-pixel `kernel . feature` logits, row-major `h x w`.
pub fn dynamic_conv(kernel: &[f64], feature: &Tensor) -> Result<Vec<f64>> {
    if kernel.len() != feature.channels() {
        return Err(WssisError::InvalidShape(format!(
            "kernel has {} entries but the mask feature has {} channels",
            kernel.len(),
            feature.channels()
        )));
    }
    let plane = feature.height() * feature.width();
    let mut out = vec![0.0; plane];
    for (e, &k) in kernel.iter().enumerate() {
        if k == 0.0 {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(feature.channel(e)) {
            *o += k * f;
        }
    }
    Ok(out)
}

/// Soft mask `sigmoid(kernel . feature)` as a `[1, H/4, W/4]` tensor.
pub fn mask_from_kernel(kernel: &[f64], feature: &MaskFeature) -> Result<Tensor> {
    let logits = dynamic_conv(kernel, &feature.0)?;
    Tensor::from_vec(
        &[1, feature.height(), feature.width()],
        logits.into_iter().map(ops::sigmoid).collect(),
    )
    .map_err(WssisError::from)
}

impl SegNet {
    /// Proposal grids (finest first) and the mask feature for one image.
    pub fn predict(&self, input: &Tensor) -> Result<(Vec<ProposalGrid>, MaskFeature)> {
        let acts = self.forward(input)?;
        Ok(Self::readout(acts))
    }

    pub fn readout(acts: Activations) -> (Vec<ProposalGrid>, MaskFeature) {
        let grids = acts
            .heads
            .into_iter()
            .enumerate()
            .map(|(l, h)| ProposalGrid {
                level: l + 1,
                size: h.cat_logits.height(),
                scores: h.cat_logits.map(ops::sigmoid),
                kernels: h.kernels,
            })
            .collect();
        (grids, MaskFeature(acts.mask_feature))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(archive::to_bytes(&self.store, Some(&self.config().to_toml()))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let meta = archive::read_metadata(bytes)?
            .ok_or_else(|| WssisError::Integrity("weights archive has no network config".into()))?;
        let config = NetConfig::from_toml(&meta)?;
        let mut net = SegNet::new(config, 0)?;
        archive::load_into(&mut net.store, bytes)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| WssisError::io(dir.display().to_string(), e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| WssisError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| WssisError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
