//! Pseudo-label generation from a trained network: confidence thresholding,
//! thresholding filtered by image-level labels, and point guidance where
//! every point reads its mask from the pyramid level most confident about
//! the point's category.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annotations::{CocoDocument, Dataset, GuidingPoint, InstanceAnnotation, PointLabel};
use crate::error::{Result, WssisError};
use crate::image::RgbImage;
use crate::eval::{evaluate, ApReport, EvalParams};
use crate::registry::Registry;
use crate::segnet::{
    assigned_levels, binarize, cell_of, infer_detailed, mask_from_kernel, upsample_probabilities, MaskFeature, Proposal,
    ProposalGrid, SegNet,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenerationMode {
    Threshold { tau: f64 },
    ImageLevelFilter { tau: f64 },
    PointGuided,
}

impl Default for GenerationMode {
    fn default() -> Self {
        GenerationMode::PointGuided
    }
}

impl GenerationMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            GenerationMode::Threshold { tau } | GenerationMode::ImageLevelFilter { tau } if !(0.0..=1.0).contains(tau) => {
                Err(WssisError::Config(format!("pseudo-label threshold {tau} is outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Parses `point_guided`, `threshold:0.3` or `image_level:0.3`.
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, tau) = match text.split_once(':') {
            Some((k, t)) => {
                let tau: f64 = t
                    .trim()
                    .parse()
                    .map_err(|_| WssisError::Config(format!("bad threshold in pseudo mode `{text}`")))?;
                (k.trim(), Some(tau))
            }
            None => (text.trim(), None),
        };
        let mode = match (kind, tau) {
            ("point_guided", None) => GenerationMode::PointGuided,
            ("threshold", t) => GenerationMode::Threshold { tau: t.unwrap_or(0.3) },
            ("image_level", t) | ("image_level_filter", t) => GenerationMode::ImageLevelFilter { tau: t.unwrap_or(0.3) },
            _ => {
                return Err(WssisError::Config(format!(
                    "unknown pseudo mode `{text}` (expected point_guided, threshold[:tau], image_level[:tau])"
                )))
            }
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl fmt::Display for GenerationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenerationMode::Threshold { tau } => write!(f, "threshold:{tau}"),
            GenerationMode::ImageLevelFilter { tau } => write!(f, "image_level:{tau}"),
            GenerationMode::PointGuided => f.write_str("point_guided"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    /// Thresholded proposals before NMS, summed over images.
    pub pre_nms_proposals: usize,
    /// Point-guided annotations whose mask came out empty.
    pub empty_masks: usize,
    /// Images missing from the category map during filtering.
    pub missing_images: usize,
    /// Refined masks that came out empty and kept the rough mask.
    #[serde(default)]
    pub refine_fallbacks: usize,
}

/// Pseudo annotations per image. Images without annotations map to an
/// empty list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub mode: String,
    pub images: BTreeMap<u64, Vec<InstanceAnnotation>>,
    pub stats: GenerationStats,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn annotations(&self) -> impl Iterator<Item = &InstanceAnnotation> {
        self.images.values().flatten()
    }

    /// Renumbers annotation ids `1..` in image order.
    pub fn renumber(&mut self) {
        let mut next = 1;
        for a in self.images.values_mut().flatten() {
            a.id = next;
            next += 1;
        }
    }

    /// Document over this set's images, with image records and categories
    /// taken from `base`.
    pub fn to_document(&self, base: &CocoDocument) -> CocoDocument {
        let ids: BTreeSet<u64> = self.images.keys().copied().collect();
        let mut doc = base.subset(&ids);
        doc.annotations = self.annotations().cloned().collect();
        doc.point_labels.clear();
        doc
    }

    pub fn from_document(doc: &CocoDocument, mode: &str) -> Self {
        let mut images: BTreeMap<u64, Vec<InstanceAnnotation>> = doc.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &doc.annotations {
            images.entry(a.image_id).or_default().push(a.clone());
        }
        Self {
            mode: mode.to_string(),
            images,
            stats: GenerationStats::default(),
        }
    }
}

/// Grid cell of `(x, y)` at grid size `s`: `floor(coord * s / dim)`, clamped.
pub fn rescale_to_cell(x: usize, y: usize, height: usize, width: usize, s: usize) -> (usize, usize) {
    cell_of(x, y, height, width, s)
}

/// Level (1-based) whose cell under the point scores highest for the
/// point's category, and the proposal there. Ties go to the finer level.
pub fn select_level(point: &PointLabel, grids: &[ProposalGrid], height: usize, width: usize) -> Result<(usize, Proposal)> {
    if grids.is_empty() {
        return Err(WssisError::Input("no proposal grids to select from".into()));
    }
    check_point(point, grids, height, width)?;
    let mut best: Option<(usize, f64, usize, usize)> = None;
    for (i, g) in grids.iter().enumerate() {
        let (row, col) = rescale_to_cell(point.x, point.y, height, width, g.size);
        let s = g.score(row, col, point.category);
        if best.is_none_or(|b| s > b.1) {
            best = Some((i, s, row, col));
        }
    }
    let (i, _, row, col) = best.expect("non-empty grids");
    Ok((grids[i].level, grids[i].proposal(row, col, point.category)))
}

fn check_point(point: &PointLabel, grids: &[ProposalGrid], height: usize, width: usize) -> Result<()> {
    if point.x >= width || point.y >= height {
        return Err(WssisError::Input(format!(
            "point ({}, {}) lies outside the {width}x{height} image",
            point.x, point.y
        )));
    }
    let c = grids.first().map_or(0, |g| g.num_classes());
    if point.category == 0 || point.category as usize > c {
        return Err(WssisError::Input(format!("point category {} outside 1..={c}", point.category)));
    }
    Ok(())
}

/// Extra information a level selector may use.
#[derive(Clone, Debug, Default)]
pub struct SelectionContext {
    /// Ground-truth area of the instance the point was derived from.
    pub gt_area: Option<usize>,
    pub scale_ranges: Vec<[f64; 2]>,
}

/// Strategy choosing the pyramid levels a point's mask is read from.
pub trait LevelSelector: Send + Sync {
    fn name(&self) -> &str;
    /// 1-based levels, each producing one annotation.
    fn select(
        &self,
        point: &PointLabel,
        grids: &[ProposalGrid],
        height: usize,
        width: usize,
        ctx: &SelectionContext,
    ) -> Result<Vec<usize>>;
}

/// Argmax of the category score over levels.
pub struct AdaptiveSelector;

impl LevelSelector for AdaptiveSelector {
    fn name(&self) -> &str {
        "adaptive"
    }

    fn select(&self, point: &PointLabel, grids: &[ProposalGrid], height: usize, width: usize, _: &SelectionContext) -> Result<Vec<usize>> {
        Ok(vec![select_level(point, grids, height, width)?.0])
    }
}

/// Always the same level.
pub struct FixedLevelSelector {
    pub level: usize,
    name: String,
}

impl FixedLevelSelector {
    pub fn new(level: usize) -> Self {
        Self {
            level,
            name: format!("level{level}"),
        }
    }
}

impl LevelSelector for FixedLevelSelector {
    fn name(&self) -> &str {
        &self.name
    }

    fn select(&self, point: &PointLabel, grids: &[ProposalGrid], height: usize, width: usize, _: &SelectionContext) -> Result<Vec<usize>> {
        check_point(point, grids, height, width)?;
        if !(1..=grids.len()).contains(&self.level) {
            return Err(WssisError::Config(format!("level {} does not exist", self.level)));
        }
        Ok(vec![self.level])
    }
}

/// One annotation from every level.
pub struct AllLevelsSelector;

impl LevelSelector for AllLevelsSelector {
    fn name(&self) -> &str {
        "all"
    }

    fn select(&self, point: &PointLabel, grids: &[ProposalGrid], height: usize, width: usize, _: &SelectionContext) -> Result<Vec<usize>> {
        check_point(point, grids, height, width)?;
        Ok(grids.iter().map(|g| g.level).collect())
    }
}

/// Levels whose scale range fits the ground-truth instance size; among
/// those, the most confident one.
pub struct GtSizeSelector;

impl LevelSelector for GtSizeSelector {
    fn name(&self) -> &str {
        "gt_size"
    }

    fn select(&self, point: &PointLabel, grids: &[ProposalGrid], height: usize, width: usize, ctx: &SelectionContext) -> Result<Vec<usize>> {
        let area = ctx
            .gt_area
            .ok_or_else(|| WssisError::Config("gt_size selection needs ground-truth areas".into()))?;
        let cfg = crate::segnet::NetConfig {
            scale_ranges: ctx.scale_ranges.clone(),
            grid_sizes: grids.iter().map(|g| g.size).collect(),
            ..Default::default()
        };
        let candidates: Vec<ProposalGrid> = assigned_levels(area, &cfg)
            .into_iter()
            .map(|l| grids[l].clone())
            .collect();
        Ok(vec![select_level(point, &candidates, height, width)?.0])
    }
}

/// `adaptive`, `all`, `gt_size` and `level1`..`level5`.
pub fn level_selector_registry() -> Registry<dyn LevelSelector> {
    let mut r: Registry<dyn LevelSelector> = Registry::new("level selector");
    r.register("adaptive", Arc::new(AdaptiveSelector));
    r.register("all", Arc::new(AllLevelsSelector));
    r.register("gt_size", Arc::new(GtSizeSelector));
    for l in 1..=crate::segnet::NUM_LEVELS {
        let s = FixedLevelSelector::new(l);
        r.register(s.name.clone(), Arc::new(s));
    }
    r
}

/// Network outputs for one image, reusable across points.
struct ImageOutputs {
    grids: Vec<ProposalGrid>,
    feature: MaskFeature,
}

fn point_annotation(
    net: &SegNet,
    out: &ImageOutputs,
    point: &PointLabel,
    level: usize,
    height: usize,
    width: usize,
) -> Result<InstanceAnnotation> {
    let g = &out.grids[level - 1];
    let (row, col) = rescale_to_cell(point.x, point.y, height, width, g.size);
    let proposal = g.proposal(row, col, point.category);
    let soft = mask_from_kernel(&proposal.kernel, &out.feature)?;
    let mask = binarize(
        &upsample_probabilities(&soft, height, width),
        height,
        width,
        net.config().mask_threshold,
    );
    let mut ann = InstanceAnnotation::from_mask(0, point.image_id, point.category, &mask)?.with_score(proposal.score);
    ann.source_level = Some(level);
    ann.guiding_point = Some(GuidingPoint { x: point.x, y: point.y });
    ann.empty = mask.is_empty();
    Ok(ann)
}

/// One annotation per point (per selected level), category copied from the
/// point and scored by the selected proposal. No confidence threshold is
/// applied; empty masks are kept with the `empty` flag.
pub fn generate_with_selector(
    net: &SegNet,
    images: &Dataset,
    selector: &dyn LevelSelector,
    gt_areas: &BTreeMap<u64, usize>,
) -> Result<PseudoLabelSet> {
    let points = images.doc.points_by_image();
    let mut set = PseudoLabelSet {
        mode: format!("point_guided/{}", selector.name()),
        ..Default::default()
    };
    let scale_ranges = net.config().scale_ranges.clone();
    for info in &images.doc.images {
        let pts = points.get(&info.id).cloned().unwrap_or_default();
        let mut anns = Vec::with_capacity(pts.len());
        if !pts.is_empty() {
            let (grids, feature) = net.predict(&images.pixels_of(info.id)?.to_tensor())?;
            let out = ImageOutputs { grids, feature };
            for p in &pts {
                let ctx = SelectionContext {
                    gt_area: p.source_instance_id.and_then(|id| gt_areas.get(&id).copied()),
                    scale_ranges: scale_ranges.clone(),
                };
                for level in selector.select(p, &out.grids, info.height, info.width, &ctx)? {
                    let ann = point_annotation(net, &out, p, level, info.height, info.width)?;
                    if ann.empty {
                        set.stats.empty_masks += 1;
                    }
                    anns.push(ann);
                }
            }
        }
        set.images.insert(info.id, anns);
    }
    set.renumber();
    Ok(set)
}

/// Adaptive point-guided annotations for the points of a single image.
pub fn point_guided_for_image(net: &SegNet, image: &RgbImage, points: &[PointLabel]) -> Result<Vec<InstanceAnnotation>> {
    let (h, w) = (image.height(), image.width());
    let (grids, feature) = net.predict(&image.to_tensor())?;
    let out = ImageOutputs { grids, feature };
    points
        .iter()
        .map(|p| {
            let (level, _) = select_level(p, &out.grids, h, w)?;
            point_annotation(net, &out, p, level, h, w)
        })
        .collect()
}

/// Point guidance with adaptive level selection.
pub fn generate_point_guided(net: &SegNet, images: &Dataset) -> Result<PseudoLabelSet> {
    generate_with_selector(net, images, &AdaptiveSelector, &BTreeMap::new())
}

/// Thresholded inference on every image.
pub fn generate_threshold(net: &SegNet, images: &Dataset, tau: f64) -> Result<PseudoLabelSet> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(WssisError::Config(format!("score threshold {tau} is outside [0, 1]")));
    }
    let mut set = PseudoLabelSet {
        mode: format!("threshold:{tau}"),
        ..Default::default()
    };
    for info in &images.doc.images {
        let out = infer_detailed(net, images.pixels_of(info.id)?, info.id, tau, net.config().mask_threshold)?;
        set.stats.pre_nms_proposals += out.pre_nms;
        set.images.insert(info.id, out.detections);
    }
    set.renumber();
    Ok(set)
}

/// Drops annotations whose category is not listed for their image. Images
/// missing from the map lose all annotations and are counted.
pub fn filter_by_image_labels(pseudo: &PseudoLabelSet, image_categories: &BTreeMap<u64, BTreeSet<u32>>) -> PseudoLabelSet {
    let mut out = PseudoLabelSet {
        mode: pseudo.mode.clone(),
        images: BTreeMap::new(),
        stats: pseudo.stats,
    };
    for (&id, anns) in &pseudo.images {
        let kept = match image_categories.get(&id) {
            Some(cats) => anns.iter().filter(|a| cats.contains(&a.category)).cloned().collect(),
            None => {
                out.stats.missing_images += 1;
                Vec::new()
            }
        };
        out.images.insert(id, kept);
    }
    out
}

/// Category set of each image according to its point labels.
pub fn point_categories(doc: &CocoDocument) -> BTreeMap<u64, BTreeSet<u32>> {
    let mut map: BTreeMap<u64, BTreeSet<u32>> = doc.images.iter().map(|i| (i.id, BTreeSet::new())).collect();
    for p in &doc.point_labels {
        map.entry(p.image_id).or_default().insert(p.category);
    }
    map
}

/// Pseudo labels for `images` in the given mode.
pub fn generate(net: &SegNet, images: &Dataset, mode: &GenerationMode) -> Result<PseudoLabelSet> {
    mode.validate()?;
    match mode {
        GenerationMode::PointGuided => generate_point_guided(net, images),
        GenerationMode::Threshold { tau } => generate_threshold(net, images, *tau),
        GenerationMode::ImageLevelFilter { tau } => {
            let raw = generate_threshold(net, images, *tau)?;
            let mut set = filter_by_image_labels(&raw, &point_categories(&images.doc));
            set.mode = mode.to_string();
            set.renumber();
            Ok(set)
        }
    }
}

/// Mask AP of the pseudo labels against ground truth on the images both
/// cover. Empty sentinels are not counted as predictions.
pub fn pseudo_quality(pseudo: &PseudoLabelSet, gt: &CocoDocument) -> Result<ApReport> {
    let gt_ids: BTreeSet<u64> = gt.image_ids().into_iter().collect();
    let shared: BTreeSet<u64> = pseudo.images.keys().copied().filter(|id| gt_ids.contains(id)).collect();
    if shared.is_empty() {
        return Err(WssisError::Config("pseudo labels and ground truth share no images".into()));
    }
    let preds: Vec<InstanceAnnotation> = pseudo
        .images
        .iter()
        .filter(|(id, _)| shared.contains(id))
        .flat_map(|(_, anns)| anns.iter().filter(|a| !a.empty).cloned())
        .map(|a| {
            let s = a.score.unwrap_or(1.0);
            a.with_score(s)
        })
        .collect();
    let truth: Vec<InstanceAnnotation> = gt
        .annotations
        .iter()
        .filter(|a| shared.contains(&a.image_id))
        .cloned()
        .collect();
    evaluate(&preds, &truth, &EvalParams::default())
}
