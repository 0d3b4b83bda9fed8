use wssis_nn::{ops, Tensor};

use super::model::SegNet;
use super::{mask_from_kernel, MaskFeature, Proposal, ProposalGrid};
use crate::annotations::InstanceAnnotation;
use crate::error::{Result, WssisError};
use crate::image::RgbImage;
use crate::mask::BinaryMask;

/// Every cell whose best category score reaches `tau`, by descending score
/// (ties: level, row, column ascending).
pub fn candidates(grids: &[ProposalGrid], tau: f64) -> Vec<Proposal> {
    let mut out = Vec::new();
    for g in grids {
        for row in 0..g.size {
            for col in 0..g.size {
                let (category, score) = g.best(row, col);
                if score >= tau {
                    out.push(g.proposal(row, col, category));
                }
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.level.cmp(&b.level))
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    out
}

/// Bilinear upsampling of a `[1, h, w]` soft mask to `height x width`.
pub fn upsample_probabilities(mask: &Tensor, height: usize, width: usize) -> Vec<f64> {
    ops::resize_bilinear_plane(mask.channel(0), mask.height(), mask.width(), height, width)
}

/// Foreground where the probability exceeds `threshold`.
pub fn binarize(probs: &[f64], height: usize, width: usize, threshold: f64) -> BinaryMask {
    let data = probs.iter().map(|&p| u8::from(p > threshold)).collect();
    BinaryMask::from_vec(height, width, data).expect("probability plane matches size")
}

/// Greedy class-aware mask NMS. Items are `(mask, score, category)`; the
/// returned indices are in keep order (score descending, index ascending).
pub fn mask_nms(items: &[(BinaryMask, f64, u32)], iou_threshold: f64) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].1.total_cmp(&items[a].1).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut suppressed = false;
        for &k in &kept {
            if items[k].2 == items[i].2 && items[k].0.iou(&items[i].0)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub detections: Vec<InstanceAnnotation>,
    /// Size of the thresholded candidate set before any capping or NMS.
    pub pre_nms: usize,
}

/// Thresholded candidates turned into masks and deduplicated. Candidates
/// beyond `max_candidates` (by score) are not turned into masks.
pub fn infer_detailed(
    net: &SegNet,
    image: &RgbImage,
    image_id: u64,
    tau: f64,
    binarize_threshold: f64,
) -> Result<InferOutput> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(WssisError::Config(format!("score threshold {tau} is outside [0, 1]")));
    }
    let (grids, feature) = net.predict(&image.to_tensor())?;
    infer_from_grids(net, &grids, &feature, image, image_id, tau, binarize_threshold)
}

pub(crate) fn infer_from_grids(
    net: &SegNet,
    grids: &[ProposalGrid],
    feature: &MaskFeature,
    image: &RgbImage,
    image_id: u64,
    tau: f64,
    binarize_threshold: f64,
) -> Result<InferOutput> {
    let cfg = net.config();
    let cands = candidates(grids, tau);
    let pre_nms = cands.len();
    let (h, w) = (image.height(), image.width());
    let mut items = Vec::new();
    let mut origin = Vec::new();
    for p in cands.iter().take(cfg.max_candidates) {
        let soft = mask_from_kernel(&p.kernel, feature)?;
        let mask = binarize(&upsample_probabilities(&soft, h, w), h, w, binarize_threshold);
        if mask.is_empty() {
            continue;
        }
        items.push((mask, p.score, p.category));
        origin.push(p.level);
    }
    let kept = mask_nms(&items, cfg.nms_iou)?;
    let mut detections = Vec::new();
    for (n, &i) in kept.iter().take(cfg.max_detections).enumerate() {
        let (mask, score, category) = &items[i];
        let mut ann = InstanceAnnotation::from_mask(n as u64 + 1, image_id, *category, mask)?.with_score(*score);
        ann.source_level = Some(origin[i]);
        detections.push(ann);
    }
    Ok(InferOutput { detections, pre_nms })
}

/// Scored instance masks for one image.
pub fn infer(net: &SegNet, image: &RgbImage, image_id: u64, tau: f64, binarize_threshold: f64) -> Result<Vec<InstanceAnnotation>> {
    Ok(infer_detailed(net, image, image_id, tau, binarize_threshold)?.detections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::NetConfig;
    use rand::Rng;

    fn random_image(seed: u64) -> RgbImage {
        let mut rng = crate::rng::rng_from(seed);
        let data = (0..64 * 64 * 3).map(|_| rng.random()).collect();
        RgbImage::from_raw(64, 64, data).unwrap()
    }

    fn block(y0: usize, x0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(8, 8, |y, x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
    }

    #[test]
    fn tau_one_on_untrained_net_is_empty() {
        let net = SegNet::new(NetConfig::default(), 0).unwrap();
        assert!(infer(&net, &random_image(1), 1, 1.0, 0.5).unwrap().is_empty());
    }

    #[test]
    fn candidate_sets_are_nested_in_tau() {
        let net = SegNet::new(NetConfig::default(), 0).unwrap();
        let (grids, _) = net.predict(&random_image(2).to_tensor()).unwrap();
        let key = |p: &Proposal| (p.level, p.row, p.col);
        let mut prev: Option<Vec<(usize, usize, usize)>> = None;
        for tau in [0.9, 0.5, 0.1, 0.01, 0.0] {
            let set: Vec<_> = candidates(&grids, tau).iter().map(key).collect();
            if let Some(p) = &prev {
                assert!(p.iter().all(|k| set.contains(k)));
            }
            prev = Some(set);
        }
        assert_eq!(prev.unwrap().len(), grids.iter().map(|g| g.size * g.size).sum::<usize>());
    }

    /// Brute force: the kept set is the unique set where every dropped item
    /// overlaps a higher-ranked kept item of its category and no two kept
    /// items do.
    #[test]
    fn nms_matches_oracle() {
        let mut rng = crate::rng::rng_from(7);
        for _ in 0..200 {
            let n = rng.random_range(0..7);
            let items: Vec<(BinaryMask, f64, u32)> = (0..n)
                .map(|_| {
                    let side = rng.random_range(2..5);
                    (
                        block(rng.random_range(0..4), rng.random_range(0..4), side),
                        (rng.random_range(0..4) as f64) / 4.0,
                        rng.random_range(1..3),
                    )
                })
                .collect();
            let kept = mask_nms(&items, 0.6).unwrap();
            let rank = |i: usize| (std::cmp::Reverse((items[i].1 * 4.0) as i64), i);
            let mut by_rank: Vec<usize> = (0..n).collect();
            by_rank.sort_by_key(|&i| rank(i));
            let mut expect: Vec<usize> = Vec::new();
            for i in by_rank {
                let clash = expect
                    .iter()
                    .any(|&k| items[k].2 == items[i].2 && items[k].0.iou(&items[i].0).unwrap() > 0.6);
                if !clash {
                    expect.push(i);
                }
            }
            assert_eq!(kept, expect);
            for (a, &i) in kept.iter().enumerate() {
                for &j in &kept[a + 1..] {
                    assert!(items[i].2 != items[j].2 || items[i].0.iou(&items[j].0).unwrap() <= 0.6);
                }
            }
        }
    }

    #[test]
    fn tau_zero_output_count_matches_nms_groups() {
        let net = SegNet::new(NetConfig::default(), 3).unwrap();
        let img = random_image(4);
        let out = infer_detailed(&net, &img, 9, 0.0, 0.5).unwrap();
        let (grids, feature) = net.predict(&img.to_tensor()).unwrap();
        let mut items = Vec::new();
        for p in candidates(&grids, 0.0).iter().take(net.config().max_candidates) {
            let soft = mask_from_kernel(&p.kernel, &feature).unwrap();
            let m = binarize(&upsample_probabilities(&soft, 64, 64), 64, 64, 0.5);
            if !m.is_empty() {
                items.push((m, p.score, p.category));
            }
        }
        let groups = mask_nms(&items, 0.6).unwrap().len().min(100);
        assert_eq!(out.detections.len(), groups);
        assert_eq!(out.pre_nms, grids.iter().map(|g| g.size * g.size).sum::<usize>());
        assert!(out.detections.iter().all(|d| d.image_id == 9 && d.area > 0));
    }
}
