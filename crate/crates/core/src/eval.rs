//! Mask IoU and COCO-style mask AP / AR.
//!
//! Matching is greedy per image and category: detections in descending score
//! order (ties by ascending annotation id) take the unmatched ground truth
//! with the highest IoU (ties by ascending ground-truth id) provided the IoU
//! reaches the threshold. AP is the 101-point interpolated area under the
//! precision/recall curve; AR is the final recall with at most `max_dets`
//! detections per image and category.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotations::InstanceAnnotation;
use crate::error::Result;
use crate::mask::BinaryMask;

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.iou(b)
}

/// `0.50:0.05:0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar100: f64,
    pub num_gt: usize,
    pub num_dets: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar100: f64,
    pub per_category: BTreeMap<u32, CategoryMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_iou_thresholds(),
            max_dets: 100,
        }
    }
}

struct Decoded<'a> {
    ann: &'a InstanceAnnotation,
    mask: BinaryMask,
}

/// Per-category detections: `(score, annotation id, matched per threshold)`.
type Scored = Vec<(f64, u64, Vec<bool>)>;

fn score_of(a: &InstanceAnnotation) -> f64 {
    a.score.unwrap_or(1.0)
}

fn by_score_then_id(a: &InstanceAnnotation, b: &InstanceAnnotation) -> std::cmp::Ordering {
    score_of(b)
        .total_cmp(&score_of(a))
        .then(a.id.cmp(&b.id))
}

pub fn evaluate(
    predictions: &[InstanceAnnotation],
    ground_truth: &[InstanceAnnotation],
    params: &EvalParams,
) -> Result<ApReport> {
    let mut thresholds = params.iou_thresholds.clone();
    for extra in [0.5, 0.75] {
        if !thresholds.iter().any(|t| (t - extra).abs() < 1e-9) {
            thresholds.push(extra);
        }
    }
    let n_main = params.iou_thresholds.len();
    let t50 = thresholds.iter().position(|t| (t - 0.5).abs() < 1e-9).expect("0.5 present");
    let t75 = thresholds.iter().position(|t| (t - 0.75).abs() < 1e-9).expect("0.75 present");

    let mut groups: BTreeMap<(u32, u64), (Vec<Decoded>, Vec<Decoded>)> = BTreeMap::new();
    for g in ground_truth {
        groups.entry((g.category, g.image_id)).or_default().0.push(Decoded {
            ann: g,
            mask: g.decode_mask()?,
        });
    }
    for p in predictions {
        groups.entry((p.category, p.image_id)).or_default().1.push(Decoded {
            ann: p,
            mask: p.decode_mask()?,
        });
    }

    let mut num_gt: BTreeMap<u32, usize> = BTreeMap::new();
    let mut scored: BTreeMap<u32, Scored> = BTreeMap::new();
    for ((cat, _), (mut gts, mut dts)) in groups {
        gts.sort_by_key(|g| g.ann.id);
        dts.sort_by(|a, b| by_score_then_id(a.ann, b.ann));
        dts.truncate(params.max_dets);
        *num_gt.entry(cat).or_default() += gts.len();
        let ious: Vec<Vec<f64>> = dts
            .iter()
            .map(|d| gts.iter().map(|g| d.mask.iou(&g.mask)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let mut flags = vec![vec![false; thresholds.len()]; dts.len()];
        for (ti, &t) in thresholds.iter().enumerate() {
            let mut taken = vec![false; gts.len()];
            for (di, row) in ious.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (gi, &iou) in row.iter().enumerate() {
                    if taken[gi] {
                        continue;
                    }
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                if let Some((gi, iou)) = best {
                    if iou >= t {
                        taken[gi] = true;
                        flags[di][ti] = true;
                    }
                }
            }
        }
        let entry = scored.entry(cat).or_default();
        for (d, f) in dts.iter().zip(flags) {
            entry.push((score_of(d.ann), d.ann.id, f));
        }
    }

    let mut report = ApReport::default();
    for (&cat, &n_gt) in &num_gt {
        if n_gt == 0 {
            continue;
        }
        let mut dets = scored.remove(&cat).unwrap_or_default();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut ap_t = Vec::with_capacity(thresholds.len());
        let mut rc_t = Vec::with_capacity(thresholds.len());
        for ti in 0..thresholds.len() {
            let (ap, rc) = interpolated_ap(dets.iter().map(|d| d.2[ti]), n_gt);
            ap_t.push(ap);
            rc_t.push(rc);
        }
        report.per_category.insert(
            cat,
            CategoryMetrics {
                ap: mean(&ap_t[..n_main]),
                ap50: ap_t[t50],
                ap75: ap_t[t75],
                ar100: mean(&rc_t[..n_main]),
                num_gt: n_gt,
                num_dets: dets.len(),
            },
        );
    }
    let cats: Vec<&CategoryMetrics> = report.per_category.values().collect();
    if !cats.is_empty() {
        let avg = |f: fn(&CategoryMetrics) -> f64| cats.iter().map(|c| f(c)).sum::<f64>() / cats.len() as f64;
        report.ap = avg(|c| c.ap);
        report.ap50 = avg(|c| c.ap50);
        report.ap75 = avg(|c| c.ap75);
        report.ar100 = avg(|c| c.ar100);
    }
    Ok(report)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// 101-point interpolated AP and final recall for detections already sorted
/// by descending score.
fn interpolated_ap(tp: impl Iterator<Item = bool>, n_gt: usize) -> (f64, f64) {
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let (mut tps, mut fps) = (0usize, 0usize);
    for hit in tp {
        if hit {
            tps += 1;
        } else {
            fps += 1;
        }
        recall.push(tps as f64 / n_gt as f64);
        precision.push(tps as f64 / (tps + fps) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for j in 0..RECALL_POINTS {
        let r = j as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recall.len() && recall[idx] < r {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    let final_recall = recall.last().copied().unwrap_or(0.0);
    (sum / RECALL_POINTS as f64, final_recall)
}

/// Aligned text table of named reports, values in percent.
pub fn render_ap_table(rows: &[(String, ApReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "Stage", "AP", "AP50", "AP75", "AR100"
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}\n",
            name,
            100.0 * r.ap,
            100.0 * r.ap50,
            100.0 * r.ap75,
            100.0 * r.ar100
        ));
    }
    out
}
