#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use wssis_core::annotations::InstanceAnnotation;
use wssis_core::mask::BinaryMask;

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x == 1 && y == 1);
        union += usize::from(x == 1 || y == 1);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Every injective partial assignment of detections (in order) to ground
/// truths, keeping the one that is lexicographically best per detection:
/// matched first, then higher IoU, then lower ground-truth index.
fn exhaustive_match(ious: &[Vec<f64>], t: f64) -> Vec<bool> {
    let n_gt = ious.first().map_or(0, Vec::len);
    let mut best: Option<Vec<(bool, f64, i64)>> = None;
    let mut current = Vec::new();
    let mut used = vec![false; n_gt];
    fn rec(
        i: usize,
        ious: &[Vec<f64>],
        t: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<(bool, f64, i64)>,
        best: &mut Option<Vec<(bool, f64, i64)>>,
    ) {
        if i == ious.len() {
            let better = match best {
                None => true,
                Some(b) => {
                    let mut ord = std::cmp::Ordering::Equal;
                    for (x, y) in current.iter().zip(b.iter()) {
                        ord = x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2));
                        if ord != std::cmp::Ordering::Equal {
                            break;
                        }
                    }
                    ord == std::cmp::Ordering::Greater
                }
            };
            if better {
                *best = Some(current.clone());
            }
            return;
        }
        current.push((false, 0.0, 0));
        rec(i + 1, ious, t, used, current, best);
        current.pop();
        for g in 0..used.len() {
            if !used[g] && ious[i][g] >= t {
                used[g] = true;
                current.push((true, ious[i][g], -(g as i64)));
                rec(i + 1, ious, t, used, current, best);
                current.pop();
                used[g] = false;
            }
        }
    }
    rec(0, ious, t, &mut used, &mut current, &mut best);
    best.unwrap_or_default().iter().map(|m| m.0).collect()
}

/// Area under the precision envelope sampled at 101 recall points, where
/// the envelope at r is the best precision at any recall >= r.
fn ap_101(hits: &[bool], n_gt: usize) -> (f64, f64) {
    let mut pr = Vec::new();
    let mut tp = 0;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        pr.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        let p = pr.iter().filter(|(rc, _)| *rc >= r).map(|(_, p)| *p).fold(0.0, f64::max);
        sum += p;
    }
    (sum / 101.0, pr.last().map_or(0.0, |x| x.0))
}

/// `(AP, AP50, AP75, AR100)` by brute force.
pub fn brute_force_eval(preds: &[InstanceAnnotation], gts: &[InstanceAnnotation]) -> (f64, f64, f64, f64) {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let cats: std::collections::BTreeSet<u32> = gts.iter().map(|g| g.category).collect();
    let (mut ap, mut ap50, mut ap75, mut ar) = (0.0, 0.0, 0.0, 0.0);
    for &c in &cats {
        let n_gt = gts.iter().filter(|g| g.category == c).count();
        let mut per_t = Vec::new();
        for &t in &thresholds {
            let mut scored: Vec<(f64, u64, bool)> = Vec::new();
            let images: std::collections::BTreeSet<u64> = preds.iter().chain(gts).map(|a| a.image_id).collect();
            for img in images {
                let mut g: Vec<&InstanceAnnotation> = gts.iter().filter(|a| a.category == c && a.image_id == img).collect();
                g.sort_by_key(|a| a.id);
                let mut d: Vec<&InstanceAnnotation> = preds.iter().filter(|a| a.category == c && a.image_id == img).collect();
                d.sort_by(|a, b| b.score.unwrap().total_cmp(&a.score.unwrap()).then(a.id.cmp(&b.id)));
                let gm: Vec<BinaryMask> = g.iter().map(|a| a.decode_mask().unwrap()).collect();
                let ious: Vec<Vec<f64>> = d
                    .iter()
                    .map(|a| {
                        let m = a.decode_mask().unwrap();
                        gm.iter().map(|x| iou(&m, x)).collect()
                    })
                    .collect();
                let hits = if g.is_empty() { vec![false; d.len()] } else { exhaustive_match(&ious, t) };
                for (a, h) in d.iter().zip(hits) {
                    scored.push((a.score.unwrap(), a.id, h));
                }
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let hits: Vec<bool> = scored.iter().map(|s| s.2).collect();
            per_t.push(ap_101(&hits, n_gt));
        }
        ap += per_t.iter().map(|x| x.0).sum::<f64>() / 10.0;
        ap50 += per_t[0].0;
        ap75 += per_t[5].0;
        ar += per_t.iter().map(|x| x.1).sum::<f64>() / 10.0;
    }
    let n = cats.len().max(1) as f64;
    (ap / n, ap50 / n, ap75 / n, ar / n)
}

/// Random small evaluation case: up to 4 ground truths and 4 predictions per
/// (image, category) on 6 x 6 masks.
pub fn random_case(rng: &mut impl Rng) -> (Vec<InstanceAnnotation>, Vec<InstanceAnnotation>) {
    let blob = |rng: &mut dyn rand::RngCore| {
        let (y0, x0) = (rng.random_range(0..5), rng.random_range(0..5));
        let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
        BinaryMask::from_fn(6, 6, |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w)
    };
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let mut id = 1;
    let mut by_key: BTreeMap<(u64, u32), Vec<BinaryMask>> = BTreeMap::new();
    for image in 1..=rng.random_range(1..3u64) {
        for cat in 1..=2u32 {
            for _ in 0..rng.random_range(0..=4) {
                let m = blob(rng);
                gts.push(InstanceAnnotation::from_mask(id, image, cat, &m).unwrap());
                by_key.entry((image, cat)).or_default().push(m);
                id += 1;
            }
            for _ in 0..rng.random_range(0..=4) {
                // Mostly perturbed copies of ground truth so matches happen.
                let base = by_key.get(&(image, cat)).and_then(|v| v.first().cloned());
                let m = match base {
                    Some(b) if rng.random_bool(0.6) => {
                        let mut b = b;
                        let (y, x) = (rng.random_range(0..6), rng.random_range(0..6));
                        b.set(y, x, !b.get(y, x));
                        if b.is_empty() {
                            blob(rng)
                        } else {
                            b
                        }
                    }
                    _ => blob(rng),
                };
                let score = f64::from(rng.random_range(1..5u32)) / 4.0;
                preds.push(InstanceAnnotation::from_mask(id, image, cat, &m).unwrap().with_score(score));
                id += 1;
            }
        }
    }
    (preds, gts)
}
