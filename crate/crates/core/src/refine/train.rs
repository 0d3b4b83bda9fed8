use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use wssis_nn::{loss, ops, Adam, CosineSchedule, Tensor};

use super::{assemble_input, refine, RefineConfig, RefineNet};
use crate::annotations::{centroid_point, Dataset, PointLabel};
use crate::error::{Result, WssisError};
use crate::image::RgbImage;
use crate::mask::BinaryMask;
use crate::pseudo::{point_guided_for_image, PseudoLabelSet};
use crate::rng::{derive_seed_str, rng_from};
use crate::segnet::SegNet;

/// One supervised refinement example.
#[derive(Clone, Debug)]
pub struct RefineSample {
    pub image: RgbImage,
    pub rough: BinaryMask,
    pub point: PointLabel,
    pub target: BinaryMask,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinerReport {
    /// Mean dice loss per step.
    pub losses: Vec<f64>,
    pub samples: usize,
}

/// Rough teacher masks for every non-empty ground-truth instance, guided by
/// the instance's point label when the document has one and by its
/// centroid otherwise.
pub fn refine_samples(teacher: &SegNet, dataset: &Dataset) -> Result<Vec<RefineSample>> {
    let labelled: std::collections::BTreeMap<u64, PointLabel> = dataset
        .doc
        .point_labels
        .iter()
        .filter_map(|p| p.source_instance_id.map(|id| (id, *p)))
        .collect();
    let mut samples = Vec::new();
    for (image_id, anns) in dataset.doc.annotations_by_image() {
        let anns: Vec<_> = anns.into_iter().filter(|a| !a.empty && a.area > 0).collect();
        if anns.is_empty() {
            continue;
        }
        let image = dataset.pixels_of(image_id)?;
        let points = anns
            .iter()
            .map(|a| match labelled.get(&a.id) {
                Some(p) => Ok(*p),
                None => centroid_point(a),
            })
            .collect::<Result<Vec<_>>>()?;
        let rough = point_guided_for_image(teacher, image, &points)?;
        for ((a, point), r) in anns.iter().zip(points).zip(rough) {
            samples.push(RefineSample {
                image: image.clone(),
                rough: r.decode_mask()?,
                point,
                target: a.decode_mask()?,
            });
        }
    }
    Ok(samples)
}

fn flip(sample: &RefineSample) -> RefineSample {
    let w = sample.image.width();
    RefineSample {
        image: sample.image.flip_horizontal(),
        rough: sample.rough.flip_horizontal(),
        point: PointLabel {
            x: w - 1 - sample.point.x,
            ..sample.point
        },
        target: sample.target.flip_horizontal(),
    }
}

/// Input tensor and the `S x S` target crop for one sample.
fn supervised_pair(sample: &RefineSample, num_classes: usize, config: &RefineConfig) -> Result<(Tensor, Vec<f64>)> {
    let input = assemble_input(&sample.image, &sample.rough, &sample.point, num_classes, config)?;
    let c = input.crop;
    let crop = sample.target.crop(c.x_min, c.y_min, c.x_max, c.y_max);
    let plane: Vec<f64> = crop.data().iter().map(|&v| f64::from(v)).collect();
    let s = config.input_size;
    let target = ops::resize_nearest_plane(&plane, c.height(), c.width(), s, s);
    Ok((input.tensor, target))
}

/// Mean dice loss of `net` over `samples` without updating anything.
pub fn mean_dice_loss(net: &RefineNet, samples: &[RefineSample]) -> Result<f64> {
    let mut total = 0.0;
    for sample in samples {
        let (input, target) = supervised_pair(sample, net.num_classes(), net.config())?;
        let acts = net.forward(&input)?;
        total += loss::dice_loss(acts.logits.data(), &target).0;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains `net` in place on `samples` with dice loss, Adam and cosine decay.
pub fn fit_refiner(net: &mut RefineNet, samples: &[RefineSample]) -> Result<RefinerReport> {
    if samples.is_empty() {
        return Err(WssisError::Config("no full labels to train the refiner on".into()));
    }
    let config = net.config().clone();
    let num_classes = net.num_classes();
    let mut rng = rng_from(derive_seed_str(config.seed, "refiner-train"));
    let mut adam = Adam::new(&net.store, config.weight_decay);
    let schedule = CosineSchedule {
        base_lr: config.learning_rate,
        total_steps: config.steps,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut report = RefinerReport {
        samples: samples.len(),
        ..Default::default()
    };
    let s = config.input_size;
    for step in 0..config.steps {
        net.store.zero_grad();
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            let flipped;
            let sample = if config.hflip && rng.random_bool(0.5) {
                flipped = flip(&samples[idx]);
                &flipped
            } else {
                &samples[idx]
            };
            let (input, target) = supervised_pair(sample, num_classes, &config)?;
            let acts = net.forward(&input)?;
            let (l, grad) = loss::dice_loss(acts.logits.data(), &target);
            batch_loss += l;
            net.backward(&acts, &Tensor::from_vec(&[1, s, s], grad)?);
        }
        let b = config.batch_size as f64;
        net.store.scale_grad(1.0 / b);
        adam.step(&mut net.store, schedule.lr_at(step));
        report.losses.push(batch_loss / b);
    }
    Ok(report)
}

/// Builds rough masks with `teacher` on the fully labelled images and fits a
/// fresh refiner to them.
pub fn train_refiner(teacher: &SegNet, dataset: &Dataset, config: &RefineConfig) -> Result<(RefineNet, RefinerReport)> {
    let samples = refine_samples(teacher, dataset)?;
    let mut net = RefineNet::new(config.clone(), teacher.num_classes(), derive_seed_str(config.seed, "refiner-init"))?;
    let report = fit_refiner(&mut net, &samples)?;
    Ok((net, report))
}

/// Refines every point-guided annotation of `pseudo`. Annotations without a
/// guiding point are copied unchanged.
pub fn refine_pseudo_set(refiner: &RefineNet, pseudo: &PseudoLabelSet, images: &Dataset) -> Result<PseudoLabelSet> {
    let mut out = PseudoLabelSet {
        mode: format!("{}+refined", pseudo.mode),
        images: Default::default(),
        stats: pseudo.stats,
    };
    out.stats.empty_masks = 0;
    for (&image_id, anns) in &pseudo.images {
        let mut refined = Vec::with_capacity(anns.len());
        for a in anns {
            let Some(g) = a.guiding_point else {
                refined.push(a.clone());
                continue;
            };
            let point = PointLabel {
                image_id,
                x: g.x,
                y: g.y,
                category: a.category,
                source_instance_id: None,
            };
            let r = refine(refiner, images.pixels_of(image_id)?, &a.decode_mask()?, &point)?;
            if r.fell_back {
                out.stats.refine_fallbacks += 1;
            }
            let mut ann = r.annotation;
            ann.id = a.id;
            ann.score = a.score;
            ann.source_level = a.source_level;
            if ann.empty {
                out.stats.empty_masks += 1;
            }
            refined.push(ann);
        }
        out.images.insert(image_id, refined);
    }
    Ok(out)
}
