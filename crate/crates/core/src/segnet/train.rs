use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use wssis_nn::{loss, Adam, CosineSchedule, Tensor};

use super::config::{NetConfig, TrainSettings};
use super::dynamic_conv;
use super::model::{Activations, OutputGrads, SegNet};
use super::targets::{assign_targets, TargetInstance, Targets};
use crate::annotations::Dataset;
use crate::error::{Result, WssisError};
use crate::image::RgbImage;
use crate::mask::BinaryMask;
use crate::rng::{derive_seed_str, rng_from};

/// One training image with its instances.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: RgbImage,
    pub instances: Vec<TargetInstance>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub category: f64,
    pub mask: f64,
    pub num_positives: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss after each optimizer step.
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Focal category loss over every cell, normalized by `positives + 1`,
/// plus `mask_loss_weight` times the mean dice loss of positive cells.
pub fn compute_loss(config: &NetConfig, acts: &Activations, targets: &Targets) -> (LossBreakdown, OutputGrads) {
    let mut grads = OutputGrads::zeros_like(acts);
    let num_pos = targets.num_positives();
    let norm = num_pos as f64 + 1.0;
    let mut category = 0.0;
    for (l, (head, level)) in acts.heads.iter().zip(&targets.levels).enumerate() {
        let cells = level.size * level.size;
        let mut onehot = vec![0.0; head.cat_logits.len()];
        for (cell, &c) in level.labels.iter().enumerate() {
            if c > 0 {
                onehot[(c as usize - 1) * cells + cell] = 1.0;
            }
        }
        let (l_sum, g) = loss::sigmoid_focal_loss(head.cat_logits.data(), &onehot, config.focal_alpha, config.focal_gamma);
        category += l_sum / norm;
        for (d, gv) in grads.cat_logits[l].data_mut().iter_mut().zip(g) {
            *d = gv / norm;
        }
    }

    let mut mask = 0.0;
    if num_pos > 0 {
        let weight = config.mask_loss_weight / num_pos as f64;
        let feat = &acts.mask_feature;
        let e = feat.channels();
        let plane = feat.height() * feat.width();
        for (l, level) in targets.levels.iter().enumerate() {
            let kernels = &acts.heads[l].kernels;
            let s = level.size;
            for (r, c, i) in level.positives() {
                let kernel: Vec<f64> = (0..e).map(|k| kernels.at3(k, r, c)).collect();
                let logits = dynamic_conv(&kernel, feat).expect("kernel matches feature");
                let (d, g) = loss::dice_loss(&logits, &targets.mask_targets[i]);
                mask += d / num_pos as f64;
                let dk = grads.kernels[l].data_mut();
                for k in 0..e {
                    let fch = feat.channel(k);
                    let dot: f64 = g.iter().zip(fch).map(|(a, b)| a * b).sum();
                    dk[k * s * s + r * s + c] += weight * dot;
                }
                let dmf = grads.mask_feature.data_mut();
                for (k, &kv) in kernel.iter().enumerate() {
                    let scaled = weight * kv;
                    for (o, &gv) in dmf[k * plane..(k + 1) * plane].iter_mut().zip(&g) {
                        *o += scaled * gv;
                    }
                }
            }
        }
    }
    let breakdown = LossBreakdown {
        total: category + config.mask_loss_weight * mask,
        category,
        mask,
        num_positives: num_pos,
    };
    (breakdown, grads)
}

/// Samples from every non-empty annotation of `dataset`, in image-id order.
pub fn samples_from_dataset(dataset: &Dataset) -> Result<Vec<TrainSample>> {
    let by_image = dataset.doc.annotations_by_image();
    let mut out = Vec::with_capacity(dataset.len());
    for info in &dataset.doc.images {
        let mut instances = Vec::new();
        for a in by_image.get(&info.id).into_iter().flatten() {
            if a.empty || a.area == 0 {
                continue;
            }
            instances.push(TargetInstance {
                category: a.category,
                mask: a.decode_mask()?,
            });
        }
        out.push(TrainSample {
            image: dataset.pixels_of(info.id)?.clone(),
            instances,
        });
    }
    Ok(out)
}

struct Prepared {
    input: Tensor,
    targets: Targets,
}

fn prepare_view(image: &RgbImage, instances: &[TargetInstance], config: &NetConfig) -> Result<Prepared> {
    let targets = assign_targets(instances, image.height(), image.width(), config)?;
    Ok(Prepared {
        input: image.to_tensor(),
        targets,
    })
}

#[cfg(test)]
fn prepare(sample: &TrainSample, config: &NetConfig) -> Result<Prepared> {
    prepare_view(&sample.image, &sample.instances, config)
}

/// Random flip, translation and color permutation/inversion of one sample.
/// Instances pushed entirely out of the frame are dropped.
fn augment(sample: &TrainSample, settings: &TrainSettings, rng: &mut impl Rng) -> (RgbImage, Vec<TargetInstance>) {
    let mut image = sample.image.clone();
    let mut masks: Vec<BinaryMask> = sample.instances.iter().map(|i| i.mask.clone()).collect();
    if settings.hflip && rng.random_bool(0.5) {
        image = image.flip_horizontal();
        masks = masks.iter().map(BinaryMask::flip_horizontal).collect();
    }
    if settings.max_shift > 0 {
        let m = settings.max_shift as i64;
        let (dx, dy) = (rng.random_range(-m..=m), rng.random_range(-m..=m));
        image = image.shift(dx, dy);
        masks = masks.iter().map(|k| k.shift(dx, dy)).collect();
    }
    if settings.color_augment {
        let mut perm = [0usize, 1, 2];
        perm.shuffle(rng);
        let invert: [bool; 3] = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        image = image.map_pixels(|p| {
            let mut out = [0u8; 3];
            for c in 0..3 {
                let v = p[perm[c]];
                out[c] = if invert[c] { 255 - v } else { v };
            }
            out
        });
    }
    let instances = sample
        .instances
        .iter()
        .zip(masks)
        .filter(|(_, m)| !m.is_empty())
        .map(|(i, mask)| TargetInstance {
            category: i.category,
            mask,
        })
        .collect();
    (image, instances)
}

/// Trains `net` in place with Adam, linear warmup and cosine decay.
/// Deterministic in `config.train.seed`.
pub fn train_segnet(net: &mut SegNet, samples: &[TrainSample]) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(WssisError::Config("training set is empty".into()));
    }
    let config = net.config().clone();
    let settings = config.train.clone();
    let mut rng = rng_from(derive_seed_str(settings.seed, "segnet-train"));
    let mut adam = Adam::new(&net.store, settings.weight_decay);
    let schedule = CosineSchedule {
        base_lr: settings.learning_rate,
        total_steps: settings.steps,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport::default();
    for step in 0..settings.steps {
        net.store.zero_grad();
        let mut batch_loss = 0.0;
        for _ in 0..settings.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            let (image, instances) = augment(&samples[idx], &settings, &mut rng);
            let p = prepare_view(&image, &instances, &config)?;
            let acts = net.forward(&p.input)?;
            let (l, grads) = compute_loss(&config, &acts, &p.targets);
            batch_loss += l.total;
            net.backward(&acts, &grads);
        }
        let b = settings.batch_size as f64;
        net.store.scale_grad(1.0 / b);
        if settings.grad_clip > 0.0 {
            let norm = net.store.grad_norm();
            if norm > settings.grad_clip {
                net.store.scale_grad(settings.grad_clip / norm);
            }
        }
        let warm = if settings.warmup_steps > 0 {
            ((step + 1) as f64 / settings.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        adam.step(&mut net.store, warm * schedule.lr_at(step));
        report.losses.push(batch_loss / b);
    }
    report.steps = settings.steps;
    Ok(report)
}

/// Teacher trained from scratch on the fully labeled images of `dataset`.
pub fn train_teacher(dataset: &Dataset, config: &NetConfig) -> Result<(SegNet, TrainReport)> {
    if dataset.is_empty() {
        return Err(WssisError::Config("cannot train a teacher on an empty dataset".into()));
    }
    let samples = samples_from_dataset(dataset)?;
    let mut net = SegNet::new(config.clone(), derive_seed_str(config.train.seed, "segnet-init"))?;
    let report = train_segnet(&mut net, &samples)?;
    Ok((net, report))
}

/// Student trained from scratch on full and pseudo labels alike. Its
/// initialization is drawn independently of the teacher's.
pub fn train_student(dataset: &Dataset, config: &NetConfig) -> Result<(SegNet, TrainReport)> {
    if dataset.is_empty() {
        return Err(WssisError::Config("cannot train a student on an empty dataset".into()));
    }
    let samples = samples_from_dataset(dataset)?;
    let mut net = SegNet::new(config.clone(), derive_seed_str(config.train.seed, "student-init"))?;
    let report = train_segnet(&mut net, &samples)?;
    Ok((net, report))
}
