//! Teacher on full labels, pseudo labels for the point-labelled images,
//! student on both. Optional mask refinement and iterative rounds in which
//! the previous student generates the next round's pseudo labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotations::{point_sampler_registry, read_dataset, split_dataset, write_document, CocoDocument, Dataset, DatasetSplit};
use crate::error::{Result, WssisError};
use crate::eval::{evaluate, render_ap_table, ApReport, EvalParams};
use crate::pseudo::{generate, pseudo_quality, GenerationMode, GenerationStats, PseudoLabelSet};
use crate::refine::{refine_pseudo_set, train_refiner, RefineConfig, RefineNet, RefinerReport};
use crate::rng::derive_seed_str;
use crate::segnet::{infer, train_student, train_teacher, NetConfig, SegNet, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fully annotated dataset document; the split decides which images keep
    /// their masks and which are reduced to points.
    pub dataset: PathBuf,
    /// Held-out evaluation set. Without one, models are scored on the
    /// point-labelled part of the split.
    pub test_dataset: Option<PathBuf>,
    pub fraction: f64,
    pub seed: u64,
    /// Point sampler name (`centroid` or `random`).
    pub point_mode: String,
    pub pseudo_mode: GenerationMode,
    pub refiner: bool,
    /// Extra rounds after the first student; 0 is the plain two-step run.
    pub rounds: usize,
    /// Score threshold used when evaluating teacher and students.
    pub eval_score_threshold: f64,
    pub student_steps: Option<usize>,
    pub output_dir: PathBuf,
    pub segnet: NetConfig,
    pub refine: RefineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/dataset.json"),
            test_dataset: None,
            fraction: 0.1,
            seed: 0,
            point_mode: "centroid".into(),
            pseudo_mode: GenerationMode::PointGuided,
            refiner: true,
            rounds: 0,
            eval_score_threshold: 0.1,
            student_steps: None,
            output_dir: PathBuf::from("out"),
            segnet: NetConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(WssisError::Config(format!("fraction must be in (0, 1], got {}", self.fraction)));
        }
        if !point_sampler_registry().contains(&self.point_mode) {
            return Err(WssisError::Config(format!(
                "unknown point_mode `{}` (known: {})",
                self.point_mode,
                point_sampler_registry().names().join(", ")
            )));
        }
        if !(0.0..=1.0).contains(&self.eval_score_threshold) {
            return Err(WssisError::Config("eval_score_threshold must be in [0, 1]".into()));
        }
        self.pseudo_mode.validate()?;
        self.segnet.validate()?;
        self.refine.validate()
    }

    /// Copy with every nested seed derived from `seed` and the student step
    /// override resolved. Stages always run on the effective config.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.segnet.train.seed = derive_seed_str(self.seed, "segnet");
        c.refine.seed = derive_seed_str(self.seed, "refiner");
        c
    }

    pub fn student_config(&self) -> NetConfig {
        let mut c = self.segnet.clone();
        if let Some(steps) = self.student_steps {
            c.train.steps = steps;
        }
        c
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed_str(self.seed, "split")
    }

    pub fn point_seed(&self) -> u64 {
        derive_seed_str(self.seed, "points")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| WssisError::Parse {
            context: "experiment config".into(),
            message: e.to_string(),
        })
    }
}

/// Training and evaluation data held in memory.
#[derive(Clone, Debug)]
pub struct ExperimentInputs {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl ExperimentInputs {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let train = read_dataset(&config.dataset).map_err(|e| e.in_stage("load"))?;
        let test = match &config.test_dataset {
            Some(p) => Some(read_dataset(p).map_err(|e| e.in_stage("load"))?),
            None => None,
        };
        Ok(Self { train, test })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub final_loss: f64,
    pub eval: ApReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinerMetrics {
    pub samples: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoMetrics {
    pub annotations: usize,
    pub stats: GenerationStats,
    /// Against the ground truth of the point-labelled images.
    pub quality: Option<ApReport>,
    /// Quality before refinement, when the refiner is on.
    pub rough_quality: Option<ApReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub generator: String,
    pub pseudo: PseudoMetrics,
    pub student: ModelMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub fraction: f64,
    pub point_mode: String,
    pub pseudo_mode: String,
    pub refiner_enabled: bool,
    pub full_images: usize,
    pub point_images: usize,
    pub point_labels: usize,
    pub eval_set: String,
    /// Trained on full labels only; doubles as the full-only baseline.
    pub teacher: ModelMetrics,
    pub refiner: Option<RefinerMetrics>,
    pub rounds: Vec<RoundReport>,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

impl ExperimentReport {
    /// Evaluation of the last student.
    pub fn final_eval(&self) -> &ApReport {
        &self.rounds.last().expect("at least one round").student.eval
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn render(&self) -> String {
        let mut rows = vec![("teacher (full only)".to_string(), self.teacher.eval.clone())];
        for r in &self.rounds {
            if let Some(q) = &r.pseudo.rough_quality {
                rows.push((format!("round {} pseudo (rough)", r.round), q.clone()));
            }
            if let Some(q) = &r.pseudo.quality {
                rows.push((format!("round {} pseudo", r.round), q.clone()));
            }
            rows.push((format!("round {} student", r.round), r.student.eval.clone()));
        }
        let mut out = format!(
            "seed {}  fraction {}  points {}  pseudo {}  refiner {}\nfull images {}  point images {}  point labels {}  evaluated on {}\n\n",
            self.seed,
            self.fraction,
            self.point_mode,
            self.pseudo_mode,
            if self.refiner_enabled { "on" } else { "off" },
            self.full_images,
            self.point_images,
            self.point_labels,
            self.eval_set,
        );
        out.push_str(&render_ap_table(&rows));
        out
    }
}

/// Trained models reused across runs whose inputs to that stage agree.
#[derive(Default)]
pub struct StageCache {
    teacher: Option<(u64, SegNet, TrainReport)>,
    refiner: Option<(u64, RefineNet, RefinerReport)>,
}

fn fingerprint(parts: &[&str]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

fn final_loss(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len().saturating_sub(10)..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Seeded split of the training document.
pub fn split_stage(train: &Dataset, config: &ExperimentConfig) -> Result<DatasetSplit> {
    split_dataset(&train.doc, config.fraction, config.split_seed())
}

/// Point-labelled copy of the `point_ids` images.
pub fn points_stage(train: &Dataset, split: &DatasetSplit, config: &ExperimentConfig) -> Result<Dataset> {
    let sampler = point_sampler_registry().get(&config.point_mode)?;
    train.subset(&split.point_ids).to_point_labeled(sampler.as_ref(), config.point_seed())
}

/// Pseudo labels for the point-labelled images, refined when a refiner is
/// given. Returns the rough and the final set.
pub fn pseudo_stage(
    generator: &SegNet,
    points: &Dataset,
    mode: &GenerationMode,
    refiner: Option<&RefineNet>,
) -> Result<(PseudoLabelSet, PseudoLabelSet)> {
    let rough = generate(generator, points, mode)?;
    let refined = match refiner {
        Some(r) => refine_pseudo_set(r, &rough, points)?,
        None => rough.clone(),
    };
    Ok((rough, refined))
}

/// Full labels plus pseudo labels, each image in exactly one role.
pub fn student_dataset(full: &Dataset, points: &Dataset, pseudo: &PseudoLabelSet) -> Result<Dataset> {
    let full_ids: BTreeSet<u64> = full.doc.image_ids().into_iter().collect();
    if let Some(id) = pseudo.images.keys().find(|id| full_ids.contains(id)) {
        return Err(WssisError::Integrity(format!("image {id} is both fully and pseudo labelled")));
    }
    let mut doc = full.doc.clone();
    doc.point_labels.clear();
    let mut next = doc.annotations.iter().map(|a| a.id).max().unwrap_or(0) + 1;
    let mut pixels = full.pixels.clone();
    for info in &points.doc.images {
        doc.images.push(info.clone());
        pixels.insert(info.id, points.pixels_of(info.id)?.clone());
        for a in pseudo.images.get(&info.id).into_iter().flatten() {
            let mut a = a.clone();
            a.id = next;
            next += 1;
            doc.annotations.push(a);
        }
    }
    doc.images.sort_by_key(|i| i.id);
    Ok(Dataset { doc, pixels })
}

/// Thresholded inference on every image of `dataset`, scored against its
/// annotations.
pub fn evaluate_model(net: &SegNet, dataset: &Dataset, score_threshold: f64) -> Result<ApReport> {
    let mut preds = Vec::new();
    let mut next = 1;
    for info in &dataset.doc.images {
        for mut d in infer(net, dataset.pixels_of(info.id)?, info.id, score_threshold, net.config().mask_threshold)? {
            d.id = next;
            next += 1;
            preds.push(d);
        }
    }
    evaluate(&preds, &dataset.doc.annotations, &EvalParams::default())
}

fn quality_or_none(set: &PseudoLabelSet, gt: &CocoDocument) -> Result<Option<ApReport>> {
    if set.images.is_empty() || gt.images.is_empty() {
        return Ok(None);
    }
    pseudo_quality(set, gt).map(Some)
}

struct Output {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        for sub in ["weights", "pseudo", "reports"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| WssisError::io(d.display().to_string(), e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    fn path(&mut self, name: &str, rel: &str) -> PathBuf {
        self.artifacts.insert(name.to_string(), rel.to_string());
        self.dir.join(rel)
    }

    fn write_text(&mut self, name: &str, rel: &str, text: &str) -> Result<()> {
        let p = self.path(name, rel);
        fs::write(&p, text).map_err(|e| WssisError::io(p.display().to_string(), e))
    }
}

/// Loads the configured datasets and runs every stage.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let inputs = ExperimentInputs::load(config)?;
    run_with(config, &inputs, &mut StageCache::default())
}

/// As [`run_experiment`], but requires at least one extra round.
pub fn run_iterative(config: &ExperimentConfig) -> Result<ExperimentReport> {
    if config.rounds == 0 {
        return Err(WssisError::Config("iterative training needs rounds >= 1".into()));
    }
    run_experiment(config)
}

/// Runs split, teacher, refiner, pseudo labels and students on in-memory
/// data, writing artifacts as each stage finishes. A failing stage aborts
/// the run with its name; earlier artifacts stay on disk.
pub fn run_with(config: &ExperimentConfig, inputs: &ExperimentInputs, cache: &mut StageCache) -> Result<ExperimentReport> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let cfg = config.effective();
    let mut out = Output::new(&cfg.output_dir).map_err(|e| e.in_stage("output"))?;
    out.write_text("config", "config.echo", &cfg.to_toml()).map_err(|e| e.in_stage("output"))?;

    let split = split_stage(&inputs.train, &cfg).map_err(|e| e.in_stage("split"))?;
    let split_json = serde_json::to_string_pretty(&split).expect("split serializes") + "\n";
    out.write_text("split", "split.json", &split_json).map_err(|e| e.in_stage("split"))?;
    let full = inputs.train.subset(&split.full_ids);
    if full.doc.annotations.is_empty() {
        return Err(WssisError::Config("the fully labelled split has no annotations".into()).in_stage("split"));
    }
    let points = points_stage(&inputs.train, &split, &cfg).map_err(|e| e.in_stage("points"))?;
    let points_gt = inputs.train.doc.subset(&split.point_ids);
    let p = out.path("points", "pseudo/points.json");
    write_document(&points.doc, &p).map_err(|e| e.in_stage("points"))?;
    let (eval_set, eval_data) = match &inputs.test {
        Some(t) => ("test".to_string(), t.clone()),
        None => ("point_split".to_string(), inputs.train.subset(&split.point_ids)),
    };

    let full_json = serde_json::to_string(&full.doc).expect("document serializes");
    let teacher_key = fingerprint(&[&cfg.segnet.to_toml(), &full_json]);
    if cache.teacher.as_ref().map(|t| t.0) != Some(teacher_key) {
        let (net, rep) = train_teacher(&full, &cfg.segnet).map_err(|e| e.in_stage("teacher"))?;
        cache.teacher = Some((teacher_key, net, rep));
        cache.refiner = None;
    }
    let (teacher, teacher_rep) = cache.teacher.as_ref().map(|t| (t.1.clone(), t.2.clone())).expect("teacher cached");
    teacher.save(&out.path("teacher", "weights/teacher.safetensors")).map_err(|e| e.in_stage("teacher"))?;
    let teacher_eval = evaluate_model(&teacher, &eval_data, cfg.eval_score_threshold).map_err(|e| e.in_stage("teacher-eval"))?;

    let refiner = if cfg.refiner {
        let refine_key = fingerprint(&[&teacher_key.to_string(), &toml::to_string(&cfg.refine).expect("refine config")]);
        if cache.refiner.as_ref().map(|r| r.0) != Some(refine_key) {
            let (net, rep) = train_refiner(&teacher, &full, &cfg.refine).map_err(|e| e.in_stage("refiner"))?;
            cache.refiner = Some((refine_key, net, rep));
        }
        let (_, net, rep) = cache.refiner.as_ref().expect("refiner cached");
        net.save(&out.path("refiner", "weights/refiner.safetensors")).map_err(|e| e.in_stage("refiner"))?;
        Some((net.clone(), rep.clone()))
    } else {
        None
    };

    let mut rounds = Vec::with_capacity(cfg.rounds + 1);
    let mut generator = teacher.clone();
    for round in 0..=cfg.rounds {
        let stage = |name: &str| format!("round{round}-{name}");
        let (rough, pseudo) = if points.is_empty() {
            (PseudoLabelSet::default(), PseudoLabelSet::default())
        } else {
            pseudo_stage(&generator, &points, &cfg.pseudo_mode, refiner.as_ref().map(|r| &r.0)).map_err(|e| e.in_stage(&stage("pseudo")))?
        };
        let p = out.path(&stage("pseudo"), &format!("pseudo/round{round}.json"));
        write_document(&pseudo.to_document(&points.doc), &p).map_err(|e| e.in_stage(&stage("pseudo")))?;
        let quality = quality_or_none(&pseudo, &points_gt).map_err(|e| e.in_stage(&stage("pseudo")))?;
        let rough_quality = if refiner.is_some() {
            let p = out.path(&stage("rough"), &format!("pseudo/round{round}-rough.json"));
            write_document(&rough.to_document(&points.doc), &p).map_err(|e| e.in_stage(&stage("pseudo")))?;
            quality_or_none(&rough, &points_gt).map_err(|e| e.in_stage(&stage("pseudo")))?
        } else {
            None
        };

        let data = student_dataset(&full, &points, &pseudo).map_err(|e| e.in_stage(&stage("student")))?;
        let (student, rep) = train_student(&data, &cfg.student_config()).map_err(|e| e.in_stage(&stage("student")))?;
        let p = out.path(&stage("student"), &format!("weights/student-round{round}.safetensors"));
        student.save(&p).map_err(|e| e.in_stage(&stage("student")))?;
        let eval = evaluate_model(&student, &eval_data, cfg.eval_score_threshold).map_err(|e| e.in_stage(&stage("eval")))?;
        rounds.push(RoundReport {
            round,
            generator: if round == 0 { "teacher".into() } else { format!("student-round{}", round - 1) },
            pseudo: PseudoMetrics {
                annotations: pseudo.len(),
                stats: pseudo.stats,
                quality,
                rough_quality,
            },
            student: ModelMetrics {
                final_loss: final_loss(&rep.losses),
                eval,
            },
        });
        generator = student;
    }

    let refiner_metrics = refiner.as_ref().map(|(_, rep)| RefinerMetrics {
        samples: rep.samples,
        final_loss: final_loss(&rep.losses),
    });
    out.path("report", "reports/report.json");
    out.path("summary", "reports/report.txt");
    let report = ExperimentReport {
        seed: cfg.seed,
        fraction: cfg.fraction,
        point_mode: cfg.point_mode.clone(),
        pseudo_mode: cfg.pseudo_mode.to_string(),
        refiner_enabled: cfg.refiner,
        full_images: split.full_ids.len(),
        point_images: split.point_ids.len(),
        point_labels: points.doc.point_labels.len(),
        eval_set,
        teacher: ModelMetrics {
            final_loss: final_loss(&teacher_rep.losses),
            eval: teacher_eval,
        },
        refiner: refiner_metrics,
        rounds,
        artifacts: out.artifacts.clone(),
    };
    out.write_text("report", "reports/report.json", &report.to_json()).map_err(|e| e.in_stage("report"))?;
    out.write_text("summary", "reports/report.txt", &report.render()).map_err(|e| e.in_stage("report"))?;
    Ok(report)
}
