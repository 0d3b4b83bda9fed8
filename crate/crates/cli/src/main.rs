mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use wssis_core::annotations::{read_dataset, read_document, write_dataset, write_document, Dataset, DatasetSplit};
use wssis_core::budget::{budget_rows, reference_mixes, render_budget_table, BudgetModel, LabelMix};
use wssis_core::eval::{render_ap_table, ApReport};
use wssis_core::pipeline::{
    evaluate_model, points_stage, pseudo_stage, run_experiment, split_stage, student_dataset, ExperimentConfig,
    ExperimentReport,
};
use wssis_core::pseudo::{pseudo_quality, PseudoLabelSet};
use wssis_core::refine::{refine_pseudo_set, train_refiner, RefineNet};
use wssis_core::segnet::{train_student, train_teacher, SegNet};
use wssis_core::synth::{generate, SynthSpec};
use wssis_core::{Result, WssisError};

use config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "wssis", version, about = "Point-guided weakly semi-supervised instance segmentation")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "WSSIS_SEED")]
    seed: Option<u64>,
    /// Upper bound on worker threads within a stage.
    #[arg(long, global = true, env = "WSSIS_WORKERS", default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    workers: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        max_instances: usize,
        #[arg(long, default_value_t = 0.1)]
        overlap: f64,
    },
    /// Split a dataset into fully and point labelled images.
    Split {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotation budget of a label mix, or the reference table.
    Budget {
        /// Label mix such as `full=0.1,point=0.9`.
        #[arg(long)]
        mix: Option<String>,
        #[arg(long, default_value_t = 118_287)]
        images: usize,
    },
    /// Train the teacher on the fully labelled split.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate pseudo labels for the point-labelled split.
    PseudoGen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Generator weights (teacher or a previous student).
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mask refiner on teacher outputs for the full split.
    TrainRefiner {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine point-guided pseudo labels.
    Refine {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        refiner_weights: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student on full and pseudo labels.
    TrainStudent {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask AP of a model, or of a pseudo-label file, against a dataset.
    Eval {
        /// Annotated dataset to score against.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, conflicts_with = "pseudo", required_unless_present = "pseudo")]
        weights: Option<PathBuf>,
        #[arg(long)]
        pseudo: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1, value_parser = parse_unit)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage end to end.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the summary of a finished run.
    Report {
        /// Output directory of a run.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn parse_unit(text: &str) -> std::result::Result<f64, String> {
    let v: f64 = text.parse().map_err(|_| format!("`{text}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("value must be in [0, 1], got {v}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| WssisError::io(dir.display().to_string(), e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| WssisError::io(path.display().to_string(), e))
}

/// Writes `config.echo` next to a stage output.
fn echo_config(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_text(&dir.join("config.echo"), &cfg.effective().to_toml())
}

/// Effective config, training data and split (read from `split` or
/// recomputed from the config).
fn stage_inputs(cfg: &ConfigArgs, seed: Option<u64>, split: &Option<PathBuf>) -> Result<(ExperimentConfig, Dataset, DatasetSplit)> {
    let config = cfg.resolve(seed)?;
    let train = read_dataset(&config.dataset).map_err(|e| e.in_stage("load"))?;
    let eff = config.effective();
    let split = match split {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| WssisError::io(p.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| WssisError::Parse {
                context: p.display().to_string(),
                message: e.to_string(),
            })?
        }
        None => split_stage(&train, &eff).map_err(|e| e.in_stage("split"))?,
    };
    Ok((config, train, split))
}

fn summary(command: &str, fields: serde_json::Value) -> String {
    let mut v = json!({ "command": command, "status": "ok" });
    if let (Some(obj), serde_json::Value::Object(extra)) = (v.as_object_mut(), fields) {
        obj.extend(extra);
    }
    v.to_string()
}

fn ap_json(r: &ApReport) -> serde_json::Value {
    json!({ "ap": r.ap, "ap50": r.ap50, "ap75": r.ap75, "ar100": r.ar100 })
}

fn dispatch(cli: Cli) -> Result<String> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth {
            out,
            images,
            height,
            width,
            max_instances,
            overlap,
        } => {
            let spec = SynthSpec {
                n_images: images,
                height,
                width,
                max_instances,
                overlap_allowance: overlap,
                seed: seed.unwrap_or(0),
                ..Default::default()
            };
            let s = generate(&spec).map_err(|e| e.in_stage("synth"))?;
            let path = out.join("dataset.json");
            write_dataset(&s.dataset, &path).map_err(|e| e.in_stage("synth"))?;
            Ok(summary(
                "synth",
                json!({
                    "dataset": path,
                    "images": s.dataset.len(),
                    "annotations": s.dataset.doc.annotations.len(),
                    "skipped_instances": s.skipped_instances,
                }),
            ))
        }
        Command::Split { cfg, out } => {
            let (config, _, split) = stage_inputs(&cfg, seed, &None)?;
            write_text(&out, &(serde_json::to_string_pretty(&split).expect("split serializes") + "\n"))?;
            echo_config(&out, &config)?;
            Ok(summary(
                "split",
                json!({ "out": out, "full_images": split.full_ids.len(), "point_images": split.point_ids.len() }),
            ))
        }
        Command::Budget { mix, images } => {
            let model = BudgetModel::default();
            let mixes = match &mix {
                Some(m) => vec![LabelMix::parse(m, images).map_err(|e| e.in_stage("budget"))?],
                None => reference_mixes(images),
            };
            let rows = budget_rows(&model, &mixes).map_err(|e| e.in_stage("budget"))?;
            let table = render_budget_table(&rows);
            let rows_json: Vec<_> = rows.iter().map(|r| json!({ "mix": r.mix, "days": r.days })).collect();
            Ok(format!("{table}{}", summary("budget", json!({ "images": images, "rows": rows_json }))))
        }
        Command::TrainTeacher { cfg, split, out } => {
            let (config, train, split) = stage_inputs(&cfg, seed, &split)?;
            let eff = config.effective();
            let full = train.subset(&split.full_ids);
            let (net, rep) = train_teacher(&full, &eff.segnet).map_err(|e| e.in_stage("teacher"))?;
            ensure_parent(&out)?;
            net.save(&out).map_err(|e| e.in_stage("teacher"))?;
            echo_config(&out, &config)?;
            Ok(summary(
                "train-teacher",
                json!({ "out": out, "steps": rep.steps, "final_loss": rep.losses.last().copied().unwrap_or(0.0) }),
            ))
        }
        Command::PseudoGen { cfg, split, weights, out } => {
            let (config, train, split) = stage_inputs(&cfg, seed, &split)?;
            let eff = config.effective();
            let net = SegNet::load(&weights).map_err(|e| e.in_stage("pseudo"))?;
            let points = points_stage(&train, &split, &eff).map_err(|e| e.in_stage("points"))?;
            let (rough, _) = pseudo_stage(&net, &points, &eff.pseudo_mode, None).map_err(|e| e.in_stage("pseudo"))?;
            write_document(&rough.to_document(&points.doc), &out).map_err(|e| e.in_stage("pseudo"))?;
            echo_config(&out, &config)?;
            Ok(summary(
                "pseudo-gen",
                json!({
                    "out": out,
                    "mode": eff.pseudo_mode.to_string(),
                    "annotations": rough.len(),
                    "empty_masks": rough.stats.empty_masks,
                    "pre_nms_proposals": rough.stats.pre_nms_proposals,
                }),
            ))
        }
        Command::TrainRefiner { cfg, split, teacher, out } => {
            let (config, train, split) = stage_inputs(&cfg, seed, &split)?;
            let eff = config.effective();
            let net = SegNet::load(&teacher).map_err(|e| e.in_stage("refiner"))?;
            let full = train.subset(&split.full_ids);
            let (refiner, rep) = train_refiner(&net, &full, &eff.refine).map_err(|e| e.in_stage("refiner"))?;
            ensure_parent(&out)?;
            refiner.save(&out).map_err(|e| e.in_stage("refiner"))?;
            echo_config(&out, &config)?;
            Ok(summary(
                "train-refiner",
                json!({ "out": out, "samples": rep.samples, "final_loss": rep.losses.last().copied().unwrap_or(0.0) }),
            ))
        }
        Command::Refine {
            cfg,
            split,
            refiner_weights,
            pseudo,
            out,
        } => {
            let (config, train, split) = stage_inputs(&cfg, seed, &split)?;
            let eff = config.effective();
            let net = RefineNet::load(&refiner_weights).map_err(|e| e.in_stage("refine"))?;
            let points = points_stage(&train, &split, &eff).map_err(|e| e.in_stage("points"))?;
            let rough = PseudoLabelSet::from_document(&read_document(&pseudo)?, &eff.pseudo_mode.to_string());
            let refined = refine_pseudo_set(&net, &rough, &points).map_err(|e| e.in_stage("refine"))?;
            write_document(&refined.to_document(&points.doc), &out).map_err(|e| e.in_stage("refine"))?;
            echo_config(&out, &config)?;
            Ok(summary(
                "refine",
                json!({ "out": out, "annotations": refined.len(), "fallbacks": refined.stats.refine_fallbacks }),
            ))
        }
        Command::TrainStudent { cfg, split, pseudo, out } => {
            let (config, train, split) = stage_inputs(&cfg, seed, &split)?;
            let eff = config.effective();
            let points = points_stage(&train, &split, &eff).map_err(|e| e.in_stage("points"))?;
            let set = PseudoLabelSet::from_document(&read_document(&pseudo)?, &eff.pseudo_mode.to_string());
            let full = train.subset(&split.full_ids);
            let data = student_dataset(&full, &points, &set).map_err(|e| e.in_stage("student"))?;
            let (net, rep) = train_student(&data, &eff.student_config()).map_err(|e| e.in_stage("student"))?;
            ensure_parent(&out)?;
            net.save(&out).map_err(|e| e.in_stage("student"))?;
            echo_config(&out, &config)?;
            Ok(summary(
                "train-student",
                json!({ "out": out, "images": data.len(), "final_loss": rep.losses.last().copied().unwrap_or(0.0) }),
            ))
        }
        Command::Eval {
            dataset,
            weights,
            pseudo,
            tau,
            out,
        } => {
            let data = read_dataset(&dataset).map_err(|e| e.in_stage("eval"))?;
            let (what, report) = match (weights, pseudo) {
                (Some(w), _) => {
                    let net = SegNet::load(&w).map_err(|e| e.in_stage("eval"))?;
                    (w, evaluate_model(&net, &data, tau).map_err(|e| e.in_stage("eval"))?)
                }
                (None, Some(p)) => {
                    let set = PseudoLabelSet::from_document(&read_document(&p)?, "file");
                    (p, pseudo_quality(&set, &data.doc).map_err(|e| e.in_stage("eval"))?)
                }
                (None, None) => unreachable!("clap requires one of --weights, --pseudo"),
            };
            if let Some(o) = &out {
                write_text(o, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
            }
            let table = render_ap_table(&[(what.display().to_string(), report.clone())]);
            Ok(format!("{table}{}", summary("eval", ap_json(&report))))
        }
        Command::Run { cfg } => {
            let config = cfg.resolve(seed)?;
            let report = run_experiment(&config)?;
            Ok(format!(
                "{}{}",
                report.render(),
                summary(
                    "run",
                    json!({
                        "output_dir": config.output_dir,
                        "teacher": ap_json(&report.teacher.eval),
                        "student": ap_json(report.final_eval()),
                        "rounds": report.rounds.len(),
                    }),
                )
            ))
        }
        Command::Report { dir, json: as_json } => {
            let path = dir.join("reports/report.json");
            let text = std::fs::read_to_string(&path).map_err(|e| WssisError::io(path.display().to_string(), e))?;
            let report: ExperimentReport = serde_json::from_str(&text).map_err(|e| WssisError::Parse {
                context: path.display().to_string(),
                message: e.to_string(),
            })?;
            if as_json {
                return Ok(report.to_json().trim_end().to_string());
            }
            Ok(format!(
                "{}{}",
                report.render(),
                summary("report", json!({ "student": ap_json(report.final_eval()), "rounds": report.rounds.len() }))
            ))
        }
    }
}
