use std::path::{Path, PathBuf};

use clap::Args;
use wssis_core::pipeline::ExperimentConfig;
use wssis_core::pseudo::GenerationMode;
use wssis_core::{Result, WssisError};

/// Experiment config file plus targeted overrides. Each override is taken
/// from its flag, else from its `WSSIS_*` variable, else from the file.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, env = "WSSIS_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "WSSIS_DATASET")]
    pub dataset: Option<PathBuf>,
    #[arg(long, env = "WSSIS_TEST_DATASET")]
    pub test_dataset: Option<PathBuf>,
    /// Fraction of images that keep full labels, in (0, 1].
    #[arg(long, env = "WSSIS_FRACTION", value_parser = parse_fraction)]
    pub fraction: Option<f64>,
    /// Point sampler: centroid or random.
    #[arg(long, env = "WSSIS_POINT_MODE")]
    pub point_mode: Option<String>,
    /// point_guided, threshold[:tau] or image_level[:tau].
    #[arg(long, env = "WSSIS_PSEUDO_MODE", value_parser = parse_mode)]
    pub pseudo_mode: Option<GenerationMode>,
    #[arg(long, env = "WSSIS_REFINER")]
    pub refiner: Option<bool>,
    #[arg(long, env = "WSSIS_ROUNDS")]
    pub rounds: Option<usize>,
    /// Segmentation network training steps (teacher and, unless
    /// overridden, student).
    #[arg(long, env = "WSSIS_STEPS")]
    pub steps: Option<usize>,
    #[arg(long, env = "WSSIS_STUDENT_STEPS")]
    pub student_steps: Option<usize>,
    #[arg(long, env = "WSSIS_REFINE_STEPS")]
    pub refine_steps: Option<usize>,
    #[arg(long, env = "WSSIS_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
}

pub fn parse_fraction(text: &str) -> std::result::Result<f64, String> {
    let f: f64 = text.parse().map_err(|_| format!("`{text}` is not a number"))?;
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(format!("fraction must be in (0, 1], got {f}"))
    }
}

fn parse_mode(text: &str) -> std::result::Result<GenerationMode, String> {
    GenerationMode::parse(text).map_err(|e| e.to_string())
}

impl ConfigArgs {
    /// File, then environment and flags, then the global seed.
    pub fn resolve(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => read_config(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.dataset {
            c.dataset = v.clone();
        }
        if let Some(v) = &self.test_dataset {
            c.test_dataset = Some(v.clone());
        }
        if let Some(v) = self.fraction {
            c.fraction = v;
        }
        if let Some(v) = &self.point_mode {
            c.point_mode = v.clone();
        }
        if let Some(v) = &self.pseudo_mode {
            c.pseudo_mode = v.clone();
        }
        if let Some(v) = self.refiner {
            c.refiner = v;
        }
        if let Some(v) = self.rounds {
            c.rounds = v;
        }
        if let Some(v) = self.steps {
            c.segnet.train.steps = v;
        }
        if let Some(v) = self.student_steps {
            c.student_steps = Some(v);
        }
        if let Some(v) = self.refine_steps {
            c.refine.steps = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| WssisError::io(path.display().to_string(), e))?;
    let mut c = ExperimentConfig::from_toml(&text).map_err(|e| match e {
        WssisError::Parse { message, .. } => WssisError::Parse {
            context: path.display().to_string(),
            message,
        },
        other => other,
    })?;
    // Relative dataset paths are relative to the config file.
    let base = path.parent().unwrap_or(Path::new("."));
    if c.dataset.is_relative() {
        c.dataset = base.join(&c.dataset);
    }
    if let Some(t) = c.test_dataset.as_mut().filter(|t| t.is_relative()) {
        *t = base.join(&*t);
    }
    Ok(c)
}
