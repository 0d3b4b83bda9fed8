//! Annotation-time model: per-image labeling cost for each label type and the
//! total budget, in annotator-days, of a mix of label types.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WssisError};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Images in the COCO 2017 train split.
pub const COCO_TRAIN_IMAGES: usize = 118_287;

/// Timing constants (seconds) and per-image dataset statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetModel {
    pub sec_per_class_check: f64,
    pub sec_per_mask: f64,
    pub sec_per_box: f64,
    pub sec_first_point: f64,
    pub sec_extra_point: f64,
    pub sec_per_point_in_10pt: f64,
    /// Classes checked per image when annotating instances.
    pub classes_checked_per_image: f64,
    pub instances_per_image: f64,
    pub categories_per_image: f64,
    /// Classes checked for an image-level label.
    pub total_classes: usize,
}

impl Default for BudgetModel {
    /// COCO statistics.
    fn default() -> Self {
        Self {
            sec_per_class_check: 1.0,
            sec_per_mask: 79.0,
            sec_per_box: 7.0,
            sec_first_point: 2.4,
            sec_extra_point: 0.9,
            sec_per_point_in_10pt: 0.9,
            classes_checked_per_image: 77.1,
            instances_per_image: 7.2,
            categories_per_image: 2.9,
            total_classes: 80,
        }
    }
}

impl BudgetModel {
    pub fn validate(&self) -> Result<()> {
        let times = [
            self.sec_per_class_check,
            self.sec_per_mask,
            self.sec_per_box,
            self.sec_first_point,
            self.sec_extra_point,
            self.sec_per_point_in_10pt,
        ];
        if times.iter().any(|t| !(*t > 0.0)) {
            return Err(WssisError::Config("all annotation times must be positive".into()));
        }
        if self.categories_per_image > self.instances_per_image {
            return Err(WssisError::Config(
                "categories_per_image cannot exceed instances_per_image".into(),
            ));
        }
        Ok(())
    }

    /// Seconds needed to label one image with `label`.
    pub fn per_image_cost(&self, label: LabelType) -> f64 {
        let check = self.classes_checked_per_image * self.sec_per_class_check;
        let inst = self.instances_per_image;
        let cats = self.categories_per_image;
        match label {
            LabelType::Full => check + inst * self.sec_per_mask,
            LabelType::Box => check + inst * self.sec_per_box,
            // First point per category costs more than the following ones.
            LabelType::Point => {
                check + cats * self.sec_first_point + (inst - cats) * self.sec_extra_point
            }
            LabelType::ImageLevel => self.total_classes as f64 * self.sec_per_class_check,
            LabelType::TenPoints => {
                check + inst * (self.sec_per_box + 10.0 * self.sec_per_point_in_10pt)
            }
            LabelType::Unlabeled => 0.0,
        }
    }

    pub fn mix_budget_days(&self, mix: &LabelMix) -> Result<f64> {
        mix.validate()?;
        let seconds: f64 = mix
            .parts
            .iter()
            .map(|(label, fraction)| fraction * mix.n_images as f64 * self.per_image_cost(*label))
            .sum();
        Ok(seconds / SECONDS_PER_DAY)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelType {
    Full,
    Box,
    Point,
    ImageLevel,
    TenPoints,
    Unlabeled,
}

impl LabelType {
    pub const ALL: [LabelType; 6] = [
        LabelType::Full,
        LabelType::Box,
        LabelType::Point,
        LabelType::ImageLevel,
        LabelType::TenPoints,
        LabelType::Unlabeled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelType::Full => "full",
            LabelType::Box => "box",
            LabelType::Point => "point",
            LabelType::ImageLevel => "image_level",
            LabelType::TenPoints => "ten_points",
            LabelType::Unlabeled => "unlabeled",
        }
    }

    /// One-letter notation used in budget tables.
    pub fn short(self) -> &'static str {
        match self {
            LabelType::Full => "F",
            LabelType::Box => "B",
            LabelType::Point => "P",
            LabelType::ImageLevel => "I",
            LabelType::TenPoints => "P10",
            LabelType::Unlabeled => "U",
        }
    }
}

impl fmt::Display for LabelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelType {
    type Err = WssisError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        LabelType::ALL
            .into_iter()
            .find(|l| l.as_str() == lower || l.short().eq_ignore_ascii_case(&lower))
            .ok_or_else(|| WssisError::Config(format!("unknown label type `{s}`")))
    }
}

/// Fractions of a dataset labeled with each label type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMix {
    pub parts: Vec<(LabelType, f64)>,
    pub n_images: usize,
}

impl LabelMix {
    pub fn new(parts: Vec<(LabelType, f64)>, n_images: usize) -> Self {
        Self { parts, n_images }
    }

    /// Parses `full=0.05,point=0.95`.
    pub fn parse(spec: &str, n_images: usize) -> Result<Self> {
        let mut parts = Vec::new();
        for item in spec.split(',').filter(|s| !s.trim().is_empty()) {
            let (label, fraction) = item
                .split_once('=')
                .ok_or_else(|| WssisError::Config(format!("mix entry `{item}` is not label=fraction")))?;
            let fraction: f64 = fraction
                .trim()
                .parse()
                .map_err(|_| WssisError::Config(format!("bad fraction in `{item}`")))?;
            parts.push((label.parse()?, fraction));
        }
        let mix = Self { parts, n_images };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(WssisError::Config("label mix needs at least one image".into()));
        }
        if self.parts.iter().any(|(_, f)| !(0.0..=1.0).contains(f)) {
            return Err(WssisError::Config("mix fractions must lie in [0, 1]".into()));
        }
        let total: f64 = self.parts.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(WssisError::Config(format!(
                "mix fractions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// `F 5% + P 95%` style label.
    pub fn label(&self) -> String {
        self.parts
            .iter()
            .filter(|(_, f)| *f > 0.0)
            .map(|(l, f)| format!("{} {}%", l.short(), format_percent(*f)))
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

fn format_percent(f: f64) -> String {
    let p = f * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p:.1}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub mix: String,
    pub n_images: usize,
    pub days: f64,
}

pub fn budget_rows(model: &BudgetModel, mixes: &[LabelMix]) -> Result<Vec<BudgetRow>> {
    mixes
        .iter()
        .map(|m| {
            Ok(BudgetRow {
                mix: m.label(),
                n_images: m.n_images,
                days: model.mix_budget_days(m)?,
            })
        })
        .collect()
}

/// Aligned text table: label mix, image count, budget in days.
pub fn render_budget_table(rows: &[BudgetRow]) -> String {
    let width = rows.iter().map(|r| r.mix.len()).max().unwrap_or(0).max("Label mix".len());
    let mut out = format!("{:<width$}  {:>8}  {:>13}\n", "Label mix", "Images", "Budget (days)");
    for r in rows {
        out.push_str(&format!("{:<width$}  {:>8}  {:>13.1}\n", r.mix, r.n_images, r.days));
    }
    out
}

/// The label mixes of the budget/accuracy comparison table.
pub fn reference_mixes(n_images: usize) -> Vec<LabelMix> {
    use LabelType::*;
    let mix = |parts: Vec<(LabelType, f64)>| LabelMix::new(parts, n_images);
    vec![
        mix(vec![(ImageLevel, 1.0)]),
        mix(vec![(Point, 1.0)]),
        mix(vec![(Box, 1.0)]),
        mix(vec![(TenPoints, 1.0)]),
        mix(vec![(Full, 0.05), (Unlabeled, 0.95)]),
        mix(vec![(Full, 0.05), (Point, 0.95)]),
        mix(vec![(Full, 0.1), (Point, 0.9)]),
        mix(vec![(Full, 0.2), (Point, 0.8)]),
        mix(vec![(Full, 0.3), (Point, 0.7)]),
        mix(vec![(Full, 0.5), (Point, 0.5)]),
        mix(vec![(Full, 1.0)]),
    ]
}
