//! Images, instance masks, point labels and dataset splits in a COCO-style
//! document.

mod io;
mod points;
mod rle;
mod split;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use io::{parse_document, read_dataset, read_document, write_dataset, write_document};
pub use points::{
    centroid_point, point_sampler_registry, random_point, CentroidSampler, PointSampler,
    RandomSampler,
};
pub use rle::{decode_rle, encode_rle, Rle};
pub use split::{split_dataset, DatasetSplit};

use crate::error::{Result, WssisError};
use crate::image::RgbImage;
use crate::mask::BinaryMask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

/// Point that guided a pseudo annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidingPoint {
    pub x: usize,
    pub y: usize,
}

/// Instance mask with category, box and area. Used for ground truth,
/// predictions and pseudo labels alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    #[serde(rename = "category_id")]
    pub category: u32,
    #[serde(rename = "segmentation")]
    pub mask: Rle,
    /// `[x_min, y_min, width, height]`.
    pub bbox: [usize; 4],
    pub area: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_level: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guiding_point: Option<GuidingPoint>,
    /// Set on pseudo annotations whose generated mask came out empty.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

impl InstanceAnnotation {
    /// Builds an annotation whose RLE, box and area are derived from `mask`.
    /// An empty mask yields a zero box and zero area.
    pub fn from_mask(id: u64, image_id: u64, category: u32, mask: &BinaryMask) -> Result<Self> {
        let rle = encode_rle(mask)?;
        let bbox = match mask.bounds() {
            Some((x0, y0, x1, y1)) => [x0, y0, x1 - x0, y1 - y0],
            None => [0; 4],
        };
        Ok(Self {
            id,
            image_id,
            category,
            mask: rle,
            bbox,
            area: mask.count(),
            score: None,
            source_level: None,
            guiding_point: None,
            empty: false,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn height(&self) -> usize {
        self.mask.size[0]
    }

    pub fn width(&self) -> usize {
        self.mask.size[1]
    }

    pub fn decode_mask(&self) -> Result<BinaryMask> {
        decode_rle(&self.mask, self.mask.size[0], self.mask.size[1])
    }

    /// Checks that area and box agree with the decoded mask.
    pub fn validate(&self) -> Result<()> {
        let mask = self.decode_mask()?;
        if mask.count() != self.area {
            return Err(WssisError::CorruptAnnotation(format!(
                "annotation {}: area {} but mask has {} pixels",
                self.id,
                self.area,
                mask.count()
            )));
        }
        let expected = match mask.bounds() {
            Some((x0, y0, x1, y1)) => [x0, y0, x1 - x0, y1 - y0],
            None => [0; 4],
        };
        if expected != self.bbox {
            return Err(WssisError::CorruptAnnotation(format!(
                "annotation {}: bbox {:?} but mask bounds are {:?}",
                self.id, self.bbox, expected
            )));
        }
        Ok(())
    }
}

/// One-pixel categorical instance cue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointLabel {
    pub image_id: u64,
    /// Column.
    pub x: usize,
    /// Row.
    pub y: usize,
    #[serde(rename = "category_id")]
    pub category: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_instance_id: Option<u64>,
}

/// The COCO-style annotation document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<InstanceAnnotation>,
    pub categories: Vec<Category>,
    #[serde(default)]
    pub point_labels: Vec<PointLabel>,
}

impl CocoDocument {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.images.iter().map(|i| i.id).collect()
    }

    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&InstanceAnnotation>> {
        let mut map: BTreeMap<u64, Vec<&InstanceAnnotation>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }

    pub fn points_by_image(&self) -> BTreeMap<u64, Vec<PointLabel>> {
        let mut map: BTreeMap<u64, Vec<PointLabel>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for p in &self.point_labels {
            map.entry(p.image_id).or_default().push(*p);
        }
        map
    }

    /// Image-level labels: the set of categories present per image.
    pub fn image_categories(&self) -> BTreeMap<u64, BTreeSet<u32>> {
        let mut map: BTreeMap<u64, BTreeSet<u32>> =
            self.images.iter().map(|i| (i.id, BTreeSet::new())).collect();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().insert(a.category);
        }
        for p in &self.point_labels {
            map.entry(p.image_id).or_default().insert(p.category);
        }
        map
    }

    /// Referential and structural checks performed after parsing.
    pub fn validate(&self) -> Result<()> {
        let mut cat_ids: Vec<u32> = self.categories.iter().map(|c| c.id).collect();
        cat_ids.sort_unstable();
        if cat_ids.iter().enumerate().any(|(i, &c)| c as usize != i + 1) {
            return Err(WssisError::Integrity(format!(
                "category ids must be contiguous from 1, got {cat_ids:?}"
            )));
        }
        let c_max = cat_ids.len() as u32;
        let mut images = BTreeMap::new();
        for img in &self.images {
            if images.insert(img.id, img).is_some() {
                return Err(WssisError::Integrity(format!("duplicate image id {}", img.id)));
            }
        }
        let mut ann_ids = BTreeSet::new();
        for a in &self.annotations {
            let img = images.get(&a.image_id).ok_or_else(|| {
                WssisError::Integrity(format!(
                    "annotation {} references unknown image_id {}",
                    a.id, a.image_id
                ))
            })?;
            if !ann_ids.insert(a.id) {
                return Err(WssisError::Integrity(format!("duplicate annotation id {}", a.id)));
            }
            if a.category == 0 || a.category > c_max {
                return Err(WssisError::Integrity(format!(
                    "annotation {} has unknown category_id {}",
                    a.id, a.category
                )));
            }
            if a.mask.size != [img.height, img.width] {
                return Err(WssisError::Integrity(format!(
                    "annotation {} mask size {:?} does not match image {} ({}x{})",
                    a.id, a.mask.size, img.id, img.height, img.width
                )));
            }
            a.validate()?;
        }
        for p in &self.point_labels {
            let img = images.get(&p.image_id).ok_or_else(|| {
                WssisError::Integrity(format!("point label references unknown image_id {}", p.image_id))
            })?;
            if p.x >= img.width || p.y >= img.height {
                return Err(WssisError::Integrity(format!(
                    "point ({}, {}) outside image {} ({}x{})",
                    p.x, p.y, img.id, img.width, img.height
                )));
            }
            if p.category == 0 || p.category > c_max {
                return Err(WssisError::Integrity(format!(
                    "point label on image {} has unknown category_id {}",
                    p.image_id, p.category
                )));
            }
        }
        Ok(())
    }

    /// Sub-document restricted to `ids`, keeping annotations and points of
    /// those images.
    pub fn subset(&self, ids: &BTreeSet<u64>) -> CocoDocument {
        CocoDocument {
            images: self.images.iter().filter(|i| ids.contains(&i.id)).cloned().collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| ids.contains(&a.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
            point_labels: self
                .point_labels
                .iter()
                .filter(|p| ids.contains(&p.image_id))
                .copied()
                .collect(),
        }
    }
}

/// Annotation document plus the decoded pixels of its images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub doc: CocoDocument,
    pub pixels: BTreeMap<u64, RgbImage>,
}

impl Dataset {
    pub fn subset(&self, ids: &BTreeSet<u64>) -> Dataset {
        Dataset {
            doc: self.doc.subset(ids),
            pixels: self
                .pixels
                .iter()
                .filter(|(id, _)| ids.contains(id))
                .map(|(id, img)| (*id, img.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.doc.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc.images.is_empty()
    }

    pub fn pixels_of(&self, id: u64) -> Result<&RgbImage> {
        self.pixels
            .get(&id)
            .ok_or_else(|| WssisError::Integrity(format!("no pixel data for image {id}")))
    }

    /// Copy of this dataset where every image carries only point labels,
    /// one per non-empty annotation, drawn with `sampler`.
    pub fn to_point_labeled(&self, sampler: &dyn PointSampler, seed: u64) -> Result<Dataset> {
        let mut points = Vec::new();
        for a in self.doc.annotations.iter().filter(|a| a.area > 0) {
            points.push(sampler.sample(a, crate::rng::derive_seed(seed, a.id))?);
        }
        let mut doc = self.doc.clone();
        doc.annotations.clear();
        doc.point_labels = points;
        Ok(Dataset {
            doc,
            pixels: self.pixels.clone(),
        })
    }
}
