//! Segmentation samples, label maps, the synthetic shapes corpus and the
//! on-disk dataset layout.

mod io;
mod shapes;

pub use io::{ingest, write_dataset, LABELS_FILE};
pub use shapes::{generate, DomainShiftSpec, ShapeKind, SynthSpec};

use std::collections::BTreeSet;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Row-major `H×W×C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// One (image, class-name prompt, ground-truth mask) query. Samples that
/// share an image share the `Arc`.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub sample_id: String,
    pub image: Arc<Image>,
    pub prompt: String,
    pub mask: Mask,
    pub domain: Domain,
}

/// Class name → class id, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelMap {
    entries: Vec<(String, u32)>,
}

impl LabelMap {
    pub fn new(names: &[&str]) -> Self {
        Self {
            entries: names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), i as u32 + 1))
                .collect(),
        }
    }

    /// Parse `class_name<TAB>class_id` lines; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, id) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("labels line {} is not `name<TAB>id`", lineno + 1))
            })?;
            let id: u32 = id.trim().parse().map_err(|_| {
                Error::Config(format!("labels line {}: bad class id `{id}`", lineno + 1))
            })?;
            let name = name.trim().to_string();
            if name.is_empty() || !seen.insert(name.clone()) {
                return Err(Error::Config(format!(
                    "labels line {}: empty or duplicate class name",
                    lineno + 1
                )));
            }
            entries.push((name, id));
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(n, id)| format!("{n}\t{id}\n"))
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub labels: LabelMap,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    /// Distinct images in first-appearance order.
    pub fn images(&self) -> Vec<(String, Arc<Image>)> {
        let mut seen = BTreeSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.sample_id.clone()))
            .map(|s| (s.sample_id.clone(), s.image.clone()))
            .collect()
    }

    pub fn blank_fraction(&self) -> f64 {
        let blank = self.samples.iter().filter(|s| s.mask.is_blank()).count();
        blank as f64 / self.samples.len().max(1) as f64
    }
}

/// Stack images into a `(B, H, W, C)` f32 tensor.
pub fn images_to_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::Shape("images in a batch differ in shape".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, c), device)?)
}

/// Stack masks into a `(B, H, W)` f32 tensor of 0/1.
pub fn masks_to_tensor(masks: &[&Mask], device: &Device) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Shape("empty mask batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.shape() != (h, w) {
            return Err(Error::Shape("masks in a batch differ in shape".into()));
        }
        data.extend(m.as_f32());
    }
    Ok(Tensor::from_vec(data, (masks.len(), h, w), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_roundtrips_through_text() {
        let m = LabelMap::new(&["circle", "hepatic vein"]);
        let parsed = LabelMap::parse(&m.to_text()).unwrap();
        assert_eq!(parsed, m);
        assert_eq!(parsed.id("hepatic vein"), Some(2));
    }

    #[test]
    fn malformed_label_lines_are_rejected() {
        assert!(LabelMap::parse("circle 1\n").is_err());
        assert!(LabelMap::parse("circle\tx\n").is_err());
        assert!(LabelMap::parse("a\t1\na\t2\n").is_err());
    }
}
