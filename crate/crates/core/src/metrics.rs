//! DICE with the blank-mask convention, per-class evaluation, and a paired
//! Wilcoxon signed-rank test.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{images_to_tensor, Dataset, Image};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::PromptSegModel;
use crate::text::TextEncoder;

/// `2|P∩G| / (|P|+|G|)`, and 1 when both masks are blank.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "dice: prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (p, g) = (pred.count(), gt.count());
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.intersection_count(gt) as f64 / (p + g) as f64)
}

/// Anything that can produce binary masks for (image, prompt) queries.
pub trait Segmenter {
    fn segment(&self, queries: &[(&Image, &str)]) -> Result<Vec<Mask>>;
}

/// [`Segmenter`] backed by the model and a text encoder.
pub struct ModelSegmenter<'a, T: TextEncoder + ?Sized> {
    pub model: &'a PromptSegModel,
    pub text: &'a T,
    pub batch_size: usize,
}

impl<T: TextEncoder + ?Sized> Segmenter for ModelSegmenter<'_, T> {
    fn segment(&self, queries: &[(&Image, &str)]) -> Result<Vec<Mask>> {
        let mut out = Vec::with_capacity(queries.len());
        let device = candle_core::Device::Cpu;
        for chunk in queries.chunks(self.batch_size.max(1)) {
            let images: Vec<&Image> = chunk.iter().map(|(i, _)| *i).collect();
            let prompts: Vec<&str> = chunk.iter().map(|(_, p)| *p).collect();
            let x = images_to_tensor(&images, &device)?;
            let e = self.text.embed_batch(&prompts, &device)?;
            let logits = self.model.predict_mask(&x, &e)?;
            let (b, h, w) = logits.dims3()?;
            let flat = logits.flatten_all()?.to_vec1::<f32>()?;
            for i in 0..b {
                out.push(Mask::from_logits(h, w, &flat[i * h * w..(i + 1) * h * w])?);
            }
        }
        Ok(out)
    }
}

/// Which (image, class) pairs an evaluation queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalProtocol {
    /// Every label on every image; absent classes give blank ground truth.
    #[default]
    AllLabels,
    /// Only classes present in the image.
    PresentOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDice {
    pub sample_id: String,
    pub class: String,
    pub dsc: f64,
    pub gt_blank: bool,
    pub pred_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    /// Sorted by `(sample_id, class)`.
    pub per_sample: Vec<SampleDice>,
    pub per_class: BTreeMap<String, f64>,
    /// Unweighted mean of the per-class means.
    pub average: f64,
}

impl DiceResult {
    pub fn from_samples(mut per_sample: Vec<SampleDice>, classes: &[String]) -> Self {
        per_sample.sort_by(|a, b| (&a.sample_id, &a.class).cmp(&(&b.sample_id, &b.class)));
        let per_class = class_means(per_sample.iter());
        let means: Vec<f64> = classes.iter().filter_map(|c| per_class.get(c).copied()).collect();
        let average = if means.is_empty() {
            0.0
        } else {
            means.iter().sum::<f64>() / means.len() as f64
        };
        Self {
            per_sample,
            per_class,
            average,
        }
    }

    /// Per-class mean DSC over the blank-ground-truth queries only.
    pub fn blank_per_class(&self) -> BTreeMap<String, f64> {
        class_means(self.per_sample.iter().filter(|s| s.gt_blank))
    }

    /// Mean predicted foreground fraction over blank-ground-truth queries.
    pub fn blank_foreground_fraction(&self) -> f64 {
        let blank: Vec<f64> = self
            .per_sample
            .iter()
            .filter(|s| s.gt_blank)
            .map(|s| s.pred_fraction)
            .collect();
        blank.iter().sum::<f64>() / blank.len().max(1) as f64
    }

    pub fn scores(&self) -> Vec<f64> {
        self.per_sample.iter().map(|s| s.dsc).collect()
    }
}

fn class_means<'a>(it: impl Iterator<Item = &'a SampleDice>) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in it {
        let e = acc.entry(s.class.clone()).or_insert((0.0, 0));
        e.0 += s.dsc;
        e.1 += 1;
    }
    acc.into_iter().map(|(c, (sum, n))| (c, sum / n as f64)).collect()
}

/// Evaluate `segmenter` on `dataset`. Under [`EvalProtocol::AllLabels`] every
/// label in `dataset.labels` is queried on every image; a label without a
/// sample for that image has blank ground truth.
pub fn evaluate(segmenter: &dyn Segmenter, dataset: &Dataset, protocol: EvalProtocol) -> Result<DiceResult> {
    let unknown: BTreeSet<String> = dataset
        .samples
        .iter()
        .filter(|s| !dataset.labels.contains(&s.prompt))
        .map(|s| s.prompt.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownLabels(unknown.into_iter().collect()));
    }
    let classes: Vec<String> = dataset.labels.names().map(str::to_string).collect();

    let mut gt: BTreeMap<(String, String), &Mask> = BTreeMap::new();
    for s in &dataset.samples {
        gt.insert((s.sample_id.clone(), s.prompt.clone()), &s.mask);
    }
    let images = dataset.images();
    let mut queries = Vec::new();
    for (id, image) in &images {
        for class in &classes {
            let truth = match gt.get(&(id.clone(), class.clone())) {
                Some(m) => (*m).clone(),
                None => Mask::blank(image.height, image.width),
            };
            if protocol == EvalProtocol::PresentOnly && truth.is_blank() {
                continue;
            }
            queries.push((id.clone(), image.clone(), class.clone(), truth));
        }
    }
    let refs: Vec<(&Image, &str)> = queries
        .iter()
        .map(|(_, img, c, _)| (img.as_ref(), c.as_str()))
        .collect();
    let preds = segmenter.segment(&refs)?;
    let per_sample = queries
        .iter()
        .zip(&preds)
        .map(|((id, _, class, truth), pred)| {
            Ok(SampleDice {
                sample_id: id.clone(),
                class: class.clone(),
                dsc: dice(pred, truth)?,
                gt_blank: truth.is_blank(),
                pred_fraction: pred.foreground_fraction(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiceResult::from_samples(per_sample, &classes))
}

/// Largest sample size evaluated with the exact signed-rank distribution.
pub const EXACT_MAX_N: usize = 25;

/// Two-sided Wilcoxon signed-rank p-value for paired scores. Zero
/// differences are dropped; tied magnitudes get mid-ranks.
pub fn paired_significance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "signed-rank test needs at least 5 pairs, got {}",
            a.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let ranks2 = doubled_midranks(&diffs);
    let w2: usize = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let n = diffs.len();
    if n <= EXACT_MAX_N {
        Ok(exact_two_sided(&ranks2, w2))
    } else {
        Ok(normal_two_sided(&diffs, &ranks2, w2))
    }
}

/// Mid-ranks of `|d|`, doubled so they are integers.
fn doubled_midranks(diffs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..diffs.len()).collect();
    idx.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0; diffs.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && diffs[idx[end]].abs() == diffs[idx[start]].abs() {
            end += 1;
        }
        // positions start+1 ..= end, mean doubled = start + 1 + end
        for &i in &idx[start..end] {
            ranks[i] = start + 1 + end;
        }
        start = end;
    }
    ranks
}

fn exact_two_sided(ranks2: &[usize], w2: usize) -> f64 {
    let total: usize = ranks2.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in ranks2 {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(ranks2.len() as i32);
    let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_two_sided(diffs: &[f64], ranks2: &[usize], w2: usize) -> f64 {
    let n = diffs.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &r in ranks2 {
        *tie_sizes.entry(r).or_insert(0) += 1;
    }
    let tie_term: f64 = tie_sizes
        .values()
        .map(|&t| (t as f64).powi(3) - t as f64)
        .sum::<f64>()
        / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let w = w2 as f64 / 2.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - std_normal.cdf(z))).min(1.0)
}
