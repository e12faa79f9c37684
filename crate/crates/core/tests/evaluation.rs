use std::collections::HashMap;
use std::sync::Arc;

use proptest::prelude::*;

use svtune::data::{Dataset, Domain, Image, LabelMap, SegSample};
use svtune::mask::Mask;
use svtune::metrics::{dice, evaluate, paired_significance, EvalProtocol, Segmenter};
use svtune::Error;

/// Returns the stored ground truth for each (image, prompt) query.
struct Oracle(HashMap<(usize, String), Mask>);

impl Oracle {
    fn new(ds: &Dataset) -> Self {
        Self(
            ds.samples
                .iter()
                .map(|s| ((Arc::as_ptr(&s.image) as usize, s.prompt.clone()), s.mask.clone()))
                .collect(),
        )
    }
}

impl Segmenter for Oracle {
    fn segment(&self, queries: &[(&Image, &str)]) -> svtune::Result<Vec<Mask>> {
        Ok(queries
            .iter()
            .map(|(img, p)| {
                self.0
                    .get(&(*img as *const Image as usize, p.to_string()))
                    .cloned()
                    .unwrap_or_else(|| Mask::blank(img.height, img.width))
            })
            .collect())
    }
}

struct Blank;

impl Segmenter for Blank {
    fn segment(&self, queries: &[(&Image, &str)]) -> svtune::Result<Vec<Mask>> {
        Ok(queries.iter().map(|(i, _)| Mask::blank(i.height, i.width)).collect())
    }
}

fn square(n: usize, at: usize) -> Mask {
    let mut m = Mask::blank(n, n);
    m.set(at, at, true);
    m.set(at, at + 1, true);
    m
}

/// Ten images; "c" is present in seven of them, "d" in all.
fn dataset() -> Dataset {
    let mut samples = Vec::new();
    for i in 0..10 {
        let image = Arc::new(Image::filled(4, 4, 3, i as f32 / 10.0));
        let id = format!("img{i}");
        samples.push(SegSample {
            sample_id: id.clone(),
            image: image.clone(),
            prompt: "d".into(),
            mask: square(4, i % 3),
            domain: Domain::Target,
        });
        if i >= 3 {
            samples.push(SegSample {
                sample_id: id,
                image,
                prompt: "c".into(),
                mask: square(4, 2),
                domain: Domain::Target,
            });
        }
    }
    Dataset {
        labels: LabelMap::new(&["c", "d"]),
        samples,
    }
}

#[test]
fn perfect_segmenter_scores_one() {
    let ds = dataset();
    let r = evaluate(&Oracle::new(&ds), &ds, EvalProtocol::AllLabels).unwrap();
    assert!(r.per_class.values().all(|v| *v == 1.0));
    assert_eq!(r.average, 1.0);
    assert_eq!(r.per_sample.len(), 20);
}

#[test]
fn blank_segmenter_scores_the_absent_fraction() {
    let ds = dataset();
    let r = evaluate(&Blank, &ds, EvalProtocol::AllLabels).unwrap();
    // c is absent from 3 of 10 images
    assert_eq!(r.per_class["c"], 0.30);
    assert_eq!(r.per_class["d"], 0.0);
    assert_eq!(r.blank_per_class()["c"], 1.0);
    assert_eq!(r.blank_foreground_fraction(), 0.0);
    let present = evaluate(&Blank, &ds, EvalProtocol::PresentOnly).unwrap();
    assert_eq!(present.per_class["c"], 0.0);
}

#[test]
fn sample_order_does_not_matter() {
    let ds = dataset();
    let mut shuffled = ds.clone();
    shuffled.samples.reverse();
    let seg = Oracle::new(&ds);
    let a = evaluate(&seg, &ds, EvalProtocol::AllLabels).unwrap();
    let b = evaluate(&seg, &shuffled, EvalProtocol::AllLabels).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_prompt_is_listed() {
    let mut ds = dataset();
    ds.samples[0].prompt = "tumor".into();
    match evaluate(&Blank, &ds, EvalProtocol::AllLabels) {
        Err(Error::UnknownLabels(l)) => assert_eq!(l, vec!["tumor".to_string()]),
        other => panic!("expected unknown label error, got {other:?}"),
    }
}

#[test]
fn dice_worked_examples() {
    let g = Mask::new(1, 3, vec![true, true, false]).unwrap();
    let p = Mask::new(1, 3, vec![true, false, false]).unwrap();
    assert_eq!(dice(&p, &g).unwrap(), 2.0 / 3.0);
    assert_eq!(dice(&Mask::blank(3, 3), &Mask::blank(3, 3)).unwrap(), 1.0);
    assert_eq!(dice(&Mask::blank(1, 3), &g).unwrap(), 0.0);
    assert_eq!(dice(&g, &g).unwrap(), 1.0);
}

/// Two-sided signed-rank p-value by enumerating all 2^n sign patterns.
fn brute_force(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return 1.0;
    }
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let less = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let tied = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            less + (tied + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for bits in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le.min(ge) as f64 / total)).min(1.0)
}

proptest! {
    #[test]
    fn signed_rank_matches_enumeration(
        pairs in prop::collection::vec((0i32..6, 0i32..6), 5..=12)
    ) {
        // small integer grid so ties and zero differences occur
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 4.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64 / 4.0).collect();
        let got = paired_significance(&a, &b).unwrap();
        prop_assert!((got - brute_force(&a, &b)).abs() <= 1e-12, "{} vs {}", got, brute_force(&a, &b));
    }
}

#[test]
fn signed_rank_examples() {
    let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
    let a: Vec<f64> = b.iter().map(|x| x + 0.1).collect();
    assert!(paired_significance(&a, &b).unwrap() < 0.01);

    let alt: Vec<f64> = (0..20)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } * (1 + i / 2) as f64 * 0.01)
        .collect();
    let zeros = vec![0.0; 20];
    assert!(paired_significance(&alt, &zeros).unwrap() > 0.5);
    assert_eq!(paired_significance(&b, &b).unwrap(), 1.0);
}
