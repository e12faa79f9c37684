use svtune::data::{generate, ingest, write_dataset, ShapeKind, SynthSpec};
use svtune::text::{TextEmbedder, TextEncoder, DEFAULT_TEXT_SEED};

#[test]
fn three_image_directory_gives_one_sample_per_label_and_image() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&SynthSpec::target(32), 3, 9).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = ingest(dir.path()).unwrap();
    let images = std::fs::read_dir(dir.path().join("images")).unwrap().count();
    assert_eq!(images, 3);
    assert_eq!(back.samples.len(), images * back.labels.len());
    assert_eq!(back.labels, ShapeKind::label_map());
    let key = |s: &svtune::data::SegSample| (s.sample_id.clone(), s.prompt.clone());
    let mut want: Vec<_> = ds.samples.iter().map(|s| (key(s), &s.mask)).collect();
    let mut got: Vec<_> = back.samples.iter().map(|s| (key(s), &s.mask)).collect();
    want.sort_by(|a, b| a.0.cmp(&b.0));
    got.sort_by(|a, b| a.0.cmp(&b.0));
    assert_eq!(want, got);
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x * *y) as f64).sum();
    let na: f64 = a.iter().map(|x| (*x * *x) as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x * *x) as f64).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn label_embeddings_do_not_collide() {
    let labels = [
        "circle", "square", "triangle", "ring", "liver", "tumor", "hepatic vein", "gland",
        "gallbladder", "fat",
    ];
    for dim in [8, 64] {
        let text = TextEmbedder::new(dim, DEFAULT_TEXT_SEED, &labels);
        let vecs: Vec<Vec<f32>> = labels.iter().map(|l| text.embed(l).unwrap()).collect();
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                let c = cosine(&vecs[i], &vecs[j]);
                assert!(c < 0.99, "dim {dim}: `{}` vs `{}` cosine {c}", labels[i], labels[j]);
            }
        }
    }
}
