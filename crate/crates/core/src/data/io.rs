//! Dataset directory layout:
//!
//! ```text
//! <root>/labels.txt                  class_name<TAB>class_id per line
//! <root>/images/<id>.png             8-bit gray or RGB(A)
//! <root>/masks/<id>/<class>.png      8-bit, nonzero = foreground
//! ```
//!
//! A missing `<class>.png` means the class is absent from that image (blank
//! mask). A missing `masks/<id>/` directory is an error.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{Dataset, Domain, Image, LabelMap, SegSample};
use crate::error::{Error, Result};
use crate::mask::Mask;

pub const LABELS_FILE: &str = "labels.txt";

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn ingest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| ingest_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ingest_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ingest_err(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels: info.color_type.samples(),
        bytes: buf,
    })
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .finish()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Convert decoded pixels to an RGB float image (alpha dropped, gray
/// replicated).
fn to_image(d: &Decoded) -> Image {
    let mut data = Vec::with_capacity(d.width * d.height * 3);
    for px in d.bytes.chunks(d.channels) {
        let rgb = match d.channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        };
        data.extend(rgb.iter().map(|&v| v as f32 / 255.0));
    }
    Image {
        height: d.height,
        width: d.width,
        channels: 3,
        data,
    }
}

fn to_mask(d: &Decoded) -> Result<Mask> {
    let data = d.bytes.chunks(d.channels).map(|px| px[0] != 0).collect();
    Mask::new(d.height, d.width, data)
}

/// Load a dataset from the directory layout above. Every image is paired
/// with every label in `labels.txt`.
pub fn ingest(root: &Path) -> Result<Dataset> {
    let labels_path = root.join(LABELS_FILE);
    let text = std::fs::read_to_string(&labels_path)
        .map_err(|e| ingest_err(&labels_path, e.to_string()))?;
    let labels = LabelMap::parse(&text).map_err(|e| ingest_err(&labels_path, e.to_string()))?;

    let images_dir = root.join("images");
    let mut ids: Vec<(String, PathBuf)> = std::fs::read_dir(&images_dir)
        .map_err(|e| ingest_err(&images_dir, e.to_string()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
        .collect();
    ids.sort();

    let mut samples = Vec::new();
    for (id, path) in ids {
        let image = Arc::new(to_image(&read_png(&path)?));
        let mask_dir = root.join("masks").join(&id);
        if !mask_dir.is_dir() {
            return Err(ingest_err(&mask_dir, format!("image `{id}` has no mask directory")));
        }
        for name in labels.names() {
            let mask_path = mask_dir.join(format!("{name}.png"));
            let mask = if mask_path.exists() {
                let m = to_mask(&read_png(&mask_path)?)?;
                if m.shape() != (image.height, image.width) {
                    return Err(ingest_err(
                        &mask_path,
                        format!(
                            "mask is {}x{} but image is {}x{}",
                            m.height(),
                            m.width(),
                            image.height,
                            image.width
                        ),
                    ));
                }
                m
            } else {
                Mask::blank(image.height, image.width)
            };
            samples.push(SegSample {
                sample_id: id.clone(),
                image: image.clone(),
                prompt: name.to_string(),
                mask,
                domain: Domain::Target,
            });
        }
    }
    Ok(Dataset { labels, samples })
}

/// Write `dataset` in the ingest layout. Blank masks are omitted, relying on
/// the missing-file convention.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&root.join("images"))?;
    let labels_path = root.join(LABELS_FILE);
    std::fs::write(&labels_path, dataset.labels.to_text()).map_err(|e| Error::io(&labels_path, e))?;

    for (id, image) in dataset.images() {
        let bytes: Vec<u8> = image
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match image.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(Error::Shape(format!("cannot write {c}-channel image"))),
        };
        write_png(&root.join("images").join(format!("{id}.png")), image.width, image.height, color, &bytes)?;
        mkdir(&root.join("masks").join(&id))?;
    }
    for s in &dataset.samples {
        if s.mask.is_blank() {
            continue;
        }
        let bytes: Vec<u8> = s.mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
        let path = root.join("masks").join(&s.sample_id).join(format!("{}.png", s.prompt));
        write_png(&path, s.mask.width(), s.mask.height(), png::ColorType::Grayscale, &bytes)?;
    }
    Ok(())
}
