//! On-disk dataset convention: `<stem>.png` (RGB image) next to
//! `<stem>_av.png` (labels: red artery, blue vein, green crossing, black
//! background).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::{LabelMap, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-channel tolerance around the canonical label colours.
pub const COLOR_TOLERANCE: u8 = 30;

const LABEL_SUFFIX: &str = "_av";

fn near(v: u8, target: u8) -> bool {
    v.abs_diff(target) <= COLOR_TOLERANCE
}

/// `(artery, vein)` for one label pixel, or `None` if undecodable.
pub fn decode_label_pixel(p: [u8; 3]) -> Option<(bool, bool)> {
    let [r, g, b] = p;
    match (near(r, 255), near(g, 255), near(b, 255), near(r, 0), near(g, 0), near(b, 0)) {
        (true, _, _, _, true, true) => Some((true, false)),
        (_, _, true, true, true, _) => Some((false, true)),
        (_, true, _, true, _, true) => Some((true, true)),
        (_, _, _, true, true, true) => Some((false, false)),
        _ => None,
    }
}

pub fn decode_label_rgb(img: &RgbImage, file: &Path) -> Result<LabelMap> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut artery = Vec::with_capacity(w * h);
    let mut vein = Vec::with_capacity(w * h);
    for (x, y, px) in img.enumerate_pixels() {
        let (a, v) = decode_label_pixel(px.0).ok_or_else(|| {
            Error::Data(format!(
                "{}: undecodable label colour {:?} at pixel ({x}, {y})",
                file.display(),
                px.0
            ))
        })?;
        artery.push(a as u8);
        vein.push(v as u8);
    }
    LabelMap::new(h, w, artery, vein)
}

pub fn encode_label_rgb(labels: &LabelMap) -> RgbImage {
    let w = labels.width();
    RgbImage::from_fn(w as u32, labels.height() as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(match (labels.artery()[i], labels.vein()[i]) {
            (1, 1) => [0, 255, 0],
            (1, _) => [255, 0, 0],
            (_, 1) => [0, 0, 255],
            _ => [0, 0, 0],
        })
    })
}

fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data).expect("consistent sizes")
}

fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w) = match *t.shape() {
        [3, h, w] => (h, w),
        _ => return Err(Error::Shape(format!("expected 3xHxW image, got {:?}", t.shape()))),
    };
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8())
}

/// Load every `<stem>.png` / `<stem>_av.png` pair in `dir`, sorted by stem.
/// Pixel values are scaled to `[0, 1]`.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut images = BTreeSet::new();
    let mut labels = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        match stem.strip_suffix(LABEL_SUFFIX) {
            Some(base) => labels.insert(base.to_string()),
            None => images.insert(stem),
        };
    }
    if let Some(orphan) = labels.difference(&images).next() {
        return Err(Error::Data(format!(
            "{}: label {orphan}{LABEL_SUFFIX}.png has no image {orphan}.png",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(images.len());
    for stem in &images {
        let img_path = dir.join(format!("{stem}.png"));
        let lbl_path: PathBuf = dir.join(format!("{stem}{LABEL_SUFFIX}.png"));
        if !labels.contains(stem) {
            return Err(Error::Data(format!(
                "{}: missing label file {}",
                img_path.display(),
                lbl_path.display()
            )));
        }
        let img = read_rgb(&img_path)?;
        let lbl = read_rgb(&lbl_path)?;
        if img.dimensions() != lbl.dimensions() {
            return Err(Error::Data(format!(
                "{stem}: image is {:?} but labels are {:?}",
                img.dimensions(),
                lbl.dimensions()
            )));
        }
        out.push(Sample {
            id: stem.clone(),
            image: image_to_tensor(&img),
            labels: decode_label_rgb(&lbl, &lbl_path)?,
        });
    }
    Ok(out)
}

/// Write `<id>.png` and `<id>_av.png` into `dir`.
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    tensor_to_image(&sample.image)?.save(dir.join(format!("{}.png", sample.id)))?;
    encode_label_rgb(&sample.labels).save(dir.join(format!("{}{LABEL_SUFFIX}.png", sample.id)))?;
    Ok(())
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    samples.iter().try_for_each(|s| write_sample(dir, s))
}
