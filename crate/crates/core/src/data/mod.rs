//! Synthetic vessel images with controllable domain shift, a loader for
//! fundus-style datasets, resizing and batching.

mod batch;
mod io;
mod synth;

pub use batch::{Batch, BatchIter, Batcher};
pub use io::{
    decode_label_pixel, decode_label_rgb, encode_label_rgb, load_dataset, write_dataset, write_sample,
    COLOR_TOLERANCE,
};
pub use synth::{synth_dataset, synth_sample, DomainConfig};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::perturb::{transform, Augmentation, Interp};

/// Binary artery/vein maps. Crossing pixels are set in both.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    artery: Vec<u8>,
    vein: Vec<u8>,
    vessel: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, artery: Vec<u8>, vein: Vec<u8>) -> Result<Self> {
        let n = height * width;
        if artery.len() != n || vein.len() != n {
            return Err(shape_err!(
                "label maps of {}/{} pixels for {height}x{width}",
                artery.len(),
                vein.len()
            ));
        }
        if artery.iter().chain(&vein).any(|&v| v > 1) {
            return Err(Error::Data("label maps must be binary".into()));
        }
        let vessel = artery.iter().zip(&vein).map(|(&a, &v)| a | v).collect();
        Ok(Self {
            height,
            width,
            artery,
            vein,
            vessel,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        let z = vec![0; height * width];
        Self::new(height, width, z.clone(), z).expect("consistent sizes")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn artery(&self) -> &[u8] {
        &self.artery
    }

    pub fn vein(&self) -> &[u8] {
        &self.vein
    }

    pub fn vessel(&self) -> &[u8] {
        &self.vessel
    }

    pub fn crossings(&self) -> usize {
        self.artery.iter().zip(&self.vein).filter(|(&a, &v)| a == 1 && v == 1).count()
    }

    pub fn vessel_fraction(&self) -> f64 {
        self.vessel.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.vessel.len() as f64
    }

    /// `2 x H x W` tensor: channel 0 artery, channel 1 vein.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .artery
            .iter()
            .chain(&self.vein)
            .map(|&v| if v == 1 { T::one() } else { T::zero() })
            .collect();
        Tensor::new([2, self.height, self.width], data).expect("consistent sizes")
    }

    /// Inverse of [`LabelMap::to_tensor`]; values `>= 0.5` are set.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [2, h, w] => (h, w),
            _ => return Err(shape_err!("label tensor must be 2xHxW, got {:?}", t.shape())),
        };
        let half = T::of(0.5);
        let bits: Vec<u8> = t.data().iter().map(|&v| (v >= half) as u8).collect();
        let (a, v) = bits.split_at(h * w);
        Self::new(h, w, a.to_vec(), v.to_vec())
    }

    /// Geometric augmentation with nearest-neighbour sampling.
    pub fn augmented(&self, aug: &Augmentation) -> Result<Self> {
        Self::from_tensor(&aug.apply(&self.to_tensor::<f32>(), Interp::Nearest)?)
    }
}

/// One image (`3 x H x W`, values in `[0, 1]`) with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.labels.height(), self.labels.width())
    }
}

fn bilinear_resize(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let v = (1.0 - ty) * ((1.0 - tx) * src[y0 * w + x0] as f64 + tx * src[y0 * w + x1] as f64)
                + ty * ((1.0 - tx) * src[y1 * w + x0] as f64 + tx * src[y1 * w + x1] as f64);
            out.push((v as f32).clamp(0.0, 1.0));
        }
    }
    out
}

fn nearest_resize(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for x in 0..ow {
            let sx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Resize to `size x size`: bilinear for the image (clamped to `[0, 1]`),
/// nearest-neighbour for the label maps.
pub fn resize_normalize(sample: &Sample, size: usize) -> Result<Sample> {
    let (h, w) = sample.size();
    if size == 0 {
        return Err(shape_err!("target size must be positive"));
    }
    if (h, w) == (size, size) {
        let mut s = sample.clone();
        s.image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        return Ok(s);
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        data.extend(bilinear_resize(&sample.image.data()[c * plane..][..plane], h, w, size, size));
    }
    let labels = LabelMap::new(
        size,
        size,
        nearest_resize(sample.labels.artery(), h, w, size, size),
        nearest_resize(sample.labels.vein(), h, w, size, size),
    )?;
    Ok(Sample {
        id: sample.id.clone(),
        image: Tensor::new([3, size, size], data)?,
        labels,
    })
}

/// Stack label maps into an `N x 2 x H x W` tensor.
pub fn labels_tensor<T: Scalar>(labels: &[LabelMap]) -> Result<Tensor<T>> {
    let ts: Vec<Tensor<T>> = labels.iter().map(LabelMap::to_tensor).collect();
    Tensor::stack(&ts.iter().collect::<Vec<_>>())
}

/// Re-export for callers transforming label tensors directly.
pub fn transform_labels(labels: &LabelMap, t: &crate::perturb::SpatialTransform) -> Result<LabelMap> {
    LabelMap::from_tensor(&transform(&labels.to_tensor::<f32>(), t, Interp::Nearest)?)
}
