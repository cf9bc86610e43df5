//! Guidance masks, regional mixing of images and predictions, and spatial
//! transforms used for augmentation and the spatial-consistency baseline.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Binary guidance mask; `1` selects the first image.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
    pub sigma: f64,
    pub seed: u64,
}

impl Mask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err!("mask {height}x{width} with {} bits", bits.len()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Data("mask bits must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            bits,
            sigma: 0.0,
            seed: 0,
        })
    }

    pub fn constant(height: usize, width: usize, bit: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![bit as u8; height * width],
            sigma: 0.0,
            seed: 0,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn ones_fraction(&self) -> f64 {
        self.bits.iter().map(|&b| b as usize).sum::<usize>() as f64 / self.bits.len() as f64
    }

    /// Grayscale PNG, 255 where the mask is set.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.bits.iter().map(|&b| b * 255).collect();
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )?;
        Ok(())
    }
}

/// Default smoothing for an `h x w` mask: `min(h, w) / 8`.
pub fn default_sigma(h: usize, w: usize) -> f64 {
    h.min(w) as f64 / 8.0
}

/// Index into `0..n` with half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with reflect padding. `sigma == 0` returns the input.
pub fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * field[y * w + reflect(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Standard-normal field, Gaussian-blurred, thresholded at its own mean
/// (values `>=` the mean become 1).
pub fn gen_mask(h: usize, w: usize, sigma: f64, seed: u64) -> Result<Mask> {
    if h == 0 || w == 0 {
        return Err(shape_err!("mask dimensions must be positive, got {h}x{w}"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("mask sigma must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let field = gaussian_blur(&noise, h, w, sigma);
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    Ok(Mask {
        height: h,
        width: w,
        bits: field.iter().map(|&v| (v >= mean) as u8).collect(),
        sigma,
        seed,
    })
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("expected at least 2 dims, got {shape:?}"));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

/// `M ⊙ x1 + (1 − M) ⊙ x2`, with `M` broadcast over every leading axis.
/// Implemented as a per-pixel selection so outputs are copies of input values.
pub fn mix_images<T: Scalar>(x1: &Tensor<T>, x2: &Tensor<T>, m: &Mask) -> Result<Tensor<T>> {
    if x1.shape() != x2.shape() {
        return Err(shape_err!("mix: {:?} vs {:?}", x1.shape(), x2.shape()));
    }
    let (planes, h, w) = spatial_dims(x1.shape())?;
    if (h, w) != (m.height, m.width) {
        return Err(shape_err!(
            "mix: images are {h}x{w}, mask is {}x{}",
            m.height,
            m.width
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(x1.numel());
    for p in 0..planes {
        let a = &x1.data()[p * plane..][..plane];
        let b = &x2.data()[p * plane..][..plane];
        out.extend(
            m.bits
                .iter()
                .zip(a.iter().zip(b))
                .map(|(&bit, (&va, &vb))| if bit == 1 { va } else { vb }),
        );
    }
    Tensor::new(x1.shape().to_vec(), out)
}

/// Mixing of teacher posterior maps; same contract as [`mix_images`].
pub fn mix_predictions<T: Scalar>(p1: &Tensor<T>, p2: &Tensor<T>, m: &Mask) -> Result<Tensor<T>> {
    mix_images(p1, p2, m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpatialTransform {
    FlipH,
    FlipV,
    /// `k` quarter turns counter-clockwise; square inputs only.
    Rot90(u8),
    /// Isotropic zoom about the centre, cropped/zero-padded to the original size.
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

impl SpatialTransform {
    pub fn is_exactly_invertible(&self) -> bool {
        !matches!(self, SpatialTransform::Scale(_))
    }

    pub fn inverse(&self) -> Self {
        match *self {
            SpatialTransform::Rot90(k) => SpatialTransform::Rot90((4 - k % 4) % 4),
            SpatialTransform::Scale(s) => SpatialTransform::Scale(1.0 / s),
            t => t,
        }
    }

    /// A uniformly drawn flip or non-trivial rotation.
    pub fn random_invertible<R: Rng>(rng: &mut R) -> Self {
        match rng.gen_range(0..5) {
            0 => SpatialTransform::FlipH,
            1 => SpatialTransform::FlipV,
            k => SpatialTransform::Rot90(k as u8 - 1),
        }
    }
}

/// Random flip, rotation and scale composition for supervised augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub transforms: Vec<SpatialTransform>,
}

impl Augmentation {
    pub fn random<R: Rng>(rng: &mut R, scale_range: (f64, f64)) -> Self {
        let mut transforms = Vec::new();
        if rng.gen_bool(0.5) {
            transforms.push(SpatialTransform::FlipH);
        }
        let k = rng.gen_range(0..4u8);
        if k > 0 {
            transforms.push(SpatialTransform::Rot90(k));
        }
        if scale_range.1 > scale_range.0 {
            transforms.push(SpatialTransform::Scale(rng.gen_range(scale_range.0..scale_range.1)));
        }
        Self { transforms }
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, interp: Interp) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for t in &self.transforms {
            cur = transform(&cur, t, interp)?;
        }
        Ok(cur)
    }
}

fn bilinear_at<T: Scalar>(src: &[T], h: usize, w: usize, sy: f64, sx: f64) -> T {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let (fy, fx) = (sy - y0, sx - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let wt = wy * wx;
            if wt == 0.0 {
                continue;
            }
            let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                acc += wt * src[yy as usize * w + xx as usize].f64();
            }
        }
    }
    T::of(acc)
}

fn transform_plane<T: Scalar>(src: &[T], h: usize, w: usize, t: &SpatialTransform, interp: Interp, out: &mut Vec<T>) {
    match *t {
        SpatialTransform::FlipH => {
            for y in 0..h {
                out.extend(src[y * w..(y + 1) * w].iter().rev());
            }
        }
        SpatialTransform::FlipV => {
            for y in (0..h).rev() {
                out.extend_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        SpatialTransform::Rot90(k) => {
            let n = h;
            let mut cur = src.to_vec();
            for _ in 0..k % 4 {
                let mut next = Vec::with_capacity(n * n);
                for y in 0..n {
                    for x in 0..n {
                        next.push(cur[x * n + (n - 1 - y)]);
                    }
                }
                cur = next;
            }
            out.extend(cur);
        }
        SpatialTransform::Scale(s) => {
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            for y in 0..h {
                let sy = (y as f64 - cy) / s + cy;
                for x in 0..w {
                    let sx = (x as f64 - cx) / s + cx;
                    let v = match interp {
                        Interp::Bilinear => bilinear_at(src, h, w, sy, sx),
                        Interp::Nearest => {
                            let (ry, rx) = (sy.round(), sx.round());
                            if ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w {
                                src[ry as usize * w + rx as usize]
                            } else {
                                T::zero()
                            }
                        }
                    };
                    out.push(v);
                }
            }
        }
    }
}

/// Apply `t` to every trailing `H x W` plane of `x`.
pub fn transform<T: Scalar>(x: &Tensor<T>, t: &SpatialTransform, interp: Interp) -> Result<Tensor<T>> {
    let (planes, h, w) = spatial_dims(x.shape())?;
    if matches!(t, SpatialTransform::Rot90(_)) && h != w {
        return Err(shape_err!("rot90 needs square planes, got {h}x{w}"));
    }
    if let SpatialTransform::Scale(s) = t {
        if !(*s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("scale factor must be positive, got {s}")));
        }
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for p in 0..planes {
        transform_plane(&x.data()[p * plane..][..plane], h, w, t, interp, &mut out);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Image path: bilinear interpolation for scaling.
pub fn apply_spatial<T: Scalar>(x: &Tensor<T>, t: &SpatialTransform) -> Result<Tensor<T>> {
    transform(x, t, Interp::Bilinear)
}

/// The same transform applied to posterior maps.
pub fn apply_spatial_to_prediction<T: Scalar>(p: &Tensor<T>, t: &SpatialTransform) -> Result<Tensor<T>> {
    transform(p, t, Interp::Bilinear)
}
