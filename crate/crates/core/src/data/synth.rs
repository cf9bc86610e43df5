//! Procedural fundus-like images: two branching vessel trees (artery, vein)
//! grown from opposite sides of a bright disc over a textured background.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabelMap, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::perturb::gaussian_blur;

/// Rendering parameters of one imaging domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainConfig {
    pub intensity_gain: f64,
    pub gamma: f64,
    pub blur_sigma: f64,
    pub noise_std: f64,
    pub vessel_width_scale: f64,
    pub background_texture_scale: f64,
    pub seed: u64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            intensity_gain: 1.0,
            gamma: 1.0,
            blur_sigma: 0.5,
            noise_std: 0.02,
            vessel_width_scale: 1.0,
            background_texture_scale: 1.0,
            seed: 0,
        }
    }
}

impl DomainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("intensity_gain", self.intensity_gain),
            ("vessel_width_scale", self.vessel_width_scale),
            ("background_texture_scale", self.background_texture_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("blur_sigma", self.blur_sigma), ("noise_std", self.noise_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.3..=3.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0.3, 3], got {}", self.gamma)));
        }
        Ok(())
    }
}

struct Walker {
    x: f64,
    y: f64,
    heading: f64,
    preferred: f64,
    width: f64,
    depth: u32,
}

fn stamp(map: &mut [u8], h: usize, w: usize, x: f64, y: f64, radius: f64) {
    let r = radius.max(0.5);
    let (x0, x1) = ((x - r).floor().max(0.0) as isize, (x + r).ceil() as isize);
    let (y0, y1) = ((y - r).floor().max(0.0) as isize, (y + r).ceil() as isize);
    for py in y0..=y1.min(h as isize - 1) {
        for px in x0..=x1.min(w as isize - 1) {
            let (dx, dy) = (px as f64 - x, py as f64 - y);
            if dx * dx + dy * dy <= r * r {
                map[py as usize * w + px as usize] = 1;
            }
        }
    }
    let (cx, cy) = (x.round(), y.round());
    if cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h {
        map[cy as usize * w + cx as usize] = 1;
    }
}

/// Biased random walk with branching and tapering width.
fn grow_tree<R: Rng>(rng: &mut R, map: &mut [u8], h: usize, w: usize, start: (f64, f64), heading: f64, width: f64) {
    let wiggle = Normal::new(0.0, 0.14).expect("valid std");
    let max_steps = (1.6 * h.max(w) as f64) as usize;
    let mut stack = vec![Walker {
        x: start.0,
        y: start.1,
        heading,
        preferred: heading,
        width,
        depth: 0,
    }];
    let mut segments = 0;
    while let Some(mut wk) = stack.pop() {
        segments += 1;
        for step in 0..max_steps {
            stamp(map, h, w, wk.x, wk.y, wk.width / 2.0);
            wk.heading += rng.sample(wiggle) + 0.06 * (wk.preferred - wk.heading);
            wk.x += wk.heading.cos();
            wk.y += wk.heading.sin();
            wk.width *= 0.993;
            let outside = wk.x < -2.0 || wk.y < -2.0 || wk.x > w as f64 + 1.0 || wk.y > h as f64 + 1.0;
            if outside || wk.width < 0.8 {
                break;
            }
            if step > 6 && wk.depth < 3 && segments < 24 && rng.gen_bool(0.045) {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let turn = side * rng.gen_range(0.45..1.0);
                stack.push(Walker {
                    x: wk.x,
                    y: wk.y,
                    heading: wk.heading + turn,
                    preferred: wk.heading + turn,
                    width: wk.width * 0.72,
                    depth: wk.depth + 1,
                });
                wk.width *= 0.9;
            }
        }
    }
}

fn normalised_field<R: Rng>(rng: &mut R, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let f = gaussian_blur(&noise, h, w, sigma);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let var = f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f.len() as f64;
    let sd = var.sqrt().max(1e-12);
    f.into_iter().map(|v| (v - mean) / sd).collect()
}

const BACKGROUND: [f64; 3] = [0.78, 0.42, 0.22];
const ARTERY_TINT: [f64; 3] = [0.88, 0.68, 0.78];
const VEIN_TINT: [f64; 3] = [0.64, 0.50, 0.62];

fn sample_rng(domain: &DomainConfig, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ domain.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One synthetic image and its labels.
pub fn synth_sample(domain: &DomainConfig, h: usize, w: usize, seed: u64) -> Result<Sample> {
    domain.validate()?;
    if h < 32 || w < 32 {
        return Err(Error::Config(format!("synthetic images must be at least 32x32, got {h}x{w}")));
    }
    let mut rng = sample_rng(domain, seed);
    let size = h.min(w) as f64;
    let width_unit = domain.vessel_width_scale * (size / 64.0).sqrt();

    let disc = (
        rng.gen_range(0.35..0.65) * w as f64,
        rng.gen_range(0.35..0.65) * h as f64,
    );
    let axis = rng.gen_range(0.0..2.0 * PI);
    let offset = 0.05 * size;
    let mut artery = vec![0u8; h * w];
    let mut vein = vec![0u8; h * w];
    for (map, base_heading, width) in [(&mut artery, axis, 2.3), (&mut vein, axis + PI, 2.9)] {
        let trees = rng.gen_range(1..=2);
        for _ in 0..trees {
            let heading = base_heading + rng.gen_range(-0.7..0.7);
            let start = (disc.0 + offset * heading.cos(), disc.1 + offset * heading.sin());
            grow_tree(&mut rng, map, h, w, start, heading, width * width_unit);
        }
    }
    let labels = LabelMap::new(h, w, artery, vein)?;

    let texture = normalised_field(&mut rng, h, w, domain.background_texture_scale * size / 10.0);
    let soft = |m: &[u8]| gaussian_blur(&m.iter().map(|&v| v as f64).collect::<Vec<_>>(), h, w, 0.6);
    let artery_only: Vec<u8> = labels
        .artery()
        .iter()
        .zip(labels.vein())
        .map(|(&a, &v)| a & (1 - v))
        .collect();
    let soft_a = soft(&artery_only);
    let soft_v = soft(labels.vein());
    let brightness = rng.gen_range(0.6..1.3);
    let (icx, icy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let disc_r = 0.06 * size;

    let mut img = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let r2 = ((x as f64 - icx).powi(2) + (y as f64 - icy).powi(2)) / (0.75 * size).powi(2);
            let vignette = (1.0 - 0.35 * r2).max(0.4);
            let d2 = (x as f64 - disc.0).powi(2) + (y as f64 - disc.1).powi(2);
            let glow = 0.25 * (-d2 / (2.0 * disc_r * disc_r)).exp();
            for c in 0..3 {
                let bg = brightness * (BACKGROUND[c] * vignette * (1.0 + 0.08 * texture[i]) + glow * [1.0, 0.9, 0.6][c]);
                let factor = 1.0 - soft_v[i] * (1.0 - VEIN_TINT[c]) - soft_a[i] * (1.0 - soft_v[i]) * (1.0 - ARTERY_TINT[c]);
                img[c * h * w + i] = bg * factor;
            }
        }
    }

    // domain-specific acquisition: gain, gamma, blur, additive noise
    let noise = Normal::new(0.0, domain.noise_std.max(0.0)).expect("valid std");
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let plane: Vec<f64> = img[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|&v| (domain.intensity_gain * v).clamp(0.0, 1.0).powf(domain.gamma))
            .collect();
        let blurred = gaussian_blur(&plane, h, w, domain.blur_sigma);
        for v in blurred {
            let n = if domain.noise_std > 0.0 { rng.sample(noise) } else { 0.0 };
            data.push((v + n).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(Sample {
        id: format!("synth-{seed}"),
        image: Tensor::new([3, h, w], data)?,
        labels,
    })
}

/// `n` square samples with seeds derived from `seed`.
pub fn synth_dataset(domain: &DomainConfig, n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| {
            let mut s = synth_sample(domain, size, size, seed.wrapping_mul(1_000_003).wrapping_add(i))?;
            s.id = format!("s{seed}-{i:04}");
            Ok(s)
        })
        .collect()
}
