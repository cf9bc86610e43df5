//! Naive reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmcr_core::autodiff::{Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(lo..hi)))
}

/// Six nested loops; padded taps contribute `w * 0`.
pub fn conv2d_ref<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape().try_into().unwrap();
    let [cout, _, k, _] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for ni in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    T::zero()
                                } else {
                                    x.at4(ni, c, iy as usize, ix as usize)
                                };
                                acc = acc + w.at4(o, c, ky, kx) * v;
                            }
                        }
                    }
                    out.data_mut()[((ni * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// 2x2 max with the first maximum in row-major order winning.
pub fn maxpool_ref<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = x.at4(ni, ci, 2 * y, 2 * xx);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x.at4(ni, ci, 2 * y + dy, 2 * xx + dx);
                        if v > best {
                            best = v;
                        }
                    }
                    out.data_mut()[((ni * c + ci) * oh + y) * ow + xx] = best;
                }
            }
        }
    }
    out
}

pub fn upsample_ref<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.data_mut()[((ni * c + ci) * 2 * h + y) * 2 * w + xx] = x.at4(ni, ci, y / 2, xx / 2);
                }
            }
        }
    }
    out
}

fn softplus_ref<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    let m = if x > T::zero() { x } else { T::zero() };
    m + (-x.abs()).exp().ln_1p()
}

/// Weighted BCE: sum over channels of the per-channel pixel mean.
pub fn bce_ref<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>, pos_weight: T) -> T {
    let [n, c, h, w] = logits.shape().try_into().unwrap();
    let mut total = T::zero();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let x = logits.at4(ni, ci, y, xx);
                    let t = labels.at4(ni, ci, y, xx);
                    total = total + (pos_weight * t * softplus_ref(-x) + (T::one() - t) * softplus_ref(x));
                }
            }
        }
    }
    total / T::of((n * h * w) as f64)
}

/// Sizes of 4-connected components of ones.
pub fn component_sizes(bits: &[u8], h: usize, w: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if bits[i] == 0 {
                continue;
            }
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                if bits[j] == 1 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
    }
    let mut sizes = std::collections::HashMap::new();
    for i in 0..h * w {
        if bits[i] == 1 {
            *sizes.entry(find(&mut parent, i)).or_insert(0usize) += 1;
        }
    }
    sizes.into_values().collect()
}
