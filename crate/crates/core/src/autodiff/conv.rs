//! Convolution kernels on raw NCHW buffers.
//!
//! The forward kernel accumulates every output element as
//! `bias + sum over (c, ky, kx)` in exactly that order, one lane per output
//! pixel, so it agrees bit-for-bit with a scalar loop nest that visits the
//! same terms in the same order (zero padding contributes `w * 0`).

use crate::autodiff::tensor::Scalar;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, wd) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("conv2d input must be NCHW, got {x:?}")),
        };
        let (cout, wc, kh, kw) = match *w {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(shape_err!("conv2d weight must be OIKK, got {w:?}")),
        };
        if wc != cin {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {cin}, weight expects {wc}"
            ));
        }
        if kh != kw || kh == 0 {
            return Err(shape_err!("conv2d kernel must be square and non-empty, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let k = kh;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err!(
                "conv2d kernel {k} does not fit padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn hp(&self) -> usize {
        self.h + 2 * self.pad
    }

    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }
}

/// Zero-pad every plane of an `n x c x h x w` buffer by `pad` on each side.
pub(crate) fn pad_planes<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    pad: usize,
) -> Vec<T> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); planes * hp * wp];
    for p in 0..planes {
        for y in 0..h {
            let src = &x[(p * h + y) * w..][..w];
            let dst = &mut out[(p * hp + y + pad) * wp + pad..][..w];
            dst.copy_from_slice(src);
        }
    }
    out
}

#[inline(always)]
fn accumulate_block<T: Scalar, const B: usize>(
    acc: &mut [T; B],
    xp: &[T],
    wo: &[T],
    g: &ConvGeom,
    n: usize,
    oy: usize,
    ox0: usize,
) {
    let (hp, wp, k) = (g.hp(), g.wp(), g.k);
    for c in 0..g.cin {
        for ky in 0..k {
            let row = ((n * g.cin + c) * hp + oy + ky) * wp + ox0;
            let wk = &wo[(c * k + ky) * k..][..k];
            for (kx, &wv) in wk.iter().enumerate() {
                let src: &[T; B] = xp[row + kx..row + kx + B].try_into().unwrap();
                for i in 0..B {
                    acc[i] += wv * src[i];
                }
            }
        }
    }
}

/// Forward cross-correlation; `xp` is the input already padded by `g.pad`.
pub(crate) fn forward_padded<T: Scalar>(xp: &[T], w: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.cout * g.oh * g.ow];
    let kk = g.cin * g.k * g.k;
    let (hp, wp, k, s) = (g.hp(), g.wp(), g.k, g.stride);
    for n in 0..g.n {
        for o in 0..g.cout {
            let wo = &w[o * kk..][..kk];
            let b = bias[o];
            for oy in 0..g.oh {
                let out_row = &mut out[((n * g.cout + o) * g.oh + oy) * g.ow..][..g.ow];
                let mut ox0 = 0;
                if s == 1 {
                    while ox0 + 16 <= g.ow {
                        let mut acc = [b; 16];
                        accumulate_block(&mut acc, xp, wo, g, n, oy, ox0);
                        out_row[ox0..ox0 + 16].copy_from_slice(&acc);
                        ox0 += 16;
                    }
                    while ox0 + 8 <= g.ow {
                        let mut acc = [b; 8];
                        accumulate_block(&mut acc, xp, wo, g, n, oy, ox0);
                        out_row[ox0..ox0 + 8].copy_from_slice(&acc);
                        ox0 += 8;
                    }
                }
                for (ox, slot) in out_row.iter_mut().enumerate().skip(ox0) {
                    let mut acc = b;
                    for c in 0..g.cin {
                        for ky in 0..k {
                            let row = ((n * g.cin + c) * hp + oy * s + ky) * wp + ox * s;
                            for kx in 0..k {
                                acc += wo[(c * k + ky) * k + kx] * xp[row + kx];
                            }
                        }
                    }
                    *slot = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let xp = pad_planes(x, g.n * g.cin, g.h, g.w, g.pad);
    forward_padded(&xp, w, bias, g)
}

/// Gradient with respect to the input.
pub(crate) fn backward_input<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.k;
    if g.stride == 1 && g.pad < k {
        // Full correlation of dy with the spatially flipped, channel-transposed kernel.
        let q = k - 1 - g.pad;
        let mut wt = vec![T::zero(); w.len()];
        for o in 0..g.cout {
            for c in 0..g.cin {
                for ky in 0..k {
                    for kx in 0..k {
                        wt[((c * g.cout + o) * k + ky) * k + kx] =
                            w[((o * g.cin + c) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                    }
                }
            }
        }
        let tg = ConvGeom {
            n: g.n,
            cin: g.cout,
            h: g.oh,
            w: g.ow,
            cout: g.cin,
            k,
            stride: 1,
            pad: q,
            oh: g.h,
            ow: g.w,
        };
        let zeros = vec![T::zero(); g.cin];
        return forward(dy, &wt, &zeros, &tg);
    }
    let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
    for n in 0..g.n {
        for o in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gv = dy[((n * g.cout + o) * g.oh + oy) * g.ow + ox];
                    for c in 0..g.cin {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                dx[((n * g.cin + c) * g.h + iy as usize) * g.w + ix as usize] +=
                                    w[((o * g.cin + c) * k + ky) * k + kx] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[inline(always)]
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    const L: usize = 8;
    let mut lanes = [T::zero(); L];
    let chunks = a.len() / L;
    for j in 0..chunks {
        let ac: &[T; L] = a[j * L..j * L + L].try_into().unwrap();
        let bc: &[T; L] = b[j * L..j * L + L].try_into().unwrap();
        for i in 0..L {
            lanes[i] += ac[i] * bc[i];
        }
    }
    let mut tail = T::zero();
    for i in chunks * L..a.len() {
        tail += a[i] * b[i];
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

/// Gradients with respect to the weight and bias; `xp` is the padded input.
pub(crate) fn backward_params<T: Scalar>(dy: &[T], xp: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (hp, wp, k, s) = (g.hp(), g.wp(), g.k, g.stride);
    let mut dw = vec![T::zero(); g.cout * g.cin * k * k];
    let mut db = vec![T::zero(); g.cout];
    let plane = g.oh * g.ow;
    for o in 0..g.cout {
        let mut bsum = T::zero();
        for n in 0..g.n {
            bsum += dy[(n * g.cout + o) * plane..][..plane]
                .iter()
                .fold(T::zero(), |a, &v| a + v);
        }
        db[o] = bsum;
        for c in 0..g.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::zero();
                    for n in 0..g.n {
                        for oy in 0..g.oh {
                            let dyr = &dy[((n * g.cout + o) * g.oh + oy) * g.ow..][..g.ow];
                            let base = ((n * g.cin + c) * hp + oy * s + ky) * wp + kx;
                            if s == 1 {
                                acc += dot_lanes(dyr, &xp[base..base + g.ow]);
                            } else {
                                for (ox, &d) in dyr.iter().enumerate() {
                                    acc += d * xp[base + ox * s];
                                }
                            }
                        }
                    }
                    dw[((o * g.cin + c) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    (dw, db)
}
