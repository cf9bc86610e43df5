//! Finite-difference checks for every differentiable op and for the full
//! training loss of a small U-Net, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{gradcheck_with, GradReport, GradcheckOptions, Graph, OpKind, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{consistency_to_target, supervised_loss};
use crate::model::{forward, init_params, UNetConfig};
use crate::perturb::{gen_mask, mix_images};

/// Pass threshold on the normalised error.
pub const TOLERANCE: f64 = 1e-4;
/// Seeds per op in the default suite.
pub const DEFAULT_SEEDS: u64 = 10;

pub const SUITE_OPS: [&str; 16] = [
    "add",
    "sub",
    "mul",
    "add_scalar",
    "mul_scalar",
    "conv2d",
    "maxpool2",
    "upsample2",
    "concat",
    "slice",
    "relu",
    "sigmoid",
    "sum",
    "mean",
    "bce",
    "unet_loss",
];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub op: &'static str,
    pub seed: u64,
    pub report: GradReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

/// Values bounded away from zero so ReLU is never probed at its kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `sum(y * r)` for a fixed random `r`, turning any tensor into a scalar with
/// a non-uniform upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone())?;
    let p = g.mul(y, rv)?;
    g.sum(p)
}

fn check(
    opts: GradcheckOptions,
    inputs: &[Tensor<f64>],
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let r = normal(rng, out_shape);
    gradcheck_with(
        |g, v| {
            let y = f(g, v)?;
            project(g, y, &r)
        },
        inputs,
        opts,
    )
}

fn unet_case(seed: u64, opts: GradcheckOptions) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 2,
        in_channels: 3,
    };
    let (n, s) = (2, 8);
    let mut params = init_params(&cfg, seed)?.cast::<f64>();
    // Non-zero biases keep pre-activations off the ReLU kink.
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let x = Tensor::from_fn([n, 3, s, s], |_| rng.gen_range(0.0..1.0));
    let other = Tensor::from_fn([n, 3, s, s], |_| rng.gen_range(0.0..1.0));
    let mixed = mix_images(&x, &other, &gen_mask(s, s, 2.0, seed)?)?;
    let labels = Tensor::from_fn([n, 2, s, s], |_| rng.gen_bool(0.3) as u8 as f64);
    let target = Tensor::from_fn([n, 2, s, s], |_| rng.gen_range(0.0..1.0));
    let mut inputs = vec![x];
    inputs.extend(params.tensors().iter().cloned());
    gradcheck_with(
        |g, v| {
            let logits = forward(&cfg, g, &v[1..], v[0])?;
            let ls = supervised_loss(g, logits, &labels, 10.0)?;
            let xm = g.constant(mixed.clone())?;
            let lm = forward(&cfg, g, &v[1..], xm)?;
            let rc = consistency_to_target(g, lm, &target)?;
            let w = g.mul_scalar(rc, 0.7)?;
            g.add(ls, w)
        },
        &inputs,
        opts,
    )
}

/// One gradient check of `op` on inputs drawn from `seed`.
pub fn run_case(op: &str, seed: u64, opts: GradcheckOptions) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ op.len() as u64);
    let shape = [2usize, 3, 4, 4];
    match op {
        "add" | "sub" | "mul" => {
            let a = normal(&mut rng, &shape);
            let b = normal(&mut rng, &shape);
            check(opts, &[a, b], &shape, &mut rng, |g, v| match op {
                "add" => g.add(v[0], v[1]),
                "sub" => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            })
        }
        "add_scalar" | "mul_scalar" => {
            let a = normal(&mut rng, &shape);
            let c: f64 = rng.gen_range(-2.0..2.0);
            check(opts, &[a], &shape, &mut rng, |g, v| {
                if op == "add_scalar" {
                    g.add_scalar(v[0], c)
                } else {
                    g.mul_scalar(v[0], c)
                }
            })
        }
        "conv2d" => {
            let (k, stride, pad) = [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)][(seed % 4) as usize];
            let (n, cin, h, cout) = (2, 3, 5, 4);
            let x = normal(&mut rng, &[n, cin, h, h]);
            let w = normal(&mut rng, &[cout, cin, k, k]);
            let b = normal(&mut rng, &[cout]);
            let oh = (h + 2 * pad - k) / stride + 1;
            check(opts, &[x, w, b], &[n, cout, oh, oh], &mut rng, |g, v| {
                g.conv2d(v[0], v[1], v[2], stride, pad)
            })
        }
        "maxpool2" => {
            let x = normal(&mut rng, &[2, 3, 6, 6]);
            check(opts, &[x], &[2, 3, 3, 3], &mut rng, |g, v| g.maxpool2(v[0]))
        }
        "upsample2" => {
            let x = normal(&mut rng, &[2, 3, 3, 3]);
            check(opts, &[x], &[2, 3, 6, 6], &mut rng, |g, v| g.upsample2(v[0]))
        }
        "concat" => {
            let a = normal(&mut rng, &[2, 3, 4, 4]);
            let b = normal(&mut rng, &[2, 2, 4, 4]);
            check(opts, &[a, b], &[2, 5, 4, 4], &mut rng, |g, v| g.concat_channels(v[0], v[1]))
        }
        "slice" => {
            let a = normal(&mut rng, &[2, 5, 4, 4]);
            check(opts, &[a], &[2, 2, 4, 4], &mut rng, |g, v| g.slice_channels(v[0], 2, 2))
        }
        "relu" => {
            let a = away_from_zero(&mut rng, &shape);
            check(opts, &[a], &shape, &mut rng, |g, v| g.relu(v[0]))
        }
        "sigmoid" => {
            let a = normal(&mut rng, &shape).map(|v| 3.0 * v);
            check(opts, &[a], &shape, &mut rng, |g, v| g.sigmoid(v[0]))
        }
        "sum" | "mean" => {
            // The reduction's input is a product so its upstream is non-trivial.
            let a = normal(&mut rng, &shape);
            let b = normal(&mut rng, &shape);
            gradcheck_with(
                |g, v| {
                    let p = g.mul(v[0], v[1])?;
                    if op == "sum" {
                        g.sum(p)
                    } else {
                        g.mean(p)
                    }
                },
                &[a, b],
                opts,
            )
        }
        "bce" => {
            let logits = normal(&mut rng, &[2, 2, 4, 4]).map(|v| 2.0 * v);
            let labels = Tensor::from_fn([2, 2, 4, 4], |_| rng.gen_bool(0.3) as u8 as f64);
            let w: f64 = rng.gen_range(1.0..10.0);
            gradcheck_with(|g, v| g.bce_with_logits(v[0], &labels, w), &[logits], opts)
        }
        "unet_loss" => unet_case(seed, opts),
        other => Err(Error::Config(format!(
            "unknown gradcheck op `{other}`; expected one of {}",
            SUITE_OPS.join(", ")
        ))),
    }
}

/// Runs `seeds` cases of every op (or only `only`).
pub fn run_suite(only: Option<&str>, seeds: u64, fault: Option<OpKind>) -> Result<Vec<CaseResult>> {
    let ops: Vec<&'static str> = match only {
        Some(name) => vec![*SUITE_OPS.iter().find(|&&o| o == name).ok_or_else(|| {
            Error::Config(format!(
                "unknown gradcheck op `{name}`; expected one of {}",
                SUITE_OPS.join(", ")
            ))
        })?],
        None => SUITE_OPS.to_vec(),
    };
    let opts = GradcheckOptions { fault };
    let mut out = Vec::new();
    for op in ops {
        for seed in 0..seeds {
            out.push(CaseResult {
                op,
                seed,
                report: run_case(op, seed, opts)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_rejected() {
        assert!(matches!(run_suite(Some("softmax"), 1, None), Err(Error::Config(_))));
    }

    #[test]
    fn single_op_filter() {
        let r = run_suite(Some("mul"), 2, None).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|c| c.op == "mul" && c.passed()));
    }

    #[test]
    fn fault_is_caught() {
        let r = run_suite(Some("conv2d"), 1, Some(OpKind::Conv2d)).unwrap();
        assert!(!r[0].passed());
    }
}
