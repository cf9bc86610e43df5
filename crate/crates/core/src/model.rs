//! Tiny U-Net with a two-channel (artery, vein) logit head.
//!
//! Topology for `depth = D`, `base = b`, with `c_l = b * 2^l`:
//!
//! | block          | layers                                   |
//! |----------------|------------------------------------------|
//! | `enc{l}`       | 3x3 conv `c_{l-1} -> c_l`, 3x3 `c_l -> c_l` (`c_{-1}` = input channels) |
//! | `bottleneck`   | 3x3 conv `c_{D-1} -> c_D`, 3x3 `c_D -> c_D` |
//! | `dec{l}`       | upsample, concat skip, 3x3 `c_{l+1} + c_l -> c_l`, 3x3 `c_l -> c_l` |
//! | `head`         | 1x1 conv `c_0 -> 2`                      |
//!
//! Every 3x3 conv uses padding 1 and is followed by ReLU; the head is linear.
//! Encoder levels end with 2x2 max pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Output channels: 0 = artery, 1 = vein.
pub const OUT_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            in_channels: 3,
        }
    }
}

/// One convolution of the topology.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn param_count(&self) -> usize {
        self.cin * self.cout * self.kernel * self.kernel + self.cout
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 6 {
            return Err(Error::Config(format!("unet depth must be in 1..=6, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("unet channel counts must be positive".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(shape_err!(
                "input {h}x{w} not divisible by 2^depth = {m}"
            ));
        }
        Ok(())
    }

    /// Convolutions in execution order.
    pub fn layers(&self) -> Vec<ConvSpec> {
        let conv = |name: String, cin, cout, kernel| ConvSpec {
            name,
            cin,
            cout,
            kernel,
        };
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for l in 0..self.depth {
            let c = self.channels(l);
            out.push(conv(format!("enc{l}.conv1"), cin, c, 3));
            out.push(conv(format!("enc{l}.conv2"), c, c, 3));
            cin = c;
        }
        let cb = self.channels(self.depth);
        out.push(conv("bottleneck.conv1".into(), cin, cb, 3));
        out.push(conv("bottleneck.conv2".into(), cb, cb, 3));
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            out.push(conv(format!("dec{l}.conv1"), self.channels(l + 1) + c, c, 3));
            out.push(conv(format!("dec{l}.conv2"), c, c, 3));
        }
        out.push(conv("head".into(), self.channels(0), OUT_CHANNELS, 1));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(ConvSpec::param_count).sum()
    }
}

/// He-normal weights (fan-in), zero biases.
pub fn init_params(config: &UNetConfig, seed: u64) -> Result<ParamSet<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for layer in config.layers() {
        let fan_in = (layer.cin * layer.kernel * layer.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn([layer.cout, layer.cin, layer.kernel, layer.kernel], |_| {
            normal.sample(&mut rng) as f32
        });
        params.push(format!("{}.weight", layer.name), w);
        params.push(format!("{}.bias", layer.name), Tensor::zeros([layer.cout]));
    }
    Ok(params)
}

/// Student and teacher parameters of identical topology.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    pub config: UNetConfig,
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
}

impl ModelPair {
    /// He-initialised student; the teacher starts as an exact copy.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        let student = init_params(&config, seed)?;
        Ok(Self {
            config,
            teacher: student.clone(),
            student,
        })
    }
}

/// Record the forward pass on `g`. `params` are the registered parameter
/// leaves in [`UNetConfig::layers`] order (weight, bias per layer).
pub fn forward<T: Scalar>(config: &UNetConfig, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
    let layers = config.layers();
    if params.len() != 2 * layers.len() {
        return Err(shape_err!(
            "expected {} parameter tensors, got {}",
            2 * layers.len(),
            params.len()
        ));
    }
    let (_, c, h, w) = g.value(x).dims4()?;
    if c != config.in_channels {
        return Err(shape_err!("model expects {} input channels, got {c}", config.in_channels));
    }
    config.check_input(h, w)?;

    let mut next = params.chunks(2);
    let mut conv_relu = |g: &mut Graph<T>, input: Var| -> Result<Var> {
        let p = next.next().expect("layer count checked");
        let y = g.conv2d(input, p[0], p[1], 1, 1)?;
        g.relu(y)
    };
    let mut skips = Vec::with_capacity(config.depth);
    let mut hcur = x;
    for _ in 0..config.depth {
        hcur = conv_relu(g, hcur)?;
        hcur = conv_relu(g, hcur)?;
        skips.push(hcur);
        hcur = g.maxpool2(hcur)?;
    }
    hcur = conv_relu(g, hcur)?;
    hcur = conv_relu(g, hcur)?;
    while let Some(skip) = skips.pop() {
        let up = g.upsample2(hcur)?;
        hcur = g.concat_channels(up, skip)?;
        hcur = conv_relu(g, hcur)?;
        hcur = conv_relu(g, hcur)?;
    }
    let head = &params[params.len() - 2..];
    g.conv2d(hcur, head[0], head[1], 1, 0)
}

/// Logits without building a differentiable graph.
pub fn infer<T: Scalar>(config: &UNetConfig, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let pv = params.register(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let out = forward(config, &mut g, &pv, xv)?;
    Ok(g.value(out).clone())
}

/// Per-pixel posteriors (sigmoid of the logits) without a graph.
pub fn posteriors<T: Scalar>(config: &UNetConfig, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(infer(config, params, x)?.map(crate::autodiff::stable_sigmoid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_table() {
        // Per-layer counts for depth 3, base 8, 3 input channels.
        let table = [
            3 * 8 * 9 + 8,
            8 * 8 * 9 + 8,
            8 * 16 * 9 + 16,
            16 * 16 * 9 + 16,
            16 * 32 * 9 + 32,
            32 * 32 * 9 + 32,
            32 * 64 * 9 + 64,
            64 * 64 * 9 + 64,
            (64 + 32) * 32 * 9 + 32,
            32 * 32 * 9 + 32,
            (32 + 16) * 16 * 9 + 16,
            16 * 16 * 9 + 16,
            (16 + 8) * 8 * 9 + 8,
            8 * 8 * 9 + 8,
            8 * 2 + 2,
        ];
        let cfg = UNetConfig::default();
        assert_eq!(cfg.param_count(), table.iter().sum::<usize>());
        assert_eq!(cfg.param_count(), 122_122);
        let pair = ModelPair::build(cfg, 1).unwrap();
        assert_eq!(pair.student.numel(), cfg.param_count());
    }

    #[test]
    fn build_is_deterministic_and_teacher_copies_student() {
        let a = ModelPair::build(UNetConfig::default(), 42).unwrap();
        let b = ModelPair::build(UNetConfig::default(), 42).unwrap();
        assert_eq!(a.student, b.student);
        assert_eq!(a.student, a.teacher);
        let c = ModelPair::build(UNetConfig::default(), 43).unwrap();
        assert_ne!(a.student, c.student);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = UNetConfig {
            depth: 0,
            ..UNetConfig::default()
        };
        assert!(matches!(ModelPair::build(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_and_size_check() {
        let cfg = UNetConfig::default();
        let p = init_params(&cfg, 3).unwrap();
        let x = Tensor::from_fn([1, 3, 32, 32], |i| ((i % 17) as f32) / 17.0);
        let y = infer(&cfg, &p, &x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 32, 32]);
        let bad = Tensor::zeros([1, 3, 36, 36]);
        assert!(matches!(infer(&cfg, &p, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn inference_graph_holds_no_gradients() {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            in_channels: 3,
        };
        let p = init_params(&cfg, 3).unwrap();
        let mut g = Graph::no_grad();
        let pv = p.register(&mut g, true).unwrap();
        let x = g.constant(Tensor::full([1, 3, 16, 16], 0.5)).unwrap();
        forward(&cfg, &mut g, &pv, x).unwrap();
        assert_eq!(g.grad_node_count(), 0);
        assert_eq!(g.allocated_grads(), 0);
    }

    #[test]
    fn batch_samples_do_not_interact() {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            in_channels: 3,
        };
        let p = init_params(&cfg, 9).unwrap();
        let a = Tensor::from_fn([3, 16, 16], |i| ((i * 7 % 31) as f32) / 31.0);
        let b = Tensor::from_fn([3, 16, 16], |i| ((i * 11 % 29) as f32) / 29.0);
        let ab = infer(&cfg, &p, &Tensor::stack(&[&a, &b]).unwrap()).unwrap();
        let ba = infer(&cfg, &p, &Tensor::stack(&[&b, &a]).unwrap()).unwrap();
        assert_eq!(ab.index0(0).unwrap(), ba.index0(1).unwrap());
        assert_eq!(ab.index0(1).unwrap(), ba.index0(0).unwrap());
    }
}
