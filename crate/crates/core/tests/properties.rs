mod support;

use proptest::prelude::*;
use vmcr_core::autodiff::{Graph, ParamSet, Tensor};
use vmcr_core::data::{decode_label_rgb, encode_label_rgb, LabelMap};
use vmcr_core::losses::{adaptive_lambda, consistency_loss, ema_update, supervised_loss, LossConfig};
use vmcr_core::metrics::{classify_pixels, compute_metrics};
use vmcr_core::perturb::{apply_spatial, gen_mask, mix_images, Mask, SpatialTransform};

fn image(h: usize, w: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(0.0f32..1.0, 3 * h * w).prop_map(move |d| Tensor::new([3, h, w], d).unwrap())
}

fn pair_and_mask() -> impl Strategy<Value = (Tensor<f32>, Tensor<f32>, Mask)> {
    (2usize..10, 2usize..10, any::<u64>(), 0.0f64..3.0).prop_flat_map(|(h, w, seed, sigma)| {
        (image(h, w), image(h, w), Just(gen_mask(h, w, sigma, seed).unwrap()))
    })
}

fn invert(m: &Mask) -> Mask {
    Mask::from_bits(m.height, m.width, m.bits.iter().map(|b| 1 - b).collect()).unwrap()
}

fn labels(max: usize) -> impl Strategy<Value = LabelMap> {
    (1..max, 1..max).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0u8..2, h * w),
            prop::collection::vec(0u8..2, h * w),
        )
            .prop_map(move |(a, v)| LabelMap::new(h, w, a, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_is_binary(h in 1usize..20, w in 1usize..20, seed: u64, sigma in 0.0f64..5.0) {
        let m = gen_mask(h, w, sigma, seed).unwrap();
        prop_assert!(m.bits.iter().all(|&b| b <= 1));
        prop_assert_eq!(m.bits.len(), h * w);
    }

    #[test]
    fn mixing_identities((x1, x2, m) in pair_and_mask()) {
        let (h, w) = (m.height, m.width);
        prop_assert_eq!(&mix_images(&x1, &x2, &Mask::constant(h, w, true)).unwrap(), &x1);
        prop_assert_eq!(&mix_images(&x1, &x2, &Mask::constant(h, w, false)).unwrap(), &x2);
        prop_assert_eq!(&mix_images(&x1, &x1, &m).unwrap(), &x1);
        prop_assert_eq!(mix_images(&x1, &x2, &m).unwrap(), mix_images(&x2, &x1, &invert(&m)).unwrap());
    }

    #[test]
    fn seam_property((x1, x2, m) in pair_and_mask()) {
        let mixed = mix_images(&x1, &x2, &m).unwrap();
        let plane = m.height * m.width;
        for (i, &v) in mixed.data().iter().enumerate() {
            let src = if m.bits[i % plane] == 1 { &x1 } else { &x2 };
            prop_assert_eq!(v.to_bits(), src.data()[i].to_bits());
        }
    }

    #[test]
    fn flips_and_rotations_invert(x in image(6, 6)) {
        let fh = apply_spatial(&apply_spatial(&x, &SpatialTransform::FlipH).unwrap(), &SpatialTransform::FlipH).unwrap();
        prop_assert_eq!(&fh, &x);
        let mut r = x.clone();
        for _ in 0..4 {
            r = apply_spatial(&r, &SpatialTransform::Rot90(1)).unwrap();
        }
        prop_assert_eq!(&r, &x);
        for t in [SpatialTransform::FlipV, SpatialTransform::Rot90(1), SpatialTransform::Rot90(3)] {
            let back = apply_spatial(&apply_spatial(&x, &t).unwrap(), &t.inverse()).unwrap();
            prop_assert_eq!(&back, &x);
        }
    }

    #[test]
    fn label_png_round_trip(l in labels(12)) {
        let img = encode_label_rgb(&l);
        prop_assert_eq!(decode_label_rgb(&img, std::path::Path::new("mem")).unwrap(), l);
    }

    #[test]
    fn vessel_is_union(l in labels(12)) {
        for i in 0..l.height() * l.width() {
            prop_assert_eq!(l.vessel()[i], l.artery()[i] | l.vein()[i]);
        }
    }

    #[test]
    fn counts_ignore_background(l in labels(10), seed: u64) {
        let (h, w) = (l.height(), l.width());
        let mut r = support::rng(seed);
        let p = support::uniform::<f32>(&mut r, &[2, h, w], 0.0, 1.0);
        let mut q = p.clone();
        for i in 0..h * w {
            if l.vessel()[i] == 0 {
                q.data_mut()[i] = 0.123;
                q.data_mut()[h * w + i] = 0.987;
            }
        }
        let c = classify_pixels(&p, &l).unwrap();
        prop_assert_eq!(c, classify_pixels(&q, &l).unwrap());
        prop_assert_eq!(c.total_vessel(), l.vessel().iter().map(|&v| v as u64).sum::<u64>());
    }

    #[test]
    fn counts_invariant_under_shared_monotone_map(l in labels(10), seed: u64) {
        let (h, w) = (l.height(), l.width());
        let mut r = support::rng(seed);
        let p = support::uniform::<f64>(&mut r, &[2, h, w], 0.0, 1.0);
        let q = p.map(|v| v.powi(3) * 0.5 + 0.1);
        prop_assert_eq!(classify_pixels(&p, &l).unwrap(), classify_pixels(&q, &l).unwrap());
    }

    #[test]
    fn metrics_in_unit_interval(aa in 0u64..1000, av in 0u64..1000, vv in 0u64..1000, va in 0u64..1000) {
        prop_assume!(aa + av + vv + va > 0);
        let c = vmcr_core::metrics::ConfusionCounts { aa, av, vv, va, excluded_crossings: 0 };
        let m = compute_metrics(&c).unwrap();
        for v in [m.f1, m.acc, m.sen, m.sp].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn consistency_in_unit_interval((x1, x2, m) in pair_and_mask(), seed: u64) {
        let (h, w) = (m.height, m.width);
        let mut r = support::rng(seed);
        let logits = support::uniform::<f64>(&mut r, &[1, 2, h, w], -10.0, 10.0);
        let p1 = support::uniform::<f64>(&mut r, &[1, 2, h, w], 0.0, 1.0);
        let p2 = support::uniform::<f64>(&mut r, &[1, 2, h, w], 0.0, 1.0);
        let _ = (x1, x2);
        let mut g = Graph::no_grad();
        let lv = g.constant(logits).unwrap();
        let rc = consistency_loss(&mut g, lv, &p1, &p2, &m).unwrap();
        let v = g.value(rc).item().unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn lambda_bounded_and_monotone(seed: u64, scale in 0.0f64..3.0, t1 in 0.51f64..0.99, t2 in 0.51f64..0.99) {
        let mut r = support::rng(seed);
        let p = support::uniform::<f32>(&mut r, &[2, 2, 5, 5], 0.0, 1.0);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let cfg = |t| LossConfig { confidence_threshold: t, lambda_scale: scale, ..LossConfig::default() };
        let (a, b) = (adaptive_lambda(&p, &cfg(lo)), adaptive_lambda(&p, &cfg(hi)));
        prop_assert!((0.0..=scale).contains(&a) && (0.0..=scale).contains(&b));
        prop_assert!(b <= a);
    }

    #[test]
    fn supervised_loss_pixel_permutation_invariant(seed: u64) {
        let mut r = support::rng(seed);
        let logits = support::uniform::<f64>(&mut r, &[1, 2, 3, 4], -5.0, 5.0);
        let labels = support::uniform::<f64>(&mut r, &[1, 2, 3, 4], 0.0, 1.0).map(|v| (v > 0.6) as u8 as f64);
        let perm: Vec<usize> = (0..12).rev().collect();
        let permute = |t: &Tensor<f64>| {
            Tensor::from_fn([1, 2, 3, 4], |i| t.data()[(i / 12) * 12 + perm[i % 12]])
        };
        let eval = |l: &Tensor<f64>, y: &Tensor<f64>| {
            let mut g = Graph::no_grad();
            let v = g.constant(l.clone()).unwrap();
            let loss = supervised_loss(&mut g, v, y, 10.0).unwrap();
            g.value(loss).item().unwrap()
        };
        let (a, b) = (eval(&logits, &labels), eval(&permute(&logits), &permute(&labels)));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn ema_closed_form(k in 1u32..30, alpha in 0.0f64..0.999, seed: u64) {
        let mut r = support::rng(seed);
        let mut teacher = ParamSet::new();
        teacher.push("w", support::uniform::<f64>(&mut r, &[7], -1.0, 1.0));
        let t0 = teacher.clone();
        let mut student = ParamSet::new();
        student.push("w", support::uniform::<f64>(&mut r, &[7], -1.0, 1.0));
        for _ in 0..k {
            ema_update(&mut teacher, &student, alpha).unwrap();
        }
        for i in 0..7 {
            let th = student.tensors()[0].data()[i];
            let want = th + alpha.powi(k as i32) * (t0.tensors()[0].data()[i] - th);
            prop_assert!((teacher.tensors()[0].data()[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn tensor_shape_invariant(dims in prop::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::<f32>::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f32>::new(dims, vec![0.0; n + extra]).is_err());
    }
}

#[test]
fn fan_out_gradients_add() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let a = g.mul_scalar(x, 3.0).unwrap();
    let b = g.mul(x, x).unwrap();
    let s = g.add(a, b).unwrap();
    let y = g.sum(s).unwrap();
    g.backward(y).unwrap();
    // d/dx (3x + x^2) = 3 + 2x
    assert_eq!(g.grad(x).unwrap().data(), &[5.0, -1.0, 4.0]);
}

#[test]
fn teacher_never_receives_gradient() {
    use vmcr_core::model::{forward, ModelPair, UNetConfig};
    let cfg = UNetConfig { depth: 1, base_channels: 2, in_channels: 3 };
    let pair = ModelPair::build(cfg, 3).unwrap();
    let mut g = Graph::new();
    let sv = pair.student.register(&mut g, true).unwrap();
    let tv = pair.teacher.register(&mut g, false).unwrap();
    let x = g.constant(Tensor::full([1, 3, 4, 4], 0.5f32)).unwrap();
    let ls = forward(&cfg, &mut g, &sv, x).unwrap();
    let lt = forward(&cfg, &mut g, &tv, x).unwrap();
    let d = g.sub(ls, lt).unwrap();
    let sq = g.mul(d, d).unwrap();
    let loss = g.mean(sq).unwrap();
    g.backward(loss).unwrap();
    assert!(tv.iter().all(|&v| g.grad(v).is_none()));
    assert!(sv.iter().any(|&v| g.grad(v).is_some()));
}
