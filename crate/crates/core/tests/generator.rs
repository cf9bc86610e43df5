mod support;

use vmcr_core::data::{load_dataset, resize_normalize, synth_dataset, synth_sample, write_dataset, DomainConfig};
use vmcr_core::perturb::gen_mask;

fn shifted() -> DomainConfig {
    DomainConfig {
        intensity_gain: 0.6,
        gamma: 1.8,
        noise_std: 0.05,
        ..DomainConfig::default()
    }
}

#[test]
fn vessel_fraction_in_band() {
    let d = DomainConfig::default();
    for seed in 0..100 {
        let s = synth_sample(&d, 64, 64, seed).unwrap();
        let f = s.labels.vessel_fraction();
        assert!((0.03..=0.20).contains(&f), "seed {seed}: vessel fraction {f}");
    }
}

#[test]
fn both_classes_present_in_every_sample() {
    let d = DomainConfig::default();
    for seed in 0..1000 {
        let s = synth_sample(&d, 64, 64, seed).unwrap();
        assert!(s.labels.artery().contains(&1), "seed {seed}: no artery");
        assert!(s.labels.vein().contains(&1), "seed {seed}: no vein");
    }
}

#[test]
fn generator_is_deterministic() {
    let a = synth_sample(&shifted(), 48, 64, 11).unwrap();
    let b = synth_sample(&shifted(), 48, 64, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, synth_sample(&shifted(), 48, 64, 12).unwrap());
}

#[test]
fn domain_shift_changes_mean_intensity() {
    let mean = |d: &DomainConfig| {
        let set = synth_dataset(d, 100, 64, 5).unwrap();
        set.iter()
            .map(|s| s.image.data().iter().map(|&v| v as f64).sum::<f64>() / s.image.numel() as f64)
            .sum::<f64>()
            / set.len() as f64
    };
    let (a, b) = (mean(&DomainConfig::default()), mean(&shifted()));
    assert!((a - b).abs() > 0.1, "source {a:.3} target {b:.3}");
}

#[test]
fn pixels_in_unit_range_and_union_holds() {
    for s in synth_dataset(&shifted(), 20, 64, 3).unwrap() {
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..64 * 64 {
            assert_eq!(s.labels.vessel()[i], s.labels.artery()[i] | s.labels.vein()[i]);
        }
    }
}

#[test]
fn downsizing_keeps_vessel_fraction_within_factor_two() {
    for s in synth_dataset(&DomainConfig::default(), 20, 64, 9).unwrap() {
        let small = resize_normalize(&s, 32).unwrap();
        let (a, b) = (s.labels.vessel_fraction(), small.labels.vessel_fraction());
        assert!(b < 2.0 * a && b > 0.5 * a, "{a} vs {b}");
        assert!(small.labels.artery().iter().all(|&v| v <= 1));
    }
    let s = synth_sample(&DomainConfig::default(), 64, 64, 0).unwrap();
    assert_eq!(resize_normalize(&s, 64).unwrap(), s);
}

#[test]
fn written_dataset_loads_back_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let set = synth_dataset(&shifted(), 5, 32, 1).unwrap();
    write_dataset(dir.path(), &set).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in set.iter().zip(&back) {
        assert_eq!(a.labels, b.labels);
        let max_err = a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6, "{max_err}");
    }
}

#[test]
fn unsigma_mask_fraction_is_half() {
    let mean = (0..1000)
        .map(|s| gen_mask(64, 64, 0.0, s).unwrap().ones_fraction())
        .sum::<f64>()
        / 1000.0;
    assert!((0.49..=0.51).contains(&mean), "{mean}");
}

#[test]
fn larger_sigma_gives_larger_regions() {
    let mean_size = |sigma: f64| {
        let mut sizes = Vec::new();
        for s in 0..50 {
            let m = gen_mask(64, 64, sigma, s).unwrap();
            sizes.extend(support::component_sizes(&m.bits, 64, 64));
        }
        sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
    };
    let (small, large) = (mean_size(1.0), mean_size(8.0));
    assert!(large > small, "sigma 1: {small}, sigma 8: {large}");
}
