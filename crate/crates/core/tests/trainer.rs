use vmcr_core::autodiff::ParamSet;
use vmcr_core::data::{synth_dataset, DomainConfig, Sample};
use vmcr_core::metrics::Averaging;
use vmcr_core::model::{init_params, UNetConfig};
use vmcr_core::trainer::{evaluate, read_checkpoint, write_checkpoint, LogRow, Mode, TrainConfig, TrainData, Trainer};

struct Sets {
    source: Vec<Sample>,
    source_val: Vec<Sample>,
    target: Vec<Sample>,
    target_val: Vec<Sample>,
}

fn target_domain() -> DomainConfig {
    DomainConfig {
        intensity_gain: 0.6,
        gamma: 1.8,
        noise_std: 0.05,
        ..DomainConfig::default()
    }
}

fn sets() -> Sets {
    Sets {
        source: synth_dataset(&DomainConfig::default(), 6, 32, 11).unwrap(),
        source_val: synth_dataset(&DomainConfig::default(), 2, 32, 12).unwrap(),
        target: synth_dataset(&target_domain(), 6, 32, 13).unwrap(),
        target_val: synth_dataset(&target_domain(), 2, 32, 14).unwrap(),
    }
}

fn config(mode: Mode, iterations: u64) -> TrainConfig {
    TrainConfig {
        mode,
        iterations,
        image_size: 32,
        eval_every: 3,
        seed: 5,
        model: UNetConfig {
            depth: 2,
            base_channels: 4,
            in_channels: 3,
        },
        ..TrainConfig::default()
    }
}

fn data<'a>(s: &'a Sets, mode: Mode) -> TrainData<'a> {
    TrainData::for_mode(mode, &s.source, &s.source_val, &s.target, &s.target_val)
}

/// Log rows without the wall-clock column.
fn run(tr: &mut Trainer, d: &TrainData, stop: u64) -> Vec<LogRow> {
    let mut rows = Vec::new();
    tr.run_until(d, stop, |r| {
        rows.push(LogRow { wall_time: 0.0, ..*r });
        Ok(())
    })
    .unwrap();
    rows
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let s = sets();
    for mode in Mode::ALL {
        let d = data(&s, mode);
        let mut straight = Trainer::new(config(mode, 7)).unwrap();
        let full = run(&mut straight, &d, 7);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.vmcr");
        let mut first = Trainer::new(config(mode, 7)).unwrap();
        let mut rows = run(&mut first, &d, 4);
        write_checkpoint(&path, &first).unwrap();
        drop(first);
        let mut resumed = read_checkpoint(&path).unwrap();
        assert_eq!(resumed.iteration, 4);
        rows.extend(run(&mut resumed, &d, 7));

        assert_eq!(rows, full, "{mode}");
        assert_eq!(resumed, straight, "{mode}");
    }
}

#[test]
fn vm_cr_with_zero_lambda_follows_source_only() {
    let s = sets();
    let mut so = Trainer::new(config(Mode::SourceOnly, 5)).unwrap();
    let so_rows = run(&mut so, &data(&s, Mode::SourceOnly), 5);
    let mut vm = Trainer::new(TrainConfig {
        force_lambda: Some(0.0),
        ..config(Mode::VmCr, 5)
    })
    .unwrap();
    let vm_rows = run(&mut vm, &data(&s, Mode::VmCr), 5);

    assert_eq!(so.models.student, vm.models.student);
    assert_eq!(so.models.teacher, vm.models.teacher);
    for (a, b) in so_rows.iter().zip(&vm_rows) {
        assert_eq!(a.report.supervised, b.report.supervised);
        assert_eq!(a.report.total, b.report.total);
        assert!(b.report.consistency.is_some());
        assert_eq!(b.report.lambda, Some(0.0));
    }
}

fn ema_oracle(teacher: &ParamSet<f32>, student: &ParamSet<f32>, alpha: f64) -> Vec<Vec<f32>> {
    teacher
        .tensors()
        .iter()
        .zip(student.tensors())
        .map(|(t, s)| {
            t.data()
                .iter()
                .zip(s.data())
                .map(|(&a, &b)| (alpha * a as f64 + (1.0 - alpha) * b as f64) as f32)
                .collect()
        })
        .collect()
}

#[test]
fn teacher_changes_only_through_ema() {
    let s = sets();
    for mode in Mode::ALL {
        let d = data(&s, mode);
        let mut tr = Trainer::new(config(mode, 6)).unwrap();
        for _ in 0..6 {
            let before = tr.models.teacher.clone();
            tr.run_until(&d, tr.iteration + 1, |_| Ok(())).unwrap();
            let expect = ema_oracle(&before, &tr.models.student, tr.config.loss.ema_alpha);
            let got: Vec<Vec<f32>> = tr.models.teacher.tensors().iter().map(|t| t.data().to_vec()).collect();
            assert_eq!(got, expect, "{mode} at {}", tr.iteration);
        }
        let before = tr.models.teacher.clone();
        evaluate(&tr.config.model, &tr.models.teacher, &s.target_val, Averaging::Micro).unwrap();
        assert_eq!(tr.models.teacher, before);
    }
}

#[test]
fn selection_keeps_a_teacher_snapshot() {
    let s = sets();
    let mut tr = Trainer::new(config(Mode::StCr, 6)).unwrap();
    run(&mut tr, &data(&s, Mode::StCr), 6);
    let best = tr.best.as_ref().unwrap();
    assert!(best.iteration == 3 || best.iteration == 6);
    assert!((0.0..=1.0).contains(&best.score));
    if best.iteration == 6 {
        assert_eq!(&best.teacher, &tr.models.teacher);
    }
    assert_eq!(tr.eval_params(), &best.teacher);
}

#[test]
fn untrained_model_is_near_chance() {
    let target = synth_dataset(&target_domain(), 8, 64, 77).unwrap();
    let source = synth_dataset(&DomainConfig::default(), 8, 64, 78).unwrap();
    let mut f1s = Vec::new();
    for seed in 0..5 {
        let params = init_params(&UNetConfig::default(), seed).unwrap();
        for set in [&source, &target] {
            let rows = evaluate(&UNetConfig::default(), &params, set, Averaging::Micro).unwrap();
            f1s.push(rows.last().unwrap().f1.unwrap());
        }
    }
    let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
    assert!((0.3..=0.7).contains(&mean), "mean untrained F1 {mean}, all {f1s:?}");
}

#[test]
fn mismatched_image_size_is_rejected() {
    let s = sets();
    let mut cfg = config(Mode::SourceOnly, 2);
    cfg.image_size = 64;
    let mut tr = Trainer::new(cfg).unwrap();
    assert!(tr.run(&data(&s, Mode::SourceOnly), |_| Ok(())).is_err());
    assert_eq!(tr.iteration, 0);
}
