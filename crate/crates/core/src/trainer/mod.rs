//! Mean-teacher training loop with source-only, target-only, spatial-transform
//! and vessel-mixing consistency modes.
//!
//! All randomness of iteration `t` comes from two ChaCha streams keyed by
//! `(seed, t)`: one for supervised augmentation and one for the consistency
//! perturbation. Batches come from [`Batcher`], which is itself a pure
//! function of the iteration index, so a run resumed from a checkpoint follows
//! the same trajectory as an uninterrupted one.

mod checkpoint;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, ParamSet, Tensor};
use crate::data::{labels_tensor, Batcher, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    adaptive_lambda, consistency_to_target, ema_update, supervised_loss, teacher_confidence, total_loss, LossConfig,
    LossReport,
};
use crate::metrics::{classify_pixels, ConfusionCounts, loss_map, metrics_table, Averaging, LossMap, MetricsRow};
use crate::model::{forward, posteriors, ModelPair, UNetConfig};
use crate::perturb::{
    apply_spatial, apply_spatial_to_prediction, default_sigma, gen_mask, mix_images, mix_predictions, Augmentation,
    Interp, Mask, SpatialTransform,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SourceOnly,
    TargetOnly,
    StCr,
    VmCr,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SourceOnly, Mode::StCr, Mode::VmCr, Mode::TargetOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source-only",
            Mode::TargetOnly => "target-only",
            Mode::StCr => "st-cr",
            Mode::VmCr => "vm-cr",
        }
    }

    /// Row label in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Mode::SourceOnly => "Source-only",
            Mode::TargetOnly => "Target-only",
            Mode::StCr => "ST-CR",
            Mode::VmCr => "VM-CR",
        }
    }

    pub fn has_consistency(self) -> bool {
        matches!(self, Mode::StCr | Mode::VmCr)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected source-only, target-only, st-cr or vm-cr)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: u64,
    pub batch_size: usize,
    pub image_size: usize,
    pub eval_every: u64,
    pub seed: u64,
    /// Mask blur; `None` means `min(H, W) / 8`.
    pub mask_sigma: Option<f64>,
    /// Also apply supervised-style augmentation to target images before the
    /// consistency step.
    pub augment_target: bool,
    /// Zoom range of the supervised augmentation.
    pub scale_range: [f64; 2],
    /// Overrides the confidence-based trade-off weight.
    pub force_lambda: Option<f64>,
    pub loss: LossConfig,
    pub model: UNetConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::VmCr,
            iterations: 2000,
            batch_size: 2,
            image_size: 64,
            eval_every: 200,
            seed: 0,
            mask_sigma: None,
            augment_target: false,
            scale_range: [0.9, 1.1],
            force_lambda: None,
            loss: LossConfig::default(),
            model: UNetConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be > 0".into()));
        }
        if self.mode == Mode::VmCr && self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "vm-cr mixes target images in pairs; batch_size {} is odd",
                self.batch_size
            )));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("invalid scale_range [{lo}, {hi}]")));
        }
        if let Some(s) = self.mask_sigma {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("mask_sigma must be >= 0, got {s}")));
            }
        }
        if let Some(l) = self.force_lambda {
            if !(l >= 0.0) {
                return Err(Error::Config(format!("force_lambda must be >= 0, got {l}")));
            }
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.model.check_input(self.image_size, self.image_size)
    }

    pub fn sigma(&self) -> f64 {
        self.mask_sigma
            .unwrap_or_else(|| default_sigma(self.image_size, self.image_size))
    }

    /// SHA-256 over the serialized config with the iteration budget cleared,
    /// so a run may be resumed with a larger budget.
    pub fn digest(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.iterations = 0;
        let text = toml::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }
}

/// Datasets consumed by [`Trainer`]. `labeled` feeds the supervised term,
/// `unlabeled` the consistency term and `val` model selection.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a [Sample],
    pub unlabeled: &'a [Sample],
    pub val: &'a [Sample],
}

impl<'a> TrainData<'a> {
    /// Dataset roles for `mode`. Target-only supervises on target labels and
    /// selects on the target validation split; every other mode only ever
    /// reads source labels.
    pub fn for_mode(
        mode: Mode,
        source: &'a [Sample],
        source_val: &'a [Sample],
        target: &'a [Sample],
        target_val: &'a [Sample],
    ) -> Self {
        match mode {
            Mode::TargetOnly => Self {
                labeled: target,
                unlabeled: target,
                val: target_val,
            },
            _ => Self {
                labeled: source,
                unlabeled: target,
                val: source_val,
            },
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub report: LossReport,
    pub wall_time: f64,
}

/// Best teacher seen at an evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub iteration: u64,
    pub score: f64,
    pub teacher: ParamSet<f32>,
}

/// Complete resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: ModelPair,
    pub adam: AdamState<f32>,
    /// Completed iterations.
    pub iteration: u64,
    pub best: Option<Selection>,
}

fn stream_rng(seed: u64, iteration: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration * 2 + stream);
    rng
}

fn stack(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::stack(&images.iter().collect::<Vec<_>>())
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let models = ModelPair::build(config.model, config.seed)?;
        let adam = AdamState::new(config.adam, &models.student);
        Ok(Self {
            config,
            models,
            adam,
            iteration: 0,
            best: None,
        })
    }

    fn batcher(&self, data: &TrainData) -> Result<Batcher> {
        Batcher::new(
            data.labeled.len(),
            data.unlabeled.len(),
            self.config.batch_size,
            self.config.seed ^ 0x9E37_79B9_7F4A_7C15,
            self.config.mode == Mode::VmCr,
        )
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        let s = self.config.image_size;
        for set in [data.labeled, data.unlabeled, data.val] {
            if let Some(bad) = set.iter().find(|x| x.size() != (s, s)) {
                return Err(Error::Data(format!(
                    "sample {} is {:?}, expected {s}x{s}; resize first",
                    bad.id,
                    bad.size()
                )));
            }
        }
        Ok(())
    }

    /// Runs one iteration and returns its loss record.
    pub fn step(&mut self, data: &TrainData) -> Result<LossReport> {
        let it = self.iteration;
        let batch = self.batcher(data)?.batch(data.labeled, data.unlabeled, it)?;
        let ids = || format!("source {:?}, target {:?}", batch.source_ids, batch.target_ids);
        let report = self.step_on(&batch.source_images, &batch.source_labels, &batch.target_images).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                iteration: it,
                seed: self.config.seed,
                batch: ids(),
                reason: format!("non-finite value in {op}"),
            },
            e => e,
        })?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                seed: self.config.seed,
                batch: ids(),
                reason: format!("total loss {}", report.total),
            });
        }
        self.iteration += 1;
        Ok(report)
    }

    fn step_on(&mut self, source: &Tensor<f32>, labels: &[LabelMap], target: &Tensor<f32>) -> Result<LossReport> {
        let cfg = &self.config;
        let (n, _, _, _) = source.dims4()?;
        let mut aug_rng = stream_rng(cfg.seed, self.iteration, 0);
        let mut cons_rng = stream_rng(cfg.seed, self.iteration, 1);
        let scale = (cfg.scale_range[0], cfg.scale_range[1]);

        let mut images = Vec::with_capacity(n);
        let mut aug_labels = Vec::with_capacity(n);
        for (i, l) in labels.iter().enumerate() {
            let aug = Augmentation::random(&mut aug_rng, scale);
            images.push(aug.apply(&source.index0(i)?, Interp::Bilinear)?);
            aug_labels.push(l.augmented(&aug)?);
        }
        let source_x = stack(&images)?;
        let source_y = labels_tensor::<f32>(&aug_labels)?;

        let mut g = Graph::new();
        let vars = self.models.student.register(&mut g, true)?;
        let xs = g.constant(source_x)?;
        let logits = forward(&cfg.model, &mut g, &vars, xs)?;
        let ls = supervised_loss(&mut g, logits, &source_y, cfg.loss.pos_weight)?;

        let mut confidence = None;
        let mut lambda = 0.0;
        let rc = if cfg.mode.has_consistency() {
            let target = if cfg.augment_target {
                let (nt, _, _, _) = target.dims4()?;
                let mut aug = Vec::with_capacity(nt);
                for i in 0..nt {
                    let a = Augmentation::random(&mut cons_rng, scale);
                    aug.push(a.apply(&target.index0(i)?, Interp::Bilinear)?);
                }
                stack(&aug)?
            } else {
                target.clone()
            };
            let teacher_post = posteriors(&cfg.model, &self.models.teacher, &target)?;
            let (student_in, goal) = match cfg.mode {
                Mode::VmCr => mixed_pairs(&target, &teacher_post, cfg.sigma(), &mut cons_rng)?,
                _ => transformed(&target, &teacher_post, &mut cons_rng)?,
            };
            let conf = teacher_confidence(&teacher_post, cfg.loss.confidence_threshold, cfg.loss.confidence_rule);
            confidence = Some(conf);
            lambda = cfg.force_lambda.unwrap_or_else(|| adaptive_lambda(&teacher_post, &cfg.loss));
            let xt = g.constant(student_in)?;
            let lt = forward(&cfg.model, &mut g, &vars, xt)?;
            Some(consistency_to_target(&mut g, lt, &goal)?)
        } else {
            None
        };

        let (total, mut report) = total_loss(&mut g, ls, rc, lambda)?;
        report.teacher_confidence = confidence;
        g.backward(total)?;
        let grads = self.models.student.collect_grads(&g, &vars);
        drop(g);
        adam_step(&mut self.models.student, &grads, &mut self.adam)?;
        ema_update(&mut self.models.teacher, &self.models.student, cfg.loss.ema_alpha)?;
        Ok(report)
    }

    /// Model-selection score: micro F1 of the current teacher on `val`.
    fn select(&mut self, val: &[Sample]) -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let rows = evaluate(&self.config.model, &self.models.teacher, val, Averaging::Micro)?;
        let score = rows.last().and_then(|r| r.f1).unwrap_or(0.0);
        if self.best.as_ref().map_or(true, |b| score > b.score) {
            self.best = Some(Selection {
                iteration: self.iteration,
                score,
                teacher: self.models.teacher.clone(),
            });
        }
        Ok(())
    }

    /// Trains until `config.iterations` are complete, calling `on_row` after
    /// every iteration.
    pub fn run(&mut self, data: &TrainData, on_row: impl FnMut(&LogRow) -> Result<()>) -> Result<()> {
        self.run_until(data, self.config.iterations, on_row)
    }

    /// Like [`Trainer::run`] but stops once `stop` iterations are complete
    /// (capped at the configured budget). Splitting a run this way does not
    /// change its trajectory.
    pub fn run_until(
        &mut self,
        data: &TrainData,
        stop: u64,
        mut on_row: impl FnMut(&LogRow) -> Result<()>,
    ) -> Result<()> {
        self.check_data(data)?;
        self.batcher(data)?;
        let stop = stop.min(self.config.iterations);
        let start = Instant::now();
        while self.iteration < stop {
            let report = self.step(data)?;
            on_row(&LogRow {
                iteration: self.iteration,
                report,
                wall_time: start.elapsed().as_secs_f64(),
            })?;
            if self.iteration % self.config.eval_every == 0 || self.iteration == self.config.iterations {
                self.select(data.val)?;
            }
        }
        Ok(())
    }

    /// The batch iteration `t` would train on.
    pub fn batch_at(&self, data: &TrainData, t: u64) -> Result<crate::data::Batch> {
        self.batcher(data)?.batch(data.labeled, data.unlabeled, t)
    }

    /// Parameters used for evaluation: the selected teacher when one exists,
    /// otherwise the current teacher.
    pub fn eval_params(&self) -> &ParamSet<f32> {
        self.best
            .as_ref()
            .map_or(&self.models.teacher, |b| &b.teacher)
    }
}

fn mixed_pairs(
    target: &Tensor<f32>,
    teacher_post: &Tensor<f32>,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (n, _, h, w) = target.dims4()?;
    let mut xs = Vec::with_capacity(n / 2);
    let mut ps = Vec::with_capacity(n / 2);
    for k in 0..n / 2 {
        let m = gen_mask(h, w, sigma, rng.gen())?;
        xs.push(mix_images(&target.index0(2 * k)?, &target.index0(2 * k + 1)?, &m)?);
        ps.push(mix_predictions(&teacher_post.index0(2 * k)?, &teacher_post.index0(2 * k + 1)?, &m)?);
    }
    Ok((stack(&xs)?, stack(&ps)?))
}

fn transformed(
    target: &Tensor<f32>,
    teacher_post: &Tensor<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (n, _, _, _) = target.dims4()?;
    let mut xs = Vec::with_capacity(n);
    let mut ps = Vec::with_capacity(n);
    for i in 0..n {
        let t = SpatialTransform::random_invertible(rng);
        xs.push(apply_spatial(&target.index0(i)?, &t)?);
        ps.push(apply_spatial_to_prediction(&teacher_post.index0(i)?, &t)?);
    }
    Ok((stack(&xs)?, stack(&ps)?))
}

/// Per-image rows plus an aggregate row, from a plain forward pass with no
/// perturbation.
pub fn evaluate(
    model: &UNetConfig,
    params: &ParamSet<f32>,
    dataset: &[Sample],
    averaging: Averaging,
) -> Result<Vec<MetricsRow>> {
    evaluate_threaded(model, params, dataset, averaging, 1)
}

/// [`evaluate`] with images spread over up to `threads` workers. Each image
/// is scored independently, so the result does not depend on `threads`.
pub fn evaluate_threaded(
    model: &UNetConfig,
    params: &ParamSet<f32>,
    dataset: &[Sample],
    averaging: Averaging,
    threads: usize,
) -> Result<Vec<MetricsRow>> {
    let score = |s: &Sample| -> Result<(String, ConfusionCounts)> {
        let (h, w) = s.size();
        model.check_input(h, w)?;
        let x = s.image.clone().reshape([1, 3, h, w])?;
        let p = posteriors(model, params, &x)?;
        Ok((s.id.clone(), classify_pixels(&p, &s.labels)?))
    };
    let threads = threads.clamp(1, dataset.len().max(1));
    let per_image: Vec<(String, ConfusionCounts)> = if threads == 1 {
        dataset.iter().map(score).collect::<Result<_>>()?
    } else {
        let chunk = dataset.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = dataset
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(score).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(dataset.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    metrics_table(&per_image, averaging)
}

/// Streams [`LogRow`]s as CSV with columns
/// `iteration,L_S,R_C,lambda,total,teacher_confidence,wall_time`.
/// Terms a mode does not use are left empty.
pub struct LogWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
}

impl<W: std::io::Write> LogWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner
            .write_record(["iteration", "L_S", "R_C", "lambda", "total", "teacher_confidence", "wall_time"])
            .map_err(|e| Error::Data(e.to_string()))?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &LogRow) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let r = &row.report;
        self.inner
            .write_record([
                row.iteration.to_string(),
                r.supervised.to_string(),
                opt(r.consistency),
                opt(r.lambda),
                r.total.to_string(),
                opt(r.teacher_confidence),
                format!("{:.3}", row.wall_time),
            ])
            .map_err(|e| Error::Data(e.to_string()))
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.inner.flush()?)
    }
}

/// Consistency loss maps of one model under vessel mixing of `(x1, x2)` with
/// mask `m` and under a horizontal flip of both images.
pub fn perturbation_loss_maps(
    model: &UNetConfig,
    student: &ParamSet<f32>,
    teacher: &ParamSet<f32>,
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
    m: &Mask,
) -> Result<(LossMap, LossMap)> {
    let pair = stack(&[x1.clone(), x2.clone()])?;
    let tp = posteriors(model, teacher, &pair)?;
    let mixed = mix_images(x1, x2, m)?;
    let (_, h, w) = match *x1.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(crate::error::shape_err!("expected a 3xHxW image, got {s:?}")),
    };
    let student_mix = posteriors(model, student, &mixed.reshape([1, 3, h, w])?)?;
    let goal_mix = mix_predictions(&tp.index0(0)?, &tp.index0(1)?, m)?.reshape([1, 2, h, w])?;
    let flipped = stack(&[
        apply_spatial(x1, &SpatialTransform::FlipH)?,
        apply_spatial(x2, &SpatialTransform::FlipH)?,
    ])?;
    let student_flip = posteriors(model, student, &flipped)?;
    let goal_flip = stack(&[
        apply_spatial_to_prediction(&tp.index0(0)?, &SpatialTransform::FlipH)?,
        apply_spatial_to_prediction(&tp.index0(1)?, &SpatialTransform::FlipH)?,
    ])?;
    Ok((loss_map(&student_mix, &goal_mix)?, loss_map(&student_flip, &goal_flip)?))
}
