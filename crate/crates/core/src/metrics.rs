//! Artery/vein scoring on ground-truth vessel pixels and consistency loss maps.
//!
//! Artery is the positive class: `Sen` is artery recall, `Sp` vein recall and
//! `F1` the artery F1. Crossing pixels are left out of the confusion counts and
//! tallied separately.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::data::LabelMap;
use crate::error::{shape_err, Error, Result};

/// Upper end of the fixed display range for loss-map PNGs.
pub const LOSS_MAP_SCALE: f64 = 0.25;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub aa: u64,
    pub av: u64,
    pub vv: u64,
    pub va: u64,
    pub excluded_crossings: u64,
}

impl ConfusionCounts {
    pub fn counted(&self) -> u64 {
        self.aa + self.av + self.vv + self.va
    }

    pub fn total_vessel(&self) -> u64 {
        self.counted() + self.excluded_crossings
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.aa += other.aa;
        self.av += other.av;
        self.vv += other.vv;
        self.va += other.va;
        self.excluded_crossings += other.excluded_crossings;
    }
}

/// Counts for one `[2,H,W]` (or `[1,2,H,W]`) posterior map. Ties go to artery.
pub fn classify_pixels<T: Scalar>(posteriors: &Tensor<T>, labels: &LabelMap) -> Result<ConfusionCounts> {
    let (h, w) = (labels.height(), labels.width());
    let ok = match posteriors.shape() {
        [2, ph, pw] | [1, 2, ph, pw] => *ph == h && *pw == w,
        _ => false,
    };
    if !ok {
        return Err(shape_err!(
            "posteriors {:?} do not match labels {h}x{w}",
            posteriors.shape()
        ));
    }
    let (pa, pv) = posteriors.data().split_at(h * w);
    let mut c = ConfusionCounts::default();
    for i in 0..h * w {
        let (a, v) = (labels.artery()[i] != 0, labels.vein()[i] != 0);
        if a && v {
            c.excluded_crossings += 1;
            continue;
        }
        if !a && !v {
            continue;
        }
        let says_artery = pa[i] >= pv[i];
        match (a, says_artery) {
            (true, true) => c.aa += 1,
            (true, false) => c.av += 1,
            (false, false) => c.vv += 1,
            (false, true) => c.va += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One line of a results table. Ratios with a zero denominator are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image: String,
    pub aggregate: bool,
    pub f1: Option<f64>,
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub sp: Option<f64>,
    pub aa: u64,
    pub av: u64,
    pub vv: u64,
    pub va: u64,
    pub excluded_crossings: u64,
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricsRow> {
    if c.counted() == 0 {
        return Err(Error::EmptyEval);
    }
    Ok(MetricsRow {
        image: String::new(),
        aggregate: false,
        f1: ratio(2 * c.aa, 2 * c.aa + c.av + c.va),
        acc: ratio(c.aa + c.vv, c.counted()),
        sen: ratio(c.aa, c.aa + c.av),
        sp: ratio(c.vv, c.vv + c.va),
        aa: c.aa,
        av: c.av,
        vv: c.vv,
        va: c.va,
        excluded_crossings: c.excluded_crossings,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Pool pixel counts over all images.
    #[default]
    Micro,
    /// Mean of per-image ratios, skipping images where a ratio is undefined.
    Macro,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-image rows followed by one aggregate row. Images without countable
/// pixels are skipped; if none remain the result is `EmptyEval`.
pub fn metrics_table(per_image: &[(String, ConfusionCounts)], averaging: Averaging) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    let mut pooled = ConfusionCounts::default();
    for (id, c) in per_image {
        pooled.merge(c);
        if c.counted() == 0 {
            continue;
        }
        let mut row = compute_metrics(c)?;
        row.image = id.clone();
        rows.push(row);
    }
    let mut agg = compute_metrics(&pooled)?;
    if averaging == Averaging::Macro {
        agg.f1 = mean_defined(rows.iter().map(|r| r.f1));
        agg.acc = mean_defined(rows.iter().map(|r| r.acc));
        agg.sen = mean_defined(rows.iter().map(|r| r.sen));
        agg.sp = mean_defined(rows.iter().map(|r| r.sp));
    }
    agg.image = match averaging {
        Averaging::Micro => "aggregate-micro".into(),
        Averaging::Macro => "aggregate-macro".into(),
    };
    agg.aggregate = true;
    rows.push(agg);
    Ok(rows)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_metrics(std::fs::File::create(path)?, rows)
}

pub fn write_metrics<W: std::io::Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Data(format!("csv: {e}"))
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "---".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// `F1/Acc/Sen/Sp` cell in percent, `---` where undefined.
pub fn format_cell(row: &MetricsRow) -> String {
    format!("{}/{}/{}/{}", pct(row.f1), pct(row.acc), pct(row.sen), pct(row.sp))
}

/// Markdown comparison table with one row per `(label, metrics)` entry.
pub fn markdown_table(title: &str, rows: &[(String, MetricsRow)]) -> String {
    let mut s = String::new();
    writeln!(s, "| Method | {title} |").unwrap();
    writeln!(s, "|---|---|").unwrap();
    writeln!(s, "| | F1/Acc/Sen/Sp |").unwrap();
    for (label, row) in rows {
        writeln!(s, "| {label} | {} |", format_cell(row)).unwrap();
    }
    s
}

/// Squared error map between two posterior tensors, averaged over the channel
/// axis and over the batch when there is one.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mean: f64,
}

pub fn loss_map<T: Scalar>(student_post: &Tensor<T>, target_post: &Tensor<T>) -> Result<LossMap> {
    if student_post.shape() != target_post.shape() {
        return Err(shape_err!(
            "loss map: {:?} vs {:?}",
            student_post.shape(),
            target_post.shape()
        ));
    }
    let (n, c, h, w) = match *student_post.shape() {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(shape_err!("loss map expects 3 or 4 dims, got {s:?}")),
    };
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for (i, (a, b)) in student_post.data().iter().zip(target_post.data()).enumerate() {
        let d = a.f64() - b.f64();
        values[i % plane] += d * d;
    }
    let denom = (n * c) as f64;
    values.iter_mut().for_each(|v| *v /= denom);
    let mean = values.iter().sum::<f64>() / plane.max(1) as f64;
    Ok(LossMap {
        height: h,
        width: w,
        values,
        mean,
    })
}

impl LossMap {
    /// Writes `<stem>_scale0-0.25.png` into `dir`, mapping `[0, 0.25]` linearly
    /// to `[0, 255]` and clamping above.
    pub fn write_png(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{stem}_scale0-{LOSS_MAP_SCALE}.png"));
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.values[y as usize * self.width + x as usize] / LOSS_MAP_SCALE;
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(&path)?;
        Ok(path)
    }
}
