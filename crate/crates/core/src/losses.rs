//! Supervised artery/vein loss, consistency regulariser, adaptive trade-off
//! weight and the mean-teacher parameter update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::perturb::{mix_predictions, Mask};

/// Which posteriors count as confident when setting the trade-off weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceRule {
    /// `max(p, 1 - p) >= τ`: confident background counts.
    Symmetric,
    /// `p >= τ` only.
    PositiveOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub pos_weight: f64,
    pub ema_alpha: f64,
    pub confidence_threshold: f64,
    pub lambda_scale: f64,
    pub confidence_rule: ConfidenceRule,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            pos_weight: 10.0,
            ema_alpha: 0.99,
            confidence_threshold: 0.8,
            lambda_scale: 1.0,
            confidence_rule: ConfidenceRule::Symmetric,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_weight > 0.0) {
            return Err(Error::Config(format!("pos_weight must be > 0, got {}", self.pos_weight)));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha must be in [0, 1), got {}", self.ema_alpha)));
        }
        if !(self.confidence_threshold > 0.5 && self.confidence_threshold < 1.0) {
            return Err(Error::Config(format!(
                "confidence_threshold must be in (0.5, 1), got {}",
                self.confidence_threshold
            )));
        }
        if !(self.lambda_scale >= 0.0) {
            return Err(Error::Config(format!("lambda_scale must be >= 0, got {}", self.lambda_scale)));
        }
        Ok(())
    }
}

/// Per-iteration loss record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub supervised: f64,
    /// Absent when the mode has no consistency term.
    pub consistency: Option<f64>,
    pub lambda: Option<f64>,
    pub total: f64,
    pub teacher_confidence: Option<f64>,
}

fn check_binary<T: Scalar>(labels: &Tensor<T>) -> Result<()> {
    if let Some(bad) = labels.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Data(format!("labels must be 0 or 1, found {bad:?}")));
    }
    Ok(())
}

/// Weighted BCE on logits, one term per channel (artery, vein), summed.
pub fn supervised_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &Tensor<T>, pos_weight: f64) -> Result<Var> {
    let (_, c, _, _) = g.value(logits).dims4()?;
    if c != 2 {
        return Err(shape_err!("supervised loss expects 2 channels, got {c}"));
    }
    check_binary(labels)?;
    g.bce_with_logits(logits, labels, T::of(pos_weight))
}

/// Mean squared error between `sigmoid(student_logits)` and a detached target.
pub fn consistency_to_target<T: Scalar>(g: &mut Graph<T>, student_logits: Var, target: &Tensor<T>) -> Result<Var> {
    if g.value(student_logits).shape() != target.shape() {
        return Err(shape_err!(
            "consistency: student {:?} vs target {:?}",
            g.value(student_logits).shape(),
            target.shape()
        ));
    }
    let p = g.sigmoid(student_logits)?;
    let t = g.constant(target.clone())?;
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Vessel-mixing consistency: student on the mixed input against the mixed
/// teacher posteriors.
pub fn consistency_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_logits_on_mixed: Var,
    teacher_post_x1: &Tensor<T>,
    teacher_post_x2: &Tensor<T>,
    m: &Mask,
) -> Result<Var> {
    let target = mix_predictions(teacher_post_x1, teacher_post_x2, m)?;
    consistency_to_target(g, student_logits_on_mixed, &target)
}

/// Share of confident posterior entries (all samples and both channels).
pub fn teacher_confidence<T: Scalar>(posteriors: &Tensor<T>, threshold: f64, rule: ConfidenceRule) -> f64 {
    if posteriors.numel() == 0 {
        return 0.0;
    }
    let confident = posteriors
        .data()
        .iter()
        .filter(|&&p| {
            let p = p.f64();
            match rule {
                ConfidenceRule::Symmetric => p.max(1.0 - p) >= threshold,
                ConfidenceRule::PositiveOnly => p >= threshold,
            }
        })
        .count();
    confident as f64 / posteriors.numel() as f64
}

/// Trade-off weight from the teacher's confidence on the target batch.
pub fn adaptive_lambda<T: Scalar>(posteriors: &Tensor<T>, cfg: &LossConfig) -> f64 {
    teacher_confidence(posteriors, cfg.confidence_threshold, cfg.confidence_rule) * cfg.lambda_scale
}

/// `L = L_S + λ·R_C` with λ treated as a constant.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    supervised: Var,
    consistency: Option<Var>,
    lambda: f64,
) -> Result<(Var, LossReport)> {
    let ls = g.value(supervised).item()?.f64();
    let (total, rc) = match consistency {
        Some(rc) => {
            let weighted = g.mul_scalar(rc, T::of(lambda))?;
            (g.add(supervised, weighted)?, Some(g.value(rc).item()?.f64()))
        }
        None => (supervised, None),
    };
    let report = LossReport {
        supervised: ls,
        consistency: rc,
        lambda: rc.map(|_| lambda),
        total: g.value(total).item()?.f64(),
        teacher_confidence: None,
    };
    Ok((total, report))
}

/// `θ′ ← α θ′ + (1 − α) θ`, evaluated in 64-bit and rounded back.
pub fn ema_update<T: Scalar>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, alpha: f64) -> Result<()> {
    teacher.check_congruent(student)?;
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = T::of(alpha * tv.f64() + (1.0 - alpha) * sv.f64());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(n: usize, c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn([n, c, h, w], f)
    }

    #[test]
    fn saturated_correct_predictions_cost_nothing() {
        let labels = t4(1, 2, 4, 4, |i| ((i * 7) % 3 == 0) as u8 as f64);
        let logits = labels.map(|y| if y == 1.0 { 50.0 } else { -50.0 });
        let mut g = Graph::new();
        let l = g.constant(logits).unwrap();
        let loss = supervised_loss(&mut g, l, &labels, 10.0).unwrap();
        assert!(g.value(loss).item().unwrap() < 1e-6);
    }

    #[test]
    fn zero_logits_zero_labels() {
        let mut g = Graph::new();
        let l = g.constant(t4(2, 2, 3, 3, |_| 0.0)).unwrap();
        let loss = supervised_loss(&mut g, l, &Tensor::zeros([2, 2, 3, 3]), 10.0).unwrap();
        let v = g.value(loss).item().unwrap();
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn non_binary_labels_rejected() {
        let mut g = Graph::new();
        let l = g.constant(t4(1, 2, 2, 2, |_| 0.0)).unwrap();
        let labels = t4(1, 2, 2, 2, |i| if i == 3 { 0.5 } else { 0.0 });
        assert!(matches!(supervised_loss(&mut g, l, &labels, 10.0), Err(Error::Data(_))));
    }

    #[test]
    fn consistency_bounds() {
        let m = Mask::constant(2, 2, true);
        // identical posteriors
        let logits = t4(1, 2, 2, 2, |i| i as f64 - 3.0);
        let post = logits.map(crate::autodiff::stable_sigmoid);
        let mut g = Graph::new();
        let l = g.constant(logits).unwrap();
        let rc = consistency_loss(&mut g, l, &post, &post, &m).unwrap();
        assert_eq!(g.value(rc).item().unwrap(), 0.0);
        // student saturated at 1, teacher at 0 -> 1 up to sigmoid(700) rounding
        let mut g = Graph::new();
        let l = g.constant(t4(1, 2, 2, 2, |_| 700.0)).unwrap();
        let zeros = Tensor::zeros([1, 2, 2, 2]);
        let rc = consistency_loss(&mut g, l, &zeros, &zeros, &m).unwrap();
        assert_eq!(g.value(rc).item().unwrap(), 1.0);
    }

    #[test]
    fn lambda_counting() {
        let cfg = LossConfig::default();
        assert_eq!(adaptive_lambda(&Tensor::<f64>::full([2, 2, 4, 4], 0.5), &cfg), 0.0);
        let sure = Tensor::<f64>::from_fn([2, 2, 4, 4], |i| if i % 2 == 0 { 0.01 } else { 0.99 });
        assert_eq!(adaptive_lambda(&sure, &cfg), 1.0);
        let half = Tensor::<f64>::from_fn([1, 2, 4, 4], |i| if i < 16 { 0.95 } else { 0.5 });
        assert_eq!(adaptive_lambda(&half, &cfg), 0.5);
        let scaled = LossConfig {
            lambda_scale: 3.0,
            ..cfg
        };
        assert_eq!(adaptive_lambda(&sure, &scaled), 3.0);
        let positive = LossConfig {
            confidence_rule: ConfidenceRule::PositiveOnly,
            ..cfg
        };
        assert_eq!(adaptive_lambda(&sure, &positive), 0.5);
    }

    #[test]
    fn total_loss_reductions() {
        let mut g = Graph::<f64>::new();
        let ls = g.constant(Tensor::scalar(0.7)).unwrap();
        let rc = g.constant(Tensor::scalar(0.3)).unwrap();
        let (t, r) = total_loss(&mut g, ls, Some(rc), 0.0).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 0.7);
        assert_eq!(r.lambda, Some(0.0));
        let zero = g.constant(Tensor::scalar(0.0)).unwrap();
        let (t, _) = total_loss(&mut g, ls, Some(zero), 1.0).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 0.7);
        let (t, r) = total_loss(&mut g, ls, None, 1.0).unwrap();
        assert_eq!(t, ls);
        assert_eq!(r.consistency, None);
        assert_eq!(r.lambda, None);
    }

    fn one_param(v: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::full([3], v));
        p
    }

    #[test]
    fn ema_arithmetic() {
        let mut teacher = one_param(0.0);
        ema_update(&mut teacher, &one_param(1.0), 0.99).unwrap();
        for &v in teacher.tensors()[0].data() {
            assert!((v - 0.01).abs() < 1e-7);
        }
        let mut same = one_param(0.37);
        ema_update(&mut same, &one_param(0.37), 0.99).unwrap();
        assert_eq!(same, one_param(0.37));
        let mut t0 = one_param(5.0);
        ema_update(&mut t0, &one_param(-2.25), 0.0).unwrap();
        assert_eq!(t0, one_param(-2.25));
    }

    #[test]
    fn ema_shape_mismatch() {
        let mut a = one_param(0.0);
        let mut b = ParamSet::new();
        b.push("w", Tensor::<f32>::zeros([4]));
        assert!(matches!(ema_update(&mut a, &b, 0.9), Err(Error::Shape(_))));
    }
}
