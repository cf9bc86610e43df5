//! Central finite-difference gradient checking in 64-bit.

use crate::autodiff::graph::{Graph, OpKind, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{shape_err, Result};

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Worst normalised error over all inputs.
    pub max_rel_error: f64,
    /// Input tensor and flat element index of the largest discrepancy.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradcheckOptions {
    pub fault: Option<OpKind>,
}

/// Compare the analytic gradient of the scalar built by `f` against central
/// differences. For each input the error is
/// `max_i |a_i - n_i| / max(1e-8, max_i (|a_i| + |n_i|))`; the report holds
/// the largest one.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, inputs, GradcheckOptions::default())
}

pub fn gradcheck_with<F>(f: F, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars = values
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    if let Some(kind) = opts.fault {
        g.inject_fault(kind);
    }
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    if g.value(root).numel() != 1 {
        return Err(shape_err!("gradcheck needs a scalar-valued function"));
    }
    g.backward(root)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let mut max_diff = 0.0f64;
        let mut max_mag = 0.0f64;
        let mut worst = (0usize, 0.0, 0.0);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[i];
            let diff = (a - numeric).abs();
            max_mag = max_mag.max(a.abs() + numeric.abs());
            if diff > max_diff {
                max_diff = diff;
                worst = (i, a, numeric);
            }
        }
        let err = max_diff / max_mag.max(1e-8);
        if err > report.max_rel_error || (k == 0 && err == 0.0) {
            report = GradReport {
                max_rel_error: err,
                worst_input: k,
                worst_index: worst.0,
                analytic: worst.1,
                numeric: worst.2,
            };
        }
    }
    Ok(report)
}
