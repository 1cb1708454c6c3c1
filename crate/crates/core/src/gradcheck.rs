//! Finite-difference gradient oracle.
//!
//! The independent route for validating the tape's analytic gradients:
//! central differences over every scalar coordinate in a parameter bank.
//! The evaluation closure must be deterministic — the checker probes this
//! by evaluating twice at the base point and comparing bit patterns.

use crate::error::{Error, Result};
use crate::params::ParamBank;
use crate::tensor::Tensor;

/// Permitted step-size range for central differences.
pub const EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

/// What a checked evaluation must produce.
pub struct EvalOut {
    pub value: f64,
    /// Analytic gradients in bank order; only required when asked for.
    pub grads: Option<Vec<Tensor>>,
}

/// Whether an evaluation needs gradients or just the loss value.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    ValueOnly,
    WithGrads,
}

/// Outcome of a full gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Number of scalar coordinates checked.
    pub coords: usize,
}

/// Central-difference gradient of `f` for every coordinate in the bank.
///
/// `f` sees the perturbed bank; original values are restored bit-exactly.
pub fn finite_diff_grad<F>(bank: &mut ParamBank, eps: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamBank) -> Result<f64>,
{
    check_eps(eps)?;
    let mut out = Vec::with_capacity(bank.len());
    for pi in 0..bank.len() {
        let id = crate::params::ParamId(pi);
        let numel = bank.get(id).numel();
        let mut grad = Tensor::zeros(bank.get(id).shape());
        for ci in 0..numel {
            let original = bank.get(id).data()[ci];
            bank.get_mut(id).data_mut()[ci] = original + eps;
            let plus = f(bank)?;
            bank.get_mut(id).data_mut()[ci] = original - eps;
            let minus = f(bank)?;
            bank.get_mut(id).data_mut()[ci] = original;
            grad.data_mut()[ci] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares analytic gradients against central differences coordinate by
/// coordinate and reports the worst relative error.
///
/// Fails fast if `eval` is not deterministic (two base-point evaluations
/// disagree bitwise) or if `eps` falls outside [`EPS_RANGE`].
pub fn finite_diff_check<F>(bank: &mut ParamBank, eps: f64, mut eval: F) -> Result<CheckReport>
where
    F: FnMut(&ParamBank, EvalMode) -> Result<EvalOut>,
{
    check_eps(eps)?;

    let probe_a = eval(bank, EvalMode::ValueOnly)?.value;
    let probe_b = eval(bank, EvalMode::ValueOnly)?.value;
    if probe_a.to_bits() != probe_b.to_bits() {
        return Err(Error::Contract(format!(
            "evaluation is not deterministic: {probe_a:?} vs {probe_b:?} at the same parameters"
        )));
    }

    let analytic = eval(bank, EvalMode::WithGrads)?
        .grads
        .ok_or_else(|| Error::Contract("evaluation returned no gradients".into()))?;
    if analytic.len() != bank.len() {
        return Err(Error::Contract(format!(
            "gradient count {} does not match bank size {}",
            analytic.len(),
            bank.len()
        )));
    }

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords: 0,
    };
    for pi in 0..bank.len() {
        let id = crate::params::ParamId(pi);
        let numel = bank.get(id).numel();
        for ci in 0..numel {
            let original = bank.get(id).data()[ci];
            bank.get_mut(id).data_mut()[ci] = original + eps;
            let plus = eval(bank, EvalMode::ValueOnly)?.value;
            bank.get_mut(id).data_mut()[ci] = original - eps;
            let minus = eval(bank, EvalMode::ValueOnly)?.value;
            bank.get_mut(id).data_mut()[ci] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((bank.name(id).to_string(), ci));
            }
        }
    }
    Ok(report)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= EPS_RANGE.0 && eps <= EPS_RANGE.1) {
        return Err(Error::Contract(format!(
            "step size {eps} outside permitted range [{}, {}]",
            EPS_RANGE.0, EPS_RANGE.1
        )));
    }
    Ok(())
}
