//! Analytic gradients for scalar losses that read model log-likelihoods,
//! plus the central-finite-difference harness used to check them.
//!
//! Every training loss in this crate is a smooth function of finitely many
//! terms log p_theta(x | row). A loss object reports which terms it reads
//! and the partial derivative of the loss with respect to each term; the
//! chain rule through the softmax slots is applied here, once, for all
//! losses. Frozen-reference log-probabilities are constants captured inside
//! the loss object, so they contribute no gradient.

use crate::error::{Error, Result};
use crate::model::{LogitTable, TabularArModel};
use crate::numeric::allclose;

/// One model log-likelihood read by a loss: log p_theta(x | row).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogProbTerm {
    /// Condition row, mask row included.
    pub row: usize,
    /// Sequence index in enumeration order.
    pub seq_index: usize,
}

/// A scalar loss expressed through model log-likelihood terms.
pub trait LogProbLoss {
    /// The terms the loss reads, in a fixed order.
    fn terms(&self) -> Vec<LogProbTerm>;

    /// Loss value and d(loss)/d(log p) for each term, evaluated at the
    /// given term values (same order as [`terms`](Self::terms)).
    fn value_and_term_grads(&self, log_probs: &[f64]) -> (f64, Vec<f64>);
}

/// Evaluate the model log-likelihood of each term.
pub fn term_log_probs(model: &TabularArModel, terms: &[LogProbTerm]) -> Vec<f64> {
    terms
        .iter()
        .map(|t| model.log_prob_by_index(t.row, t.seq_index))
        .collect()
}

/// Loss value only.
pub fn loss_value(model: &TabularArModel, loss: &dyn LogProbLoss) -> f64 {
    let terms = loss.terms();
    let (value, _) = loss.value_and_term_grads(&term_log_probs(model, &terms));
    value
}

/// Loss value and its exact gradient with respect to every logit.
///
/// Slots never visited by any term keep gradient exactly zero.
pub fn loss_gradient(model: &TabularArModel, loss: &dyn LogProbLoss) -> (f64, LogitTable) {
    let terms = loss.terms();
    let log_probs = term_log_probs(model, &terms);
    let (value, weights) = loss.value_and_term_grads(&log_probs);
    debug_assert_eq!(weights.len(), terms.len());

    let space = *model.space();
    let mut grad = LogitTable::zeros(space);
    for (term, &weight) in terms.iter().zip(weights.iter()) {
        if weight == 0.0 {
            continue;
        }
        for position in 0..space.seq_len() {
            let prefix = space.prefix_of(term.seq_index, position);
            let token = space.token_at(term.seq_index, position) as usize;
            let logits = model.logits().slot(term.row, position, prefix);
            let norm = crate::numeric::log_sum_exp(logits);
            let grad_slot = grad.slot_mut(term.row, position, prefix);
            for (v, g) in grad_slot.iter_mut().enumerate() {
                let softmax_v = (logits[v] - norm).exp();
                let indicator = if v == token { 1.0 } else { 0.0 };
                // d log p(x|row) / d logit[v] = 1{v = x_pos} - softmax_v.
                *g += weight * (indicator - softmax_v);
            }
        }
    }
    (value, grad)
}

/// Central finite differences of the loss over every logit entry.
pub fn finite_difference_gradient(
    model: &TabularArModel,
    loss: &dyn LogProbLoss,
    step: f64,
) -> LogitTable {
    let mut probe = model.clone();
    let mut fd = LogitTable::zeros(*model.space());
    let n = model.logits().values().len();
    for i in 0..n {
        let original = probe.logits().values()[i];
        probe.logits_mut().values_mut()[i] = original + step;
        let plus = loss_value(&probe, loss);
        probe.logits_mut().values_mut()[i] = original - step;
        let minus = loss_value(&probe, loss);
        probe.logits_mut().values_mut()[i] = original;
        fd.values_mut()[i] = (plus - minus) / (2.0 * step);
    }
    fd
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    /// Worst absolute deviation between analytic and finite differences.
    pub max_abs_diff: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    /// Analytic and finite-difference values at that entry.
    pub analytic: f64,
    pub finite_difference: f64,
    pub passed: bool,
}

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default relative tolerance of the check.
pub const FD_RTOL: f64 = 1e-5;
/// Default absolute floor of the check.
pub const FD_ATOL: f64 = 1e-10;

/// Compare analytic and finite-difference gradients entrywise and verify
/// that untouched slots carry an exactly zero analytic gradient.
pub fn check_gradient(
    model: &TabularArModel,
    loss: &dyn LogProbLoss,
    step: f64,
    rtol: f64,
    atol: f64,
) -> Result<GradientCheck> {
    let (_, analytic) = loss_gradient(model, loss);
    let fd = finite_difference_gradient(model, loss, step);

    let space = *model.space();
    let mut touched = vec![false; analytic.values().len()];
    for term in loss.terms() {
        for position in 0..space.seq_len() {
            let prefix = space.prefix_of(term.seq_index, position);
            let start = analytic.slot_start(term.row, position, prefix);
            for v in 0..space.vocab_size() {
                touched[start + v] = true;
            }
        }
    }

    let mut check = GradientCheck {
        max_abs_diff: 0.0,
        worst_index: 0,
        analytic: 0.0,
        finite_difference: 0.0,
        passed: true,
    };
    for i in 0..analytic.values().len() {
        let a = analytic.values()[i];
        let f = fd.values()[i];
        if !touched[i] && a != 0.0 {
            return Err(Error::Numeric(format!(
                "analytic gradient is {a} at untouched entry {i}, expected exactly 0"
            )));
        }
        let diff = (a - f).abs();
        if diff > check.max_abs_diff {
            check.max_abs_diff = diff;
            check.worst_index = i;
            check.analytic = a;
            check.finite_difference = f;
        }
        if !allclose(a, f, rtol, atol) {
            check.passed = false;
        }
    }
    Ok(check)
}

/// Central finite differences of an arbitrary scalar function of a flat
/// parameter vector. Used by the table-valued estimators (NCE, classifier)
/// whose parameters are not model logits.
pub fn central_difference_vector(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut work = point.to_vec();
    let mut grad = vec![0.0; point.len()];
    for i in 0..point.len() {
        let original = work[i];
        work[i] = original + step;
        let plus = f(&work);
        work[i] = original - step;
        let minus = f(&work);
        work[i] = original;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}
