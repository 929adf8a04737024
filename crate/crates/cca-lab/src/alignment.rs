//! Contrastive alignment losses and the exact-gradient training loop.
//!
//! All losses are differentiable functions of sequence log-probabilities
//! and plug into the gradient machinery in `grad`, so every one of them
//! gets finite-difference coverage for free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{loss_gradient, LogProbLoss, LogProbTerm};
use crate::model::TabularArModel;
use crate::numeric::{log_sigmoid, sigmoid};
use crate::oracle::{DataPair, TrueDistributionSpec};
use crate::rng::Rng;
use crate::space::SequenceSpace;

/// One training item: a sequence with its positive condition row and an
/// optional mismatched negative condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentItem {
    pub seq_index: usize,
    /// Row index used as the positive condition; equals `mask_id` for
    /// items whose condition was dropped.
    pub positive_row: usize,
    /// A real condition drawn from another item of the batch, or None
    /// for items that contribute no contrastive term.
    pub negative_condition: Option<usize>,
}

/// A batch of alignment items over one sequence space.
#[derive(Debug, Clone)]
pub struct AlignmentBatch {
    space: SequenceSpace,
    items: Vec<AlignmentItem>,
}

impl AlignmentBatch {
    pub fn new(space: SequenceSpace, items: Vec<AlignmentItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Input("alignment batch is empty".into()));
        }
        for (i, item) in items.iter().enumerate() {
            if item.seq_index >= space.num_sequences() {
                return Err(Error::Input(format!(
                    "item {i}: sequence index {} out of range",
                    item.seq_index
                )));
            }
            space.check_row(item.positive_row)?;
            if let Some(neg) = item.negative_condition {
                space.check_condition(neg)?;
            }
        }
        Ok(AlignmentBatch { space, items })
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    pub fn items(&self) -> &[AlignmentItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn num_negatives(&self) -> usize {
        self.items
            .iter()
            .filter(|item| item.negative_condition.is_some())
            .count()
    }
}

/// Independently flag each item for condition dropout with probability
/// `p_drop`. Returns the pairs joined with their flags.
pub fn mask_dropout(
    pairs: &[DataPair],
    p_drop: f64,
    rng: &mut Rng,
) -> Result<Vec<(DataPair, bool)>> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::Input(format!(
            "dropout probability {p_drop} outside [0, 1]"
        )));
    }
    Ok(pairs
        .iter()
        .map(|pair| {
            let dropped = rand::Rng::gen::<f64>(rng) < p_drop;
            (*pair, dropped)
        })
        .collect())
}

/// Assign each item a negative condition by uniformly permuting the
/// batch's own condition values. Requires at least two items.
pub fn make_negative_batch(
    space: SequenceSpace,
    pairs: &[DataPair],
    rng: &mut Rng,
) -> Result<AlignmentBatch> {
    build_alignment_batch(space, pairs, 0.0, rng)
}

/// Negative assignment combined with condition dropout: dropped items
/// use the mask row as positive and receive no negative term. The
/// permutation is drawn over all K condition values regardless of flags.
pub fn build_alignment_batch(
    space: SequenceSpace,
    pairs: &[DataPair],
    p_drop: f64,
    rng: &mut Rng,
) -> Result<AlignmentBatch> {
    if pairs.len() < 2 {
        return Err(Error::Input(format!(
            "negative assignment needs at least 2 items, got {}",
            pairs.len()
        )));
    }
    let flagged = mask_dropout(pairs, p_drop, rng)?;
    let mut permutation: Vec<usize> = (0..pairs.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut permutation[..], rng);
    let items = flagged
        .iter()
        .zip(&permutation)
        .map(|((pair, dropped), &j)| AlignmentItem {
            seq_index: pair.seq_index,
            positive_row: if *dropped {
                space.mask_id()
            } else {
                pair.condition
            },
            negative_condition: if *dropped {
                None
            } else {
                Some(pairs[j].condition)
            },
        })
        .collect();
    AlignmentBatch::new(space, items)
}

/// Batch without negatives, for likelihood training with dropout.
pub fn build_mle_batch(
    space: SequenceSpace,
    pairs: &[DataPair],
    p_drop: f64,
    rng: &mut Rng,
) -> Result<AlignmentBatch> {
    let flagged = mask_dropout(pairs, p_drop, rng)?;
    let items = flagged
        .iter()
        .map(|(pair, dropped)| AlignmentItem {
            seq_index: pair.seq_index,
            positive_row: if *dropped {
                space.mask_id()
            } else {
                pair.condition
            },
            negative_condition: None,
        })
        .collect();
    AlignmentBatch::new(space, items)
}

/// Hyperparameters of the contrastive alignment loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaHyperparams {
    /// Sharpness of the implicit reward, > 0.
    pub beta: f64,
    /// Weight on the negative (mismatched-condition) term, >= 0.
    pub lambda: f64,
    /// Optional per-condition override of `lambda`, indexed by the
    /// negative condition.
    pub lambda_per_condition: Option<Vec<f64>>,
}

impl Default for CcaHyperparams {
    fn default() -> Self {
        CcaHyperparams {
            beta: 0.02,
            lambda: 300.0,
            lambda_per_condition: None,
        }
    }
}

impl CcaHyperparams {
    pub fn validate(&self, space: &SequenceSpace) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be finite and positive, got {}",
                self.beta
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if let Some(per) = &self.lambda_per_condition {
            if per.len() != space.num_conditions() {
                return Err(Error::Config(format!(
                    "lambda_per_condition has {} entries, space has {} conditions",
                    per.len(),
                    space.num_conditions()
                )));
            }
            for (c, l) in per.iter().enumerate() {
                if !(l.is_finite() && *l >= 0.0) {
                    return Err(Error::Config(format!(
                        "lambda_per_condition[{c}] = {l} must be finite and non-negative"
                    )));
                }
            }
        }
        Ok(())
    }

    fn lambda_for(&self, condition: usize) -> f64 {
        match &self.lambda_per_condition {
            Some(per) => per[condition],
            None => self.lambda,
        }
    }
}

/// Loss of the form  sum_i w_i * (-log sigma(sign_i * beta * delta_i))
/// where delta_i = log p_theta(term_i) - log p_ref(term_i). Covers both
/// the batch and the exact-expectation contrastive losses.
#[derive(Debug, Clone)]
pub struct ContrastLoss {
    terms: Vec<LogProbTerm>,
    ref_log_probs: Vec<f64>,
    weights: Vec<f64>,
    signs: Vec<f64>,
    beta: f64,
}

impl LogProbLoss for ContrastLoss {
    fn terms(&self) -> Vec<LogProbTerm> {
        self.terms.clone()
    }

    fn value_and_term_grads(&self, log_probs: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grads = vec![0.0; log_probs.len()];
        for i in 0..self.terms.len() {
            let delta = log_probs[i] - self.ref_log_probs[i];
            let z = self.signs[i] * self.beta * delta;
            value += self.weights[i] * (-log_sigmoid(z));
            grads[i] = -self.weights[i] * self.signs[i] * self.beta * sigmoid(-z);
        }
        (value, grads)
    }
}

/// Build the batch contrastive loss against a frozen reference model.
/// Positive terms are averaged over all items; negative terms over the
/// items that carry one, weighted by lambda.
pub fn cca_batch_loss(
    reference: &TabularArModel,
    batch: &AlignmentBatch,
    hp: &CcaHyperparams,
) -> Result<ContrastLoss> {
    hp.validate(batch.space())?;
    if reference.space() != batch.space() {
        return Err(Error::Input(
            "reference model space does not match batch space".into(),
        ));
    }
    let k_pos = batch.len() as f64;
    let k_neg = batch.num_negatives() as f64;
    let mut terms = Vec::new();
    let mut ref_log_probs = Vec::new();
    let mut weights = Vec::new();
    let mut signs = Vec::new();
    for item in batch.items() {
        terms.push(LogProbTerm {
            row: item.positive_row,
            seq_index: item.seq_index,
        });
        ref_log_probs.push(reference.log_prob_by_index(item.positive_row, item.seq_index));
        weights.push(1.0 / k_pos);
        signs.push(1.0);
        if let Some(neg) = item.negative_condition {
            terms.push(LogProbTerm {
                row: neg,
                seq_index: item.seq_index,
            });
            ref_log_probs.push(reference.log_prob_by_index(neg, item.seq_index));
            weights.push(hp.lambda_for(neg) / k_neg);
            signs.push(-1.0);
        }
    }
    Ok(ContrastLoss {
        terms,
        ref_log_probs,
        weights,
        signs,
        beta: hp.beta,
    })
}

/// Scalar value of the batch contrastive loss.
pub fn cca_loss(
    theta: &TabularArModel,
    reference: &TabularArModel,
    batch: &AlignmentBatch,
    hp: &CcaHyperparams,
) -> Result<f64> {
    if theta.space() != batch.space() {
        return Err(Error::Input("model space does not match batch space".into()));
    }
    Ok(crate::grad::loss_value(theta, &cca_batch_loss(reference, batch, hp)?))
}

/// Build the exact-expectation contrastive loss: positive terms weighted
/// by p(x, c), negative terms by p(x) p(c) times the per-condition
/// lambda. With lambda_c = Z(c)^(1/s) and beta = 1/s its unique
/// minimizer over fully expressive models is the sharpened target.
pub fn cca_expectation_loss_terms(
    reference: &TabularArModel,
    spec: &TrueDistributionSpec,
    beta: f64,
    lambda_weights: &[f64],
) -> Result<ContrastLoss> {
    if reference.space() != spec.space() {
        return Err(Error::Input(
            "reference model space does not match spec space".into(),
        ));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Config(format!(
            "beta must be finite and positive, got {beta}"
        )));
    }
    let space = *spec.space();
    if lambda_weights.len() != space.num_conditions() {
        return Err(Error::Config(format!(
            "lambda_weights has {} entries, space has {} conditions",
            lambda_weights.len(),
            space.num_conditions()
        )));
    }
    let marginal = spec.marginal_x();
    let mut terms = Vec::new();
    let mut ref_log_probs = Vec::new();
    let mut weights = Vec::new();
    let mut signs = Vec::new();
    for c in 0..space.num_conditions() {
        let pc = spec.p_c()[c];
        if pc == 0.0 {
            continue;
        }
        let conditional = spec.conditional(c);
        for x in 0..space.num_sequences() {
            let ref_lp = reference.log_prob_by_index(c, x);
            let positive_weight = pc * conditional.prob(x);
            if positive_weight > 0.0 {
                terms.push(LogProbTerm { row: c, seq_index: x });
                ref_log_probs.push(ref_lp);
                weights.push(positive_weight);
                signs.push(1.0);
            }
            let negative_weight = pc * marginal.prob(x) * lambda_weights[c];
            if negative_weight > 0.0 {
                terms.push(LogProbTerm { row: c, seq_index: x });
                ref_log_probs.push(ref_lp);
                weights.push(negative_weight);
                signs.push(-1.0);
            }
        }
    }
    Ok(ContrastLoss {
        terms,
        ref_log_probs,
        weights,
        signs,
        beta,
    })
}

/// Scalar value of the exact-expectation contrastive loss.
pub fn cca_expectation_loss(
    theta: &TabularArModel,
    reference: &TabularArModel,
    spec: &TrueDistributionSpec,
    beta: f64,
    lambda_weights: &[f64],
) -> Result<f64> {
    Ok(crate::grad::loss_value(
        theta,
        &cca_expectation_loss_terms(reference, spec, beta, lambda_weights)?,
    ))
}

/// Loss that is linear in the term log-probabilities:
/// sum_i coefficient_i * log p_theta(term_i).
#[derive(Debug, Clone)]
pub struct LinearLogProbLoss {
    terms: Vec<LogProbTerm>,
    coefficients: Vec<f64>,
}

impl LogProbLoss for LinearLogProbLoss {
    fn terms(&self) -> Vec<LogProbTerm> {
        self.terms.clone()
    }

    fn value_and_term_grads(&self, log_probs: &[f64]) -> (f64, Vec<f64>) {
        let value = log_probs
            .iter()
            .zip(&self.coefficients)
            .map(|(lp, w)| w * lp)
            .sum();
        (value, self.coefficients.clone())
    }
}

/// Negative mean log-likelihood of the batch under its positive rows.
pub fn mle_batch_loss(batch: &AlignmentBatch) -> LinearLogProbLoss {
    let k = batch.len() as f64;
    let terms = batch
        .items()
        .iter()
        .map(|item| LogProbTerm {
            row: item.positive_row,
            seq_index: item.seq_index,
        })
        .collect();
    let coefficients = vec![-1.0 / k; batch.len()];
    LinearLogProbLoss {
        terms,
        coefficients,
    }
}

/// Exact cross-entropy against the spec, with the mask row trained on
/// the marginal at weight `dropout_prob` to mirror empirical dropout.
pub fn mle_exact_loss(
    spec: &TrueDistributionSpec,
    dropout_prob: f64,
) -> Result<LinearLogProbLoss> {
    if !(0.0..=1.0).contains(&dropout_prob) {
        return Err(Error::Input(format!(
            "dropout probability {dropout_prob} outside [0, 1]"
        )));
    }
    let space = *spec.space();
    let marginal = spec.marginal_x();
    let mut terms = Vec::new();
    let mut coefficients = Vec::new();
    for c in 0..space.num_conditions() {
        let pc = spec.p_c()[c];
        let conditional = spec.conditional(c);
        for x in 0..space.num_sequences() {
            let w = (1.0 - dropout_prob) * pc * conditional.prob(x);
            if w > 0.0 {
                terms.push(LogProbTerm { row: c, seq_index: x });
                coefficients.push(-w);
            }
        }
    }
    if dropout_prob > 0.0 {
        for x in 0..space.num_sequences() {
            let w = dropout_prob * marginal.prob(x);
            if w > 0.0 {
                terms.push(LogProbTerm {
                    row: space.mask_id(),
                    seq_index: x,
                });
                coefficients.push(-w);
            }
        }
    }
    Ok(LinearLogProbLoss {
        terms,
        coefficients,
    })
}

/// Reference-free suppression loss:
/// mean[-log p(x|c_pos)] + lambda_u * mean[log p(x|c_neg)].
pub fn unlearn_batch_loss(
    batch: &AlignmentBatch,
    lambda_u: f64,
) -> Result<LinearLogProbLoss> {
    if !(lambda_u.is_finite() && lambda_u >= 0.0) {
        return Err(Error::Config(format!(
            "lambda_u must be finite and non-negative, got {lambda_u}"
        )));
    }
    let k_pos = batch.len() as f64;
    let k_neg = batch.num_negatives() as f64;
    let mut terms = Vec::new();
    let mut coefficients = Vec::new();
    for item in batch.items() {
        terms.push(LogProbTerm {
            row: item.positive_row,
            seq_index: item.seq_index,
        });
        coefficients.push(-1.0 / k_pos);
        if let Some(neg) = item.negative_condition {
            terms.push(LogProbTerm {
                row: neg,
                seq_index: item.seq_index,
            });
            coefficients.push(lambda_u / k_neg);
        }
    }
    Ok(LinearLogProbLoss {
        terms,
        coefficients,
    })
}

/// Scalar value of the suppression loss.
pub fn unlearn_loss(
    theta: &TabularArModel,
    batch: &AlignmentBatch,
    lambda_u: f64,
) -> Result<f64> {
    Ok(crate::grad::loss_value(theta, &unlearn_batch_loss(batch, lambda_u)?))
}

/// Preference loss over (winner, loser) pairs that share the sequence:
/// winner is (x, c_pos), loser is (x, c_neg).
#[derive(Debug, Clone)]
pub struct PreferencePairLoss {
    terms: Vec<LogProbTerm>,
    ref_log_probs: Vec<f64>,
    beta_d: f64,
    num_pairs: f64,
}

impl LogProbLoss for PreferencePairLoss {
    fn terms(&self) -> Vec<LogProbTerm> {
        self.terms.clone()
    }

    fn value_and_term_grads(&self, log_probs: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grads = vec![0.0; log_probs.len()];
        for pair in 0..(self.terms.len() / 2) {
            let w = 2 * pair;
            let l = w + 1;
            let delta_w = log_probs[w] - self.ref_log_probs[w];
            let delta_l = log_probs[l] - self.ref_log_probs[l];
            let z = self.beta_d * (delta_w - delta_l);
            value += -log_sigmoid(z) / self.num_pairs;
            let g = self.beta_d * sigmoid(-z) / self.num_pairs;
            grads[w] = -g;
            grads[l] = g;
        }
        (value, grads)
    }
}

/// Build the preference loss. Every batch item must carry a negative.
pub fn dpo_batch_loss(
    reference: &TabularArModel,
    batch: &AlignmentBatch,
    beta_d: f64,
) -> Result<PreferencePairLoss> {
    if !(beta_d.is_finite() && beta_d > 0.0) {
        return Err(Error::Config(format!(
            "beta_d must be finite and positive, got {beta_d}"
        )));
    }
    if reference.space() != batch.space() {
        return Err(Error::Input(
            "reference model space does not match batch space".into(),
        ));
    }
    let mut terms = Vec::new();
    let mut ref_log_probs = Vec::new();
    for (i, item) in batch.items().iter().enumerate() {
        let neg = item.negative_condition.ok_or_else(|| {
            Error::Input(format!(
                "preference loss requires a negative condition on every item; item {i} has none"
            ))
        })?;
        terms.push(LogProbTerm {
            row: item.positive_row,
            seq_index: item.seq_index,
        });
        ref_log_probs.push(reference.log_prob_by_index(item.positive_row, item.seq_index));
        terms.push(LogProbTerm {
            row: neg,
            seq_index: item.seq_index,
        });
        ref_log_probs.push(reference.log_prob_by_index(neg, item.seq_index));
    }
    Ok(PreferencePairLoss {
        terms,
        ref_log_probs,
        beta_d,
        num_pairs: batch.len() as f64,
    })
}

/// Scalar value of the preference loss.
pub fn dpo_loss(
    theta: &TabularArModel,
    reference: &TabularArModel,
    batch: &AlignmentBatch,
    beta_d: f64,
) -> Result<f64> {
    Ok(crate::grad::loss_value(theta, &dpo_batch_loss(reference, batch, beta_d)?))
}

/// Table of discrimination scores r(x, c) over sequences and real
/// conditions, trained with noise-contrastive estimation.
#[derive(Debug, Clone)]
pub struct NceTable {
    space: SequenceSpace,
    values: Vec<f64>,
}

impl NceTable {
    pub fn zeros(space: SequenceSpace) -> Self {
        let len = space.num_sequences() * space.num_conditions();
        NceTable {
            space,
            values: vec![0.0; len],
        }
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    fn index(&self, seq_index: usize, condition: usize) -> usize {
        seq_index * self.space.num_conditions() + condition
    }

    pub fn score(&self, seq_index: usize, condition: usize) -> f64 {
        self.values[self.index(seq_index, condition)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Per-entry weights of the exact NCE objective: a = p(x, c) for the
/// data term, b = p(x) p(c) for the noise term.
fn nce_weights(spec: &TrueDistributionSpec) -> (Vec<f64>, Vec<f64>) {
    let space = *spec.space();
    let marginal = spec.marginal_x();
    let n = space.num_sequences() * space.num_conditions();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for x in 0..space.num_sequences() {
        for c in 0..space.num_conditions() {
            let i = x * space.num_conditions() + c;
            let pc = spec.p_c()[c];
            a[i] = pc * spec.conditional(c).prob(x);
            b[i] = pc * marginal.prob(x);
        }
    }
    (a, b)
}

/// Exact NCE loss:
/// -E_{p(x,c)} log sigma(r) - E_{p(x)p(c)} log sigma(-r).
pub fn nce_exact_loss(table: &NceTable, spec: &TrueDistributionSpec) -> Result<f64> {
    if table.space() != spec.space() {
        return Err(Error::Input("table space does not match spec space".into()));
    }
    let (a, b) = nce_weights(spec);
    let mut value = 0.0;
    for i in 0..table.values.len() {
        let r = table.values[i];
        value += a[i] * (-log_sigmoid(r)) + b[i] * (-log_sigmoid(-r));
    }
    Ok(value)
}

/// Gradient of the exact NCE loss with respect to every table entry.
pub fn nce_exact_gradient(table: &NceTable, spec: &TrueDistributionSpec) -> Result<Vec<f64>> {
    if table.space() != spec.space() {
        return Err(Error::Input("table space does not match spec space".into()));
    }
    let (a, b) = nce_weights(spec);
    Ok((0..table.values.len())
        .map(|i| {
            let r = table.values[i];
            -a[i] * sigmoid(-r) + b[i] * sigmoid(r)
        })
        .collect())
}

/// Empirical NCE loss on a batch: positives are (x, c_pos), negatives
/// (x, c_neg). Items with a mask positive or no negative are rejected.
pub fn nce_batch_loss(table: &NceTable, batch: &AlignmentBatch) -> Result<f64> {
    let (value, _) = nce_batch_loss_and_gradient(table, batch)?;
    Ok(value)
}

/// Empirical NCE loss and its gradient table.
pub fn nce_batch_loss_and_gradient(
    table: &NceTable,
    batch: &AlignmentBatch,
) -> Result<(f64, Vec<f64>)> {
    if table.space() != batch.space() {
        return Err(Error::Input("table space does not match batch space".into()));
    }
    let k = batch.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; table.values.len()];
    for (i, item) in batch.items().iter().enumerate() {
        if item.positive_row == batch.space().mask_id() {
            return Err(Error::Input(format!(
                "NCE batch item {i} has a masked positive condition"
            )));
        }
        let neg = item.negative_condition.ok_or_else(|| {
            Error::Input(format!("NCE batch item {i} has no negative condition"))
        })?;
        let rp = table.score(item.seq_index, item.positive_row);
        let rn = table.score(item.seq_index, neg);
        value += -log_sigmoid(rp) / k - log_sigmoid(-rn) / k;
        grad[table.index(item.seq_index, item.positive_row)] += -sigmoid(-rp) / k;
        grad[table.index(item.seq_index, neg)] += sigmoid(rn) / k;
    }
    Ok((value, grad))
}

/// Train the score table on the exact objective with plain gradient
/// descent. When `learning_rate` is None a safe global rate is derived
/// from the curvature bound (a + b) / 4 of the per-entry loss.
pub fn train_nce_exact(
    spec: &TrueDistributionSpec,
    steps: usize,
    learning_rate: Option<f64>,
) -> Result<NceTable> {
    let mut table = NceTable::zeros(*spec.space());
    let (a, b) = nce_weights(spec);
    let lr = match learning_rate {
        Some(lr) => {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!(
                    "learning rate must be finite and positive, got {lr}"
                )));
            }
            lr
        }
        None => {
            let max_weight = a
                .iter()
                .zip(&b)
                .map(|(x, y)| x + y)
                .fold(0.0f64, f64::max);
            if max_weight == 0.0 {
                return Err(Error::Numeric("NCE objective has no mass".into()));
            }
            2.0 / max_weight
        }
    };
    for _ in 0..steps {
        for i in 0..table.values.len() {
            let r = table.values[i];
            let g = -a[i] * sigmoid(-r) + b[i] * sigmoid(r);
            table.values[i] -= lr * g;
        }
    }
    Ok(table)
}

/// Which objective a training run optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainLoss {
    /// Negative log-likelihood with condition dropout.
    MaximumLikelihood { dropout_prob: f64 },
    /// Contrastive alignment against a frozen reference.
    Cca {
        hp: CcaHyperparams,
        dropout_prob: f64,
    },
    /// Preference pairs (x, c_pos) over (x, c_neg).
    Dpo { beta_d: f64 },
    /// Reference-free suppression of mismatched conditions.
    Unlearn { lambda_u: f64 },
}

impl TrainLoss {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TrainLoss::MaximumLikelihood { .. } => "mle",
            TrainLoss::Cca { .. } => "cca",
            TrainLoss::Dpo { .. } => "dpo",
            TrainLoss::Unlearn { .. } => "unlearn",
        }
    }

    fn needs_reference(&self) -> bool {
        matches!(self, TrainLoss::Cca { .. } | TrainLoss::Dpo { .. })
    }
}

/// Fixed-step gradient descent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub loss: TrainLoss,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub record_every: usize,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        match &self.loss {
            TrainLoss::MaximumLikelihood { dropout_prob }
            | TrainLoss::Cca { dropout_prob, .. } => {
                if !(0.0..=1.0).contains(dropout_prob) {
                    return Err(Error::Config(format!(
                        "dropout probability {dropout_prob} outside [0, 1]"
                    )));
                }
            }
            TrainLoss::Dpo { beta_d } => {
                if !(beta_d.is_finite() && *beta_d > 0.0) {
                    return Err(Error::Config(format!(
                        "beta_d must be finite and positive, got {beta_d}"
                    )));
                }
            }
            TrainLoss::Unlearn { lambda_u } => {
                if !(lambda_u.is_finite() && *lambda_u >= 0.0) {
                    return Err(Error::Config(format!(
                        "lambda_u must be finite and non-negative, got {lambda_u}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Where gradients come from: minibatches of an empirical dataset, or
/// the exact population expectation.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    Empirical(&'a [DataPair]),
    Exact(&'a TrueDistributionSpec),
}

/// Optional oracle attachment: when present, the trajectory records the
/// mean KL to the sharpened target at `scale` after every recorded step.
#[derive(Debug, Clone, Copy)]
pub struct OracleAttachment<'a> {
    pub spec: &'a TrueDistributionSpec,
    pub scale: f64,
}

/// One recorded point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub loss: f64,
    pub mean_logp_pos: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_logp_neg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_to_target: Option<f64>,
}

/// The recorded curve of a training run. Step indices are strictly
/// increasing; the final state is always recorded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl TrainTrajectory {
    fn push(&mut self, point: TrajectoryPoint) {
        if let Some(last) = self.points.last() {
            if point.step <= last.step {
                return;
            }
        }
        self.points.push(point);
    }
}

struct StepMeasurement {
    loss: f64,
    mean_logp_pos: f64,
    mean_logp_neg: Option<f64>,
}

fn measure_batch(
    model: &TabularArModel,
    reference: Option<&TabularArModel>,
    batch: &AlignmentBatch,
    loss: &TrainLoss,
) -> Result<(StepMeasurement, crate::model::LogitTable)> {
    let (value, gradient) = match loss {
        TrainLoss::MaximumLikelihood { .. } => loss_gradient(model, &mle_batch_loss(batch)),
        TrainLoss::Cca { hp, .. } => {
            let reference = reference.expect("checked in train");
            loss_gradient(model, &cca_batch_loss(reference, batch, hp)?)
        }
        TrainLoss::Dpo { beta_d } => {
            let reference = reference.expect("checked in train");
            loss_gradient(model, &dpo_batch_loss(reference, batch, *beta_d)?)
        }
        TrainLoss::Unlearn { lambda_u } => {
            loss_gradient(model, &unlearn_batch_loss(batch, *lambda_u)?)
        }
    };
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut neg_count = 0usize;
    for item in batch.items() {
        pos_sum += model.log_prob_by_index(item.positive_row, item.seq_index);
        if let Some(neg) = item.negative_condition {
            neg_sum += model.log_prob_by_index(neg, item.seq_index);
            neg_count += 1;
        }
    }
    let measurement = StepMeasurement {
        loss: value,
        mean_logp_pos: pos_sum / batch.len() as f64,
        mean_logp_neg: if neg_count > 0 {
            Some(neg_sum / neg_count as f64)
        } else {
            None
        },
    };
    Ok((measurement, gradient))
}

fn measure_exact(
    model: &TabularArModel,
    reference: Option<&TabularArModel>,
    spec: &TrueDistributionSpec,
    loss: &TrainLoss,
) -> Result<(StepMeasurement, crate::model::LogitTable)> {
    let (value, gradient) = match loss {
        TrainLoss::MaximumLikelihood { dropout_prob } => {
            loss_gradient(model, &mle_exact_loss(spec, *dropout_prob)?)
        }
        TrainLoss::Cca { hp, .. } => {
            hp.validate(spec.space())?;
            let reference = reference.expect("checked in train");
            let lambda_weights: Vec<f64> = match &hp.lambda_per_condition {
                Some(per) => per.clone(),
                None => vec![hp.lambda; spec.space().num_conditions()],
            };
            loss_gradient(
                model,
                &cca_expectation_loss_terms(reference, spec, hp.beta, &lambda_weights)?,
            )
        }
        TrainLoss::Dpo { .. } | TrainLoss::Unlearn { .. } => {
            return Err(Error::Input(format!(
                "exact-expectation training is not defined for the {} loss",
                loss.kind_name()
            )));
        }
    };
    let space = *spec.space();
    let marginal = spec.marginal_x();
    let mut pos_mean = 0.0;
    let mut neg_mean = 0.0;
    for c in 0..space.num_conditions() {
        let pc = spec.p_c()[c];
        if pc == 0.0 {
            continue;
        }
        let conditional = spec.conditional(c);
        for x in 0..space.num_sequences() {
            let lp = model.log_prob_by_index(c, x);
            let pw = pc * conditional.prob(x);
            if pw > 0.0 {
                pos_mean += pw * lp;
            }
            let nw = pc * marginal.prob(x);
            if nw > 0.0 {
                neg_mean += nw * lp;
            }
        }
    }
    let measurement = StepMeasurement {
        loss: value,
        mean_logp_pos: pos_mean,
        mean_logp_neg: Some(neg_mean),
    };
    Ok((measurement, gradient))
}

fn mean_kl_to_target(
    model: &TabularArModel,
    oracle: &OracleAttachment,
) -> Result<f64> {
    let space = *oracle.spec.space();
    let mut total = 0.0;
    for c in 0..space.num_conditions() {
        let (target, _) = oracle.spec.target_distribution(c, oracle.scale)?;
        let dist = model.model_distribution(c)?;
        total += oracle.spec.p_c()[c] * crate::eval::kl_divergence(&dist, &target)?;
    }
    Ok(total)
}

fn diverged_item(batch: &AlignmentBatch, model: &TabularArModel) -> String {
    for (i, item) in batch.items().iter().enumerate() {
        let finite = model
            .log_prob_by_index(item.positive_row, item.seq_index)
            .is_finite();
        if !finite {
            return format!(
                "item {i} (sequence {}, condition row {})",
                item.seq_index, item.positive_row
            );
        }
    }
    "no single item isolated".into()
}

/// Train a model in place with plain fixed-step gradient descent and
/// return the recorded trajectory. Zero steps returns the model
/// unchanged with only the initial point recorded.
pub fn train(
    model: &mut TabularArModel,
    reference: Option<&TabularArModel>,
    data: DataSource,
    options: &TrainOptions,
    rng: &mut Rng,
    oracle: Option<&OracleAttachment>,
) -> Result<TrainTrajectory> {
    options.validate()?;
    if options.loss.needs_reference() && reference.is_none() {
        return Err(Error::Input(format!(
            "the {} loss requires a reference model",
            options.loss.kind_name()
        )));
    }
    if let Some(reference) = reference {
        if reference.space() != model.space() {
            return Err(Error::Input(
                "reference model space does not match model space".into(),
            ));
        }
    }
    if let Some(oracle) = oracle {
        if oracle.spec.space() != model.space() {
            return Err(Error::Input(
                "oracle spec space does not match model space".into(),
            ));
        }
    }

    let mut trajectory = TrainTrajectory::default();

    // Minibatch scheduling over the empirical dataset: a shuffled order
    // is consumed batch by batch and reshuffled every epoch.
    let mut order: Vec<usize> = match data {
        DataSource::Empirical(pairs) => {
            if pairs.is_empty() {
                return Err(Error::Input("empirical dataset is empty".into()));
            }
            (0..pairs.len()).collect()
        }
        DataSource::Exact(_) => Vec::new(),
    };
    let mut cursor = usize::MAX;
    let space = *model.space();

    let mut next_batch = |rng: &mut Rng| -> Result<Option<AlignmentBatch>> {
        match data {
            DataSource::Exact(_) => Ok(None),
            DataSource::Empirical(pairs) => {
                let batch_size = options.batch_size.min(pairs.len());
                if cursor == usize::MAX || cursor + batch_size > order.len() {
                    rand::seq::SliceRandom::shuffle(&mut order[..], rng);
                    cursor = 0;
                }
                let selected: Vec<DataPair> = order[cursor..cursor + batch_size]
                    .iter()
                    .map(|&i| pairs[i])
                    .collect();
                cursor += batch_size;
                let batch = match &options.loss {
                    TrainLoss::MaximumLikelihood { dropout_prob } => {
                        build_mle_batch(space, &selected, *dropout_prob, rng)?
                    }
                    TrainLoss::Cca { dropout_prob, .. } => {
                        build_alignment_batch(space, &selected, *dropout_prob, rng)?
                    }
                    TrainLoss::Dpo { .. } | TrainLoss::Unlearn { .. } => {
                        build_alignment_batch(space, &selected, 0.0, rng)?
                    }
                };
                Ok(Some(batch))
            }
        }
    };

    let mut last_batch: Option<AlignmentBatch> = None;
    for step in 0..options.steps {
        let batch = next_batch(rng)?;
        let (measurement, gradient) = match (&batch, data) {
            (Some(batch), _) => measure_batch(model, reference, batch, &options.loss)?,
            (None, DataSource::Exact(spec)) => {
                measure_exact(model, reference, spec, &options.loss)?
            }
            (None, DataSource::Empirical(_)) => unreachable!(),
        };

        if !measurement.loss.is_finite() || !gradient.all_finite() {
            let detail = batch
                .as_ref()
                .map(|b| diverged_item(b, model))
                .unwrap_or_else(|| "exact expectation".into());
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: non-finite loss or gradient ({detail})"
            )));
        }

        if step % options.record_every == 0 {
            let kl = match oracle {
                Some(oracle) => Some(mean_kl_to_target(model, oracle)?),
                None => None,
            };
            trajectory.push(TrajectoryPoint {
                step,
                loss: measurement.loss,
                mean_logp_pos: measurement.mean_logp_pos,
                mean_logp_neg: measurement.mean_logp_neg,
                kl_to_target: kl,
            });
        }

        model.logits_mut().axpy(-options.learning_rate, &gradient);
        if !model.logits().all_finite() {
            let detail = batch
                .as_ref()
                .map(|b| diverged_item(b, model))
                .unwrap_or_else(|| "exact expectation".into());
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: logits left the finite range ({detail})"
            )));
        }
        last_batch = batch;
    }

    // Record the final state, re-measuring with the updated model.
    let (final_measurement, _) = match (&last_batch, data) {
        (Some(batch), _) => measure_batch(model, reference, batch, &options.loss)?,
        (None, DataSource::Exact(spec)) => measure_exact(model, reference, spec, &options.loss)?,
        (None, DataSource::Empirical(pairs)) => {
            // Zero steps: measure on the whole dataset without dropout
            // or negatives so the record is deterministic.
            let items = pairs
                .iter()
                .map(|pair| AlignmentItem {
                    seq_index: pair.seq_index,
                    positive_row: pair.condition,
                    negative_condition: None,
                })
                .collect();
            let batch = AlignmentBatch::new(space, items)?;
            let mut pos_sum = 0.0;
            for item in batch.items() {
                pos_sum += model.log_prob_by_index(item.positive_row, item.seq_index);
            }
            (
                StepMeasurement {
                    loss: -pos_sum / batch.len() as f64,
                    mean_logp_pos: pos_sum / batch.len() as f64,
                    mean_logp_neg: None,
                },
                crate::model::LogitTable::zeros(space),
            )
        }
    };
    let kl = match oracle {
        Some(oracle) => Some(mean_kl_to_target(model, oracle)?),
        None => None,
    };
    trajectory.push(TrajectoryPoint {
        step: options.steps,
        loss: final_measurement.loss,
        mean_logp_pos: final_measurement.mean_logp_pos,
        mean_logp_neg: final_measurement.mean_logp_neg,
        kl_to_target: kl,
    });

    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{check_gradient, FD_ATOL, FD_RTOL, FD_STEP};
    use crate::oracle::SpecFamily;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    fn space() -> SequenceSpace {
        SequenceSpace::new(3, 2, 3).unwrap()
    }

    fn dirichlet_spec(seed: u64) -> TrueDistributionSpec {
        TrueDistributionSpec::generate(SpecFamily::RandomDirichlet, space(), 1.0, seed).unwrap()
    }

    fn random_model(seed: u64) -> TabularArModel {
        let mut model = TabularArModel::uniform(space());
        let mut rng = stream(seed, "random-model", 0);
        for v in model.logits_mut().values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        model
    }

    fn random_pairs(n: usize, seed: u64) -> Vec<DataPair> {
        let sp = space();
        let mut rng = stream(seed, "pairs", 0);
        (0..n)
            .map(|_| DataPair {
                seq_index: rng.gen_range(0..sp.num_sequences()),
                condition: rng.gen_range(0..sp.num_conditions()),
            })
            .collect()
    }

    #[test]
    fn negative_batch_is_a_permutation() {
        let sp = space();
        let pairs = random_pairs(50, 1);
        let mut rng = stream(1, "neg", 0);
        let batch = make_negative_batch(sp, &pairs, &mut rng).unwrap();
        let mut original: Vec<usize> = pairs.iter().map(|p| p.condition).collect();
        let mut assigned: Vec<usize> = batch
            .items()
            .iter()
            .map(|i| i.negative_condition.unwrap())
            .collect();
        original.sort_unstable();
        assigned.sort_unstable();
        assert_eq!(original, assigned);
        for (item, pair) in batch.items().iter().zip(&pairs) {
            assert_eq!(item.seq_index, pair.seq_index);
            assert_eq!(item.positive_row, pair.condition);
        }
    }

    #[test]
    fn negative_batch_swaps_two_items() {
        let sp = SequenceSpace::new(2, 1, 2).unwrap();
        let pairs = vec![
            DataPair { seq_index: 0, condition: 0 },
            DataPair { seq_index: 1, condition: 1 },
        ];
        // Find a seed whose two-element shuffle is the swap.
        let swap_seed = (0..64)
            .find(|&s| {
                let mut rng = stream(s, "neg-swap", 0);
                let batch = make_negative_batch(sp, &pairs, &mut rng).unwrap();
                batch.items()[0].negative_condition == Some(1)
            })
            .expect("some seed must produce the swap");
        let mut rng = stream(swap_seed, "neg-swap", 0);
        let batch = make_negative_batch(sp, &pairs, &mut rng).unwrap();
        assert_eq!(batch.items()[0].negative_condition, Some(1));
        assert_eq!(batch.items()[1].negative_condition, Some(0));
    }

    #[test]
    fn negative_batch_needs_two_items() {
        let sp = space();
        let pairs = random_pairs(1, 2);
        let mut rng = stream(2, "neg", 0);
        let err = make_negative_batch(sp, &pairs, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn negative_batch_collision_rate_matches_uniform() {
        let sp = SequenceSpace::new(2, 1, 4).unwrap();
        let mut rng = stream(3, "collisions", 0);
        let pairs: Vec<DataPair> = (0..2000)
            .map(|_| DataPair {
                seq_index: rng.gen_range(0..sp.num_sequences()),
                condition: rng.gen_range(0..sp.num_conditions()),
            })
            .collect();
        let batch = make_negative_batch(sp, &pairs, &mut rng).unwrap();
        let collisions = batch
            .items()
            .iter()
            .zip(&pairs)
            .filter(|(item, pair)| item.negative_condition == Some(pair.condition))
            .count();
        let fraction = collisions as f64 / pairs.len() as f64;
        // Expected 1/C = 0.25; 3 sigma of a binomial fraction over 2000.
        let sigma = (0.25 * 0.75 / 2000.0f64).sqrt();
        assert!(
            (fraction - 0.25).abs() < 3.0 * sigma + 0.01,
            "collision fraction {fraction}"
        );
    }

    #[test]
    fn mask_dropout_rate_is_binomial() {
        let pairs = random_pairs(100_000, 4);
        let mut rng = stream(4, "dropout", 0);
        let flagged = mask_dropout(&pairs, 0.1, &mut rng).unwrap();
        let dropped = flagged.iter().filter(|(_, d)| *d).count() as f64;
        let fraction = dropped / 100_000.0;
        let sigma = (0.1 * 0.9 / 100_000.0f64).sqrt();
        assert!((fraction - 0.1).abs() < 3.0 * sigma, "dropout fraction {fraction}");
        // Flag order matches pair order.
        for ((pair, _), original) in flagged.iter().zip(&pairs) {
            assert_eq!(pair, original);
        }
    }

    #[test]
    fn dropped_items_use_mask_and_no_negative() {
        let sp = space();
        let pairs = random_pairs(400, 5);
        let mut rng = stream(5, "build", 0);
        let batch = build_alignment_batch(sp, &pairs, 0.5, &mut rng).unwrap();
        let mut saw_dropped = false;
        let mut saw_kept = false;
        for item in batch.items() {
            if item.positive_row == sp.mask_id() {
                assert_eq!(item.negative_condition, None);
                saw_dropped = true;
            } else {
                assert!(item.negative_condition.is_some());
                saw_kept = true;
            }
        }
        assert!(saw_dropped && saw_kept);
    }

    #[test]
    fn cca_anchor_at_reference() {
        let reference = random_model(6);
        let theta = reference.clone();
        let pairs = random_pairs(37, 6);
        let mut rng = stream(6, "anchor", 0);
        let batch = build_alignment_batch(space(), &pairs, 0.2, &mut rng).unwrap();
        for lambda in [0.0, 0.5, 1.0, 300.0] {
            let hp = CcaHyperparams {
                beta: 0.02,
                lambda,
                lambda_per_condition: None,
            };
            let value = cca_loss(&theta, &reference, &batch, &hp).unwrap();
            assert_abs_diff_eq!(
                value,
                (1.0 + lambda) * 2.0f64.ln(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn cca_loss_matches_straight_line_recomputation() {
        let reference = random_model(7);
        let theta = random_model(8);
        let pairs = random_pairs(23, 7);
        let mut rng = stream(7, "recompute", 0);
        let batch = build_alignment_batch(space(), &pairs, 0.15, &mut rng).unwrap();
        let hp = CcaHyperparams::default();
        let value = cca_loss(&theta, &reference, &batch, &hp).unwrap();

        let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut pos = 0.0;
        let mut neg = 0.0;
        let mut neg_count = 0.0;
        for item in batch.items() {
            let delta = theta.log_prob_by_index(item.positive_row, item.seq_index)
                - reference.log_prob_by_index(item.positive_row, item.seq_index);
            pos += -sigma(hp.beta * delta).ln();
            if let Some(nc) = item.negative_condition {
                let delta = theta.log_prob_by_index(nc, item.seq_index)
                    - reference.log_prob_by_index(nc, item.seq_index);
                neg += -sigma(-hp.beta * delta).ln();
                neg_count += 1.0;
            }
        }
        let expected = pos / batch.len() as f64 + hp.lambda * neg / neg_count;
        assert_abs_diff_eq!(value, expected, epsilon = 1e-10);
    }

    #[test]
    fn cca_expectation_anchor_at_reference() {
        let spec = dirichlet_spec(9);
        let reference = random_model(9);
        let ones = vec![1.0; 3];
        let value =
            cca_expectation_loss(&reference, &reference, &spec, 1.0, &ones).unwrap();
        assert_abs_diff_eq!(value, 2.0 * 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cca_expectation_stationary_at_independence() {
        let spec =
            TrueDistributionSpec::generate(SpecFamily::Independent, space(), 1.0, 10).unwrap();
        let reference = random_model(10);
        let ones = vec![1.0; 3];
        let loss = cca_expectation_loss_terms(&reference, &spec, 1.0, &ones).unwrap();
        let (_, gradient) = loss_gradient(&reference, &loss);
        assert!(
            gradient.max_abs() < 1e-10,
            "gradient norm {} at independence",
            gradient.max_abs()
        );
    }

    #[test]
    fn cca_expectation_minimizer_is_sharpened_target() {
        // With lambda_c = Z(c)^(1/s) and beta = 1/s, the model holding
        // the target exactly must be a stationary point.
        let spec = dirichlet_spec(11);
        let reference = spec.exact_model().unwrap();
        for s in [0.5, 1.0, 2.0] {
            let lambda_weights: Vec<f64> = (0..3).map(|c| spec.lambda_c(c, s).unwrap()).collect();
            let mut target_model = reference.clone();
            for c in 0..3 {
                let (target, _) = spec.target_distribution(c, s).unwrap();
                target_model.set_row_from_distribution(c, &target).unwrap();
            }
            let loss =
                cca_expectation_loss_terms(&reference, &spec, 1.0 / s, &lambda_weights).unwrap();
            let (_, gradient) = loss_gradient(&target_model, &loss);
            assert!(
                gradient.max_abs() < 1e-9,
                "s={s}: gradient norm {} at the target",
                gradient.max_abs()
            );
        }
    }

    #[test]
    fn dpo_anchor_at_reference() {
        let reference = random_model(12);
        let pairs = random_pairs(19, 12);
        let mut rng = stream(12, "dpo", 0);
        let batch = make_negative_batch(space(), &pairs, &mut rng).unwrap();
        for beta_d in [0.01, 0.1, 1.0, 10.0] {
            let value = dpo_loss(&reference, &reference, &batch, beta_d).unwrap();
            assert_abs_diff_eq!(value, 2.0f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn dpo_loss_matches_straight_line_recomputation() {
        let reference = random_model(13);
        let theta = random_model(14);
        let pairs = random_pairs(11, 13);
        let mut rng = stream(13, "dpo-recompute", 0);
        let batch = make_negative_batch(space(), &pairs, &mut rng).unwrap();
        let beta_d = 0.1;
        let value = dpo_loss(&theta, &reference, &batch, beta_d).unwrap();
        let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut total = 0.0;
        for item in batch.items() {
            let nc = item.negative_condition.unwrap();
            let dw = theta.log_prob_by_index(item.positive_row, item.seq_index)
                - reference.log_prob_by_index(item.positive_row, item.seq_index);
            let dl = theta.log_prob_by_index(nc, item.seq_index)
                - reference.log_prob_by_index(nc, item.seq_index);
            total += -sigma(beta_d * (dw - dl)).ln();
        }
        assert_abs_diff_eq!(value, total / batch.len() as f64, epsilon = 1e-10);
    }

    #[test]
    fn dpo_requires_negatives() {
        let reference = random_model(15);
        let sp = space();
        let batch = AlignmentBatch::new(
            sp,
            vec![AlignmentItem {
                seq_index: 0,
                positive_row: 0,
                negative_condition: None,
            }],
        )
        .unwrap();
        let err = dpo_batch_loss(&reference, &batch, 0.1).unwrap_err();
        assert!(err.to_string().contains("item 0"), "{err}");
    }

    #[test]
    fn unlearn_closed_forms() {
        let sp = space();
        // Uniform model, lambda_u = 0: loss is N log V exactly.
        let model = TabularArModel::uniform(sp);
        let pairs = random_pairs(16, 16);
        let mut rng = stream(16, "unlearn", 0);
        let batch = make_negative_batch(sp, &pairs, &mut rng).unwrap();
        let value = unlearn_loss(&model, &batch, 0.0).unwrap();
        assert_abs_diff_eq!(value, 2.0 * 3.0f64.ln(), epsilon = 1e-12);

        // An item whose negative equals its positive contributes
        // (lambda_u - 1) * log p.
        let theta = random_model(17);
        let single = AlignmentBatch::new(
            sp,
            vec![AlignmentItem {
                seq_index: 5,
                positive_row: 1,
                negative_condition: Some(1),
            }],
        )
        .unwrap();
        let lambda_u = 0.05;
        let lp = theta.log_prob_by_index(1, 5);
        let value = unlearn_loss(&theta, &single, lambda_u).unwrap();
        assert_abs_diff_eq!(value, (lambda_u - 1.0) * lp, epsilon = 1e-12);
    }

    #[test]
    fn all_batch_losses_pass_finite_difference() {
        let reference = random_model(18);
        let theta = random_model(19);
        let pairs = random_pairs(13, 18);
        let mut rng = stream(18, "fd", 0);
        let batch = build_alignment_batch(space(), &pairs, 0.2, &mut rng).unwrap();
        let dense = make_negative_batch(space(), &pairs, &mut rng).unwrap();

        let cca = cca_batch_loss(&reference, &batch, &CcaHyperparams::default()).unwrap();
        let check = check_gradient(&theta, &cca, FD_STEP, FD_RTOL, FD_ATOL).unwrap();
        assert!(check.passed, "cca: {check:?}");

        let mle = mle_batch_loss(&batch);
        let check = check_gradient(&theta, &mle, FD_STEP, FD_RTOL, FD_ATOL).unwrap();
        assert!(check.passed, "mle: {check:?}");

        let dpo = dpo_batch_loss(&reference, &dense, 0.1).unwrap();
        let check = check_gradient(&theta, &dpo, FD_STEP, FD_RTOL, FD_ATOL).unwrap();
        assert!(check.passed, "dpo: {check:?}");

        let unlearn = unlearn_batch_loss(&dense, 0.05).unwrap();
        let check = check_gradient(&theta, &unlearn, FD_STEP, FD_RTOL, FD_ATOL).unwrap();
        assert!(check.passed, "unlearn: {check:?}");
    }

    #[test]
    fn exact_losses_pass_finite_difference() {
        let spec = dirichlet_spec(20);
        let reference = random_model(20);
        let theta = random_model(21);
        let lambda_weights: Vec<f64> =
            (0..3).map(|c| spec.lambda_c(c, 1.0).unwrap()).collect();

        let exact_cca =
            cca_expectation_loss_terms(&reference, &spec, 1.0, &lambda_weights).unwrap();
        let check = check_gradient(&theta, &exact_cca, FD_STEP, FD_RTOL, FD_ATOL).unwrap();
        assert!(check.passed, "exact cca: {check:?}");

        let exact_mle = mle_exact_loss(&spec, 0.1).unwrap();
        let check = check_gradient(&theta, &exact_mle, FD_STEP, FD_RTOL, FD_ATOL).unwrap();
        assert!(check.passed, "exact mle: {check:?}");
    }

    #[test]
    fn nce_gradient_matches_finite_difference() {
        let spec = dirichlet_spec(22);
        let mut table = NceTable::zeros(*spec.space());
        let mut rng = stream(22, "nce-fd", 0);
        for v in table.values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let analytic = nce_exact_gradient(&table, &spec).unwrap();
        let point = table.values().to_vec();
        let numeric = crate::grad::central_difference_vector(
            |values| {
                let mut probe = table.clone();
                probe.values_mut().copy_from_slice(values);
                nce_exact_loss(&probe, &spec).unwrap()
            },
            &point,
            FD_STEP,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(
                crate::numeric::allclose(*a, *n, FD_RTOL, FD_ATOL),
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn nce_recovers_conditional_residual() {
        for family in SpecFamily::ALL {
            let spec = TrueDistributionSpec::generate(family, space(), 1.0, 23).unwrap();
            let table = train_nce_exact(&spec, 40_000, None).unwrap();
            let mut worst = 0.0f64;
            for x in 0..space().num_sequences() {
                for c in 0..space().num_conditions() {
                    let residual = spec.conditional_residual(c, x).unwrap();
                    let diff = (table.score(x, c) - residual).abs();
                    worst = worst.max(diff);
                }
            }
            assert!(
                worst < 1e-3,
                "{}: max score error {worst}",
                family.name()
            );
        }
    }

    #[test]
    fn nce_zero_table_loss_is_two_log_two() {
        let spec = dirichlet_spec(24);
        let table = NceTable::zeros(*spec.space());
        let value = nce_exact_loss(&table, &spec).unwrap();
        assert_abs_diff_eq!(value, 2.0 * 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn nce_batch_matches_exact_on_population_batch() {
        // A batch holding every (x, c) pair weighted once approximates
        // nothing; instead check the batch loss formula directly.
        let spec = dirichlet_spec(25);
        let sp = *spec.space();
        let mut table = NceTable::zeros(sp);
        let mut rng = stream(25, "nce-batch", 0);
        for v in table.values_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let pairs = random_pairs(31, 25);
        let batch = make_negative_batch(sp, &pairs, &mut rng).unwrap();
        let (value, _) = nce_batch_loss_and_gradient(&table, &batch).unwrap();
        let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut expected = 0.0;
        for item in batch.items() {
            let rp = table.score(item.seq_index, item.positive_row);
            let rn = table.score(item.seq_index, item.negative_condition.unwrap());
            expected += -sigma(rp).ln() - sigma(-rn).ln();
        }
        assert_abs_diff_eq!(value, expected / batch.len() as f64, epsilon = 1e-12);
    }

    #[test]
    fn exact_mle_training_recovers_spec() {
        let spec = dirichlet_spec(26);
        let mut model = TabularArModel::uniform(space());
        let options = TrainOptions {
            loss: TrainLoss::MaximumLikelihood { dropout_prob: 0.1 },
            steps: 4000,
            learning_rate: 4.0,
            batch_size: 1,
            record_every: 1000,
        };
        let mut rng = stream(26, "train-mle", 0);
        let trajectory = train(
            &mut model,
            None,
            DataSource::Exact(&spec),
            &options,
            &mut rng,
            None,
        )
        .unwrap();
        // Conditional rows must match the spec, mask row the marginal.
        let mut worst = 0.0f64;
        for c in 0..3 {
            let kl = crate::eval::kl_divergence(
                spec.conditional(c),
                &model.model_distribution(c).unwrap(),
            )
            .unwrap();
            worst = worst.max(kl);
        }
        let marginal_kl = crate::eval::kl_divergence(
            &spec.marginal_x(),
            &model.model_distribution(space().mask_id()).unwrap(),
        )
        .unwrap();
        worst = worst.max(marginal_kl);
        assert!(worst < 1e-8, "max KL {worst}");
        // Loss decreased along the trajectory.
        let first = trajectory.points.first().unwrap().loss;
        let last = trajectory.points.last().unwrap().loss;
        assert!(last < first);
    }

    #[test]
    fn exact_cca_training_recovers_sharpened_target() {
        let spec = dirichlet_spec(27);
        let reference = spec.exact_model().unwrap();
        let s = 1.0;
        let lambda_weights: Vec<f64> = (0..3).map(|c| spec.lambda_c(c, s).unwrap()).collect();
        let mut model = reference.clone();
        let options = TrainOptions {
            loss: TrainLoss::Cca {
                hp: CcaHyperparams {
                    beta: 1.0 / s,
                    lambda: 1.0,
                    lambda_per_condition: Some(lambda_weights),
                },
                dropout_prob: 0.0,
            },
            steps: 5000,
            learning_rate: 8.0,
            batch_size: 1,
            record_every: 1000,
        };
        let mut rng = stream(27, "train-cca", 0);
        let oracle = OracleAttachment { spec: &spec, scale: s };
        let trajectory = train(
            &mut model,
            Some(&reference),
            DataSource::Exact(&spec),
            &options,
            &mut rng,
            Some(&oracle),
        )
        .unwrap();
        let final_kl = trajectory.points.last().unwrap().kl_to_target.unwrap();
        assert!(final_kl < 1e-6, "final KL {final_kl}");
    }

    #[test]
    fn zero_steps_leaves_model_unchanged() {
        let spec = dirichlet_spec(28);
        let mut model = random_model(28);
        let before = model.clone();
        let options = TrainOptions {
            loss: TrainLoss::MaximumLikelihood { dropout_prob: 0.1 },
            steps: 0,
            learning_rate: 0.5,
            batch_size: 8,
            record_every: 10,
        };
        let pairs = random_pairs(64, 28);
        let mut rng = stream(28, "train-zero", 0);
        let trajectory = train(
            &mut model,
            None,
            DataSource::Empirical(&pairs),
            &options,
            &mut rng,
            Some(&OracleAttachment { spec: &spec, scale: 0.0 }),
        )
        .unwrap();
        assert_eq!(model.logits().values(), before.logits().values());
        assert_eq!(trajectory.points.len(), 1);
        assert_eq!(trajectory.points[0].step, 0);
        assert!(trajectory.points[0].kl_to_target.is_some());
    }

    #[test]
    fn trajectory_steps_strictly_increase_and_end_at_final() {
        let spec = dirichlet_spec(29);
        let pairs = spec.sample_dataset(256, &mut stream(29, "data", 0));
        let mut model = TabularArModel::uniform(space());
        let options = TrainOptions {
            loss: TrainLoss::MaximumLikelihood { dropout_prob: 0.1 },
            steps: 57,
            learning_rate: 0.5,
            batch_size: 32,
            record_every: 10,
        };
        let mut rng = stream(29, "train", 0);
        let trajectory = train(
            &mut model,
            None,
            DataSource::Empirical(&pairs),
            &options,
            &mut rng,
            None,
        )
        .unwrap();
        let steps: Vec<usize> = trajectory.points.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 30, 40, 50, 57]);
        for window in trajectory.points.windows(2) {
            assert!(window[1].step > window[0].step);
        }
    }

    #[test]
    fn empirical_cca_moves_toward_target() {
        let spec = dirichlet_spec(30);
        let reference = spec.exact_model().unwrap();
        let mut model = reference.clone();
        let pairs = spec
            .sample_dataset(4096, &mut stream(30, "data", 0));
        let options = TrainOptions {
            loss: TrainLoss::Cca {
                hp: CcaHyperparams {
                    beta: 0.02,
                    lambda: 1.0,
                    lambda_per_condition: None,
                },
                dropout_prob: 0.1,
            },
            steps: 400,
            learning_rate: 2.0,
            batch_size: 256,
            record_every: 100,
        };
        let oracle = OracleAttachment { spec: &spec, scale: 1.0 };
        let mut rng = stream(30, "train", 0);
        let trajectory = train(
            &mut model,
            Some(&reference),
            DataSource::Empirical(&pairs),
            &options,
            &mut rng,
            Some(&oracle),
        )
        .unwrap();
        let first_kl = trajectory.points.first().unwrap().kl_to_target.unwrap();
        let last_kl = trajectory.points.last().unwrap().kl_to_target.unwrap();
        assert!(
            last_kl < first_kl,
            "KL did not improve: {first_kl} -> {last_kl}"
        );
    }

    #[test]
    fn training_reports_divergence_step() {
        let spec = dirichlet_spec(31);
        let pairs = spec.sample_dataset(64, &mut stream(31, "data", 0));
        let mut model = TabularArModel::uniform(space());
        // The suppression term decreases without bound, so an absurd
        // learning rate drives the logits past the finite range.
        let options = TrainOptions {
            loss: TrainLoss::Unlearn { lambda_u: 100.0 },
            steps: 4000,
            learning_rate: 1e306,
            batch_size: 16,
            record_every: 1000,
        };
        let mut rng = stream(31, "train", 0);
        let err = train(
            &mut model,
            None,
            DataSource::Empirical(&pairs),
            &options,
            &mut rng,
            None,
        )
        .unwrap_err();
        let message = err.to_string();
        assert!(message.contains("diverged at step"), "{message}");
    }

    #[test]
    fn train_rejects_missing_reference() {
        let spec = dirichlet_spec(32);
        let mut model = TabularArModel::uniform(space());
        let options = TrainOptions {
            loss: TrainLoss::Cca {
                hp: CcaHyperparams::default(),
                dropout_prob: 0.1,
            },
            steps: 1,
            learning_rate: 0.1,
            batch_size: 4,
            record_every: 1,
        };
        let pairs = spec.sample_dataset(16, &mut stream(32, "data", 0));
        let mut rng = stream(32, "train", 0);
        let err = train(
            &mut model,
            None,
            DataSource::Empirical(&pairs),
            &options,
            &mut rng,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("reference"), "{err}");
    }

    #[test]
    fn train_is_deterministic_under_seed() {
        let spec = dirichlet_spec(33);
        let pairs = spec.sample_dataset(128, &mut stream(33, "data", 0));
        let run = || {
            let mut model = TabularArModel::uniform(space());
            let options = TrainOptions {
                loss: TrainLoss::MaximumLikelihood { dropout_prob: 0.1 },
                steps: 50,
                learning_rate: 0.5,
                batch_size: 32,
                record_every: 10,
            };
            let mut rng = stream(33, "train", 0);
            let trajectory = train(
                &mut model,
                None,
                DataSource::Empirical(&pairs),
                &options,
                &mut rng,
                None,
            )
            .unwrap();
            (model, trajectory)
        };
        let (m1, t1) = run();
        let (m2, t2) = run();
        assert_eq!(m1.logits().values(), m2.logits().values());
        assert_eq!(t1, t2);
    }
}
