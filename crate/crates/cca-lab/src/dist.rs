//! Explicit distributions over the full sequence space.

use crate::error::{Error, Result};
use crate::space::SequenceSpace;

/// A probability vector over all `vocab_size^seq_len` sequences, indexed by
/// sequence index. The one place probabilities live in linear space.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDistribution {
    space: SequenceSpace,
    probs: Vec<f64>,
}

impl SequenceDistribution {
    /// Tolerance on the total mass of a valid distribution.
    pub const MASS_TOLERANCE: f64 = 1e-9;

    /// Wrap a probability vector, validating length, non-negativity,
    /// finiteness, and total mass.
    pub fn new(space: SequenceSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.num_sequences() {
            return Err(Error::Input(format!(
                "distribution has {} entries, space has {} sequences",
                probs.len(),
                space.num_sequences()
            )));
        }
        for (index, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Numeric(format!(
                    "probability of sequence {index} is {p}, expected a finite non-negative value"
                )));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::MASS_TOLERANCE {
            return Err(Error::Numeric(format!(
                "distribution mass is {total}, expected 1 within {}",
                Self::MASS_TOLERANCE
            )));
        }
        Ok(SequenceDistribution { space, probs })
    }

    /// Build from unnormalized log weights; exponentiation happens after
    /// log-normalization so the construction is safe for extreme weights.
    pub fn from_log_weights(space: SequenceSpace, mut log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.len() != space.num_sequences() {
            return Err(Error::Input(format!(
                "log weight vector has {} entries, space has {} sequences",
                log_weights.len(),
                space.num_sequences()
            )));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::Numeric(
                "log weights must not contain NaN or +inf".into(),
            ));
        }
        crate::numeric::log_normalize_in_place(&mut log_weights);
        let probs: Vec<f64> = log_weights.iter().map(|w| w.exp()).collect();
        SequenceDistribution::new(space, probs)
    }

    pub fn uniform(space: SequenceSpace) -> Self {
        let n = space.num_sequences();
        SequenceDistribution {
            space,
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, seq_index: usize) -> f64 {
        self.probs[seq_index]
    }

    /// Shannon entropy in nats; zero-probability entries contribute zero.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// Index of a largest-probability sequence (lowest index wins ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0usize;
        for (index, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = index;
            }
        }
        best
    }

    /// Draw one sequence index by inverse CDF on `u` from `[0, 1)`.
    pub fn sample_index(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (index, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return index;
            }
        }
        // Rounding can leave acc marginally below 1; fall back to the last
        // sequence with positive probability.
        self.probs
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(self.probs.len() - 1)
    }
}
