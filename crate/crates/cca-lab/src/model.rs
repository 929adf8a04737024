//! Tabular autoregressive sequence model with one logit row per condition
//! label plus a mask row for the unconditional branch.
//!
//! For every condition row, every position, and every prefix of that
//! position there is a free logit vector over the vocabulary. Next-token
//! probabilities are the softmax of that vector, so the model can represent
//! any strictly positive conditional distribution over sequences exactly.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::dist::SequenceDistribution;
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::rng::Rng;
use crate::space::{SequenceSpace, Token};

/// Dense table with one f64 per (row, position, prefix, token). Used both
/// for model logits and for gradients with respect to them.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    space: SequenceSpace,
    /// Cumulative slot count before each position: offsets[p] = sum_{k<p} V^k.
    offsets: Vec<usize>,
    slots_per_row: usize,
    values: Vec<f64>,
}

impl LogitTable {
    pub fn zeros(space: SequenceSpace) -> Self {
        let mut offsets = Vec::with_capacity(space.seq_len());
        let mut total = 0usize;
        for position in 0..space.seq_len() {
            offsets.push(total);
            total += space.num_prefixes(position);
        }
        let values = vec![0.0; space.num_rows() * total * space.vocab_size()];
        LogitTable {
            space,
            offsets,
            slots_per_row: total,
            values,
        }
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    /// Number of (position, prefix) slots per condition row.
    pub fn slots_per_row(&self) -> usize {
        self.slots_per_row
    }

    /// Flat index of the first vocabulary entry of a slot.
    pub fn slot_start(&self, row: usize, position: usize, prefix: usize) -> usize {
        debug_assert!(row < self.space.num_rows());
        debug_assert!(position < self.space.seq_len());
        debug_assert!(prefix < self.space.num_prefixes(position));
        ((row * self.slots_per_row) + self.offsets[position] + prefix) * self.space.vocab_size()
    }

    pub fn slot(&self, row: usize, position: usize, prefix: usize) -> &[f64] {
        let start = self.slot_start(row, position, prefix);
        &self.values[start..start + self.space.vocab_size()]
    }

    pub fn slot_mut(&mut self, row: usize, position: usize, prefix: usize) -> &mut [f64] {
        let start = self.slot_start(row, position, prefix);
        let vocab = self.space.vocab_size();
        &mut self.values[start..start + vocab]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// self += alpha * other, entrywise.
    pub fn axpy(&mut self, alpha: f64, other: &LogitTable) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (v, o) in self.values.iter_mut().zip(other.values.iter()) {
            *v += alpha * o;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// The model itself: a logit table plus the operations that interpret it
/// autoregressively.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularArModel {
    logits: LogitTable,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

impl TabularArModel {
    /// Model with all logits zero: uniform at every slot.
    pub fn uniform(space: SequenceSpace) -> Self {
        TabularArModel {
            logits: LogitTable::zeros(space),
        }
    }

    pub fn space(&self) -> &SequenceSpace {
        self.logits.space()
    }

    pub fn logits(&self) -> &LogitTable {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut LogitTable {
        &mut self.logits
    }

    pub fn set_logit(
        &mut self,
        row: usize,
        position: usize,
        prefix: usize,
        token: Token,
        value: f64,
    ) {
        self.logits.slot_mut(row, position, prefix)[token as usize] = value;
    }

    pub fn set_slot(
        &mut self,
        row: usize,
        position: usize,
        prefix: usize,
        values: &[f64],
    ) -> Result<()> {
        if values.len() != self.space().vocab_size() {
            return Err(Error::Input(format!(
                "slot expects {} logits, got {}",
                self.space().vocab_size(),
                values.len()
            )));
        }
        self.logits
            .slot_mut(row, position, prefix)
            .copy_from_slice(values);
        Ok(())
    }

    /// Log next-token distribution at one slot (log-softmax of its logits).
    pub fn next_token_log_probs(&self, row: usize, prefix: &[Token]) -> Result<Vec<f64>> {
        self.space().check_row(row)?;
        if prefix.len() >= self.space().seq_len() + 1 {
            return Err(Error::Input(format!(
                "prefix of length {} has no next position (seq_len {})",
                prefix.len(),
                self.space().seq_len()
            )));
        }
        if prefix.len() == self.space().seq_len() {
            return Err(Error::Input(
                "prefix is already a complete sequence".into(),
            ));
        }
        let prefix_index = self.space().encode_prefix(prefix)?;
        Ok(self.slot_log_softmax(row, prefix.len(), prefix_index))
    }

    fn slot_log_softmax(&self, row: usize, position: usize, prefix: usize) -> Vec<f64> {
        let slot = self.logits.slot(row, position, prefix);
        let norm = log_sum_exp(slot);
        slot.iter().map(|v| v - norm).collect()
    }

    /// Exact log-likelihood of a full sequence under one condition row.
    pub fn log_prob(&self, row: usize, tokens: &[Token]) -> Result<f64> {
        self.space().check_row(row)?;
        let seq_index = self.space().encode_sequence(tokens)?;
        Ok(self.log_prob_by_index(row, seq_index))
    }

    /// Log-likelihood addressed by sequence index; inputs assumed valid.
    pub fn log_prob_by_index(&self, row: usize, seq_index: usize) -> f64 {
        let space = *self.space();
        let mut total = 0.0;
        for position in 0..space.seq_len() {
            let prefix = space.prefix_of(seq_index, position);
            let token = space.token_at(seq_index, position) as usize;
            let slot = self.logits.slot(row, position, prefix);
            total += slot[token] - log_sum_exp(slot);
        }
        total
    }

    /// Materialize the model's exact distribution over all sequences for
    /// one condition row.
    pub fn model_distribution(&self, row: usize) -> Result<SequenceDistribution> {
        self.space().check_row(row)?;
        let space = *self.space();
        // Dynamic program over prefix levels: log mass of each prefix.
        let mut level = vec![0.0f64];
        for position in 0..space.seq_len() {
            let mut next = vec![0.0f64; space.num_prefixes(position + 1)];
            for (prefix, &acc) in level.iter().enumerate() {
                let log_probs = self.slot_log_softmax(row, position, prefix);
                for (token, lp) in log_probs.iter().enumerate() {
                    next[prefix * space.vocab_size() + token] = acc + lp;
                }
            }
            level = next;
        }
        SequenceDistribution::from_log_weights(space, level)
    }

    /// Ancestral sampling of one sequence.
    pub fn sample_sequence(&self, row: usize, rng: &mut Rng) -> Result<Vec<Token>> {
        self.space().check_row(row)?;
        let space = *self.space();
        let mut tokens = Vec::with_capacity(space.seq_len());
        let mut prefix = 0usize;
        for position in 0..space.seq_len() {
            let log_probs = self.slot_log_softmax(row, position, prefix);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = space.vocab_size() - 1;
            for (token, lp) in log_probs.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    chosen = token;
                    break;
                }
            }
            tokens.push(chosen as Token);
            prefix = prefix * space.vocab_size() + chosen;
        }
        Ok(tokens)
    }

    /// Overwrite one condition row so the model reproduces `dist` exactly.
    /// The distribution must be strictly positive.
    pub fn set_row_from_distribution(
        &mut self,
        row: usize,
        dist: &SequenceDistribution,
    ) -> Result<()> {
        self.space().check_row(row)?;
        if dist.space() != self.space() {
            return Err(Error::Input(
                "distribution space does not match model space".into(),
            ));
        }
        let space = *self.space();
        // Log prefix masses, built from the deepest level upward.
        let mut levels: Vec<Vec<f64>> = Vec::with_capacity(space.seq_len() + 1);
        let deepest: Vec<f64> = dist
            .probs()
            .iter()
            .enumerate()
            .map(|(index, &p)| {
                if p > 0.0 {
                    Ok(p.ln())
                } else {
                    Err(Error::Domain(format!(
                        "distribution assigns zero probability to sequence {index}; \
                         rows must be strictly positive to be represented by finite logits"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        levels.push(deepest);
        for position in (0..space.seq_len()).rev() {
            let child = levels.last().unwrap();
            let mut parent = vec![0.0f64; space.num_prefixes(position)];
            for (prefix, slot) in parent.iter_mut().enumerate() {
                let start = prefix * space.vocab_size();
                *slot = log_sum_exp(&child[start..start + space.vocab_size()]);
            }
            levels.push(parent);
        }
        levels.reverse();
        for position in 0..space.seq_len() {
            for prefix in 0..space.num_prefixes(position) {
                let parent = levels[position][prefix];
                let slot = self.logits.slot_mut(row, position, prefix);
                for (token, value) in slot.iter_mut().enumerate() {
                    *value = levels[position + 1][prefix * space.vocab_size() + token] - parent;
                }
            }
        }
        Ok(())
    }

    /// Serialize to the versioned text format.
    pub fn to_text(&self) -> Result<String> {
        if !self.logits.all_finite() {
            return Err(Error::Numeric(
                "model contains non-finite logits and cannot be saved".into(),
            ));
        }
        let space = *self.space();
        let mut out = String::new();
        let _ = writeln!(out, "tabular-ar-model v{MODEL_FORMAT_VERSION}");
        let _ = writeln!(out, "vocab_size={}", space.vocab_size());
        let _ = writeln!(out, "seq_len={}", space.seq_len());
        let _ = writeln!(out, "num_conditions={}", space.num_conditions());
        for row in 0..space.num_rows() {
            for position in 0..space.seq_len() {
                for prefix in 0..space.num_prefixes(position) {
                    let _ = write!(out, "slot {row} {position} {prefix}");
                    for value in self.logits.slot(row, position, prefix) {
                        let _ = write!(out, " {value}");
                    }
                    out.push('\n');
                }
            }
        }
        out.push_str("end\n");
        Ok(out)
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let fail = |message: String| Error::format(origin, message);
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| fail("empty model file".into()))?;
        if header.trim() != format!("tabular-ar-model v{MODEL_FORMAT_VERSION}") {
            return Err(fail(format!(
                "unsupported header {header:?}, expected \"tabular-ar-model v{MODEL_FORMAT_VERSION}\""
            )));
        }
        let mut dims = [0usize; 3];
        for (slot, key) in ["vocab_size", "seq_len", "num_conditions"].iter().enumerate() {
            let (number, line) = lines
                .next()
                .ok_or_else(|| fail(format!("missing {key} line")))?;
            let value = line
                .strip_prefix(&format!("{key}="))
                .ok_or_else(|| fail(format!("line {}: expected {key}=<int>", number + 1)))?;
            dims[slot] = value
                .trim()
                .parse()
                .map_err(|_| fail(format!("line {}: bad integer {value:?}", number + 1)))?;
        }
        let space = SequenceSpace::new(dims[0], dims[1], dims[2])?;
        let mut model = TabularArModel::uniform(space);
        for row in 0..space.num_rows() {
            for position in 0..space.seq_len() {
                for prefix in 0..space.num_prefixes(position) {
                    let (number, line) = lines
                        .next()
                        .ok_or_else(|| fail("model file truncated before all slots".into()))?;
                    let mut fields = line.split_ascii_whitespace();
                    let tag_ok = fields.next() == Some("slot")
                        && fields.next() == Some(row.to_string().as_str())
                        && fields.next() == Some(position.to_string().as_str())
                        && fields.next() == Some(prefix.to_string().as_str());
                    if !tag_ok {
                        return Err(fail(format!(
                            "line {}: expected \"slot {row} {position} {prefix} ...\"",
                            number + 1
                        )));
                    }
                    let slot = model.logits.slot_mut(row, position, prefix);
                    for (token, target) in slot.iter_mut().enumerate() {
                        let field = fields.next().ok_or_else(|| {
                            fail(format!(
                                "line {}: slot needs {} logits",
                                number + 1,
                                space.vocab_size()
                            ))
                        })?;
                        let value: f64 = field.parse().map_err(|_| {
                            fail(format!("line {}: bad float {field:?}", number + 1))
                        })?;
                        if !value.is_finite() {
                            return Err(fail(format!(
                                "line {}: logit for token {token} is not finite",
                                number + 1
                            )));
                        }
                        *target = value;
                    }
                    if fields.next().is_some() {
                        return Err(fail(format!(
                            "line {}: slot has more than {} logits",
                            number + 1,
                            space.vocab_size()
                        )));
                    }
                }
            }
        }
        match lines.next() {
            Some((_, line)) if line.trim() == "end" => Ok(model),
            Some((number, line)) => Err(fail(format!(
                "line {}: expected terminator \"end\", got {line:?}",
                number + 1
            ))),
            None => Err(fail("model file truncated: missing \"end\"".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_atomic(path, self.to_text()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}
