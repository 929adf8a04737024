//! The finite sequence space: vocabulary, length, conditions, and the
//! bijections between sequences/prefixes and their integer indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token identifier in `0..vocab_size`.
pub type Token = u32;

/// Dimensions of a fully enumerable sequence problem.
///
/// Sequences are length-`seq_len` strings over a `vocab_size`-ary alphabet,
/// generated under one of `num_conditions` condition labels. Condition id
/// `num_conditions` (one past the real labels) is reserved for the mask
/// label used by unconditional rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpace {
    vocab_size: usize,
    seq_len: usize,
    num_conditions: usize,
}

impl SequenceSpace {
    /// Largest sequence count the crate will enumerate.
    pub const ENUMERATION_LIMIT: u64 = 10_000_000;

    pub fn new(vocab_size: usize, seq_len: usize, num_conditions: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {vocab_size}"
            )));
        }
        if seq_len < 1 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if num_conditions < 1 {
            return Err(Error::Config(format!(
                "num_conditions must be at least 1, got {num_conditions}"
            )));
        }
        let total = (vocab_size as u128)
            .checked_pow(seq_len as u32)
            .unwrap_or(u128::MAX);
        if total > u128::from(Self::ENUMERATION_LIMIT) {
            return Err(Error::BudgetExceeded {
                vocab_size,
                seq_len,
                total,
                limit: Self::ENUMERATION_LIMIT,
            });
        }
        Ok(SequenceSpace {
            vocab_size,
            seq_len,
            num_conditions,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_conditions(&self) -> usize {
        self.num_conditions
    }

    /// The reserved unconditional (mask) label.
    pub fn mask_id(&self) -> usize {
        self.num_conditions
    }

    /// Number of condition rows including the mask row.
    pub fn num_rows(&self) -> usize {
        self.num_conditions + 1
    }

    /// Total number of sequences, `vocab_size^seq_len`.
    pub fn num_sequences(&self) -> usize {
        self.vocab_size.pow(self.seq_len as u32)
    }

    /// Number of distinct prefixes of length `len`.
    pub fn num_prefixes(&self, len: usize) -> usize {
        debug_assert!(len < self.seq_len || len == self.seq_len);
        self.vocab_size.pow(len as u32)
    }

    /// Encode a prefix (or full sequence) as its base-`vocab_size` index,
    /// first token most significant. The empty prefix has index 0.
    pub fn encode_prefix(&self, prefix: &[Token]) -> Result<usize> {
        if prefix.len() > self.seq_len {
            return Err(Error::Input(format!(
                "prefix of length {} exceeds seq_len {}",
                prefix.len(),
                self.seq_len
            )));
        }
        let mut index = 0usize;
        for &token in prefix {
            if (token as usize) >= self.vocab_size {
                return Err(Error::Input(format!(
                    "token {token} out of range for vocab_size {}",
                    self.vocab_size
                )));
            }
            index = index * self.vocab_size + token as usize;
        }
        Ok(index)
    }

    /// Decode a prefix index back into its `len` tokens.
    pub fn decode_prefix(&self, len: usize, mut index: usize) -> Vec<Token> {
        debug_assert!(len <= self.seq_len);
        debug_assert!(index < self.num_prefixes(len));
        let mut tokens = vec![0 as Token; len];
        for slot in (0..len).rev() {
            tokens[slot] = (index % self.vocab_size) as Token;
            index /= self.vocab_size;
        }
        tokens
    }

    /// Encode a full sequence; errors unless its length is exactly `seq_len`.
    pub fn encode_sequence(&self, tokens: &[Token]) -> Result<usize> {
        if tokens.len() != self.seq_len {
            return Err(Error::Input(format!(
                "sequence length {} does not match seq_len {}",
                tokens.len(),
                self.seq_len
            )));
        }
        self.encode_prefix(tokens)
    }

    /// Decode a full-sequence index into its tokens.
    pub fn decode_sequence(&self, index: usize) -> Vec<Token> {
        self.decode_prefix(self.seq_len, index)
    }

    /// Token at `position` of the sequence with the given index.
    pub fn token_at(&self, seq_index: usize, position: usize) -> Token {
        debug_assert!(position < self.seq_len);
        let shift = self.vocab_size.pow((self.seq_len - 1 - position) as u32);
        ((seq_index / shift) % self.vocab_size) as Token
    }

    /// Index of the length-`position` prefix of the sequence with the given
    /// index.
    pub fn prefix_of(&self, seq_index: usize, position: usize) -> usize {
        debug_assert!(position <= self.seq_len);
        let shift = self.vocab_size.pow((self.seq_len - position) as u32);
        seq_index / shift
    }

    /// All sequences in index order.
    pub fn enumerate_sequences(&self) -> Vec<Vec<Token>> {
        (0..self.num_sequences())
            .map(|i| self.decode_sequence(i))
            .collect()
    }

    /// Validate a condition id that may also be the mask label.
    pub fn check_row(&self, condition: usize) -> Result<()> {
        if condition > self.num_conditions {
            return Err(Error::Input(format!(
                "condition {condition} out of range (labels 0..{}, mask {})",
                self.num_conditions - 1,
                self.mask_id()
            )));
        }
        Ok(())
    }

    /// Validate a real (non-mask) condition label.
    pub fn check_condition(&self, condition: usize) -> Result<()> {
        if condition >= self.num_conditions {
            return Err(Error::Input(format!(
                "condition {condition} out of range (labels 0..{})",
                self.num_conditions - 1
            )));
        }
        Ok(())
    }
}
