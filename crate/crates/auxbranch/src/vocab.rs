//! Source/target vocabularies with a blank-extended source side.

use crate::error::{Error, Result};

/// Token id spaces for the three tasks. Source ids are `0..n_source` with the
/// CTC blank appended as the last id; target ids are `0..n_target` followed by
/// pad, bos and eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedVocab {
    n_source: usize,
    n_target: usize,
    seed: u64,
}

impl ExtendedVocab {
    /// Number of real source tokens.
    pub fn n_source(&self) -> usize {
        self.n_source
    }

    /// Number of real target tokens.
    pub fn n_target(&self) -> usize {
        self.n_target
    }

    /// Blank-extended source vocabulary size |V+|.
    pub fn source_extended(&self) -> usize {
        self.n_source + 1
    }

    pub fn blank(&self) -> usize {
        self.n_source
    }

    /// Target vocabulary size including specials.
    pub fn target_total(&self) -> usize {
        self.n_target + 3
    }

    pub fn pad(&self) -> usize {
        self.n_target
    }

    pub fn bos(&self) -> usize {
        self.n_target + 1
    }

    pub fn eos(&self) -> usize {
        self.n_target + 2
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn valid_source_token(&self, id: usize) -> bool {
        id < self.n_source
    }

    pub fn valid_target_token(&self, id: usize) -> bool {
        id < self.n_target
    }
}

/// Builds the id spaces. Layout is fully determined by the sizes; the seed is
/// recorded so downstream corpus generation can be tied to the vocabulary it
/// was built with.
pub fn make_vocab(n_source: usize, n_target: usize, seed: u64) -> Result<ExtendedVocab> {
    if n_source < 2 || n_target < 2 {
        return Err(Error::InvalidArg(format!(
            "vocabulary sizes must be at least 2 (got source {n_source}, target {n_target})"
        )));
    }
    Ok(ExtendedVocab {
        n_source,
        n_target,
        seed,
    })
}
