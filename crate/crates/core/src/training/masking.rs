//! Masked-language-model target selection.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::packing::PackedBatch;
use super::vocab::{Vocab, MASK, SPECIAL_TOKENS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingPolicy {
    /// Probability that a maskable token becomes a target.
    pub fraction: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
    pub keep: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            fraction: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
            keep: 0.1,
        }
    }
}

/// Counters from one masking pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskStats {
    pub maskable: usize,
    pub targets: usize,
    /// Rows without any maskable token; left untouched.
    pub skipped_rows: usize,
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.fraction, self.replace_mask, self.replace_random, self.keep];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("masking probabilities must lie in [0, 1]".into()));
        }
        let sum = self.replace_mask + self.replace_random + self.keep;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("masking replacement split sums to {sum}, not 1")));
        }
        Ok(())
    }

    /// Selects targets in every row of `batch` and rewrites the selected
    /// tokens in place. Each non-special token is selected independently
    /// with probability `fraction`; when that selects nothing in a row
    /// with maskable tokens, one is chosen uniformly.
    pub fn apply(&self, batch: &mut PackedBatch, vocab_size: usize, rng: &mut Rng) -> Result<MaskStats> {
        self.validate()?;
        let first_word = SPECIAL_TOKENS.len();
        if vocab_size <= first_word {
            return Err(Error::Config("vocabulary holds only special tokens".into()));
        }
        let mut stats = MaskStats::default();
        batch.targets.clear();
        if self.fraction == 0.0 {
            return Ok(stats);
        }
        for r in 0..batch.len() {
            let maskable: Vec<usize> = (0..batch.n)
                .filter(|&j| batch.mask[r][j] && !Vocab::is_special(batch.tokens[r][j]))
                .collect();
            stats.maskable += maskable.len();
            if maskable.is_empty() {
                stats.skipped_rows += 1;
                continue;
            }
            let mut chosen: Vec<usize> = maskable.iter().copied().filter(|_| rng.random::<f64>() < self.fraction).collect();
            if chosen.is_empty() {
                chosen.push(maskable[rng.random_range(0..maskable.len())]);
            }
            for j in chosen {
                let original = batch.tokens[r][j];
                batch.targets.push((r, j, original));
                let u: f64 = rng.random();
                if u < self.replace_mask {
                    batch.tokens[r][j] = MASK;
                } else if u < self.replace_mask + self.replace_random {
                    batch.tokens[r][j] = rng.random_range(first_word..vocab_size);
                }
                stats.targets += 1;
            }
        }
        Ok(stats)
    }
}
