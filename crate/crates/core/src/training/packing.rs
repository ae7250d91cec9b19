//! Full-sentences packing of a sentence stream into fixed-length rows.

use crate::encoder::SequenceInput;
use crate::error::{Error, Result};

use super::vocab::{CLS, PAD};

/// One packed row: `[CLS]` followed by whole sentences.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PackedRow {
    pub tokens: Vec<usize>,
    /// 1-based position of each token within its own sentence; `[CLS]`
    /// counts as a one-token sentence.
    pub sentence_positions: Vec<usize>,
    /// Token counts of the sentences in this row, `[CLS]` excluded.
    pub sentence_lengths: Vec<usize>,
}

impl PackedRow {
    fn start() -> Self {
        Self {
            tokens: vec![CLS],
            sentence_positions: vec![1],
            sentence_lengths: Vec::new(),
        }
    }

    fn push_sentence(&mut self, sentence: &[usize]) {
        self.tokens.extend_from_slice(sentence);
        self.sentence_positions.extend(1..=sentence.len());
        self.sentence_lengths.push(sentence.len());
    }

    /// Tokens excluding `[CLS]`.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn to_input(&self) -> SequenceInput {
        SequenceInput::new(self.tokens.clone()).with_sentence_positions(self.sentence_positions.clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Packed {
    pub rows: Vec<PackedRow>,
    /// Sentences longer than a row; each was cut to fit.
    pub truncated_sentences: usize,
    pub truncated_tokens: usize,
}

/// Greedy packing into rows of at most `n` tokens including the leading
/// `[CLS]`. A sentence that would overflow the current row starts the next
/// one; a sentence longer than `n − 1` is truncated and counted.
pub fn pack_sequences<S: AsRef<[usize]>>(sentences: &[S], n: usize) -> Result<Packed> {
    if n < 2 {
        return Err(Error::Config(format!("rows of length {n} cannot hold [CLS] and a token")));
    }
    let capacity = n - 1;
    let mut out = Packed::default();
    let mut row = PackedRow::start();
    for sentence in sentences {
        let mut s = sentence.as_ref();
        if s.is_empty() {
            continue;
        }
        if s.len() > capacity {
            out.truncated_sentences += 1;
            out.truncated_tokens += s.len() - capacity;
            s = &s[..capacity];
        }
        if row.content_len() + s.len() > capacity {
            out.rows.push(std::mem::replace(&mut row, PackedRow::start()));
        }
        row.push_sentence(s);
    }
    if row.content_len() > 0 {
        out.rows.push(row);
    }
    Ok(out)
}

/// A batch of rows padded to a common length `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub n: usize,
    /// `[batch][n]` token ids, padded with `[PAD]`.
    pub tokens: Vec<Vec<usize>>,
    /// `[batch][n]`, false on padding.
    pub mask: Vec<Vec<bool>>,
    pub sentence_positions: Vec<Vec<usize>>,
    /// `(row, position, original id)` for every masked-language target.
    pub targets: Vec<(usize, usize, usize)>,
}

impl PackedBatch {
    pub fn from_rows(rows: &[PackedRow], n: usize) -> Result<Self> {
        let mut batch = Self {
            n,
            tokens: Vec::with_capacity(rows.len()),
            mask: Vec::with_capacity(rows.len()),
            sentence_positions: Vec::with_capacity(rows.len()),
            targets: Vec::new(),
        };
        for row in rows {
            let len = row.tokens.len();
            if len > n {
                return Err(Error::Input(format!("row of {len} tokens exceeds {n}")));
            }
            let mut t = row.tokens.clone();
            t.resize(n, PAD);
            let mut p = row.sentence_positions.clone();
            p.resize(n, 1);
            batch.tokens.push(t);
            batch.mask.push((0..n).map(|j| j < len).collect());
            batch.sentence_positions.push(p);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Row `r` with padding stripped, ready for the encoder.
    pub fn input(&self, r: usize) -> SequenceInput {
        let len = self.mask[r].iter().filter(|&&m| m).count();
        SequenceInput::new(self.tokens[r][..len].to_vec())
            .with_sentence_positions(self.sentence_positions[r][..len].to_vec())
    }

    /// Targets of row `r` as `(position, original id)`.
    pub fn row_targets(&self, r: usize) -> Vec<(usize, usize)> {
        self.targets.iter().filter(|t| t.0 == r).map(|t| (t.1, t.2)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_fill_and_position_restart() {
        let s = vec![vec![4; 5], vec![5; 5], vec![6; 5]];
        let p = pack_sequences(&s, 12).unwrap();
        let lens: Vec<Vec<usize>> = p.rows.iter().map(|r| r.sentence_lengths.clone()).collect();
        assert_eq!(lens, vec![vec![5, 5], vec![5]]);
        assert_eq!(p.rows[0].sentence_positions, vec![1, 1, 2, 3, 4, 5, 1, 2, 3, 4, 5]);
        assert_eq!(p.rows[0].tokens[0], CLS);
    }

    #[test]
    fn long_sentence_is_truncated() {
        let s = vec![vec![7; 3], vec![8; 20]];
        let p = pack_sequences(&s, 8).unwrap();
        assert_eq!(p.truncated_sentences, 1);
        assert_eq!(p.truncated_tokens, 13);
        assert_eq!(p.rows.len(), 2);
        assert_eq!(p.rows[1].tokens.len(), 8);
    }

    #[test]
    fn batch_padding() {
        let s = vec![vec![4, 5], vec![6; 6]];
        let p = pack_sequences(&s, 8).unwrap();
        let b = PackedBatch::from_rows(&p.rows, 8).unwrap();
        assert_eq!(b.tokens[0], vec![CLS, 4, 5, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(b.input(0).tokens, vec![CLS, 4, 5]);
        assert_eq!(b.mask[1].iter().filter(|&&m| m).count(), 7);
    }
}
