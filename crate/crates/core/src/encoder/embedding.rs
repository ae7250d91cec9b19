//! Input embeddings: token table plus at most one absolute-position source.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kernels::MethodKind;

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(…)` for
/// `pos = 0..n`.
pub fn sinusoid_table(n: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!("sinusoid table needs an even width, got {d_model}")));
    }
    let mut t = Tensor::zeros(&[n, d_model]);
    let data = t.data_mut();
    for pos in 0..n {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(t)
}

/// One input sequence. `positions`, when present, are 1-based positions
/// within each token's own sentence; `mask[j] == false` marks padding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceInput {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub sentence_positions: Option<Vec<usize>>,
    pub segments: Option<Vec<usize>>,
}

impl SequenceInput {
    /// Unpadded sequence.
    pub fn new(tokens: Vec<usize>) -> Self {
        let mask = vec![true; tokens.len()];
        Self {
            tokens,
            mask,
            sentence_positions: None,
            segments: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_sentence_positions(mut self, positions: Vec<usize>) -> Self {
        self.sentence_positions = Some(positions);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        let len = self.len();
        if len == 0 {
            return Err(Error::Input("empty sequence".into()));
        }
        if len > max_len {
            return Err(Error::Input(format!("sequence of {len} exceeds max length {max_len}")));
        }
        if self.mask.len() != len {
            return Err(Error::Input(format!("mask has {} entries for {len} tokens", self.mask.len())));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::Input("sequence is entirely padding".into()));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        if let Some(p) = &self.sentence_positions {
            if p.len() != len {
                return Err(Error::Input(format!("{} sentence positions for {len} tokens", p.len())));
            }
        }
        if let Some(s) = &self.segments {
            if s.len() != len || s.iter().any(|&x| x > 1) {
                return Err(Error::Input("segments must be 0/1, one per token".into()));
            }
        }
        Ok(())
    }

    /// Row of the absolute table each token reads under `kind`.
    pub fn absolute_rows(&self, kind: MethodKind, max_len: usize) -> Result<Vec<usize>> {
        let rows: Vec<usize> = if kind == MethodKind::AbsoluteRealSentence {
            let p = self
                .sentence_positions
                .as_ref()
                .ok_or_else(|| Error::Input("real-sentence positions require a sentence position map".into()))?;
            if let Some(&zero) = p.iter().find(|&&v| v == 0) {
                return Err(Error::Input(format!("sentence positions are 1-based, got {zero}")));
            }
            p.iter().map(|&v| v - 1).collect()
        } else {
            (0..self.len()).collect()
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= max_len) {
            return Err(Error::Input(format!("position {} exceeds max length {max_len}", bad + 1)));
        }
        Ok(rows)
    }
}

/// Tape handles of the embedding parameters.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub token: Var,
    pub absolute: Option<Var>,
    pub segment: Option<Var>,
    /// Constant, never differentiated.
    pub sinusoid: Option<Var>,
}

/// `x_i = t_i + s_i + w_i` before normalization; `w_i` comes from the
/// active absolute source, if any.
pub fn embed_input(tape: &mut Tape, vars: &EmbeddingVars, input: &SequenceInput, kind: MethodKind) -> Result<Var> {
    let mut x = tape.gather_rows(vars.token, &input.tokens)?;
    let max_len = |tape: &Tape, v: Var| tape.shape(v)[0];
    if let Some(table) = vars.absolute.or(vars.sinusoid) {
        let rows = input.absolute_rows(kind, max_len(tape, table))?;
        let w = tape.gather_rows(table, &rows)?;
        x = tape.add(x, w)?;
    }
    if let (Some(seg), Some(ids)) = (vars.segment, input.segments.as_ref()) {
        let s = tape.gather_rows(seg, ids)?;
        x = tape.add(x, s)?;
    }
    Ok(x)
}
