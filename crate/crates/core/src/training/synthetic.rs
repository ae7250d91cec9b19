//! Seeded synthetic corpora whose tokens are predictable only from order.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Random walks on a fixed random graph where every word has `branching`
/// successors. A masked word is nearly determined by its neighbours but
/// not by the bag of words in its row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WalkCorpusSpec {
    pub words: usize,
    pub branching: usize,
    pub sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Sentences per document.
    pub doc_len: usize,
}

impl Default for WalkCorpusSpec {
    fn default() -> Self {
        Self {
            words: 40,
            branching: 2,
            sentences: 400,
            min_len: 5,
            max_len: 10,
            doc_len: 8,
        }
    }
}

/// Corpus text in the one-sentence-per-line format.
pub fn walk_corpus(spec: &WalkCorpusSpec, seed: u64) -> Result<String> {
    if spec.words < 2 || spec.branching == 0 || spec.branching > spec.words {
        return Err(Error::Config("walk corpus needs >= 2 words and 1..=words successors".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config("walk corpus needs 1 <= min_len <= max_len".into()));
    }
    let mut rng = substream(seed, "walk-corpus");
    let word = |i: usize| format!("w{i:03}");
    let successors: Vec<Vec<usize>> = (0..spec.words)
        .map(|_| {
            let mut all: Vec<usize> = (0..spec.words).collect();
            all.shuffle(&mut rng);
            all.truncate(spec.branching);
            all
        })
        .collect();
    let mut text = String::new();
    for s in 0..spec.sentences {
        if s > 0 && spec.doc_len > 0 && s % spec.doc_len == 0 {
            text.push('\n');
        }
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut cur = rng.random_range(0..spec.words);
        let mut line = vec![word(cur)];
        for _ in 1..len {
            cur = successors[cur][rng.random_range(0..spec.branching)];
            line.push(word(cur));
        }
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    Ok(text)
}
