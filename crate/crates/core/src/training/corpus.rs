//! Plain-text corpus: one sentence per line, blank line between documents.

use std::path::Path;

use crate::error::{Error, Result};

use super::vocab::{tokenize, Vocab};

/// Tokenized sentences grouped by document.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Vec<Vec<String>>>,
}

impl Corpus {
    pub fn parse(text: &str) -> Self {
        let mut documents = Vec::new();
        let mut current: Vec<Vec<String>> = Vec::new();
        for line in text.lines() {
            let words = tokenize(line);
            if words.is_empty() {
                if !current.is_empty() {
                    documents.push(std::mem::take(&mut current));
                }
            } else {
                current.push(words);
            }
        }
        if !current.is_empty() {
            documents.push(current);
        }
        Self { documents }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read corpus {}: {e}", path.display())))?;
        let corpus = Self::parse(&text);
        if corpus.sentence_count() == 0 {
            return Err(Error::Input(format!("corpus {} contains no sentences", path.display())));
        }
        Ok(corpus)
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Vec<String>> {
        self.documents.iter().flatten()
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn token_count(&self) -> usize {
        self.sentences().map(Vec::len).sum()
    }

    pub fn build_vocab(&self, max_size: usize) -> Result<Vocab> {
        Vocab::build(self.sentences().flatten().map(String::as_str), max_size)
    }

    /// The sentence stream as id sequences, documents concatenated in order.
    pub fn encode(&self, vocab: &Vocab) -> Vec<Vec<usize>> {
        self.sentences().map(|s| vocab.encode(s)).collect()
    }
}
