//! Synthetic position-sensitive probe tasks.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::training::CLS;

/// Marker token shared by every task; content tokens follow it.
pub const MARK: usize = 4;
pub const FIRST_CONTENT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    OffsetCopy,
    RelativeDistanceCls,
    AbsolutePositionProbe,
    ClsSummary,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::OffsetCopy,
        TaskKind::RelativeDistanceCls,
        TaskKind::AbsolutePositionProbe,
        TaskKind::ClsSummary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::OffsetCopy => "offset_copy",
            TaskKind::RelativeDistanceCls => "relative_distance_cls",
            TaskKind::AbsolutePositionProbe => "absolute_position_probe",
            TaskKind::ClsSummary => "cls_summary",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                let valid: Vec<_> = TaskKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown task `{s}`; valid tasks: {}", valid.join(", ")))
            })
    }
}

/// A probe task definition. `length` counts every token including the
/// leading `[CLS]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProbeTask {
    pub kind: TaskKind,
    pub length: usize,
    /// Number of distinct content tokens.
    pub alphabet: usize,
    /// offset_copy: label is the token at `marker + offset`.
    pub offset: i64,
    /// relative_distance_cls: largest marker distance.
    pub max_distance: usize,
    /// cls_summary: number of token groups (labels).
    pub groups: usize,
}

impl ProbeTask {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            length: 12,
            alphabet: 16,
            offset: 2,
            max_distance: 8,
            groups: 4,
        }
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_CONTENT + self.alphabet
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            TaskKind::OffsetCopy => self.alphabet,
            TaskKind::RelativeDistanceCls => self.max_distance + 1,
            TaskKind::AbsolutePositionProbe => self.length,
            TaskKind::ClsSummary => self.groups,
        }
    }

    /// Labels that can actually occur.
    pub fn label_support(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::RelativeDistanceCls => (1..=self.max_distance).collect(),
            TaskKind::AbsolutePositionProbe => (1..self.length).collect(),
            _ => (0..self.num_classes()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.kind.name();
        if self.length < 3 {
            return Err(Error::Config(format!("{name}: length must be >= 3")));
        }
        if self.alphabet < 2 {
            return Err(Error::Config(format!("{name}: alphabet must hold >= 2 tokens")));
        }
        let content = self.length - 2;
        match self.kind {
            TaskKind::OffsetCopy => {
                if self.offset == 0 || self.offset.unsigned_abs() as usize > content {
                    return Err(Error::Config(format!(
                        "offset_copy: offset {} does not fit a sequence of length {}",
                        self.offset, self.length
                    )));
                }
                if content > self.alphabet {
                    return Err(Error::Config(format!(
                        "offset_copy: {content} distinct content tokens need an alphabet of at least that size"
                    )));
                }
            }
            TaskKind::RelativeDistanceCls => {
                if self.max_distance == 0 || self.max_distance > self.length - 2 {
                    return Err(Error::Config(format!(
                        "relative_distance_cls: max_distance {} exceeds length {} - 2",
                        self.max_distance, self.length
                    )));
                }
            }
            TaskKind::AbsolutePositionProbe => {}
            TaskKind::ClsSummary => {
                if self.groups < 2 || self.alphabet % self.groups != 0 {
                    return Err(Error::Config(format!(
                        "cls_summary: {} groups must evenly divide the alphabet of {}",
                        self.groups, self.alphabet
                    )));
                }
            }
        }
        Ok(())
    }

    fn content(&self, rng: &mut Rng) -> usize {
        FIRST_CONTENT + rng.random_range(0..self.alphabet)
    }

    /// One labelled example.
    pub fn sample(&self, rng: &mut Rng) -> Example {
        let l = self.length;
        match self.kind {
            TaskKind::OffsetCopy => {
                let (lo, hi) = if self.offset > 0 {
                    (1, l as i64 - 1 - self.offset)
                } else {
                    (1 - self.offset, l as i64 - 1)
                };
                let marker = rng.random_range(lo..=hi) as usize;
                let picks = sample(rng, self.alphabet, l - 2);
                let mut tokens = vec![CLS];
                let mut it = picks.iter();
                for j in 1..l {
                    tokens.push(if j == marker { MARK } else { FIRST_CONTENT + it.next().expect("l - 2 picks") });
                }
                let target = (marker as i64 + self.offset) as usize;
                Example { label: tokens[target] - FIRST_CONTENT, tokens, readout: marker }
            }
            TaskKind::RelativeDistanceCls => {
                let distance = rng.random_range(1..=self.max_distance);
                let first = rng.random_range(1..l - distance);
                let mut tokens: Vec<usize> = std::iter::once(CLS).chain((1..l).map(|_| self.content(rng))).collect();
                tokens[first] = MARK;
                tokens[first + distance] = MARK;
                Example { tokens, readout: 0, label: distance }
            }
            TaskKind::AbsolutePositionProbe => {
                let at = rng.random_range(1..l);
                let mut tokens: Vec<usize> = std::iter::once(CLS).chain((1..l).map(|_| self.content(rng))).collect();
                tokens[at] = MARK;
                Example { tokens, readout: 0, label: at }
            }
            TaskKind::ClsSummary => {
                let per_group = self.alphabet / self.groups;
                loop {
                    let tokens: Vec<usize> = std::iter::once(CLS).chain((1..l).map(|_| self.content(rng))).collect();
                    let mut counts = vec![0usize; self.groups];
                    for &t in &tokens[1..] {
                        counts[(t - FIRST_CONTENT) / per_group] += 1;
                    }
                    let best = *counts.iter().max().expect("groups >= 2");
                    let winners: Vec<usize> = (0..self.groups).filter(|&g| counts[g] == best).collect();
                    if let [label] = winners[..] {
                        return Example { tokens, readout: 0, label };
                    }
                }
            }
        }
    }

    pub fn generate(&self, count: usize, rng: &mut Rng) -> Result<Vec<Example>> {
        self.validate()?;
        Ok((0..count).map(|_| self.sample(rng)).collect())
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// Row whose final hidden state feeds the classifier.
    pub readout: usize,
    pub label: usize,
}

/// Train and test sets drawn from separate substreams, with any test
/// sequence that also occurs in training removed.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub task: ProbeTask,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub dropped_overlap: usize,
}

impl TaskSplits {
    pub fn generate(task: ProbeTask, train: usize, test: usize, seed: u64) -> Result<Self> {
        let name = task.kind.name();
        let train = task.generate(train, &mut substream(seed, &format!("task/{name}/train")))?;
        let seen: HashSet<&[usize]> = train.iter().map(|e| e.tokens.as_slice()).collect();
        let candidates = task.generate(test, &mut substream(seed, &format!("task/{name}/test")))?;
        let before = candidates.len();
        let test: Vec<Example> = candidates.into_iter().filter(|e| !seen.contains(e.tokens.as_slice())).collect();
        if test.is_empty() {
            return Err(Error::Input(format!("{name}: every test example also occurs in training")));
        }
        Ok(Self {
            task,
            dropped_overlap: before - test.len(),
            train,
            test,
        })
    }
}
