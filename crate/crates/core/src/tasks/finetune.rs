//! Classification fine-tuning on probe tasks.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{Encoder, SequenceInput};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParameterSet};
use crate::rng::substream;
use crate::training::{clip_gradients, worker_pool, AdamState, LrSchedule, StepRecord, TrainStatus};

use super::probe::{Example, TaskSplits};

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            max_grad_norm: 1.0,
            seed: 0,
            workers: 1,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("finetune.steps and finetune.batch_size must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("finetune.peak_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("finetune.warmup_fraction must lie in [0, 1)".into()));
        }
        if self.max_grad_norm < 0.0 {
            return Err(Error::Config("finetune.max_grad_norm must be >= 0".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneResult {
    /// Held-out accuracy; `None` when training diverged.
    pub accuracy: Option<f64>,
    /// Accuracy of always predicting the most frequent training label.
    pub majority_baseline: f64,
    pub chance: f64,
    pub status: TrainStatus,
    pub divergence: Option<String>,
    pub steps: Vec<StepRecord>,
    pub train_size: usize,
    pub test_size: usize,
}

/// Linear classifier over one hidden row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub params: ParameterSet,
}

impl ClassifierHead {
    pub fn new(d_model: usize, classes: usize, init_std: f64, seed: u64) -> Result<Self> {
        let dist = Normal::new(0.0, init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = substream(seed, "head-init");
        let mut params = ParameterSet::new();
        params.add("head.weight", Tensor::from_fn(&[d_model, classes], |_| dist.sample(&mut rng)))?;
        params.add("head.bias", Tensor::zeros(&[classes]))?;
        Ok(Self { params })
    }
}

fn example_input(e: &Example) -> SequenceInput {
    let n = e.tokens.len();
    SequenceInput::new(e.tokens.clone()).with_sentence_positions((1..=n).collect())
}

/// Loss and gradients (encoder, head) for one example.
fn example_gradients(
    model: &Encoder,
    head: &ClassifierHead,
    e: &Example,
    dropout: Option<(u64, u64, usize)>,
) -> Result<(f64, Gradients, Gradients)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let hv = head.params.register(&mut tape);
    let mut rng = dropout.map(|(seed, step, i)| substream(seed, &format!("ft-dropout/{step}/{i}")));
    let enc = model.encode(&mut tape, &vars, &example_input(e), rng.as_mut())?;
    let row = tape.gather_rows(enc.hidden, &[e.readout])?;
    let w = hv.var(head.params.id("head.weight").expect("head weight"));
    let b = hv.var(head.params.id("head.bias").expect("head bias"));
    let logits = tape.matmul(row, w)?;
    let logits = tape.add_row_bias(logits, b)?;
    let loss = tape.cross_entropy(logits, &[(0, e.label)])?;
    tape.backward(loss)?;
    Ok((tape.value(loss)[0], vars.params.gradients(&tape), hv.gradients(&tape)))
}

fn predict(model: &Encoder, head: &ClassifierHead, e: &Example) -> Result<usize> {
    let hidden = model.hidden_states(&example_input(e))?;
    let w = head.params.get(head.params.id("head.weight").expect("head weight"));
    let b = head.params.get(head.params.id("head.bias").expect("head bias"));
    let h = hidden.row(e.readout);
    let classes = b.len();
    let scores: Vec<f64> = (0..classes)
        .map(|c| b.data()[c] + h.iter().enumerate().map(|(k, v)| v * w.at(k, c)).sum::<f64>())
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Divergence(crate::error::Divergence::Logits));
    }
    Ok((0..classes).fold(0, |best, c| if scores[c] > scores[best] { c } else { best }))
}

/// Fraction of `examples` whose argmax prediction equals the label.
pub fn accuracy(model: &Encoder, head: &ClassifierHead, examples: &[Example], workers: usize) -> Result<f64> {
    let pool = worker_pool(workers)?;
    let hits: Vec<Result<bool>> =
        pool.install(|| examples.par_iter().map(|e| predict(model, head, e).map(|p| p == e.label)).collect());
    let mut correct = 0usize;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Accuracy on `test` of always answering the most frequent label of
/// `train` (ties go to the smaller label).
pub fn majority_baseline(train: &[Example], test: &[Example], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for e in train {
        counts[e.label] += 1;
    }
    let majority = (0..classes).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
    test.iter().filter(|e| e.label == majority).count() as f64 / test.len().max(1) as f64
}

/// Attaches a fresh classifier head and trains encoder and head jointly on
/// `splits.train`, then measures accuracy on the disjoint `splits.test`.
/// Divergence is reported in the result, not raised.
pub fn fine_tune(model: &mut Encoder, splits: &TaskSplits, cfg: &FineTuneConfig) -> Result<FineTuneResult> {
    cfg.validate()?;
    let task = &splits.task;
    task.validate()?;
    let mc = model.config().clone();
    if task.length > mc.max_len {
        return Err(Error::Config(format!(
            "task length {} exceeds the encoder's max_len {}",
            task.length, mc.max_len
        )));
    }
    if task.vocab_size() > mc.vocab_size {
        return Err(Error::Config(format!(
            "task needs {} token ids but the encoder has vocab_size {}",
            task.vocab_size(),
            mc.vocab_size
        )));
    }
    let classes = task.num_classes();
    let mut head = ClassifierHead::new(mc.d_model, classes, mc.init_std, cfg.seed)?;
    let pool = worker_pool(cfg.workers)?;
    let schedule = LrSchedule::with_warmup_fraction(cfg.peak_lr, cfg.warmup_fraction, cfg.steps);
    let mut adam_model = AdamState::new(model.params());
    let mut adam_head = AdamState::new(&head.params);
    let use_dropout = mc.dropout > 0.0;
    let mut result = FineTuneResult {
        accuracy: None,
        majority_baseline: majority_baseline(&splits.train, &splits.test, classes),
        chance: 1.0 / task.label_support().len() as f64,
        status: TrainStatus::Completed,
        divergence: None,
        steps: Vec::with_capacity(cfg.steps as usize),
        train_size: splits.train.len(),
        test_size: splits.test.len(),
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..splits.train.len()).collect();
                order.shuffle(&mut substream(cfg.seed, &format!("ft-data/epoch{epoch}")));
                epoch += 1;
                cursor = 0;
            }
            batch.push(&splits.train[order[cursor]]);
            cursor += 1;
        }
        let per_example: Vec<Result<(f64, Gradients, Gradients)>> = pool.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(i, e)| example_gradients(model, &head, e, use_dropout.then_some((cfg.seed, step, i))))
                .collect()
        });
        let lr = schedule.at(step);
        let mut g_model = Gradients::zeros_like(model.params());
        let mut g_head = Gradients::zeros_like(&head.params);
        let mut loss = 0.0;
        let mut failure = None;
        for item in per_example {
            match item {
                Ok((l, gm, gh)) => {
                    loss += l;
                    g_model.add_assign(&gm);
                    g_head.add_assign(&gh);
                }
                Err(Error::Divergence(d)) => {
                    failure = Some(d.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        g_model.scale(scale);
        g_head.scale(scale);
        let grad_norm = if failure.is_none() {
            clip_gradients(&mut [&mut g_model, &mut g_head], cfg.max_grad_norm)
        } else {
            f64::NAN
        };
        let finite = failure.is_none() && loss.is_finite() && grad_norm.is_finite();
        result.steps.push(StepRecord { step, loss: if failure.is_some() { f64::NAN } else { loss }, grad_norm, lr, finite });
        if !finite {
            result.status = TrainStatus::Diverged;
            result.divergence = Some(failure.unwrap_or_else(|| "non-finite loss or gradient norm".into()));
            return Ok(result);
        }
        let updated = adam_model
            .update(model.params_mut(), &g_model, lr)
            .and_then(|_| adam_head.update(&mut head.params, &g_head, lr));
        if let Err(e) = updated {
            return match e {
                Error::Divergence(d) => {
                    result.status = TrainStatus::Diverged;
                    result.divergence = Some(d.to_string());
                    Ok(result)
                }
                other => Err(other),
            };
        }
    }
    match accuracy(model, &head, &splits.test, cfg.workers) {
        Ok(a) => result.accuracy = Some(a),
        Err(Error::Divergence(d)) => {
            result.status = TrainStatus::Diverged;
            result.divergence = Some(d.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok(result)
}
