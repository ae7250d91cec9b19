//! Masked-language-model pretraining loop.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::params::Gradients;
use crate::rng::substream;

use super::corpus::Corpus;
use super::masking::{MaskStats, MaskingPolicy};
use super::optim::{AdamState, LrSchedule};
use super::packing::{pack_sequences, PackedBatch, PackedRow};
use super::vocab::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub eval_every: u64,
    pub heldout_fraction: f64,
    pub masking: MaskingPolicy,
    /// Stop early with status `converged` once the mean training loss of
    /// the last [`CONVERGENCE_WINDOW`] steps falls below this value.
    pub target_loss: Option<f64>,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            max_grad_norm: 1.0,
            eval_every: 100,
            heldout_fraction: 0.1,
            masking: MaskingPolicy::default(),
            target_loss: None,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("train.peak_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("train.warmup_fraction must lie in [0, 1)".into()));
        }
        if self.max_grad_norm < 0.0 {
            return Err(Error::Config("train.max_grad_norm must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config("train.heldout_fraction must lie in [0, 1)".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.masking.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::with_warmup_fraction(self.peak_lr, self.warmup_fraction, self.steps)
    }
}

/// Packed rows split into training and held-out sets.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainData {
    pub vocab: Vocab,
    pub train: Vec<PackedRow>,
    pub heldout: Vec<PackedRow>,
    pub n: usize,
    pub truncated_sentences: usize,
}

impl PretrainData {
    /// Builds the vocabulary (capped at `vocab_cap`), packs the sentence
    /// stream into rows of `n` tokens and holds out a seeded random
    /// `heldout_fraction` of the rows.
    pub fn prepare(corpus: &Corpus, vocab_cap: usize, n: usize, heldout_fraction: f64, seed: u64) -> Result<Self> {
        let vocab = corpus.build_vocab(vocab_cap)?;
        let packed = pack_sequences(&corpus.encode(&vocab), n)?;
        if packed.truncated_sentences > 0 {
            log::warn!(
                "{} sentences longer than {} tokens were truncated",
                packed.truncated_sentences,
                n - 1
            );
        }
        let mut order: Vec<usize> = (0..packed.rows.len()).collect();
        order.shuffle(&mut substream(seed, "data/split"));
        let held = if heldout_fraction > 0.0 && order.len() > 1 {
            ((heldout_fraction * order.len() as f64).ceil() as usize).clamp(1, order.len() - 1)
        } else {
            0
        };
        let mut held_idx = order[..held].to_vec();
        let mut train_idx = order[held..].to_vec();
        held_idx.sort_unstable();
        train_idx.sort_unstable();
        if train_idx.is_empty() {
            return Err(Error::Input("corpus produced no training rows".into()));
        }
        Ok(Self {
            vocab,
            train: train_idx.iter().map(|&i| packed.rows[i].clone()).collect(),
            heldout: held_idx.iter().map(|&i| packed.rows[i].clone()).collect(),
            n,
            truncated_sentences: packed.truncated_sentences,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub finite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    Converged,
    Diverged,
}

impl std::fmt::Display for TrainStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainStatus::Completed => "completed",
            TrainStatus::Converged => "converged",
            TrainStatus::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// `(step, held-out loss)`; step 0 is the initial model.
    pub heldout: Vec<(u64, f64)>,
    pub status: TrainStatus,
    pub first_nonfinite_step: Option<u64>,
    pub divergence: Option<String>,
    pub mask_stats: MaskStats,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.iter().rev().find(|s| s.finite).map(|s| s.loss)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("status: {}\nsteps: {}\n", self.status, self.steps.len());
        if let Some(first) = self.steps.first() {
            s.push_str(&format!("initial loss: {:.4}\n", first.loss));
        }
        if let Some(l) = self.final_loss() {
            s.push_str(&format!("final loss: {l:.4}\n"));
        }
        if let Some(&(step, l)) = self.heldout.last() {
            s.push_str(&format!("held-out loss at step {step}: {l:.4}\n"));
        }
        if let (Some(step), Some(why)) = (self.first_nonfinite_step, &self.divergence) {
            s.push_str(&format!("diverged at step {step}: {why}\n"));
        }
        s.push_str(&format!("wall time: {:.1}s\n", self.wall_seconds));
        s
    }
}

pub const CONVERGENCE_WINDOW: usize = 10;

pub const METRICS_HEADER: &str = "# poslab metrics v1";

/// Append-only per-step metrics CSV.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut w: W) -> Result<Self> {
        writeln!(w, "{METRICS_HEADER}")?;
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(["step", "loss", "grad_norm", "lr", "finite_flag"]).map_err(csv_err)?;
        Ok(Self { inner })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        self.inner
            .write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
                r.lr.to_string(),
                u8::from(r.finite).to_string(),
            ])
            .map_err(csv_err)
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.inner.flush()?)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Rayon pool bounded by `workers`.
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Scales every gradient so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients(grads: &mut [&mut Gradients], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.l2_norm().powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm && norm.is_finite() {
        for g in grads.iter_mut() {
            g.scale(max_norm / norm);
        }
    }
    norm
}

/// Per-row loss and gradients; `None` when the row has no targets.
fn row_gradients(
    model: &Encoder,
    batch: &PackedBatch,
    r: usize,
    dropout_seed: Option<(u64, u64)>,
) -> Result<Option<(f64, Gradients)>> {
    let targets = batch.row_targets(r);
    if targets.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let mut rng = dropout_seed.map(|(seed, step)| substream(seed, &format!("dropout/{step}/{r}")));
    let loss = model.mlm_loss(&mut tape, &vars, &batch.input(r), &targets, rng.as_mut())?;
    tape.backward(loss)?;
    Ok(Some((tape.value(loss)[0], vars.params.gradients(&tape))))
}

/// Mean loss and mean gradient over the rows of `batch`, computed in
/// parallel and summed in row order.
fn batch_gradients(
    model: &Encoder,
    batch: &PackedBatch,
    pool: &rayon::ThreadPool,
    dropout_seed: Option<(u64, u64)>,
) -> Result<Option<(f64, Gradients)>> {
    let per_row: Vec<Result<Option<(f64, Gradients)>>> =
        pool.install(|| (0..batch.len()).into_par_iter().map(|r| row_gradients(model, batch, r, dropout_seed)).collect());
    let mut total = Gradients::zeros_like(model.params());
    let mut loss = 0.0;
    let mut rows = 0usize;
    for item in per_row {
        if let Some((l, g)) = item? {
            loss += l;
            total.add_assign(&g);
            rows += 1;
        }
    }
    if rows == 0 {
        return Ok(None);
    }
    total.scale(1.0 / rows as f64);
    Ok(Some((loss / rows as f64, total)))
}

/// Mean MLM loss over `rows` with a fixed, seed-determined masking and no
/// dropout.
pub fn evaluate_mlm(model: &Encoder, rows: &[PackedRow], masking: &MaskingPolicy, seed: u64, workers: usize) -> Result<f64> {
    let pool = worker_pool(workers)?;
    let mut batch = PackedBatch::from_rows(rows, model.config().max_len)?;
    masking.apply(&mut batch, model.config().vocab_size, &mut substream(seed, "heldout-mask"))?;
    let losses: Vec<Result<Option<f64>>> = pool.install(|| {
        (0..batch.len())
            .into_par_iter()
            .map(|r| {
                let targets = batch.row_targets(r);
                if targets.is_empty() {
                    return Ok(None);
                }
                let mut tape = Tape::new();
                let vars = model.register(&mut tape);
                let loss = model.mlm_loss(&mut tape, &vars, &batch.input(r), &targets, None)?;
                Ok(Some(tape.value(loss)[0]))
            })
            .collect()
    });
    let mut sum = 0.0;
    let mut count = 0usize;
    for l in losses {
        if let Some(v) = l? {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("held-out rows carry no masked targets".into()));
    }
    Ok(sum / count as f64)
}

/// Runs `cfg.steps` Adam steps of MLM training on `data.train`, updating
/// `model` in place. Divergence stops the run and is reported with status
/// `diverged`; the model keeps its last finite parameters.
pub fn train<W: Write>(
    model: &mut Encoder,
    data: &PretrainData,
    cfg: &TrainConfig,
    mut metrics: Option<&mut MetricsWriter<W>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.n > model.config().max_len {
        return Err(Error::Config(format!(
            "packed rows of {} tokens exceed the encoder's max_len {}",
            data.n,
            model.config().max_len
        )));
    }
    if data.vocab.len() > model.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} exceeds the encoder's vocab_size {}",
            data.vocab.len(),
            model.config().vocab_size
        )));
    }
    let started = Instant::now();
    let pool = worker_pool(cfg.workers)?;
    let schedule = cfg.schedule();
    let mut adam = AdamState::new(model.params());
    let use_dropout = model.config().dropout > 0.0;
    let mut report = TrainReport {
        steps: Vec::with_capacity(cfg.steps as usize),
        heldout: Vec::new(),
        status: TrainStatus::Completed,
        first_nonfinite_step: None,
        divergence: None,
        mask_stats: MaskStats::default(),
        wall_seconds: 0.0,
    };
    if !data.heldout.is_empty() {
        report.heldout.push((0, evaluate_mlm(model, &data.heldout, &cfg.masking, cfg.seed, cfg.workers)?));
    }

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    for step in 1..=cfg.steps {
        let mut rows = Vec::with_capacity(cfg.batch_size);
        while rows.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.train.len()).collect();
                order.shuffle(&mut substream(cfg.seed, &format!("data/epoch{epoch}")));
                epoch += 1;
                cursor = 0;
            }
            rows.push(data.train[order[cursor]].clone());
            cursor += 1;
        }
        let mut batch = PackedBatch::from_rows(&rows, data.n)?;
        let stats = cfg
            .masking
            .apply(&mut batch, data.vocab.len(), &mut substream(cfg.seed, &format!("mask/{step}")))?;
        report.mask_stats.maskable += stats.maskable;
        report.mask_stats.targets += stats.targets;
        report.mask_stats.skipped_rows += stats.skipped_rows;

        let lr = schedule.at(step);
        let outcome = batch_gradients(model, &batch, &pool, use_dropout.then_some((cfg.seed, step)));
        let diverged = |report: &mut TrainReport, why: String| {
            report.status = TrainStatus::Diverged;
            report.first_nonfinite_step = Some(step);
            report.divergence = Some(why);
        };
        let (loss, mut grads) = match outcome {
            Ok(Some(v)) => v,
            Ok(None) => return Err(Error::Input(format!("batch at step {step} has no masked targets"))),
            Err(Error::Divergence(d)) => {
                let rec = StepRecord { step, loss: f64::NAN, grad_norm: f64::NAN, lr, finite: false };
                report.steps.push(rec);
                if let Some(m) = metrics.as_deref_mut() {
                    m.record(&rec)?;
                }
                diverged(&mut report, d.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let grad_norm = clip_gradients(&mut [&mut grads], cfg.max_grad_norm);
        let finite = loss.is_finite() && grad_norm.is_finite();
        let rec = StepRecord { step, loss, grad_norm, lr, finite };
        report.steps.push(rec);
        if let Some(m) = metrics.as_deref_mut() {
            m.record(&rec)?;
        }
        if !finite {
            diverged(&mut report, "non-finite loss or gradient norm".into());
            break;
        }
        if let Err(e) = adam.update(model.params_mut(), &grads, lr) {
            match e {
                Error::Divergence(d) => {
                    diverged(&mut report, d.to_string());
                    break;
                }
                other => return Err(other),
            }
        }
        if !data.heldout.is_empty() && (step % cfg.eval_every.max(1) == 0 || step == cfg.steps) {
            match evaluate_mlm(model, &data.heldout, &cfg.masking, cfg.seed, cfg.workers) {
                Ok(l) => report.heldout.push((step, l)),
                Err(Error::Divergence(d)) => {
                    diverged(&mut report, d.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let recent = &report.steps[report.steps.len().saturating_sub(CONVERGENCE_WINDOW)..];
        let recent_mean = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len() as f64;
        if recent.len() == CONVERGENCE_WINDOW && cfg.target_loss.is_some_and(|t| recent_mean < t) {
            report.status = TrainStatus::Converged;
            break;
        }
    }
    if let Some(m) = metrics {
        m.flush()?;
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}
