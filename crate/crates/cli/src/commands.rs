//! Command bodies. Each writes its human-readable report to `out` and its
//! files under the configured output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use poslab::encoder::{core_param_count, load_checkpoint, save_checkpoint, Encoder};
use poslab::kernels::{audit, group_thousands, param_count, render_audit, table_methods, MethodKind, MethodSpec, ModelDims};
use poslab::rng::substream;
use poslab::tasks::{compare_methods, fine_tune, TaskSplits};
use poslab::training::{train, Corpus, MetricsWriter, PretrainData, TrainStatus};
use poslab::verify::gradcheck_method;
use poslab::Error;

use crate::config::RunConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const COMPARE_FILE: &str = "compare.csv";
pub const COMPARE_LONG_FILE: &str = "compare_long.csv";
pub const PROBE_FILE: &str = "probe.csv";
pub const REPORT_FILE: &str = "report.txt";

/// How a command that ran to completion ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// An oracle, tolerance or count check failed.
    VerificationFailed,
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Validates `cfg` and creates its output directory with the resolved
/// configuration inside.
fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| config_error("output_dir is not set (config key `output_dir` or --output)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.write_into(&dir)?;
    Ok(dir)
}

pub fn pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    let corpus_path = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| config_error("train.corpus is not set"))?;
    if !corpus_path.is_file() {
        return Err(config_error(format!("train.corpus: no such file {}", corpus_path.display())));
    }
    let dir = prepare_output(cfg)?;
    let corpus = Corpus::read(corpus_path)?;
    let tc = cfg.train_config();
    let data = PretrainData::prepare(&corpus, cfg.encoder.vocab_size, cfg.encoder.max_len, tc.heldout_fraction, cfg.seed)?;
    writeln!(
        out,
        "corpus: {} sentences, {} tokens; vocabulary {}; {} training rows, {} held-out rows of {} tokens",
        corpus.sentence_count(),
        corpus.token_count(),
        data.vocab.len(),
        data.train.len(),
        data.heldout.len(),
        data.n
    )?;
    let mut model = Encoder::new(cfg.encoder.clone(), &mut substream(cfg.seed, "init"))?;
    let mut metrics = MetricsWriter::new(BufWriter::new(File::create(dir.join(METRICS_FILE))?))?;
    let report = train(&mut model, &data, &tc, Some(&mut metrics))?;
    metrics.flush()?;
    save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
    let words: Vec<&str> = (0..data.vocab.len()).filter_map(|i| data.vocab.word(i)).collect();
    fs::write(dir.join(VOCAB_FILE), words.join("\n") + "\n")?;
    let summary = format!("method: {}\n{}", cfg.encoder.method, report.summary());
    fs::write(dir.join(REPORT_FILE), &summary)?;
    write!(out, "{summary}")?;
    writeln!(out, "outputs: {}", dir.display())?;
    Ok(Outcome::Success)
}

/// `all` or one method label.
pub fn parse_methods(arg: &str) -> Result<Vec<MethodSpec>> {
    if arg.trim() == "all" {
        return Ok(MethodKind::ALL.into_iter().map(MethodSpec::new).collect());
    }
    Ok(vec![arg.parse()?])
}

pub fn gradcheck(methods: &[MethodSpec], tol: f64, step: f64, seed: u64, out: &mut dyn Write) -> Result<Outcome> {
    if !(tol > 0.0) || !(step > 0.0) {
        return Err(config_error("--tol and --step must be positive"));
    }
    let mut failed = Vec::new();
    for &m in methods {
        let report = gradcheck_method(m, seed, step)?;
        writeln!(out, "{}", report.render(tol))?;
        if !report.passes(tol) {
            failed.push(m.label());
        }
    }
    if failed.is_empty() {
        writeln!(out, "gradient check passed for {} method(s) at tolerance {tol:e}", methods.len())?;
        Ok(Outcome::Success)
    } else {
        writeln!(out, "gradient check FAILED at tolerance {tol:e}: {}", failed.join(", "))?;
        Ok(Outcome::VerificationFailed)
    }
}

pub fn params(dims: ModelDims, shared: bool, out: &mut dyn Write) -> Result<Outcome> {
    dims.validate()?;
    let specs: Vec<MethodSpec> = table_methods(dims).into_iter().map(|m| m.with_sharing(shared)).collect();
    let rows = audit(&specs, dims)?;
    writeln!(
        out,
        "position parameters at m={} n={} d={} h={} ({})\n",
        dims.layers,
        dims.max_len,
        dims.d_model,
        dims.heads,
        if shared { "shared across heads" } else { "per head" }
    )?;
    write!(out, "{}", render_audit(&rows))?;
    if rows.iter().all(|r| r.matches()) {
        Ok(Outcome::Success)
    } else {
        writeln!(out, "enumerated counts disagree with the closed forms")?;
        Ok(Outcome::VerificationFailed)
    }
}

pub fn compare(cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    if cfg.compare_methods().is_empty() {
        return Err(config_error("compare.methods lists no method and compare.preset is not set"));
    }
    let dir = prepare_output(cfg)?;
    let report = compare_methods(&cfg.compare_config())?;
    report.write_csv(BufWriter::new(File::create(dir.join(COMPARE_FILE))?))?;
    report.write_long_csv(BufWriter::new(File::create(dir.join(COMPARE_LONG_FILE))?))?;
    let table = report.render_table();
    fs::write(dir.join(REPORT_FILE), &table)?;
    write!(out, "{table}")?;
    writeln!(out, "\n{} cells in {:.1}s; outputs: {}", report.cells.len(), report.wall_seconds, dir.display())?;
    let consistent = report.rows.iter().all(|r| r.position_params == r.enumerated_params);
    Ok(if consistent { Outcome::Success } else { Outcome::VerificationFailed })
}

pub fn probe(cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    let dir = prepare_output(cfg)?;
    let mut results = csv::Writer::from_path(dir.join(PROBE_FILE))?;
    results.write_record(["task", "method", "seed", "accuracy", "majority_baseline", "chance", "status", "train_size", "test_size"])?;
    for task in cfg.probe_tasks() {
        let mut model = match &cfg.checkpoint {
            Some(path) => {
                let model = load_checkpoint(path).with_context(|| format!("probe.checkpoint {}", path.display()))?;
                for d in model.config().diff(&cfg.encoder) {
                    log::info!("checkpoint differs from [encoder]: {d}");
                }
                model
            }
            None => Encoder::new(cfg.encoder.clone(), &mut substream(cfg.seed, "init"))?,
        };
        let splits = TaskSplits::generate(task, cfg.train_size, cfg.test_size, cfg.seed)?;
        let r = fine_tune(&mut model, &splits, &cfg.finetune_config())?;
        let mut metrics = MetricsWriter::new(BufWriter::new(File::create(dir.join(format!("{}_{METRICS_FILE}", task.kind)))?))?;
        for s in &r.steps {
            metrics.record(s)?;
        }
        metrics.flush()?;
        let accuracy = r.accuracy.map_or_else(|| "DIV".to_string(), |a| format!("{a:.4}"));
        results.write_record([
            task.kind.name().to_string(),
            model.config().method.label(),
            cfg.seed.to_string(),
            accuracy.clone(),
            format!("{:.4}", r.majority_baseline),
            format!("{:.4}", r.chance),
            r.status.to_string(),
            r.train_size.to_string(),
            r.test_size.to_string(),
        ])?;
        writeln!(
            out,
            "{}: accuracy {accuracy} (majority {:.4}, chance {:.4}), status {}{}",
            task.kind,
            r.majority_baseline,
            r.chance,
            r.status,
            r.divergence.as_deref().map(|d| format!(" ({d})")).unwrap_or_default()
        )?;
        if r.status == TrainStatus::Diverged {
            log::warn!("{} diverged", task.kind);
        }
    }
    results.flush()?;
    writeln!(out, "outputs: {}", dir.display())?;
    Ok(Outcome::Success)
}

pub fn audit_checkpoint(path: &Path, out: &mut dyn Write) -> Result<Outcome> {
    let model = load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = model.config();
    writeln!(out, "checkpoint {}\n", path.display())?;
    write!(out, "{cfg}")?;
    writeln!(out)?;
    let width = model.params().iter().map(|(_, n, _)| n.len()).max().unwrap_or(0);
    for (_, name, t) in model.params().iter() {
        writeln!(out, "{name:<width$}  {:>14}  {:?}", group_thousands(t.len() as u64), t.shape())?;
    }
    let stored = model.params().scalar_count();
    let core = core_param_count(cfg);
    let position = param_count(&cfg.method, cfg.dims())?;
    writeln!(out, "\ncore parameters      {:>14}", group_thousands(core))?;
    writeln!(out, "position parameters  {:>14}", group_thousands(position))?;
    writeln!(out, "expected total       {:>14}", group_thousands(core + position))?;
    writeln!(out, "stored total         {:>14}", group_thousands(stored))?;
    if stored == core + position {
        writeln!(out, "ok")?;
        Ok(Outcome::Success)
    } else {
        writeln!(out, "MISMATCH")?;
        Ok(Outcome::VerificationFailed)
    }
}
