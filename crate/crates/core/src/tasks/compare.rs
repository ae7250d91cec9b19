//! Method × task × seed comparison grid and its report formats.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::kernels::{enumerate_position_params, param_count, MethodSpec};
use crate::rng::substream;
use crate::training::{worker_pool, TrainStatus};

use super::finetune::{fine_tune, FineTuneConfig};
use super::probe::{ProbeTask, TaskSplits};

pub const REPORT_BANNER: &str = "Synthetic probe accuracies at desk scale; not comparable to published GLUE/SQuAD numbers.";

/// Named method lists mirroring the published comparison tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Position methods compared head to head.
    Methods,
    /// M4 with scaling factors 1, 2, 3, 4, 6, 9.
    Scaling,
    /// M4 with and without sharing across heads.
    Sharing,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "table2" | "methods" => Ok(Preset::Methods),
            "table3" | "scaling" => Ok(Preset::Scaling),
            "table4" | "sharing" => Ok(Preset::Sharing),
            other => Err(Error::Config(format!(
                "unknown preset `{other}`; valid presets: table2, table3, table4"
            ))),
        }
    }

    pub fn methods(self) -> Vec<MethodSpec> {
        match self {
            Preset::Methods => ["absolute", "shaw", "m2", "m4", "deberta", "m4m", "m4+reset", "abs+m4m"]
                .iter()
                .map(|s| s.parse().expect("preset labels parse"))
                .collect(),
            Preset::Scaling => [1, 2, 3, 4, 6, 9]
                .into_iter()
                .map(|f| MethodSpec::new(crate::kernels::MethodKind::M4).with_scaling(f))
                .collect(),
            Preset::Sharing => [true, false]
                .into_iter()
                .map(|s| MethodSpec::new(crate::kernels::MethodKind::M4).with_sharing(s))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    /// Encoder settings shared by every row; `method` is replaced per row.
    pub base: EncoderConfig,
    pub methods: Vec<MethodSpec>,
    pub tasks: Vec<ProbeTask>,
    pub seeds: Vec<u64>,
    pub finetune: FineTuneConfig,
    pub train_size: usize,
    pub test_size: usize,
    /// Concurrent grid cells.
    pub workers: usize,
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.tasks.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("compare needs at least one method, task and seed".into()));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("compare.train_size and compare.test_size must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        for m in &self.methods {
            let mut cfg = self.base.clone();
            cfg.method = *m;
            cfg.validate()?;
        }
        for t in &self.tasks {
            t.validate()?;
        }
        self.finetune.validate()
    }
}

/// One fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub status: TrainStatus,
}

/// Accuracy summary over seeds; diverged cells are counted, not averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub runs: usize,
    pub diverged: usize,
}

impl CellSummary {
    fn from_cells<'a>(cells: impl Iterator<Item = &'a CellResult>) -> Self {
        let mut values = Vec::new();
        let mut runs = 0;
        let mut diverged = 0;
        for c in cells {
            runs += 1;
            match c.accuracy {
                Some(a) => values.push(a),
                None => diverged += 1,
            }
        }
        let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        Self {
            mean,
            min: values.iter().copied().reduce(f64::min),
            max: values.iter().copied().reduce(f64::max),
            runs,
            diverged,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodRow {
    pub spec: MethodSpec,
    pub label: String,
    pub position_params: u64,
    pub enumerated_params: u64,
    /// One summary per configured task, in task order.
    pub tasks: Vec<CellSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub tasks: Vec<String>,
    pub rows: Vec<MethodRow>,
    pub cells: Vec<CellResult>,
    pub wall_seconds: f64,
}

fn run_cell(cfg: &CompareConfig, method: MethodSpec, task: &ProbeTask, seed: u64) -> Result<CellResult> {
    let mut enc_cfg = cfg.base.clone();
    enc_cfg.method = method;
    let mut model = Encoder::new(enc_cfg, &mut substream(seed, "init"))?;
    let splits = TaskSplits::generate(*task, cfg.train_size, cfg.test_size, seed)?;
    let ft = FineTuneConfig { seed, workers: 1, ..cfg.finetune.clone() };
    let r = fine_tune(&mut model, &splits, &ft)?;
    if let Some(why) = &r.divergence {
        log::info!("{} on {} seed {seed} diverged: {why}", method.label(), task.kind);
    }
    Ok(CellResult {
        method: method.label(),
        task: task.kind.name().to_string(),
        seed,
        accuracy: r.accuracy,
        status: r.status,
    })
}

/// Fine-tunes every (method, task, seed) cell from a seed-determined
/// initialisation, running up to `cfg.workers` cells concurrently.
pub fn compare_methods(cfg: &CompareConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut jobs = Vec::new();
    for (mi, m) in cfg.methods.iter().enumerate() {
        for (ti, t) in cfg.tasks.iter().enumerate() {
            for &s in &cfg.seeds {
                jobs.push((mi, ti, *m, *t, s));
            }
        }
    }
    let pool = worker_pool(cfg.workers)?;
    let results: Vec<Result<CellResult>> =
        pool.install(|| jobs.par_iter().map(|&(_, _, m, t, s)| run_cell(cfg, m, &t, s)).collect());
    let mut cells = Vec::with_capacity(results.len());
    for r in results {
        cells.push(r?);
    }
    let dims = cfg.base.dims();
    let mut rows = Vec::with_capacity(cfg.methods.len());
    for (mi, m) in cfg.methods.iter().enumerate() {
        let tasks = (0..cfg.tasks.len())
            .map(|ti| {
                CellSummary::from_cells(
                    jobs.iter().zip(&cells).filter(|((jm, jt, ..), _)| *jm == mi && *jt == ti).map(|(_, c)| c),
                )
            })
            .collect();
        rows.push(MethodRow {
            spec: *m,
            label: m.label(),
            position_params: param_count(m, dims)?,
            enumerated_params: enumerate_position_params(m, dims)?,
            tasks,
        });
    }
    Ok(ComparisonReport {
        tasks: cfg.tasks.iter().map(|t| t.kind.name().to_string()).collect(),
        rows,
        cells,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "DIV".to_string(), |x| format!("{x:.4}"))
}

impl ComparisonReport {
    /// One row per method: position parameters, then mean/min/max and the
    /// diverged-run count for each task.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["method".to_string(), "position_params".to_string()];
        for t in &self.tasks {
            for s in ["mean", "min", "max", "diverged"] {
                header.push(format!("{t}_{s}"));
            }
        }
        out.write_record(&header).map_err(crate::training::train::csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.label.clone(), row.position_params.to_string()];
            for s in &row.tasks {
                rec.extend([fmt_metric(s.mean), fmt_metric(s.min), fmt_metric(s.max), s.diverged.to_string()]);
            }
            out.write_record(&rec).map_err(crate::training::train::csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Plot-ready long format: one line per (method, task, seed).
    pub fn write_long_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "task", "seed", "metric", "value"]).map_err(crate::training::train::csv_err)?;
        for c in &self.cells {
            out.write_record([c.method.clone(), c.task.clone(), c.seed.to_string(), "accuracy".into(), fmt_metric(c.accuracy)])
                .map_err(crate::training::train::csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Aligned text table headed by the synthetic-probe banner. Cells read
    /// `mean [min, max]`; a task whose every run diverged reads `DIV`.
    pub fn render_table(&self) -> String {
        let mut header = vec!["method".to_string(), "pos params".to_string()];
        header.extend(self.tasks.iter().cloned());
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![row.label.clone(), crate::kernels::group_thousands(row.position_params)];
            for s in &row.tasks {
                let mut cell = match (s.mean, s.min, s.max) {
                    (Some(m), Some(lo), Some(hi)) if s.runs > 1 => format!("{m:.3} [{lo:.3}, {hi:.3}]"),
                    (Some(m), ..) => format!("{m:.3}"),
                    _ => "DIV".to_string(),
                };
                if s.diverged > 0 && s.mean.is_some() {
                    cell.push_str(&format!(" ({} DIV)", s.diverged));
                }
                line.push(cell);
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{REPORT_BANNER}\n\n");
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        let mismatched: Vec<&str> = self
            .rows
            .iter()
            .filter(|r| r.position_params != r.enumerated_params)
            .map(|r| r.label.as_str())
            .collect();
        if !mismatched.is_empty() {
            let _ = writeln!(out, "\nparameter count mismatch: {}", mismatched.join(", "));
        }
        out
    }
}
