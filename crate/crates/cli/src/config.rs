//! Run configuration: flat `key = value` text grouped under `[section]`
//! headers. Unknown sections and keys are rejected with their line number.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use poslab::encoder::EncoderConfig;
use poslab::kernels::MethodSpec;
use poslab::tasks::{CompareConfig, FineTuneConfig, Preset, ProbeTask, TaskKind};
use poslab::training::TrainConfig;
use poslab::{Error, Result};

pub const CONFIG_FILE: &str = "config.ini";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub corpus: Option<PathBuf>,
    pub train: TrainConfig,
    pub finetune: FineTuneConfig,
    pub tasks: Vec<TaskKind>,
    /// Shape shared by every configured task; `kind` is replaced per task.
    pub task: ProbeTask,
    pub train_size: usize,
    pub test_size: usize,
    pub preset: Option<Preset>,
    pub methods: Vec<MethodSpec>,
    pub seeds: Vec<u64>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            output_dir: None,
            encoder: EncoderConfig::default(),
            corpus: None,
            train: TrainConfig::default(),
            finetune: FineTuneConfig::default(),
            tasks: vec![TaskKind::OffsetCopy],
            task: ProbeTask::new(TaskKind::OffsetCopy),
            train_size: 8192,
            test_size: 1000,
            preset: None,
            methods: Vec::new(),
            seeds: vec![0],
            checkpoint: None,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| cfg_err(format!("{key}: cannot parse {v:?}")))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn optional_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Methods => "table2",
        Preset::Scaling => "table3",
        Preset::Sharing => "table4",
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key. `key` is `section.name`, or a bare name for the
    /// top-level keys `seed`, `workers` and `output_dir`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, name) = key.split_once('.').unwrap_or(("", key));
        let v = value.trim();
        match (section, name) {
            ("", "seed") => self.seed = parse(key, v)?,
            ("", "workers") => self.workers = parse(key, v)?,
            ("", "output_dir") => self.output_dir = optional_path(v),
            ("encoder", name) => self.encoder.set(name, v).map_err(|e| match e {
                Error::Config(m) => cfg_err(format!("encoder.{name}: {m}")),
                other => other,
            })?,
            ("train", "corpus") => self.corpus = optional_path(v),
            ("train", "steps") => self.train.steps = parse(key, v)?,
            ("train", "batch_size") => self.train.batch_size = parse(key, v)?,
            ("train", "peak_lr") => self.train.peak_lr = parse(key, v)?,
            ("train", "warmup_fraction") => self.train.warmup_fraction = parse(key, v)?,
            ("train", "max_grad_norm") => self.train.max_grad_norm = parse(key, v)?,
            ("train", "eval_every") => self.train.eval_every = parse(key, v)?,
            ("train", "heldout_fraction") => self.train.heldout_fraction = parse(key, v)?,
            ("train", "mask_fraction") => self.train.masking.fraction = parse(key, v)?,
            ("train", "mask_replace_mask") => self.train.masking.replace_mask = parse(key, v)?,
            ("train", "mask_replace_random") => self.train.masking.replace_random = parse(key, v)?,
            ("train", "mask_keep") => self.train.masking.keep = parse(key, v)?,
            ("train", "target_loss") => {
                self.train.target_loss = if v.is_empty() || v == "none" { None } else { Some(parse(key, v)?) }
            }
            ("finetune", "steps") => self.finetune.steps = parse(key, v)?,
            ("finetune", "batch_size") => self.finetune.batch_size = parse(key, v)?,
            ("finetune", "peak_lr") => self.finetune.peak_lr = parse(key, v)?,
            ("finetune", "warmup_fraction") => self.finetune.warmup_fraction = parse(key, v)?,
            ("finetune", "max_grad_norm") => self.finetune.max_grad_norm = parse(key, v)?,
            ("tasks", "names") => self.tasks = list(v).map(str::parse).collect::<Result<_>>()?,
            ("tasks", "length") => self.task.length = parse(key, v)?,
            ("tasks", "alphabet") => self.task.alphabet = parse(key, v)?,
            ("tasks", "offset") => self.task.offset = parse(key, v)?,
            ("tasks", "max_distance") => self.task.max_distance = parse(key, v)?,
            ("tasks", "groups") => self.task.groups = parse(key, v)?,
            ("tasks", "train_size") => self.train_size = parse(key, v)?,
            ("tasks", "test_size") => self.test_size = parse(key, v)?,
            ("compare", "preset") => {
                self.preset = if v.is_empty() || v == "none" { None } else { Some(Preset::parse(v)?) }
            }
            ("compare", "methods") => self.methods = list(v).map(str::parse).collect::<Result<_>>()?,
            ("compare", "seeds") => self.seeds = list(v).map(|s| parse(key, s)).collect::<Result<_>>()?,
            ("probe", "checkpoint") => self.checkpoint = optional_path(v),
            _ => return Err(cfg_err(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses the text form; later keys may not repeat earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = i + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(format!("line {at}: unterminated section header")))?
                    .trim();
                if !["encoder", "train", "finetune", "tasks", "compare", "probe"].contains(&name) {
                    return Err(cfg_err(format!("line {at}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {at}: expected `key = value`")))?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            if !seen.insert(key.clone()) {
                return Err(cfg_err(format!("line {at}: `{key}` set twice")));
            }
            cfg.set(&key, v).map_err(|e| match e {
                Error::Config(m) => cfg_err(format!("line {at}: {m}")),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Methods compared by `compare`: the preset's rows when one is set.
    pub fn compare_methods(&self) -> Vec<MethodSpec> {
        self.preset.map_or_else(|| self.methods.clone(), Preset::methods)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, workers: self.workers, ..self.train.clone() }
    }

    pub fn finetune_config(&self) -> FineTuneConfig {
        FineTuneConfig { seed: self.seed, workers: self.workers, ..self.finetune.clone() }
    }

    pub fn probe_tasks(&self) -> Vec<ProbeTask> {
        self.tasks.iter().map(|&kind| ProbeTask { kind, ..self.task }).collect()
    }

    pub fn compare_config(&self) -> CompareConfig {
        CompareConfig {
            base: self.encoder.clone(),
            methods: self.compare_methods(),
            tasks: self.probe_tasks(),
            seeds: self.seeds.clone(),
            finetune: self.finetune_config(),
            train_size: self.train_size,
            test_size: self.test_size,
            workers: self.workers,
        }
    }

    /// Checks everything every command relies on.
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(cfg_err("workers must be >= 1"));
        }
        self.encoder.validate()?;
        self.train_config().validate()?;
        self.finetune_config().validate()?;
        if self.tasks.is_empty() {
            return Err(cfg_err("tasks.names lists no task"));
        }
        for t in self.probe_tasks() {
            t.validate()?;
            if t.length > self.encoder.max_len || t.vocab_size() > self.encoder.vocab_size {
                return Err(cfg_err(format!(
                    "{}: length {} and {} token ids must fit encoder.max_len {} and encoder.vocab_size {}",
                    t.kind,
                    t.length,
                    t.vocab_size(),
                    self.encoder.max_len,
                    self.encoder.vocab_size
                )));
            }
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(cfg_err("tasks.train_size and tasks.test_size must be >= 1"));
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::parse`]; every key is written.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let f = &self.finetune;
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "workers = {}", self.workers);
        let _ = writeln!(out, "output_dir = {}", path_text(&self.output_dir));
        out.push_str("\n[encoder]\n");
        for (k, v) in self.encoder.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("\n[train]\n");
        let train_pairs: [(&str, String); 13] = [
            ("corpus", path_text(&self.corpus)),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("peak_lr", format!("{:?}", t.peak_lr)),
            ("warmup_fraction", format!("{:?}", t.warmup_fraction)),
            ("max_grad_norm", format!("{:?}", t.max_grad_norm)),
            ("eval_every", t.eval_every.to_string()),
            ("heldout_fraction", format!("{:?}", t.heldout_fraction)),
            ("mask_fraction", format!("{:?}", t.masking.fraction)),
            ("mask_replace_mask", format!("{:?}", t.masking.replace_mask)),
            ("mask_replace_random", format!("{:?}", t.masking.replace_random)),
            ("mask_keep", format!("{:?}", t.masking.keep)),
            ("target_loss", t.target_loss.map_or_else(|| "none".to_string(), |v| format!("{v:?}"))),
        ];
        for (k, v) in train_pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("\n[finetune]\n");
        let _ = writeln!(out, "steps = {}", f.steps);
        let _ = writeln!(out, "batch_size = {}", f.batch_size);
        let _ = writeln!(out, "peak_lr = {:?}", f.peak_lr);
        let _ = writeln!(out, "warmup_fraction = {:?}", f.warmup_fraction);
        let _ = writeln!(out, "max_grad_norm = {:?}", f.max_grad_norm);
        out.push_str("\n[tasks]\n");
        let _ = writeln!(out, "names = {}", join(&self.tasks));
        let _ = writeln!(out, "length = {}", self.task.length);
        let _ = writeln!(out, "alphabet = {}", self.task.alphabet);
        let _ = writeln!(out, "offset = {}", self.task.offset);
        let _ = writeln!(out, "max_distance = {}", self.task.max_distance);
        let _ = writeln!(out, "groups = {}", self.task.groups);
        let _ = writeln!(out, "train_size = {}", self.train_size);
        let _ = writeln!(out, "test_size = {}", self.test_size);
        out.push_str("\n[compare]\n");
        let _ = writeln!(out, "preset = {}", self.preset.map_or("none", preset_name));
        let _ = writeln!(out, "methods = {}", join(&self.methods));
        let _ = writeln!(out, "seeds = {}", join(&self.seeds));
        out.push_str("\n[probe]\n");
        let _ = writeln!(out, "checkpoint = {}", path_text(&self.checkpoint));
        out
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_into(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides([
            "seed=7",
            "encoder.method=m4+reset:f=3",
            "train.corpus=data/c.txt",
            "train.target_loss=0.25",
            "tasks.names=offset_copy, cls_summary",
            "compare.preset=table3",
            "compare.seeds=1,2",
        ])
        .unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.compare_methods().len(), 6);
    }

    #[test]
    fn unknown_keys_and_sections_name_the_line() {
        let err = RunConfig::parse("seed = 1\n[train]\nstepz = 3\n").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("train.stepz"), "{err}");
        let err = RunConfig::parse("[trian]\n").unwrap_err().to_string();
        assert!(err.contains("[trian]"), "{err}");
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse("[encoder]\nheads\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# run\n\n; note\nseed = 3\n[encoder]\nmethod = shaw\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.encoder.method.label(), "shaw");
    }

    #[test]
    fn validation_checks_task_fit() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.set("encoder.max_len", "8").unwrap();
        assert!(cfg.validate().is_err());
    }
}
