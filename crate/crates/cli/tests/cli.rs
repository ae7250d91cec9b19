use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use poslab_cli::{RunConfig, CONFIG_FILE, EXIT_OK, EXIT_USAGE, EXIT_VERIFICATION};

fn poslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poslab")).args(args).output().unwrap()
}

fn code(o: &Output) -> u8 {
    o.status.code().unwrap() as u8
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write_corpus(dir: &Path) -> String {
    let path = dir.join("corpus.txt");
    let corpus = poslab::training::walk_corpus(&poslab::training::WalkCorpusSpec::default(), 2).unwrap();
    fs::write(&path, corpus).unwrap();
    path.display().to_string()
}

const TINY: &[&str] = &["--set", "encoder.max_len=32", "--set", "encoder.vocab_size=64", "--set", "train.batch_size=4"];

#[test]
fn missing_corpus_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run").display().to_string();
    let o = poslab(&["pretrain", "-o", &out]);
    assert_eq!(code(&o), EXIT_USAGE);
    assert!(text(&o.stderr).contains("train.corpus"), "{}", text(&o.stderr));
    let o = poslab(&["pretrain", "-o", &out, "--corpus", "/no/such/file.txt"]);
    assert_eq!(code(&o), EXIT_USAGE);
    assert!(text(&o.stderr).contains("train.corpus"));
}

#[test]
fn smoke_pretrain_writes_ten_rows_config_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["pretrain", "--corpus", &corpus, "--steps", "10", "--method", "tupe+reset", "-o"];
    let out_str = out.display().to_string();
    args.push(&out_str);
    args.extend_from_slice(TINY);
    let o = poslab(&args);
    assert_eq!(code(&o), EXIT_OK, "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("status: completed"));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], poslab::training::METRICS_HEADER);
    assert_eq!(lines[1], "step,loss,grad_norm,lr,finite_flag");
    assert_eq!(lines.len() - 2, 10);

    let resolved = RunConfig::read(&out.join(CONFIG_FILE)).unwrap();
    assert_eq!(resolved.train.steps, 10);
    assert_eq!(resolved.encoder.method.label(), "tupe+reset");
    assert_eq!(fs::read_to_string(out.join(CONFIG_FILE)).unwrap(), resolved.to_text());

    let audit = poslab(&["audit-checkpoint", &out.join("checkpoint.bin").display().to_string()]);
    assert_eq!(code(&audit), EXIT_OK);
    assert!(text(&audit.stdout).trim_end().ends_with("ok"));
}

#[test]
fn divergence_is_recorded_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let out = dir.path().join("run").display().to_string();
    let mut args = vec!["pretrain", "--corpus", &corpus, "--steps", "30", "--method", "m4m", "-o", &out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "train.peak_lr=1e60", "--set", "train.max_grad_norm=0", "--set", "train.warmup_fraction=0"]);
    let o = poslab(&args);
    assert_eq!(code(&o), EXIT_OK, "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("status: diverged"), "{}", text(&o.stdout));
}

#[test]
fn unknown_method_and_keys_are_usage_errors() {
    let o = poslab(&["gradcheck", "--method", "rope"]);
    assert_eq!(code(&o), EXIT_USAGE);
    assert!(text(&o.stderr).contains("valid kinds"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, "[train]\nsteps = 5\nlearning_rate = 1\n").unwrap();
    let o = poslab(&["compare", "-c", &cfg.display().to_string()]);
    assert_eq!(code(&o), EXIT_USAGE);
    assert!(text(&o.stderr).contains("train.learning_rate"));
    assert_eq!(code(&poslab(&["params", "--d", "10", "--h", "4"])), EXIT_USAGE);
    assert_eq!(code(&poslab(&["frobnicate"])), EXIT_USAGE);
}

#[test]
fn gradcheck_gate_follows_the_tolerance() {
    let o = poslab(&["gradcheck", "--method", "shaw"]);
    assert_eq!(code(&o), EXIT_OK);
    assert!(!text(&o.stdout).contains("FAIL"));
    let o = poslab(&["gradcheck", "--method", "shaw", "--tol", "1e-9"]);
    assert_eq!(code(&o), EXIT_VERIFICATION);
    assert!(text(&o.stdout).contains("FAIL"));
}

#[test]
fn minimal_params_evaluate_closed_forms() {
    let o = poslab(&["params", "--m", "1", "--n", "2", "--d", "2", "--h", "1"]);
    assert_eq!(code(&o), EXIT_OK);
    let out = text(&o.stdout);
    let count = |method: &str| -> String {
        let row = out.lines().find(|l| l.split_whitespace().next().is_some_and(|m| m.split(':').next() == Some(method))).unwrap();
        row.split_whitespace().rev().nth(1).unwrap().to_string()
    };
    assert_eq!(count("shaw"), "6");
    assert_eq!(count("raffel"), "3");
    assert_eq!(count("absolute_learned"), "4");
    assert_eq!(count("deberta"), "10");
    assert_eq!(count("tupe"), "11");
}

fn tiny_compare(dir: &Path, extra: &str) -> String {
    let cfg = dir.join("grid.ini");
    let body = format!(
        "seed = 5\n[encoder]\nlayers = 1\nheads = 2\nd_model = 16\nd_ff = 32\nmax_len = 12\nvocab_size = 32\n\
         [finetune]\nsteps = 4\nbatch_size = 4\n{extra}[tasks]\ntrain_size = 32\ntest_size = 16\n\
         [compare]\nmethods = shaw, m4m\nseeds = 1, 2\n"
    );
    fs::write(&cfg, body).unwrap();
    cfg.display().to_string()
}

#[test]
fn compare_writes_grid_files_and_renders_div() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_compare(dir.path(), "");
    let out = dir.path().join("grid");
    let o = poslab(&["compare", "-c", &cfg, "-o", &out.display().to_string()]);
    assert_eq!(code(&o), EXIT_OK, "{}", text(&o.stderr));
    let long = fs::read_to_string(out.join("compare_long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 4);
    assert!(out.join(CONFIG_FILE).is_file() && out.join("report.txt").is_file());

    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_compare(dir.path(), "peak_lr = 1e60\nmax_grad_norm = 0\nwarmup_fraction = 0\n");
    let out = dir.path().join("grid");
    let o = poslab(&["compare", "-c", &cfg, "-o", &out.display().to_string()]);
    assert_eq!(code(&o), EXIT_OK, "{}", text(&o.stderr));
    let table = text(&o.stdout);
    let m4m = table.lines().find(|l| l.starts_with("m4m")).unwrap();
    assert!(m4m.trim_end().ends_with("DIV"), "{table}");
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("m4m,") && l.ends_with("DIV,DIV,DIV,2")), "{csv}");
}

#[test]
fn probe_runs_from_a_pretrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let pre = dir.path().join("pre").display().to_string();
    let mut args = vec!["pretrain", "--corpus", &corpus, "--steps", "3", "--method", "m4", "-o", &pre];
    args.extend_from_slice(TINY);
    assert_eq!(code(&poslab(&args)), EXIT_OK);
    let cfg = tiny_compare(dir.path(), "");
    let out = dir.path().join("probe");
    let ckpt = Path::new(&pre).join("checkpoint.bin").display().to_string();
    let o = poslab(&["probe", "-c", &cfg, "-o", &out.display().to_string(), "--checkpoint", &ckpt]);
    assert_eq!(code(&o), EXIT_OK, "{}", text(&o.stderr));
    let probe = fs::read_to_string(out.join("probe.csv")).unwrap();
    assert!(probe.lines().nth(1).unwrap().starts_with("offset_copy,m4,5,"), "{probe}");
    assert_eq!(RunConfig::read(&out.join(CONFIG_FILE)).unwrap().checkpoint.unwrap().display().to_string(), ckpt);
}
