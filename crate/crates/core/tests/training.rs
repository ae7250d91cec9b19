use poslab::autodiff::{Tape, Tensor};
use poslab::encoder::{load_checkpoint, save_checkpoint, Encoder, EncoderConfig};
use poslab::kernels::{MethodKind, MethodSpec};
use poslab::params::{Gradients, ParameterSet};
use poslab::rng::substream;
use poslab::training::{
    pack_sequences, train, walk_corpus, AdamState, Corpus, MaskingPolicy, MetricsWriter, PackedBatch, PackedRow,
    PretrainData, TrainConfig, TrainStatus, Vocab, WalkCorpusSpec, CLS, MASK, METRICS_HEADER,
};
use rand::Rng as _;

fn desk_config(kind: MethodKind, max_len: usize, vocab: usize) -> EncoderConfig {
    let mut method = MethodSpec::new(kind);
    if kind.uses_vector_table() {
        method = method.with_clip(8);
    }
    EncoderConfig {
        layers: 2,
        heads: 2,
        d_model: 32,
        d_ff: 64,
        max_len,
        vocab_size: vocab,
        method,
        dropout: 0.0,
        ..EncoderConfig::default()
    }
}

fn random_sentences(count: usize, max_len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = substream(seed, "sentences");
    (0..count)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(4..50)).collect()
        })
        .collect()
}

#[test]
fn packing_conserves_tokens() {
    let sentences = random_sentences(1000, 30, 1);
    let n = 20;
    let packed = pack_sequences(&sentences, n).unwrap();
    let total: usize = sentences.iter().map(Vec::len).sum();
    let expected_cut: usize = sentences.iter().map(|s| s.len().saturating_sub(n - 1)).sum();
    let expected_long = sentences.iter().filter(|s| s.len() > n - 1).count();
    let packed_tokens: usize = packed.rows.iter().map(PackedRow::content_len).sum();
    assert_eq!(packed.truncated_tokens, expected_cut);
    assert_eq!(packed.truncated_sentences, expected_long);
    assert_eq!(packed_tokens, total - expected_cut);
    for (i, row) in packed.rows.iter().enumerate() {
        assert!(row.tokens.len() <= n);
        assert_eq!(row.tokens[0], CLS);
        let mut j = 1;
        for &len in &row.sentence_lengths {
            assert_eq!(&row.sentence_positions[j..j + len], (1..=len).collect::<Vec<_>>().as_slice());
            j += len;
        }
        if let Some(next) = packed.rows.get(i + 1) {
            let first = next.sentence_lengths[0];
            assert!(row.content_len() + first > n - 1, "row {i} could have held the next sentence");
        }
    }
}

fn batch_of(rows: usize, len: usize, seed: u64) -> PackedBatch {
    let sentences = random_sentences(rows, len, seed);
    let fixed: Vec<Vec<usize>> = sentences.iter().map(|s| s.iter().copied().chain(std::iter::repeat_n(7, len - s.len())).collect()).collect();
    let packed = pack_sequences(&fixed, len + 1).unwrap();
    PackedBatch::from_rows(&packed.rows, len + 1).unwrap()
}

#[test]
fn mask_rate_and_split_match_policy() {
    let mut batch = batch_of(2000, 50, 2);
    let original = batch.tokens.clone();
    let stats = MaskingPolicy::default().apply(&mut batch, 50, &mut substream(3, "mask")).unwrap();
    assert_eq!(stats.maskable, 100_000);
    let rate = stats.targets as f64 / stats.maskable as f64;
    assert!((rate - 0.15).abs() <= 0.01, "mask rate {rate}");
    let mut masked = 0;
    let mut changed = 0;
    for &(r, j, orig) in &batch.targets {
        assert_eq!(original[r][j], orig);
        if batch.tokens[r][j] == MASK {
            masked += 1;
        } else if batch.tokens[r][j] != orig {
            changed += 1;
        }
    }
    let t = batch.targets.len() as f64;
    assert!((masked as f64 / t - 0.8).abs() < 0.02);
    let random_share = changed as f64 / t;
    assert!(random_share > 0.07 && random_share < 0.11, "{random_share}");
    for r in 0..batch.len() {
        assert!(!batch.row_targets(r).is_empty());
    }
}

#[test]
fn zero_fraction_masks_nothing_and_loss_rejects() {
    let mut batch = batch_of(10, 12, 4);
    let before = batch.clone();
    let policy = MaskingPolicy { fraction: 0.0, ..MaskingPolicy::default() };
    let stats = policy.apply(&mut batch, 50, &mut substream(1, "m")).unwrap();
    assert_eq!(stats.targets, 0);
    assert_eq!(batch, before);
    let model = Encoder::new(desk_config(MethodKind::None, 16, 50), &mut substream(1, "init")).unwrap();
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    assert!(model.mlm_loss(&mut tape, &vars, &batch.input(0), &batch.row_targets(0), None).is_err());
}

#[test]
fn masking_is_reproducible_and_skips_special_rows() {
    let run = |seed| {
        let mut b = batch_of(50, 20, 5);
        MaskingPolicy::default().apply(&mut b, 50, &mut substream(seed, "m")).unwrap();
        b
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9).targets, run(10).targets);
    let rows = vec![PackedRow { tokens: vec![CLS], sentence_positions: vec![1], sentence_lengths: vec![] }];
    let mut b = PackedBatch::from_rows(&rows, 4).unwrap();
    let stats = MaskingPolicy::default().apply(&mut b, 50, &mut substream(1, "m")).unwrap();
    assert_eq!(stats.skipped_rows, 1);
    assert!(b.targets.is_empty());
}

fn single_param(value: f64) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.add("w", Tensor::scalar(value)).unwrap();
    p
}

fn grads_for(params: &ParameterSet, g: f64) -> Gradients {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let id = params.id("w").unwrap();
    let s = tape.sum(vars.var(id));
    let scaled = tape.scale(s, g);
    tape.backward(scaled).unwrap();
    vars.gradients(&tape)
}

#[test]
fn adam_matches_hand_formula() {
    let (w0, g, lr) = (0.7, -2.5, 0.01);
    let mut params = single_param(w0);
    let mut adam = AdamState::new(&params);
    let first = grads_for(&params, g);
    adam.update(&mut params, &first, lr).unwrap();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let m = (1.0 - b1) * g;
    let v = (1.0 - b2) * g * g;
    let want = w0 - lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps);
    assert!((params.get(params.id("w").unwrap()).item().unwrap() - want).abs() < 1e-15);
    assert!((want - (w0 - lr * g / (g.abs() + eps))).abs() < 1e-12);

    let g2 = 1.5;
    let second = grads_for(&params, g2);
    adam.update(&mut params, &second, lr).unwrap();
    let m2 = b1 * m + (1.0 - b1) * g2;
    let v2 = b2 * v + (1.0 - b2) * g2 * g2;
    let want2 = want - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
    assert!((params.get(params.id("w").unwrap()).item().unwrap() - want2).abs() < 1e-15);
}

#[test]
fn adam_zero_gradients_leave_parameters_and_decay_moments() {
    let mut params = single_param(0.3);
    let mut adam = AdamState::new(&params);
    let g = grads_for(&params, 2.0);
    adam.update(&mut params, &g, 0.1).unwrap();
    let after_one = params.clone();
    let (m1, v1) = (adam.m[0][0], adam.v[0][0]);
    let zero = Gradients::zeros_like(&params);
    let mut stepped = params.clone();
    let mut frozen = AdamState::new(&params);
    frozen.update(&mut stepped, &zero, 0.1).unwrap();
    assert_eq!(stepped, after_one);
    adam.update(&mut params, &zero, 0.1).unwrap();
    assert_eq!(adam.m[0][0], 0.9 * m1);
    assert_eq!(adam.v[0][0], 0.999 * v1);
    assert_eq!(adam.step, 2);

    let mut nan = single_param(0.0);
    let bad = grads_for(&nan, f64::NAN);
    let mut state = AdamState::new(&nan);
    assert!(matches!(state.update(&mut nan, &bad, 0.1), Err(poslab::Error::Divergence(_))));
    assert_eq!(state.step, 0);
}

fn walk_data(sentences: usize, n: usize, seed: u64, heldout: f64) -> PretrainData {
    let spec = WalkCorpusSpec { sentences, ..WalkCorpusSpec::default() };
    let corpus = Corpus::parse(&walk_corpus(&spec, seed).unwrap());
    PretrainData::prepare(&corpus, 64, n, heldout, seed).unwrap()
}

#[test]
fn initial_loss_is_near_log_vocab_for_every_method() {
    let data = walk_data(200, 32, 1, 0.0);
    for kind in MethodKind::ALL {
        let cfg = desk_config(kind, 32, 64);
        let mut model = Encoder::new(cfg, &mut substream(2, "init")).unwrap();
        let tc = TrainConfig { steps: 1, batch_size: 8, ..TrainConfig::default() };
        let report = train::<Vec<u8>>(&mut model, &data, &tc, None).unwrap();
        let loss = report.steps[0].loss;
        let ln_v = (64f64).ln();
        assert!((loss - ln_v).abs() <= 0.1 * ln_v, "{kind}: {loss} vs {ln_v}");
    }
}

#[test]
fn every_position_aware_method_overfits_a_small_corpus() {
    let data = walk_data(50, 32, 3, 0.0);
    let separable = |k: &MethodKind| !matches!(k, MethodKind::None | MethodKind::AbsoluteRealSentence);
    for kind in MethodKind::ALL.into_iter().filter(separable) {
        let mut model = Encoder::new(desk_config(kind, 32, 64), &mut substream(4, "init")).unwrap();
        let tc = TrainConfig {
            steps: 2000,
            batch_size: 8,
            peak_lr: 5e-3,
            target_loss: Some(0.5),
            ..TrainConfig::default()
        };
        let report = train::<Vec<u8>>(&mut model, &data, &tc, None).unwrap();
        assert_eq!(report.status, TrainStatus::Converged, "{kind}: final {:?}", report.final_loss());
    }
}

#[test]
fn indistinguishable_mask_slots_share_one_prediction() {
    let model = Encoder::new(desk_config(MethodKind::None, 16, 64), &mut substream(4, "init")).unwrap();
    let input = poslab::encoder::SequenceInput::new(vec![CLS, 9, MASK, 14, 20, MASK, 31, 9]);
    let logits = model.forward(&input).unwrap();
    assert_eq!(logits.row(2), logits.row(5));

    let model = Encoder::new(desk_config(MethodKind::AbsoluteRealSentence, 16, 64), &mut substream(4, "init")).unwrap();
    let input = poslab::encoder::SequenceInput::new(vec![CLS, 9, MASK, 14, 20, MASK, 31])
        .with_sentence_positions(vec![1, 1, 2, 3, 1, 2, 3]);
    let logits = model.forward(&input).unwrap();
    assert_eq!(logits.row(2), logits.row(5));
}

#[test]
fn relative_positions_beat_no_positions_on_held_out_loss() {
    let data = walk_data(600, 32, 5, 0.1);
    let run = |kind| {
        let mut model = Encoder::new(desk_config(kind, 32, 64), &mut substream(6, "init")).unwrap();
        let tc = TrainConfig { steps: 600, batch_size: 8, peak_lr: 3e-3, eval_every: 200, seed: 6, ..TrainConfig::default() };
        let report = train::<Vec<u8>>(&mut model, &data, &tc, None).unwrap();
        assert_eq!(report.status, TrainStatus::Completed);
        report.heldout.last().unwrap().1
    };
    let none = run(MethodKind::None);
    let shaw = run(MethodKind::Shaw);
    eprintln!("held-out loss none {none:.4} shaw {shaw:.4}");
    assert!(shaw < none - 0.5, "shaw {shaw} vs none {none}");
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let data = walk_data(100, 24, 7, 0.1);
    let run = |workers| {
        let mut cfg = desk_config(MethodKind::M4, 24, 64);
        cfg.dropout = 0.1;
        let mut model = Encoder::new(cfg, &mut substream(8, "init")).unwrap();
        let tc = TrainConfig { steps: 100, batch_size: 4, eval_every: 50, seed: 8, workers, ..TrainConfig::default() };
        let mut csv = Vec::new();
        let report = {
            let mut w = MetricsWriter::new(&mut csv).unwrap();
            train(&mut model, &data, &tc, Some(&mut w)).unwrap()
        };
        (model, report, csv)
    };
    let (a, ra, csv_a) = run(1);
    let (b, rb, csv_b) = run(3);
    assert_eq!(a.params(), b.params());
    assert_eq!(ra.steps, rb.steps);
    assert_eq!(csv_a, csv_b);
    let text = String::from_utf8(csv_a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.next(), Some("step,loss,grad_norm,lr,finite_flag"));
    assert_eq!(lines.count(), 100);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&a, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let input = data.train[0].to_input();
    assert_eq!(a.forward(&input).unwrap(), loaded.forward(&input).unwrap());
}

#[test]
fn vocabulary_from_corpus_respects_cap() {
    let corpus = Corpus::parse(&walk_corpus(&WalkCorpusSpec::default(), 9).unwrap());
    let v: Vocab = corpus.build_vocab(20).unwrap();
    assert_eq!(v.len(), 20);
    let data = PretrainData::prepare(&corpus, 20, 16, 0.2, 9).unwrap();
    assert!(!data.heldout.is_empty());
    let all: usize = data.train.iter().chain(&data.heldout).map(PackedRow::content_len).sum();
    assert_eq!(all, corpus.token_count());
}
