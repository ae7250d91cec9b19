use poslab::autodiff::Tape;
use poslab::encoder::{
    core_param_count, embed_input, read_checkpoint, read_checkpoint_expecting, write_checkpoint, EmbeddingVars,
    Encoder, EncoderConfig, SequenceInput,
};
use poslab::kernels::{param_count, MethodKind, MethodSpec};
use poslab::rng::substream;
use poslab::Error;

fn config(spec: MethodSpec) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        max_len: 16,
        vocab_size: 32,
        method: spec,
        dropout: 0.0,
        init_std: 0.2,
        ..EncoderConfig::default()
    }
}

fn build(spec: MethodSpec, seed: u64) -> Encoder {
    let mut rng = substream(seed, "init");
    let mut model = Encoder::new(config(spec), &mut rng).unwrap();
    // Push the position parameters away from their small init so that
    // position effects are far above rounding.
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        if name.contains(".pos.") || name == "embed.position" {
            let t = model.params_mut().get_mut(id);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.3 * ((i as f64 * 0.7 + name.len() as f64).sin());
            }
        }
    }
    model
}

fn specs() -> Vec<MethodSpec> {
    let mut v: Vec<MethodSpec> = MethodKind::ALL.iter().map(|&k| MethodSpec::new(k).with_clip(4)).collect();
    v.push(MethodSpec::new(MethodKind::M4).with_clip(4).with_reset(true));
    v.push(MethodSpec::new(MethodKind::M4M).with_clip(4).with_absolute(true));
    v.push(MethodSpec::new(MethodKind::Shaw).with_clip(4).with_sharing(false));
    v
}

fn seq(tokens: &[usize]) -> SequenceInput {
    SequenceInput::new(tokens.to_vec()).with_sentence_positions((1..=tokens.len()).collect())
}

#[test]
fn output_shape_for_every_kind() {
    for spec in specs() {
        let model = build(spec, 1);
        let logits = model.forward(&seq(&[1, 5, 9, 2, 7])).unwrap();
        assert_eq!(logits.shape(), &[5, 32], "{spec}");
        assert!(logits.is_finite());
    }
}

#[test]
fn forward_without_dropout_is_bit_identical() {
    for spec in specs() {
        let model = build(spec, 2);
        let input = seq(&[3, 1, 4, 1, 5, 9]);
        assert_eq!(model.forward(&input).unwrap(), model.forward(&input).unwrap());
    }
}

#[test]
fn no_position_encoder_is_permutation_equivariant() {
    let model = build(MethodSpec::new(MethodKind::None), 3);
    let tokens = [4, 8, 15, 16, 23, 30];
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted: Vec<usize> = perm.iter().map(|&p| tokens[p]).collect();
    let a = model.forward(&seq(&tokens)).unwrap();
    let b = model.forward(&seq(&permuted)).unwrap();
    for (row, &p) in perm.iter().enumerate() {
        for (x, y) in b.row(row).iter().zip(a.row(p)) {
            assert!((x - y).abs() <= 1e-12, "row {row}: {x} vs {y}");
        }
    }
}

#[test]
fn every_position_aware_kind_is_permutation_sensitive() {
    let tokens = [4, 8, 15, 16, 23, 30];
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted: Vec<usize> = perm.iter().map(|&p| tokens[p]).collect();
    for spec in specs().into_iter().filter(|s| s.kind != MethodKind::None) {
        let model = build(spec, 4);
        let a = model.forward(&seq(&tokens)).unwrap();
        let b = model.forward(&seq(&permuted)).unwrap();
        let mut max_dev: f64 = 0.0;
        for (row, &p) in perm.iter().enumerate() {
            for (x, y) in b.row(row).iter().zip(a.row(p)) {
                max_dev = max_dev.max((x - y).abs());
            }
        }
        assert!(max_dev > 1e-6, "{spec}: permutation left logits unchanged ({max_dev})");
    }
}

#[test]
fn relative_only_kinds_are_translation_invariant_under_padding() {
    let content = [7, 3, 11, 2, 9];
    let pad = 0;
    for spec in specs().into_iter().filter(|s| s.kind.is_translation_invariant() && !s.reset_cls && !s.combine_absolute) {
        let model = build(spec, 5);
        for shift in 1..=4 {
            let total = content.len() + 4;
            let mut tokens = vec![pad; total];
            let mut mask = vec![false; total];
            let mut base_tokens = vec![pad; total];
            let mut base_mask = vec![false; total];
            for (i, &c) in content.iter().enumerate() {
                base_tokens[i] = c;
                base_mask[i] = true;
                tokens[i + shift] = c;
                mask[i + shift] = true;
            }
            let a = model.hidden_states(&SequenceInput::new(base_tokens).with_mask(base_mask)).unwrap();
            let b = model.hidden_states(&SequenceInput::new(tokens).with_mask(mask)).unwrap();
            for i in 0..content.len() {
                for (x, y) in a.row(i).iter().zip(b.row(i + shift)) {
                    assert!((x - y).abs() <= 1e-12, "{spec} shift {shift}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn attention_rows_sum_to_one_over_unmasked_keys() {
    let mask = vec![true, true, false, true, true, false];
    for spec in specs() {
        let model = build(spec, 6);
        let input = SequenceInput::new(vec![1, 2, 3, 4, 5, 6])
            .with_mask(mask.clone())
            .with_sentence_positions((1..=6).collect());
        let maps = model.attention_maps(&input).unwrap();
        assert_eq!(maps.len(), 2);
        for layer in &maps {
            assert_eq!(layer.len(), 2);
            for a in layer {
                for i in 0..6 {
                    let row = a.row(i);
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() <= 1e-12, "{spec}: row sum {s}");
                    for (j, &keep) in mask.iter().enumerate() {
                        if !keep {
                            assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn enumerated_parameters_equal_core_plus_position_count() {
    let mut all = specs();
    for kind in MethodKind::ALL {
        if kind.is_relative() {
            all.push(MethodSpec::new(kind).with_clip(3).with_sharing(false).with_reset(true));
        }
    }
    all.push(MethodSpec::new(MethodKind::Deberta).with_untied(true).with_sharing(false));
    all.push(MethodSpec::new(MethodKind::Tupe).with_untied(true));
    for spec in all {
        for (tie, segment) in [(true, false), (false, true)] {
            let mut cfg = config(spec);
            cfg.tie_mlm_head = tie;
            cfg.segment_embedding = segment;
            let model = Encoder::new(cfg.clone(), &mut substream(0, "init")).unwrap();
            let expected = core_param_count(&cfg) + param_count(&spec, cfg.dims()).unwrap();
            assert_eq!(model.params().scalar_count(), expected, "{spec}");
            assert_eq!(model.expected_param_count().unwrap(), expected);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    for spec in specs() {
        let model = build(spec, 7);
        let input = seq(&[5, 4, 3, 2, 1, 0, 31]);
        let before = model.forward(&input).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let loaded = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.forward(&input).unwrap(), before);
    }
}

#[test]
fn checkpoint_mismatch_names_the_difference() {
    let model = build(MethodSpec::new(MethodKind::Shaw).with_clip(4), 8);
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let mut other = model.config().clone();
    other.heads = 4;
    other.method = MethodSpec::new(MethodKind::M4).with_clip(4);
    match read_checkpoint_expecting(buf.as_slice(), &other) {
        Err(Error::Checkpoint(msg)) => {
            assert!(msg.contains("heads: 2 != 4"), "{msg}");
            assert!(msg.contains("method: shaw:k=4 != m4:k=4"), "{msg}");
        }
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn embedding_examples() {
    let shaw = build(MethodSpec::new(MethodKind::None), 9);
    let mut tape = Tape::new();
    let vars = shaw.register(&mut tape);
    let token_id = shaw.params().id("embed.token").unwrap();
    let emb = EmbeddingVars {
        token: vars.params.var(token_id),
        absolute: None,
        segment: None,
        sinusoid: None,
    };
    let x = embed_input(&mut tape, &emb, &seq(&[3, 6]), MethodKind::None).unwrap();
    let table = shaw.params().get(token_id);
    assert_eq!(tape.value(x)[..16], table.row(3)[..]);
    assert_eq!(tape.value(x)[16..], table.row(6)[..]);

    let abs = build(MethodSpec::new(MethodKind::AbsoluteLearned), 9);
    let mut tape = Tape::new();
    let vars = abs.register(&mut tape);
    let pos_id = abs.params().id("embed.position").unwrap();
    let emb = EmbeddingVars {
        token: vars.params.var(abs.params().id("embed.token").unwrap()),
        absolute: Some(vars.params.var(pos_id)),
        segment: None,
        sinusoid: None,
    };
    let x = embed_input(&mut tape, &emb, &seq(&[7, 1, 1, 1, 7]), MethodKind::AbsoluteLearned).unwrap();
    let x = tape.tensor(x);
    let w = abs.params().get(pos_id);
    for c in 0..16 {
        let got = x.at(0, c) - x.at(4, c);
        let want = w.at(0, c) - w.at(4, c);
        assert!((got - want).abs() <= 1e-15);
    }

    let real = build(MethodSpec::new(MethodKind::AbsoluteRealSentence), 9);
    let packed = SequenceInput::new(vec![2, 9, 4, 9, 4]).with_sentence_positions(vec![1, 1, 2, 1, 2]);
    let h = real.hidden_states(&packed).unwrap();
    let fresh = real.hidden_states(&SequenceInput::new(vec![9, 4]).with_sentence_positions(vec![1, 2])).unwrap();
    // Same tokens at the same sentence positions embed identically; only
    // attention context differs afterwards, so compare raw embeddings.
    let mut tape = Tape::new();
    let vars = real.register(&mut tape);
    let emb = EmbeddingVars {
        token: vars.params.var(real.params().id("embed.token").unwrap()),
        absolute: Some(vars.params.var(real.params().id("embed.position").unwrap())),
        segment: None,
        sinusoid: None,
    };
    let e = embed_input(&mut tape, &emb, &packed, MethodKind::AbsoluteRealSentence).unwrap();
    let e = tape.tensor(e);
    assert_eq!(e.row(1), e.row(3));
    assert_eq!(e.row(2), e.row(4));
    assert_eq!(h.shape(), &[5, 16]);
    assert_eq!(fresh.shape(), &[2, 16]);
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = build(MethodSpec::new(MethodKind::AbsoluteLearned), 10);
    assert!(matches!(model.forward(&seq(&[40])), Err(Error::Input(_))));
    assert!(matches!(model.forward(&seq(&[1; 17])), Err(Error::Input(_))));
    let all_pad = SequenceInput::new(vec![1, 2]).with_mask(vec![false, false]);
    assert!(matches!(model.forward(&all_pad), Err(Error::Input(_))));
    let real = build(MethodSpec::new(MethodKind::AbsoluteRealSentence), 10);
    assert!(real.forward(&SequenceInput::new(vec![1, 2])).is_err());
}

#[test]
fn m4m_overflow_is_reported_as_layer_divergence() {
    let mut model = build(MethodSpec::new(MethodKind::M4M).with_clip(4), 11);
    let id = model.params().id("layer0.pos.rel").unwrap();
    model.params_mut().get_mut(id).data_mut().fill(1e200);
    match model.forward(&seq(&[1, 2, 3])) {
        Err(Error::Divergence(poslab::error::Divergence::Layer(0))) => {}
        other => panic!("expected divergence at layer 0, got {other:?}"),
    }
}
