use bico_core::data::{generate_bundle, DataConfig, TestItem, PAD};
use bico_core::model::{load_checkpoint, checkpoint_checksum, save_checkpoint, ModelConfig, TransformerModel};
use bico_core::numeric::{RngStream, Tape};
use bico_core::objectives::ntp_loss;
use bico_core::train::{
    adam_step, evaluate_em, sequence_likelihood, steps_per_epoch, streams, train, AdamState, TrainConfig,
};
use bico_core::Error;

fn small_config(vocab_size: usize, max_positions: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        max_positions,
        rope_base: 10000.0,
        norm_epsilon: 1e-5,
    }
}

fn fast_train(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        epochs: 10,
        seed,
        ..TrainConfig::default()
    }
}

fn small_data() -> DataConfig {
    DataConfig {
        n_facts: 12,
        test_items: 12,
        ..DataConfig::default()
    }
}

#[test]
fn single_sequence_overfits() {
    let seq = vec![1u32, 4, 6, 3, 9, 7, 2];
    let mut model = TransformerModel::<f32>::init(&small_config(12, 16), &mut RngStream::new(0)).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 300,
        p_ntp: 1.0,
        ..fast_train(0)
    };
    let records = train(&mut model, &[seq.clone()], &cfg, PAD, |_| {}).unwrap();
    assert_eq!(records.len(), 300);
    let last = records.last().unwrap().loss;
    assert!(last < 0.01, "final loss {last}");
    assert_eq!(model.greedy_decode(&seq[..1], 10, 2).unwrap(), seq);
}

#[test]
fn overfit_model_continues_a_b_with_c_d() {
    let (a, b, c, d) = (4u32, 5, 6, 7);
    let mut model = TransformerModel::<f32>::init(&small_config(12, 16), &mut RngStream::new(8)).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 200,
        p_ntp: 1.0,
        ..fast_train(8)
    };
    let records = train(&mut model, &[vec![a, b, c, d]], &cfg, PAD, |_| {}).unwrap();
    assert!(records.last().unwrap().loss < 0.01);
    assert_eq!(model.greedy_decode(&[a, b], 2, 2).unwrap(), vec![a, b, c, d]);
}

#[test]
fn one_record_per_step() {
    let seqs: Vec<Vec<u32>> = (0..10).map(|i| vec![1, 3 + i % 5, 4, 2]).collect();
    let mut model = TransformerModel::<f32>::init(&small_config(12, 16), &mut RngStream::new(1)).unwrap();
    let cfg = TrainConfig {
        batch_size: 3,
        epochs: 4,
        ..fast_train(1)
    };
    let mut streamed = 0;
    let records = train(&mut model, &seqs, &cfg, PAD, |_| streamed += 1).unwrap();
    assert_eq!(records.len(), steps_per_epoch(10, 3) * 4);
    assert_eq!(streamed, records.len());
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.step, i);
        assert_eq!(r.epoch, i / 4);
        assert_eq!(r.masked_fraction.is_some(), r.objective == bico_core::objectives::Objective::Bico);
    }
}

#[test]
fn training_is_deterministic_under_seed() {
    let bundle = generate_bundle(&small_data(), 3).unwrap();
    let cfg = small_config(bundle.vocab.len(), 24);
    let run = |seed: u64| {
        let mut m = TransformerModel::<f32>::init(&cfg, &mut RngStream::new(7)).unwrap();
        train(&mut m, &bundle.train, &fast_train(seed), PAD, |_| {}).unwrap();
        checkpoint_checksum(&m)
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let bundle = generate_bundle(&small_data(), 4).unwrap();
    let cfg = small_config(bundle.vocab.len(), 24);
    let mut m = TransformerModel::<f32>::init(&cfg, &mut RngStream::new(2)).unwrap();
    train(&mut m, &bundle.train, &fast_train(2), PAD, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back: TransformerModel<f32> = load_checkpoint(&path).unwrap();
    for split in [&bundle.paraphrase_test, &bundle.reverse_test] {
        assert_eq!(evaluate_em(&m, split).unwrap(), evaluate_em(&back, split).unwrap());
    }
}

#[test]
fn untrained_model_is_at_chance_on_reverse_test() {
    let bundle = generate_bundle(&DataConfig::default(), 0).unwrap();
    let cfg = bico_core::config::ArchConfig::default().model_config(bundle.vocab.len());
    let m = TransformerModel::<f32>::init(&cfg, &mut RngStream::new(0)).unwrap();
    let report = evaluate_em(&m, &bundle.reverse_test).unwrap();
    assert_eq!(report.items.len(), 100);
    assert!(report.exact_match_rate <= 0.02, "{}", report.exact_match_rate);
    assert!(report.items.iter().all(|r| r.likelihood > 0.0 && r.likelihood <= 1.0));
}

/// Wherever greedy decoding reproduces the gold completion, the gold token
/// at each position beats every substitution at that position.
#[test]
fn exact_match_agrees_with_likelihood_argmax() {
    let bundle = generate_bundle(&small_data(), 5).unwrap();
    let cfg = small_config(bundle.vocab.len(), 24);
    let mut m = TransformerModel::<f64>::init(&cfg, &mut RngStream::new(3)).unwrap();
    train(&mut m, &bundle.train, &TrainConfig { epochs: 30, ..fast_train(3) }, PAD, |_| {}).unwrap();
    let report = evaluate_em(&m, &bundle.paraphrase_test).unwrap();
    assert!(report.exact_match_rate > 0.0, "nothing to check");
    let items: Vec<&TestItem> = bundle.paraphrase_test.iter().collect();
    for (item, rec) in items.iter().zip(&report.items) {
        if !rec.matched {
            continue;
        }
        for j in 0..item.completion.len() {
            let gold = sequence_likelihood(&m, &item.prompt, &item.completion[..=j]).unwrap();
            for v in 0..bundle.vocab.len() as u32 {
                if v == item.completion[j] {
                    continue;
                }
                let mut alt = item.completion[..j].to_vec();
                alt.push(v);
                assert!(gold > sequence_likelihood(&m, &item.prompt, &alt).unwrap());
            }
        }
    }
}

#[test]
fn pure_ntp_mix_equals_plain_ntp_trainer() {
    let bundle = generate_bundle(&small_data(), 6).unwrap();
    let mcfg = small_config(bundle.vocab.len(), 24);
    let init = TransformerModel::<f32>::init(&mcfg, &mut RngStream::new(4)).unwrap();
    let cfg = TrainConfig {
        p_ntp: 1.0,
        ..fast_train(9)
    };

    let mut mixed = init.clone();
    let records = train(&mut mixed, &bundle.train, &cfg, PAD, |_| {}).unwrap();

    let mut plain = init;
    let mut shuffle = RngStream::substream(cfg.seed, streams::SHUFFLE);
    let mut adam = AdamState::new(plain.params());
    let mut order: Vec<usize> = (0..bundle.train.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| bundle.train[i].clone()).collect();
            let mut tape = Tape::new();
            let bound = plain.bind(&mut tape, true);
            let loss = ntp_loss(&plain, &mut tape, &bound, &batch).unwrap();
            losses.push(tape.value(loss).item() as f64);
            tape.backward(loss).unwrap();
            let grads = plain.gradients(&tape, &bound);
            adam_step(plain.params_mut(), &grads, &mut adam, &cfg).unwrap();
        }
    }
    assert_eq!(records.iter().map(|r| r.loss).collect::<Vec<_>>(), losses);
    assert_eq!(checkpoint_checksum(&mixed), checkpoint_checksum(&plain));
    assert_eq!(mixed.params(), plain.params());
}

#[test]
fn non_finite_parameters_abort_with_divergence() {
    let seqs = vec![vec![1u32, 4, 5, 2]];
    let mut m = TransformerModel::<f32>::init(&small_config(12, 16), &mut RngStream::new(0)).unwrap();
    m.param_mut("final_norm").unwrap().data_mut()[0] = f32::NAN;
    let before = m.clone();
    let err = train(&mut m, &seqs, &fast_train(0), PAD, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 0 }), "{err}");
    assert!(err.to_string().contains("divergence detected"));
    assert_eq!(checkpoint_checksum(&m), checkpoint_checksum(&before));
}
