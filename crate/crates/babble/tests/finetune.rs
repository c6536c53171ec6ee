use babble::corpus::{render_utterances, SynthSpec, Utterance};
use babble::encoder::{EncoderConfig, NormMode};
use babble::error::Error;
use babble::finetune::{
    encode_transcript, finetune_mask, finetune_step, finetune_sweep, finetune_train, greedy_wer,
    label_utterances, tri_state_lr, FinetuneConfig, LabeledAudio,
};
use babble::graph::Graph;
use babble::model::{ModelConfig, SpeechModel};
use babble::optim::AdamConfig;
use babble::quantizer::{QuantizerConfig, TemperatureSchedule};
use babble::rng;
use babble::tensor::Tensor;
use babble::transformer::TransformerConfig;
use rand::Rng;

fn toy_model(model_dim: usize, seed: u64) -> SpeechModel {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            channels: vec![8, 8, 8],
            strides: vec![5, 2, 2],
            kernels: vec![10, 4, 4],
            norm_mode: NormMode::LayerNormEveryBlock,
            penalty_weight: 10.0,
            grad_scale: 0.1,
        },
        quantizer: QuantizerConfig {
            groups: 2,
            entries: 4,
            input_dim: 8,
            output_dim: 6,
            temperature: TemperatureSchedule { start: 2.0, min: 0.5, decay: 0.9999 },
        },
        transformer: TransformerConfig::toy(model_dim, 2),
    };
    SpeechModel::init(cfg, seed).unwrap()
}

fn base_cfg(alphabet: Vec<char>) -> FinetuneConfig {
    FinetuneConfig {
        alphabet,
        timestep_mask_prob: 0.0,
        timestep_mask_span: 10,
        channel_mask_prob: 0.0,
        channel_mask_span: 1,
        updates: 0,
        peak_lrs: vec![1e-3],
        classifier_only_updates: 0,
        layerdrop: 0.0,
        batch_utterances: 1,
        adam: AdamConfig::default(),
        dev_utterances: 0,
        eval_every: 1,
        seed: 3,
    }
}

/// Two spoken symbols plus the word boundary; short phones keep frame
/// counts small enough for quick optimization tests.
fn tiny_corpus(n: usize, seed: u64) -> Vec<Utterance> {
    let spec = SynthSpec {
        alphabet: vec!['a', 'b', '|'],
        formant_table: vec![[300.0, 1200.0, 2600.0], [420.0, 1380.0, 2840.0], [0.0, 0.0, 0.0]],
        symbol_duration_range: (300, 500),
        utterance_length_range: (3, 6),
        noise_level: 0.02,
        seed,
        boundary_symbol: Some('|'),
        word_length_range: Some((2, 3)),
    };
    render_utterances(&spec, n).unwrap()
}

// ---- learning-rate schedule ----

#[test]
fn schedule_hits_the_pinned_points() {
    assert_eq!(tri_state_lr(1.0, 100, 5), 0.5);
    assert_eq!(tri_state_lr(1.0, 100, 30), 1.0);
    assert_eq!(tri_state_lr(1.0, 100, 75), 0.5);
    assert_eq!(tri_state_lr(1.0, 100, 0), 0.0);
    assert_eq!(tri_state_lr(1.0, 100, 10), 1.0);
    assert_eq!(tri_state_lr(1.0, 100, 50), 1.0);
    assert_eq!(tri_state_lr(1.0, 100, 100), 0.0);
    assert_eq!(tri_state_lr(1.0, 0, 0), 0.0);
    assert_eq!(tri_state_lr(2.5, 100, 30), 2.5);
}

#[test]
fn schedule_ramps_up_then_holds_then_decays() {
    for total in [3u64, 10, 97, 100] {
        let lrs: Vec<f64> = (0..=total).map(|u| tri_state_lr(1.0, total, u)).collect();
        assert!(lrs.iter().all(|&x| (0.0..=1.0).contains(&x)), "total {total}");
        let peak_at = lrs.iter().position(|&x| x == 1.0).expect("peak reached");
        let peak_end = lrs.iter().rposition(|&x| x == 1.0).unwrap();
        assert!(lrs[..peak_at].windows(2).all(|w| w[0] < w[1]), "warmup not rising");
        assert!(lrs[peak_end..].windows(2).all(|w| w[0] > w[1]), "decay not falling");
        assert_eq!(*lrs.last().unwrap(), 0.0);
        // No jump exceeds one warmup or decay increment.
        let bound = 1.0 / (0.1 * total as f64).min(0.5 * total as f64) + 1e-12;
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= bound, "total {total}: step {w:?}");
        }
    }
}

// ---- transcripts ----

#[test]
fn transcripts_map_spaces_to_the_boundary_symbol() {
    let alphabet = vec!['a', 'b', 'c', '|'];
    assert_eq!(encode_transcript("ab c", &alphabet).unwrap(), vec![1, 2, 4, 3]);
    assert_eq!(encode_transcript("", &alphabet).unwrap(), Vec::<usize>::new());
    let e = encode_transcript("ax", &alphabet).unwrap_err();
    assert!(matches!(e, Error::Data(_)));
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn labeling_fails_fast_on_a_missing_transcript() {
    let utt = Utterance {
        id: "u0".into(),
        samples: vec![0.0; 100],
        transcript: None,
        labels: None,
    };
    let e = label_utterances(&[utt], &['a', 'b']).unwrap_err();
    assert!(matches!(e, Error::Data(_)));
}

// ---- masking stage ----

fn mask_fixture(t: usize, d: usize) -> (Graph, babble::graph::NodeId, babble::graph::NodeId, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let mut r = rng::stream(40, "fixture");
    let x: Vec<f64> = (0..t * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let emb: Vec<f64> = (0..d).map(|_| r.gen_range(2.0..3.0)).collect();
    let xn = g.constant(Tensor::matrix(t, d, x.clone()));
    let en = g.constant(Tensor::vector(emb.clone()));
    (g, xn, en, x, emb)
}

#[test]
fn zero_probabilities_leave_the_input_untouched() {
    let (mut g, x, emb, orig, _) = mask_fixture(9, 5);
    let cfg = base_cfg(vec!['a']);
    let out = finetune_mask(&mut g, x, emb, &cfg, &mut rng::stream(1, "m")).unwrap();
    assert_eq!(g.value(out).data, orig);
}

#[test]
fn certain_time_masking_replaces_every_frame_with_the_embedding() {
    let (mut g, x, emb, _, emb_vals) = mask_fixture(9, 5);
    let mut cfg = base_cfg(vec!['a']);
    cfg.timestep_mask_prob = 1.0;
    cfg.timestep_mask_span = 3;
    let out = finetune_mask(&mut g, x, emb, &cfg, &mut rng::stream(1, "m")).unwrap();
    let v = g.value(out);
    for r in 0..9 {
        assert_eq!(v.row(r), &emb_vals[..], "row {r}");
    }
}

#[test]
fn certain_channel_masking_zeroes_everything() {
    let (mut g, x, emb, _, _) = mask_fixture(7, 5);
    let mut cfg = base_cfg(vec!['a']);
    cfg.channel_mask_prob = 1.0;
    cfg.channel_mask_span = 2;
    let out = finetune_mask(&mut g, x, emb, &cfg, &mut rng::stream(1, "m")).unwrap();
    assert!(g.value(out).data.iter().all(|&v| v == 0.0));
}

#[test]
fn channel_span_wider_than_the_features_is_rejected() {
    let (mut g, x, emb, _, _) = mask_fixture(7, 5);
    let mut cfg = base_cfg(vec!['a']);
    cfg.channel_mask_span = 6;
    let e = finetune_mask(&mut g, x, emb, &cfg, &mut rng::stream(1, "m")).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn masks_land_exactly_where_the_replayed_draws_say() {
    let (t, d) = (13, 6);
    let (mut g, x, emb, orig, emb_vals) = mask_fixture(t, d);
    let mut cfg = base_cfg(vec!['a']);
    cfg.timestep_mask_prob = 0.35;
    cfg.timestep_mask_span = 2;
    cfg.channel_mask_prob = 0.3;
    cfg.channel_mask_span = 2;
    let out = finetune_mask(&mut g, x, emb, &cfg, &mut rng::stream(77, "m")).unwrap();

    // Same stream, same order: frame starts first, then channel starts.
    let mut r = rng::stream(77, "m");
    let tstarts: Vec<bool> = (0..t).map(|_| r.gen::<f64>() < cfg.timestep_mask_prob).collect();
    let cstarts: Vec<bool> = (0..d).map(|_| r.gen::<f64>() < cfg.channel_mask_prob).collect();
    let mut masked_rows = vec![false; t];
    for (i, &s) in tstarts.iter().enumerate() {
        if s {
            for f in masked_rows.iter_mut().skip(i).take(cfg.timestep_mask_span) {
                *f = true;
            }
        }
    }
    let mut zeroed_cols = vec![false; d];
    for (i, &s) in cstarts.iter().enumerate() {
        if s {
            for z in zeroed_cols.iter_mut().skip(i).take(cfg.channel_mask_span) {
                *z = true;
            }
        }
    }
    assert!(masked_rows.iter().any(|&m| m), "fixture never masks a frame");
    assert!(!masked_rows.iter().all(|&m| m), "fixture masks every frame");
    assert!(zeroed_cols.iter().any(|&z| z), "fixture never zeroes a channel");

    let v = g.value(out);
    for row in 0..t {
        for col in 0..d {
            let want = if zeroed_cols[col] {
                0.0
            } else if masked_rows[row] {
                emb_vals[col]
            } else {
                orig[row * d + col]
            };
            assert_eq!(v.row(row)[col], want, "cell ({row}, {col})");
        }
    }
}

// ---- freeze contracts ----

fn wave(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "wave");
    (0..n).map(|_| r.gen_range(-0.5..0.5)).collect()
}

#[test]
fn staged_unfreezing_gates_which_parameters_get_gradients() {
    // model_dim 12 differs from the 8 encoder channels, so the input
    // projection participates and must obey the stage gate too.
    let mut model = toy_model(12, 5);
    model.add_classifier(3, 7);
    let mut cfg = base_cfg(vec!['a', 'b', '|']);
    cfg.timestep_mask_prob = 0.5;
    cfg.timestep_mask_span = 2;
    cfg.classifier_only_updates = 3;
    let batch = vec![LabeledAudio {
        id: "u0".into(),
        samples: wave(700, 1),
        target: vec![1, 2, 3, 1],
    }];

    let mut r = rng::stream(9, "step");
    let head_only = finetune_step(&model, &batch, &cfg, 0, true, &mut r).unwrap();
    let keys: Vec<&String> = head_only.grads.as_ref().unwrap().keys().collect();
    assert_eq!(keys, ["ctc/b", "ctc/w"]);

    let unfrozen = finetune_step(&model, &batch, &cfg, 3, true, &mut r).unwrap();
    let grads = unfrozen.grads.as_ref().unwrap();
    for needed in ["ctc/w", "ctc/b", "mask/emb", "proj/in/w", "proj/in/b", "ctx/blk0/wq", "ctx/blk1/w2", "ctx/pos_w"] {
        assert!(grads.contains_key(needed), "missing gradient for {needed}");
    }
    assert!(
        grads.keys().all(|k| !k.starts_with("enc/") && !k.starts_with("quant/")),
        "a frozen group leaked gradients: {:?}",
        grads.keys().collect::<Vec<_>>()
    );

    let eval = finetune_step(&model, &batch, &cfg, 3, false, &mut r).unwrap();
    assert!(eval.grads.is_none());
    assert!(eval.loss.is_finite());
}

#[test]
fn empty_batches_and_infeasible_targets_surface_as_errors() {
    let mut model = toy_model(8, 5);
    model.add_classifier(3, 7);
    let cfg = base_cfg(vec!['a', 'b', '|']);
    let mut r = rng::stream(9, "step");
    let e = finetune_step(&model, &[], &cfg, 0, true, &mut r).unwrap_err();
    assert!(matches!(e, Error::Degenerate(_)));

    // 60 samples is a single latent frame; a two-symbol target cannot fit.
    let item = LabeledAudio { id: "u0".into(), samples: wave(60, 2), target: vec![1, 2] };
    let e = finetune_step(&model, &[item], &cfg, 0, true, &mut r).unwrap_err();
    assert!(matches!(e, Error::InfeasibleTarget(_)));
    assert_eq!(e.exit_code(), 2);
}

// ---- training loop ----

#[test]
fn metrics_checkpoint_and_rerun_are_deterministic() {
    let utts = tiny_corpus(6, 12);
    let mut cfg = base_cfg(vec!['a', 'b', '|']);
    cfg.updates = 4;
    cfg.eval_every = 2;
    cfg.dev_utterances = 2;
    cfg.batch_utterances = 2;
    cfg.timestep_mask_prob = 0.1;
    cfg.timestep_mask_span = 2;

    let base = toy_model(8, 5);
    let dir = tempfile::tempdir().unwrap();
    let (da, db) = (dir.path().join("a"), dir.path().join("b"));
    let mut ma = base.clone();
    let out_a = finetune_train(&mut ma, &utts, &cfg, 3e-4, &da).unwrap();
    let mut mb = base.clone();
    let out_b = finetune_train(&mut mb, &utts, &cfg, 3e-4, &db).unwrap();

    let csv_a = std::fs::read(&out_a.metrics_path).unwrap();
    let csv_b = std::fs::read(&out_b.metrics_path).unwrap();
    assert_eq!(csv_a, csv_b, "metrics differ between identical runs");
    let ck_a = std::fs::read(&out_a.checkpoint_path).unwrap();
    let ck_b = std::fs::read(&out_b.checkpoint_path).unwrap();
    assert_eq!(ck_a, ck_b, "checkpoints differ between identical runs");

    let text = String::from_utf8(csv_a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "update,ctc_loss,lr,dev_wer");
    assert_eq!(lines.len(), 1 + 4);
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4, "row {line:?}");
        assert_eq!(fields[0], i.to_string());
        // dev WER appears on the eval cadence and stays blank elsewhere.
        assert_eq!(!fields[3].is_empty(), (i + 1) % 2 == 0, "row {line:?}");
    }
    assert_eq!(out_a.rows.len(), 4);
    assert!(out_a.rows[0].dev_wer.is_none());
    assert!(out_a.rows[1].dev_wer.is_some());
    assert_eq!(out_a.final_dev_wer, out_a.rows[3].dev_wer);
}

#[test]
fn evaluation_is_repeatable_on_the_same_model() {
    let utts = tiny_corpus(3, 21);
    let mut model = toy_model(8, 5);
    model.add_classifier(3, 7);
    let cfg = base_cfg(vec!['a', 'b', '|']);
    let w1 = greedy_wer(&model, &utts, &cfg).unwrap();
    let w2 = greedy_wer(&model, &utts, &cfg).unwrap();
    assert_eq!(w1, w2);
}

#[test]
fn mismatched_classifier_and_oversized_dev_split_are_config_errors() {
    let utts = tiny_corpus(3, 21);
    let dir = tempfile::tempdir().unwrap();

    let mut model = toy_model(8, 5);
    model.add_classifier(5, 7); // six output columns, alphabet needs four
    let cfg = base_cfg(vec!['a', 'b', '|']);
    let e = finetune_train(&mut model, &utts, &cfg, 1e-3, dir.path()).unwrap_err();
    assert!(matches!(e, Error::Config(_)));

    let mut model = toy_model(8, 5);
    let mut cfg = base_cfg(vec!['a', 'b', '|']);
    cfg.dev_utterances = 3;
    let e = finetune_train(&mut model, &utts, &cfg, 1e-3, dir.path()).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
}

#[test]
fn three_hundred_updates_overfit_a_small_corpus() {
    let utts = tiny_corpus(10, 33);
    let mut cfg = base_cfg(vec!['a', 'b', '|']);
    cfg.updates = 300;
    cfg.batch_utterances = 2;
    cfg.eval_every = 1000;
    let mut model = toy_model(8, 5);
    let dir = tempfile::tempdir().unwrap();
    let out = finetune_train(&mut model, &utts, &cfg, 8e-3, dir.path()).unwrap();

    let first = out.rows[0].ctc_loss;
    let last: f64 =
        out.rows[out.rows.len() - 10..].iter().map(|r| r.ctc_loss).sum::<f64>() / 10.0;
    assert!(
        last < 0.5 * first,
        "loss did not halve: started at {first}, ended at {last}"
    );
}

#[test]
fn sweep_prefers_the_learning_rate_with_the_lower_dev_error() {
    // The dev split repeats two training utterances: the sweep is being
    // tested as a selector, and memorization separates the two rates without
    // needing a corpus big enough for real generalization.
    let mut utts = tiny_corpus(8, 44);
    utts.extend_from_slice(&utts[..2].to_vec());
    let mut cfg = base_cfg(vec!['a', 'b', '|']);
    cfg.updates = 400;
    cfg.batch_utterances = 2;
    cfg.dev_utterances = 2;
    cfg.eval_every = 100;
    cfg.peak_lrs = vec![1e-9, 8e-3];
    let base = toy_model(8, 5);
    let dir = tempfile::tempdir().unwrap();
    let out = finetune_sweep(&base, &utts, &cfg, dir.path()).unwrap();

    assert_eq!(out.runs.len(), 2);
    let best = out.runs.iter().map(|r| r.dev_wer).fold(f64::INFINITY, f64::min);
    assert_eq!(out.dev_wer, best);
    let frozen = out.runs.iter().find(|r| r.peak_lr == 1e-9).unwrap();
    let trained = out.runs.iter().find(|r| r.peak_lr == 8e-3).unwrap();
    assert!(
        trained.dev_wer < frozen.dev_wer,
        "training did not help: {} vs {}",
        trained.dev_wer,
        frozen.dev_wer
    );
    assert_eq!(out.peak_lr, 8e-3);
    assert!(out.runs.iter().all(|r| r.out_dir.join("finetune.csv").is_file()));
    assert!(out.runs.iter().all(|r| r.out_dir.join("finetuned.bin").is_file()));
}

#[test]
fn sweep_without_a_dev_split_is_rejected() {
    let utts = tiny_corpus(3, 21);
    let cfg = base_cfg(vec!['a', 'b', '|']);
    let dir = tempfile::tempdir().unwrap();
    let e = finetune_sweep(&toy_model(8, 5), &utts, &cfg, dir.path()).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
}
