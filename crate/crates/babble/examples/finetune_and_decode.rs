//! Put a character head on the context network, fine-tune with CTC on a few
//! labeled utterances, then decode them three ways: greedy, plain beam
//! search, and beam search with an n-gram language model fused at word
//! boundaries.

use babble::corpus::{render_utterances, SynthSpec};
use babble::decode::{beam_decode, greedy_decode, DecodeConfig, DecodeMode};
use babble::encoder::EncoderConfig;
use babble::finetune::{finetune_train, transcription_log_probs, FinetuneConfig};
use babble::lm::train_ngram;
use babble::model::{ModelConfig, SpeechModel};
use babble::optim::AdamConfig;
use babble::quantizer::{QuantizerConfig, TemperatureSchedule};
use babble::transformer::TransformerConfig;
use babble::wer::word_error_rate;
use babble::Result;
use std::path::Path;

fn main() -> Result<()> {
    let alphabet = vec!['a', 'b', '|'];
    let spec = SynthSpec {
        alphabet: alphabet.clone(),
        formant_table: vec![[300.0, 1200.0, 2600.0], [420.0, 1380.0, 2840.0], [0.0, 0.0, 0.0]],
        symbol_duration_range: (300, 500),
        utterance_length_range: (3, 6),
        noise_level: 0.02,
        seed: 44,
        boundary_symbol: Some('|'),
        word_length_range: Some((2, 3)),
    };
    // Small corpus; the dev split repeats two training items so a short run
    // can reach a meaningful dev error.
    let mut utts = render_utterances(&spec, 10)?;
    utts.extend_from_slice(&utts[..2].to_vec());

    let model_cfg = ModelConfig {
        encoder: EncoderConfig::toy(8),
        quantizer: QuantizerConfig {
            groups: 2,
            entries: 4,
            input_dim: 8,
            output_dim: 6,
            temperature: TemperatureSchedule { start: 2.0, min: 0.5, decay: 0.9999 },
        },
        transformer: TransformerConfig::toy(8, 2),
    };
    let mut model = SpeechModel::init(model_cfg, 44)?;
    model.add_classifier(alphabet.len(), 44);

    let cfg = FinetuneConfig {
        alphabet: alphabet.clone(),
        timestep_mask_prob: 0.0,
        timestep_mask_span: 1,
        channel_mask_prob: 0.0,
        channel_mask_span: 1,
        updates: 300,
        peak_lrs: vec![8e-3],
        classifier_only_updates: 50,
        layerdrop: 0.0,
        batch_utterances: 2,
        adam: AdamConfig::default(),
        dev_utterances: 2,
        eval_every: 100,
        seed: 44,
    };

    let out = Path::new("target/examples/finetune");
    let outcome = finetune_train(&mut model, &utts, &cfg, 8e-3, out)?;
    println!("{:>6} {:>10} {:>9} {:>8}", "update", "ctc_loss", "lr", "dev_wer");
    for row in outcome.rows.iter().step_by(50).chain(outcome.rows.last()) {
        let dev = row.dev_wer.map_or_else(|| "-".into(), |w| format!("{w:.3}"));
        println!("{:>6} {:>10.4} {:>9.5} {:>8}", row.update, row.ctc_loss, row.lr, dev);
    }

    // A bigram model over the training transcripts for shallow fusion.
    let sentences: Vec<Vec<String>> = utts
        .iter()
        .map(|u| {
            u.transcript.as_deref().unwrap().split_whitespace().map(String::from).collect()
        })
        .collect();
    let lm = train_ngram(&sentences, 2)?;

    let beam_plain =
        DecodeConfig { mode: DecodeMode::BeamNolm, beam: 16, lm_weight: 0.0, word_insert: 0.0 };
    let beam_fused =
        DecodeConfig { mode: DecodeMode::BeamLm, beam: 16, lm_weight: 0.8, word_insert: -0.3 };

    println!("\ndecoding the first four utterances:");
    let mut edits = 0;
    let mut words = 0;
    for u in &utts[..4] {
        let reference = u.transcript.as_deref().unwrap();
        let lp = transcription_log_probs(&model, &cfg, &u.samples)?;
        let greedy = greedy_decode(&lp, &alphabet)?;
        let plain = beam_decode(&lp, &alphabet, None, &beam_plain)?;
        let fused = beam_decode(&lp, &alphabet, Some(&lm), &beam_fused)?;
        println!("  ref    {reference:?}");
        println!("  greedy {greedy:?}");
        println!("  beam   {plain:?}");
        println!("  +lm    {fused:?}\n");
        let b = word_error_rate(reference, &fused)?;
        edits += b.edits();
        words += reference.split_whitespace().count();
    }
    println!("fused WER over those four: {:.3}", edits as f64 / words as f64);
    println!("metrics: {}", outcome.metrics_path.display());
    Ok(())
}
