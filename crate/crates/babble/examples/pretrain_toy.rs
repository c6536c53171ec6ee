//! A complete (tiny) contrastive pre-training run: synthesize a corpus in
//! memory, train for a handful of updates, and watch the masked-prediction
//! accuracy move away from chance.

use babble::corpus::{render_utterances, SynthSpec};
use babble::encoder::EncoderConfig;
use babble::masking::{MaskConfig, MaskStrategy};
use babble::model::{ModelConfig, SpeechModel};
use babble::optim::AdamConfig;
use babble::pretrain::{
    train, ContrastiveConfig, NegativesSource, PretrainConfig, QuantizationModes,
};
use babble::quantizer::{QuantizerConfig, TemperatureSchedule};
use babble::transformer::TransformerConfig;
use babble::Result;
use std::path::Path;

fn main() -> Result<()> {
    let spec = SynthSpec {
        alphabet: vec!['a', 'b', 'c', '|'],
        formant_table: vec![
            [300.0, 1200.0, 2600.0],
            [500.0, 1500.0, 2900.0],
            [700.0, 1800.0, 3200.0],
            [0.0, 0.0, 0.0],
        ],
        symbol_duration_range: (300, 500),
        utterance_length_range: (4, 8),
        noise_level: 0.02,
        seed: 5,
        boundary_symbol: Some('|'),
        word_length_range: Some((2, 3)),
    };
    let utts = render_utterances(&spec, 12)?;
    println!("rendered {} utterances, e.g. {:?}", utts.len(), utts[0].transcript.as_deref());

    let model_cfg = ModelConfig {
        encoder: EncoderConfig::toy(8),
        quantizer: QuantizerConfig {
            groups: 2,
            entries: 6,
            input_dim: 8,
            output_dim: 8,
            temperature: TemperatureSchedule { start: 2.0, min: 0.5, decay: 0.999 },
        },
        transformer: TransformerConfig::toy(8, 2),
    };
    let cfg = PretrainConfig {
        contrastive: ContrastiveConfig {
            negatives: 8,
            kappa: 0.1,
            alpha: 0.1,
            negatives_source: NegativesSource::SameUtteranceMasked,
            edge_limit: None,
        },
        mask: MaskConfig { strategy: MaskStrategy::OverlapFixed, p: 0.065, m: 10 },
        quantization: QuantizationModes {
            inputs: babble::pretrain::InputMode::Continuous,
            targets: babble::pretrain::TargetMode::Quantized,
        },
        stop_encoder_grad: false,
        adam: AdamConfig::default(),
        peak_lr: 2e-3,
        warmup_fraction: 0.1,
        total_updates: 60,
        batch_utterances: 2,
        max_batch_samples: 6000,
        crop_len: 2500,
        val_utterances: 2,
        val_every: 20,
        checkpoint_every: 30,
        seed: 5,
    };

    let mut model = SpeechModel::init(model_cfg, 5)?;
    println!("model has {} parameters", model.num_params());
    // With 8 distractors plus the true latent, guessing runs at 1/9.
    println!("chance accuracy: {:.3}\n", 1.0 / 9.0);

    let out = Path::new("target/examples/pretrain_toy");
    let outcome = train(&mut model, &utts, &cfg, out, None, None)?;

    println!("{:>6} {:>8} {:>8} {:>6} {:>6} {:>7}", "update", "L_m", "L_d", "ppl", "acc", "tau");
    for row in outcome.rows.iter().step_by(10).chain(outcome.rows.last()) {
        println!(
            "{:>6} {:>8.4} {:>8.4} {:>6.2} {:>6.3} {:>7.4}",
            row.update,
            row.metrics.l_m,
            row.metrics.l_d,
            row.metrics.perplexity,
            row.metrics.accuracy,
            row.tau
        );
    }
    if let Some(v) = outcome.final_val {
        println!("\nheld-out L_m {v:.4} (best seen {:.4})", outcome.best_val);
    }
    println!("metrics:    {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(())
}
