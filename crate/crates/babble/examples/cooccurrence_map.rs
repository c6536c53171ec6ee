//! Do discrete codewords line up with the underlying phones? Quantize every
//! frame of a labeled corpus, take each frame's majority symbol from the
//! sample alignment, and tabulate P(symbol | codeword). A shuffled-label
//! baseline shows how much association survives by chance.

use babble::cooc::{codebook_label_cooccurrence, cooccurrence_from_pairs};
use babble::corpus::{render_utterances, SynthSpec};
use babble::encoder::EncoderConfig;
use babble::model::{ModelConfig, SpeechModel};
use babble::quantizer::{QuantizerConfig, TemperatureSchedule};
use babble::rng;
use babble::transformer::TransformerConfig;
use babble::Result;
use rand::seq::SliceRandom;

fn main() -> Result<()> {
    let spec = SynthSpec {
        alphabet: vec!['a', 'b', 'c'],
        formant_table: vec![
            [300.0, 1200.0, 2600.0],
            [600.0, 1650.0, 3050.0],
            [900.0, 2100.0, 3500.0],
        ],
        symbol_duration_range: (250, 450),
        utterance_length_range: (4, 8),
        noise_level: 0.02,
        seed: 9,
        boundary_symbol: None,
        word_length_range: None,
    };
    let utts = render_utterances(&spec, 16)?;

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
    // Even an untrained encoder separates these synthetic phones somewhat;
    // pre-training tightens the map further.
    let model = SpeechModel::init(model_cfg, 9)?;

    let m = codebook_label_cooccurrence(&model, &utts)?;
    println!(
        "{} symbols x {} active codewords over {} frames\n",
        m.labels.len(),
        m.codewords.len(),
        m.counts.iter().flatten().sum::<u64>()
    );

    println!("P(symbol | codeword), columns sum to one:");
    print!("{:>8}", "");
    for c in &m.codewords {
        print!(" {c:>6}");
    }
    println!();
    for (i, &l) in m.labels.iter().enumerate() {
        print!("{:>8}", format!("{:?}", spec.alphabet[l as usize]));
        for j in 0..m.codewords.len() {
            print!(" {:>6.2}", m.conditional[i][j]);
        }
        println!();
    }

    let observed = m.mean_max_conditional();
    println!("\nmean max conditional: {observed:.3}");

    // Permutation baseline: shuffle the frame labels, rebuild the table many
    // times, and see where the real statistic falls.
    let mut pairs: Vec<(u16, u64)> = Vec::new();
    for (i, &l) in m.labels.iter().enumerate() {
        for (j, &c) in m.codewords.iter().enumerate() {
            for _ in 0..m.counts[i][j] {
                pairs.push((l, c));
            }
        }
    }
    let mut r = rng::stream(9, "null");
    let rounds = 200;
    let mut null = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut labels: Vec<u16> = pairs.iter().map(|&(l, _)| l).collect();
        labels.shuffle(&mut r);
        let shuffled: Vec<(u16, u64)> =
            labels.into_iter().zip(pairs.iter().map(|&(_, c)| c)).collect();
        null.push(cooccurrence_from_pairs(&shuffled)?.mean_max_conditional());
    }
    let mean = null.iter().sum::<f64>() / rounds as f64;
    let sd =
        (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rounds - 1) as f64).sqrt();
    println!("shuffled-label baseline: {mean:.3} +/- {sd:.3}");
    println!("separation: {:.1} standard deviations", (observed - mean) / sd);
    Ok(())
}
