use babble::cooc::{codebook_label_cooccurrence, cooccurrence_from_pairs};
use babble::corpus::{render_utterances, SynthSpec, Utterance};
use babble::encoder::{EncoderConfig, NormMode};
use babble::error::Error;
use babble::model::{ModelConfig, SpeechModel};
use babble::quantizer::{QuantizerConfig, TemperatureSchedule};
use babble::rng;
use babble::transformer::TransformerConfig;
use rand::seq::SliceRandom;
use rand::Rng;

fn toy_model(seed: u64) -> SpeechModel {
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
        transformer: TransformerConfig::toy(8, 2),
    };
    SpeechModel::init(cfg, seed).unwrap()
}

#[test]
fn single_symbol_corpus_makes_every_column_one_hot() {
    let spec = SynthSpec {
        alphabet: vec!['a'],
        formant_table: vec![[300.0, 1200.0, 2600.0]],
        symbol_duration_range: (200, 400),
        utterance_length_range: (2, 4),
        noise_level: 0.0,
        seed: 5,
        boundary_symbol: None,
        word_length_range: None,
    };
    let utts = render_utterances(&spec, 4).unwrap();
    let m = codebook_label_cooccurrence(&toy_model(1), &utts).unwrap();

    assert_eq!(m.labels, vec![0]);
    assert!(!m.codewords.is_empty());
    for j in 0..m.codewords.len() {
        assert_eq!(m.conditional[0][j], 1.0, "column {j}");
        assert!(m.counts[0][j] > 0, "codeword column {j} has no mass");
    }
    assert_eq!(m.mean_max_conditional(), 1.0);

    // Every latent frame of every utterance lands in the matrix.
    let frames: usize = utts
        .iter()
        .map(|u| {
            let n = (u.samples.len() - 10) / 5 + 1;
            let n = (n - 4) / 2 + 1;
            (n - 4) / 2 + 1
        })
        .sum();
    let total: u64 = m.counts.iter().flatten().sum();
    assert_eq!(total as usize, frames);
}

#[test]
fn missing_alignments_are_rejected() {
    let utt = Utterance {
        id: "u0".into(),
        samples: vec![0.1; 400],
        transcript: None,
        labels: None,
    };
    let e = codebook_label_cooccurrence(&toy_model(1), &[utt]).unwrap_err();
    assert!(matches!(e, Error::Data(_)));
    assert_eq!(e.exit_code(), 2);
}

/// Mean and standard deviation of the statistic under label shuffling.
fn permutation_null(pairs: &[(u16, u64)], rounds: usize, seed: u64) -> (f64, f64) {
    let mut r = rng::stream(seed, "null");
    let mut labels: Vec<u16> = pairs.iter().map(|p| p.0).collect();
    let mut stats = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        labels.shuffle(&mut r);
        let shuffled: Vec<(u16, u64)> =
            labels.iter().zip(pairs).map(|(&l, &(_, c))| (l, c)).collect();
        stats.push(cooccurrence_from_pairs(&shuffled).unwrap().mean_max_conditional());
    }
    let mean = stats.iter().sum::<f64>() / rounds as f64;
    let var = stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / rounds as f64;
    (mean, var.sqrt())
}

#[test]
fn label_shuffling_separates_structure_from_noise() {
    let mut r = rng::stream(3, "perm");

    // Planted: codeword identical to the label. The statistic saturates and
    // shuffling the labels collapses it toward chance.
    let planted: Vec<(u16, u64)> =
        (0..400).map(|_| r.gen_range(0..4u16)).map(|l| (l, l as u64)).collect();
    let observed = cooccurrence_from_pairs(&planted).unwrap().mean_max_conditional();
    assert_eq!(observed, 1.0);
    let (mean, sd) = permutation_null(&planted, 200, 8);
    assert!(mean < 0.5, "null mean {mean} suspiciously high");
    assert!(observed > mean + 3.0 * sd, "no separation: {observed} vs {mean} + 3 x {sd}");

    // Independent draws carry no structure, so the observed statistic should
    // sit inside the null band.
    let independent: Vec<(u16, u64)> =
        (0..400).map(|_| (r.gen_range(0..4u16), r.gen_range(0..4u64))).collect();
    let observed = cooccurrence_from_pairs(&independent).unwrap().mean_max_conditional();
    let (mean, sd) = permutation_null(&independent, 200, 8);
    assert!(
        observed < mean + 3.0 * sd,
        "phantom structure: {observed} vs {mean} + 3 x {sd}"
    );
}
