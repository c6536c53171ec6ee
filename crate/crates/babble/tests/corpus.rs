use babble::corpus::{
    self, batch_crop, load_corpus, normalize, read_manifest, synthesize_corpus, SynthSpec,
};
use babble::error::Error;
use babble::rng;
use std::collections::BTreeMap;
use std::fs;

fn plain_spec(n_symbols: usize, seed: u64) -> SynthSpec {
    let alphabet: Vec<char> = "abcdefghijklmnop".chars().take(n_symbols).collect();
    let formants = (0..n_symbols)
        .map(|i| {
            let i = i as f64;
            [300.0 + 120.0 * i, 1200.0 + 180.0 * i, 2600.0 + 240.0 * i]
        })
        .collect();
    SynthSpec {
        alphabet,
        formant_table: formants,
        symbol_duration_range: (200, 400),
        utterance_length_range: (6, 12),
        noise_level: 0.02,
        seed,
        boundary_symbol: None,
        word_length_range: None,
    }
}

#[test]
fn wav_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = plain_spec(4, 5);
    let manifest = synthesize_corpus(&spec, 3, dir.path()).unwrap();
    for e in &manifest.entries {
        let path = manifest.root.join(&e.path);
        let pcm = babble::wav::read_wav_i16(&path).unwrap();
        babble::wav::write_wav(&path, &pcm).unwrap();
        let again = babble::wav::read_wav_i16(&path).unwrap();
        assert_eq!(pcm, again);
        // The in-memory waveform is exactly the dequantized PCM.
        let f = babble::wav::read_wav(&path).unwrap();
        assert_eq!(f, babble::wav::dequantize(&pcm));
    }
}

#[test]
fn same_seed_gives_identical_corpora() {
    let spec = plain_spec(6, 42);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = synthesize_corpus(&spec, 4, d1.path()).unwrap();
    let m2 = synthesize_corpus(&spec, 4, d2.path()).unwrap();
    assert_eq!(m1.entries, m2.entries);
    for e in &m1.entries {
        let a = fs::read(m1.root.join(&e.path)).unwrap();
        let b = fs::read(m2.root.join(&e.path)).unwrap();
        assert_eq!(a, b, "{} differs between same-seed runs", e.path);
    }
    let t1 = fs::read(m1.root.join("manifest.trans.tsv")).unwrap();
    let t2 = fs::read(m2.root.join("manifest.trans.tsv")).unwrap();
    assert_eq!(t1, t2);

    let m3 = synthesize_corpus(&plain_spec(6, 43), 4, d1.path()).unwrap();
    let any_differs = m3.entries.iter().zip(&m1.entries).any(|(x, y)| {
        fs::read(m3.root.join(&x.path)).unwrap() != fs::read(m2.root.join(&y.path)).unwrap()
    });
    assert!(any_differs, "different seeds should produce different audio");
}

#[test]
fn manifest_round_trips_and_counts_match_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = plain_spec(4, 7);
    let manifest = synthesize_corpus(&spec, 5, dir.path()).unwrap();
    let read_back = read_manifest(&manifest.root.join("manifest.tsv")).unwrap();
    assert_eq!(manifest, read_back);
    let utts = load_corpus(&read_back).unwrap();
    assert_eq!(utts.len(), 5);
    for (u, e) in utts.iter().zip(&read_back.entries) {
        assert_eq!(u.samples.len(), e.num_samples);
        assert_eq!(u.labels.as_ref().unwrap().len(), u.samples.len());
        assert!(u.transcript.is_some());
    }
}

#[test]
fn corrupted_sample_count_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = plain_spec(4, 9);
    let manifest = synthesize_corpus(&spec, 2, dir.path()).unwrap();
    let path = manifest.root.join("manifest.tsv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let (p, n) = lines[1].split_once('\t').unwrap();
    lines[1] = format!("{p}\t{}", n.parse::<usize>().unwrap() + 1);
    fs::write(&path, lines.join("\n")).unwrap();
    let bad = read_manifest(&path).unwrap();
    assert!(matches!(load_corpus(&bad), Err(Error::Data(_))));
}

#[test]
fn symbol_frequencies_are_near_uniform() {
    // With every phone drawn uniformly from 8 symbols, per-symbol counts are
    // binomial(N, 1/8); each must land within 3 sigma of N/8.
    let dir = tempfile::tempdir().unwrap();
    let spec = plain_spec(8, 123);
    let manifest = synthesize_corpus(&spec, 50, dir.path()).unwrap();
    let utts = load_corpus(&manifest).unwrap();
    let mut counts: BTreeMap<char, u64> = BTreeMap::new();
    let mut total = 0u64;
    for u in &utts {
        for c in u.transcript.as_ref().unwrap().chars() {
            *counts.entry(c).or_default() += 1;
            total += 1;
        }
    }
    assert_eq!(counts.len(), 8, "all symbols should appear in 50 utterances");
    let p = 1.0 / 8.0;
    let expect = total as f64 * p;
    let sigma = (total as f64 * p * (1.0 - p)).sqrt();
    for (c, n) in counts {
        let dev = (n as f64 - expect).abs();
        assert!(dev < 3.0 * sigma, "symbol {c:?}: count {n} vs expected {expect:.1} ± {sigma:.1}");
    }
}

#[test]
fn alignment_labels_match_transcript_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = plain_spec(5, 77);
    spec.noise_level = 0.0;
    let manifest = synthesize_corpus(&spec, 4, dir.path()).unwrap();
    let utts = load_corpus(&manifest).unwrap();
    for u in &utts {
        let labels = u.labels.as_ref().unwrap();
        // Collapse runs of equal labels back to a symbol sequence.
        let mut seq = String::new();
        let mut prev = None;
        for &l in labels {
            if Some(l) != prev {
                seq.push(spec.alphabet[l as usize]);
                prev = Some(l);
            }
        }
        // Adjacent repeated phones merge when collapsing, so compare against
        // the transcript with its own adjacent duplicates merged.
        let mut expect = String::new();
        for c in u.transcript.as_ref().unwrap().chars() {
            if expect.chars().last() != Some(c) {
                expect.push(c);
            }
        }
        assert_eq!(seq, expect, "{}", u.id);
    }
}

#[test]
fn interior_windows_have_majority_of_their_own_symbol() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = plain_spec(5, 31);
    spec.noise_level = 0.0;
    let manifest = synthesize_corpus(&spec, 3, dir.path()).unwrap();
    let utts = load_corpus(&manifest).unwrap();
    let window = 150; // shorter than the minimum phone duration of 200
    for u in &utts {
        let labels = u.labels.as_ref().unwrap();
        // A window fully inside one phone run must be unanimous.
        let mut start = 0;
        while start < labels.len() {
            let sym = labels[start];
            let mut end = start;
            while end < labels.len() && labels[end] == sym {
                end += 1;
            }
            if end - start >= window {
                let mid = start + (end - start - window) / 2;
                assert!(labels[mid..mid + window].iter().all(|&l| l == sym));
            }
            start = end;
        }
    }
}

#[test]
fn word_structured_transcripts_use_spaces() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::demo(3);
    let manifest = synthesize_corpus(&spec, 6, dir.path()).unwrap();
    let utts = load_corpus(&manifest).unwrap();
    let mut saw_space = false;
    for u in &utts {
        let t = u.transcript.as_ref().unwrap();
        assert!(!t.contains('|'), "boundary renders as a space in transcripts");
        saw_space |= t.contains(' ');
        for w in t.split(' ') {
            assert!(!w.is_empty());
            assert!(w.len() <= 4, "word {w:?} exceeds the configured maximum");
        }
    }
    assert!(saw_space, "multi-word utterances should occur");
}

#[test]
fn boundary_phone_is_silent() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::demo(3);
    spec.noise_level = 0.0;
    let manifest = synthesize_corpus(&spec, 4, dir.path()).unwrap();
    let utts = load_corpus(&manifest).unwrap();
    let boundary = spec.symbol_id('|').unwrap();
    let mut saw_boundary = false;
    for u in &utts {
        for (&l, &s) in u.labels.as_ref().unwrap().iter().zip(&u.samples) {
            if l == boundary {
                saw_boundary = true;
                assert_eq!(s, 0.0, "{}: boundary sample should be exactly zero", u.id);
            }
        }
    }
    assert!(saw_boundary);
}

#[test]
fn normalize_matches_hand_cases_and_rejects_constants() {
    assert_eq!(normalize(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
    assert_eq!(normalize(&[2.0, 0.0]).unwrap(), vec![1.0, -1.0]);
    match normalize(&[0.5; 8]) {
        Err(Error::Degenerate(_)) => {}
        other => panic!("constant waveform should be degenerate, got {other:?}"),
    }
}

#[test]
fn batch_crop_packs_greedily_and_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = plain_spec(4, 55);
    let manifest = synthesize_corpus(&spec, 6, dir.path()).unwrap();
    let utts = load_corpus(&manifest).unwrap();

    let crop_len = 1000;
    let budget = 3500; // room for exactly three crops
    let crops = batch_crop(&utts, budget, crop_len, &mut rng::stream(1, "crop")).unwrap();
    assert_eq!(crops.len(), 3);
    for c in &crops {
        assert_eq!(c.samples.len(), crop_len);
        assert_eq!(c.valid_len, crop_len);
        // Valid part is standardized: mean 0, population variance 1.
        let n = c.valid_len as f64;
        let mean = c.samples[..c.valid_len].iter().sum::<f64>() / n;
        let var = c.samples[..c.valid_len].iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
        // Offset stays inside the utterance.
        assert!(c.offset + c.valid_len <= utts[c.utt_index].samples.len());
        assert_eq!(c.labels.as_ref().unwrap().len(), c.valid_len);
    }

    let again = batch_crop(&utts, budget, crop_len, &mut rng::stream(1, "crop")).unwrap();
    for (a, b) in crops.iter().zip(&again) {
        assert_eq!(a.offset, b.offset);
        assert_eq!(a.samples, b.samples);
    }
    let other = batch_crop(&utts, budget, crop_len, &mut rng::stream(2, "crop")).unwrap();
    assert!(crops.iter().zip(&other).any(|(a, b)| a.offset != b.offset));
}

#[test]
fn short_utterances_are_zero_padded() {
    let utts = vec![corpus::Utterance {
        id: "short".into(),
        samples: vec![0.0, 1.0, 0.0, -1.0, 0.5, -0.5],
        transcript: None,
        labels: Some(vec![0, 0, 1, 1, 2, 2]),
    }];
    let crops = batch_crop(&utts, 100, 10, &mut rng::stream(0, "pad")).unwrap();
    assert_eq!(crops.len(), 1);
    let c = &crops[0];
    assert_eq!(c.valid_len, 6);
    assert_eq!(c.offset, 0);
    assert!(c.samples[6..].iter().all(|&x| x == 0.0));
    assert_eq!(c.labels.as_ref().unwrap().as_slice(), &[0, 0, 1, 1, 2, 2]);
}

#[test]
fn crop_longer_than_budget_is_a_contract_error() {
    let utts = vec![corpus::Utterance {
        id: "u".into(),
        samples: vec![0.1; 50],
        transcript: None,
        labels: None,
    }];
    match batch_crop(&utts, 10, 20, &mut rng::stream(0, "x")) {
        Err(Error::Contract(_)) => {}
        other => panic!("expected contract error, got {other:?}"),
    }
}

#[test]
fn empty_alphabet_is_rejected() {
    let mut spec = plain_spec(2, 1);
    spec.alphabet.clear();
    spec.formant_table.clear();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(synthesize_corpus(&spec, 1, dir.path()), Err(Error::Data(_))));
}

#[test]
fn duplicate_formants_are_rejected() {
    let mut spec = plain_spec(3, 1);
    spec.formant_table[2] = spec.formant_table[0];
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(synthesize_corpus(&spec, 1, dir.path()), Err(Error::Data(_))));
}
