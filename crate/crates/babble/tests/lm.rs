use babble::corpus::{render_utterances, SynthSpec};
use babble::lm::{read_lm, train_ngram, write_lm, BACKOFF_WEIGHT};
use std::collections::BTreeSet;

/// Word sequences from the demo corpus transcripts.
fn transcript_sentences() -> Vec<Vec<String>> {
    let utts = render_utterances(&SynthSpec::demo(7), 40).unwrap();
    utts.iter()
        .map(|u| {
            u.transcript
                .as_ref()
                .unwrap()
                .split_whitespace()
                .map(str::to_string)
                .collect()
        })
        .collect()
}

#[test]
fn file_round_trip_preserves_every_coefficient() {
    let sentences = transcript_sentences();
    let dir = tempfile::tempdir().unwrap();
    for order in 1..=3 {
        let lm = train_ngram(&sentences, order).unwrap();
        let path = dir.path().join(format!("o{order}.lm"));
        write_lm(&lm, &path).unwrap();
        let back = read_lm(&path).unwrap();
        assert_eq!(back, lm, "order {order}");
    }
}

#[test]
fn self_perplexity_beats_the_uniform_baseline() {
    let sentences = transcript_sentences();
    for order in 2..=3 {
        let lm = train_ngram(&sentences, order).unwrap();
        let uniform = lm.vocab.len() as f64;
        let ppl = lm.perplexity(&sentences).unwrap();
        assert!(ppl > 1.0, "order {order}: perplexity {ppl} below 1");
        assert!(
            ppl < uniform,
            "order {order}: perplexity {ppl} does not beat uniform {uniform}"
        );
    }
}

#[test]
fn conditional_distributions_never_carry_excess_mass() {
    let sentences = transcript_sentences();
    let lm = train_ngram(&sentences, 3).unwrap();
    let words: Vec<String> = lm.vocab.iter().take(6).cloned().collect();
    let mut histories: Vec<Vec<String>> = vec![
        vec![],
        vec!["zzz".to_string()],                      // out of vocabulary
        vec!["zzz".to_string(), "yyy".to_string()],   // fully unseen pair
        vec![words[0].clone(), "zzz".to_string()],
        sentences[0][..2.min(sentences[0].len())].to_vec(), // seen bigram context
    ];
    for w in &words {
        histories.push(vec![w.clone()]);
    }
    for hist in &histories {
        let sum: f64 = lm.vocab.iter().map(|w| lm.log_p(hist, w).exp()).sum();
        assert!(sum <= 1.0 + 1e-6, "history {hist:?} sums to {sum}");
    }
    // The empty history is always a seen table row and must normalize exactly.
    let sum: f64 = lm.vocab.iter().map(|w| lm.log_p(&[], w).exp()).sum();
    assert!((sum - 1.0).abs() < 1e-9, "unigram sums to {sum}");
}

#[test]
fn oov_penalty_grows_by_one_discount_per_history_token() {
    let sentences = transcript_sentences();
    let lm = train_ngram(&sentences, 3).unwrap();
    let base = lm.log_p(&[], "zzzz");
    let one = lm.log_p(&["qqq".to_string()], "zzzz");
    let two = lm.log_p(&["qqq".to_string(), "rrr".to_string()], "zzzz");
    assert!((one - base - BACKOFF_WEIGHT.ln()).abs() < 1e-12);
    assert!((two - base - 2.0 * BACKOFF_WEIGHT.ln()).abs() < 1e-12);
    // Histories longer than order - 1 are truncated, not discounted further.
    let three = lm.log_p(
        &["ppp".to_string(), "qqq".to_string(), "rrr".to_string()],
        "zzzz",
    );
    assert_eq!(three, two);
}

#[test]
fn written_file_structure_is_consistent() {
    let sentences = transcript_sentences();
    let lm = train_ngram(&sentences, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lm");
    write_lm(&lm, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    assert!(text.starts_with("\\data\\\n"));
    assert!(text.ends_with("\\end\\\n"));

    let mut declared = Vec::new();
    let mut found = Vec::new();
    let mut section = 0usize;
    let mut unigram_words: BTreeSet<String> = BTreeSet::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("ngram ") {
            let (_, n) = rest.split_once('=').unwrap();
            declared.push(n.parse::<usize>().unwrap());
            found.push(0usize);
            continue;
        }
        if line.starts_with('\\') && line.ends_with("-grams:") {
            section = line[1..line.len() - 7].parse().unwrap();
            continue;
        }
        if line.is_empty() || line.starts_with('\\') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        found[section - 1] += 1;
        if fields[1] == "<unk>" {
            // The out-of-vocabulary line has no continuations to back off from.
            assert_eq!(section, 1);
            assert_eq!(fields.len(), 2, "line {line:?}");
        } else if section < lm.order {
            assert_eq!(fields.len(), 3, "line {line:?}");
            assert_eq!(fields[2], format!("{}", BACKOFF_WEIGHT.ln()), "line {line:?}");
        } else {
            assert_eq!(fields.len(), 2, "line {line:?}");
        }
        if section == 1 {
            unigram_words.insert(fields[1].to_string());
        }
    }
    assert_eq!(declared, found, "declared counts disagree with section sizes");
    assert!(unigram_words.contains("<unk>"));
    assert!(unigram_words.contains("</s>"));
    // Each unigram line is one vocabulary entry plus the <unk> line.
    assert_eq!(declared[0], lm.vocab.len() + 1);
}
