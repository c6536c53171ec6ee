//! CTC decoding: greedy collapse and a lexicon-free prefix beam search with
//! shallow n-gram fusion and a word-insertion bonus at word boundaries.

use crate::ctc::{validate_log_rows, BLANK};
use crate::error::{Error, Result};
use crate::graph::logaddexp;
use crate::lm::NGramLM;
use crate::tensor::{argmax, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BOUNDARY: char = '|';

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    BeamNolm,
    BeamLm,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam: usize,
    /// Weight on ln P_LM at word boundaries; fused only in `beam_lm` mode.
    pub lm_weight: f64,
    /// Additive bonus per emitted word (negative values penalize length).
    pub word_insert: f64,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(0.0..=5.0).contains(&self.lm_weight) {
            return Err(Error::Config(format!(
                "lm weight {} outside [0, 5]",
                self.lm_weight
            )));
        }
        if !(-5.0..=5.0).contains(&self.word_insert) {
            return Err(Error::Config(format!(
                "word insertion bonus {} outside [-5, 5]",
                self.word_insert
            )));
        }
        Ok(())
    }
}

/// Task symbols must be unique; id i+1 maps to `alphabet[i]`, id 0 is blank.
pub fn check_alphabet(alphabet: &[char]) -> Result<()> {
    if alphabet.is_empty() {
        return Err(Error::Config("empty task alphabet".into()));
    }
    for (i, c) in alphabet.iter().enumerate() {
        if alphabet[..i].contains(c) {
            return Err(Error::Config(format!("duplicate alphabet symbol {c:?}")));
        }
    }
    Ok(())
}

fn check_dims(log_probs: &Tensor, alphabet: &[char]) -> Result<()> {
    validate_log_rows(log_probs)?;
    if log_probs.cols() != alphabet.len() + 1 {
        return Err(Error::Dim(format!(
            "{} classes for an alphabet of {} symbols plus blank",
            log_probs.cols(),
            alphabet.len()
        )));
    }
    Ok(())
}

fn render(ids: &[usize], alphabet: &[char]) -> String {
    let s: String = ids
        .iter()
        .map(|&id| {
            let c = alphabet[id - 1];
            if c == BOUNDARY {
                ' '
            } else {
                c
            }
        })
        .collect();
    s.trim().to_string()
}

/// Per-frame argmax, collapse repeats, drop blanks, map `|` to space.
pub fn greedy_decode(log_probs: &Tensor, alphabet: &[char]) -> Result<String> {
    check_alphabet(alphabet)?;
    check_dims(log_probs, alphabet)?;
    let mut ids = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..log_probs.rows() {
        let k = argmax(log_probs.row(t));
        if k != prev && k != BLANK {
            ids.push(k);
        }
        prev = k;
    }
    Ok(render(&ids, alphabet))
}

#[derive(Clone, Debug)]
struct Hyp {
    /// ln mass of paths ending in blank.
    pb: f64,
    /// ln mass of paths ending in the prefix's last symbol.
    pnb: f64,
    /// Accumulated fusion score over completed words.
    fused: f64,
    /// Completed words, the LM context.
    words: Vec<String>,
}

/// The word still being spelled: prefix symbols after the last boundary.
fn pending_word(prefix: &[usize], alphabet: &[char]) -> String {
    prefix
        .iter()
        .rev()
        .map(|&id| alphabet[id - 1])
        .take_while(|&c| c != BOUNDARY)
        .collect::<Vec<char>>()
        .into_iter()
        .rev()
        .collect()
}

fn word_bonus(lm: Option<&NGramLM>, cfg: &DecodeConfig, hist: &[String], word: &str) -> f64 {
    match lm {
        Some(m) => cfg.lm_weight * m.log_p(hist, word) + cfg.word_insert,
        None => 0.0,
    }
}

/// Prefix beam search. Returns the best hypothesis and its score: ln path
/// mass of the prefix plus the fusion terms (including the trailing
/// partial word). Ties prefer the lexicographically smaller prefix.
pub fn beam_decode_scored(
    log_probs: &Tensor,
    alphabet: &[char],
    lm: Option<&NGramLM>,
    cfg: &DecodeConfig,
) -> Result<(String, f64)> {
    cfg.validate()?;
    check_alphabet(alphabet)?;
    check_dims(log_probs, alphabet)?;
    if cfg.mode == DecodeMode::Greedy {
        let s = greedy_decode(log_probs, alphabet)?;
        return Ok((s, f64::NAN));
    }
    let lm = match cfg.mode {
        DecodeMode::BeamLm => {
            let m = lm.ok_or_else(|| Error::Data("beam_lm mode needs a language model".into()))?;
            if m.vocab.is_empty() {
                return Err(Error::Data("language model has an empty vocabulary".into()));
            }
            Some(m)
        }
        _ => None,
    };

    let boundary_id = alphabet.iter().position(|&c| c == BOUNDARY).map(|i| i + 1);
    let mut beam: BTreeMap<Vec<usize>, Hyp> = BTreeMap::new();
    beam.insert(
        Vec::new(),
        Hyp { pb: 0.0, pnb: f64::NEG_INFINITY, fused: 0.0, words: Vec::new() },
    );

    for t in 0..log_probs.rows() {
        let row = log_probs.row(t).to_vec();
        let mut next: BTreeMap<Vec<usize>, Hyp> = BTreeMap::new();
        let upsert = |map: &mut BTreeMap<Vec<usize>, Hyp>,
                          prefix: Vec<usize>,
                          blank_end: bool,
                          mass: f64,
                          fused: f64,
                          words: &[String]| {
            let e = map.entry(prefix).or_insert_with(|| Hyp {
                pb: f64::NEG_INFINITY,
                pnb: f64::NEG_INFINITY,
                fused,
                words: words.to_vec(),
            });
            if blank_end {
                e.pb = logaddexp(e.pb, mass);
            } else {
                e.pnb = logaddexp(e.pnb, mass);
            }
        };
        for (prefix, h) in &beam {
            let tot = logaddexp(h.pb, h.pnb);
            // Blank extends the same prefix.
            upsert(&mut next, prefix.clone(), true, tot + row[BLANK], h.fused, &h.words);
            for c in 1..row.len() {
                let is_repeat = prefix.last() == Some(&c);
                if is_repeat {
                    // Same symbol merges into the existing prefix...
                    upsert(&mut next, prefix.clone(), false, h.pnb + row[c], h.fused, &h.words);
                    // ...and only a blank-separated path starts a new copy.
                    if h.pb == f64::NEG_INFINITY {
                        continue;
                    }
                }
                let base = if is_repeat { h.pb } else { tot };
                let mut prefix2 = prefix.clone();
                prefix2.push(c);
                let (mut fused2, mut words2) = (h.fused, h.words.clone());
                if Some(c) == boundary_id {
                    let word = pending_word(prefix, alphabet);
                    if !word.is_empty() {
                        fused2 += word_bonus(lm, cfg, &words2, &word);
                        words2.push(word);
                    }
                }
                upsert(&mut next, prefix2, false, base + row[c], fused2, &words2);
            }
        }
        let mut items: Vec<(Vec<usize>, Hyp)> = next.into_iter().collect();
        items.sort_by(|a, b| {
            let sa = logaddexp(a.1.pb, a.1.pnb) + a.1.fused;
            let sb = logaddexp(b.1.pb, b.1.pnb) + b.1.fused;
            sb.partial_cmp(&sa).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        items.truncate(cfg.beam);
        beam = items.into_iter().collect();
    }

    let mut best: Option<(f64, &Vec<usize>)> = None;
    let mut scores: BTreeMap<&Vec<usize>, f64> = BTreeMap::new();
    for (prefix, h) in &beam {
        let mut score = logaddexp(h.pb, h.pnb) + h.fused;
        let trailing = pending_word(prefix, alphabet);
        if !trailing.is_empty() {
            score += word_bonus(lm, cfg, &h.words, &trailing);
        }
        scores.insert(prefix, score);
        // BTreeMap iterates prefixes in ascending order, so strict improvement
        // keeps the lexicographically smallest among ties.
        if best.map_or(true, |(s, _)| score > s) {
            best = Some((score, prefix));
        }
    }
    let (score, prefix) = best.expect("beam never empties");
    Ok((render(prefix, alphabet), score))
}

pub fn beam_decode(
    log_probs: &Tensor,
    alphabet: &[char],
    lm: Option<&NGramLM>,
    cfg: &DecodeConfig,
) -> Result<String> {
    beam_decode_scored(log_probs, alphabet, lm, cfg).map(|(s, _)| s)
}

/// 9x9 default lattice over the allowed intervals.
pub fn default_grid() -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for i in 0..9 {
        for j in 0..9 {
            pts.push((5.0 * i as f64 / 8.0, -5.0 + 10.0 * j as f64 / 8.0));
        }
    }
    pts
}

/// Exhaustive grid search for (lm_weight, word_insert), scored by corpus dev
/// WER under `beam_lm` decoding. Ties prefer the smaller lm_weight, then the
/// smaller |word_insert|, then the smaller word_insert.
pub fn tune_decode_weights(
    dev: &[(Tensor, String)],
    alphabet: &[char],
    lm: &NGramLM,
    beam: usize,
    grid: &[(f64, f64)],
) -> Result<DecodeConfig> {
    if dev.is_empty() {
        return Err(Error::Data("empty dev set".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty tuning grid".into()));
    }
    let mut best: Option<(f64, f64, f64, f64)> = None; // (wer, w, |wi|, wi)
    for &(w, wi) in grid {
        let cfg = DecodeConfig { mode: DecodeMode::BeamLm, beam, lm_weight: w, word_insert: wi };
        cfg.validate()?;
        let mut edits = 0usize;
        let mut words = 0usize;
        for (log_probs, reference) in dev {
            let hyp = beam_decode(log_probs, alphabet, Some(lm), &cfg)?;
            let b = crate::wer::word_error_rate(reference, &hyp)?;
            edits += b.edits();
            words += reference.split_whitespace().count();
        }
        let wer = edits as f64 / words as f64;
        let key = (wer, w, wi.abs(), wi);
        if best.map_or(true, |b| key < b) {
            best = Some(key);
        }
    }
    let (_, w, _, wi) = best.unwrap();
    Ok(DecodeConfig { mode: DecodeMode::BeamLm, beam, lm_weight: w, word_insert: wi })
}
