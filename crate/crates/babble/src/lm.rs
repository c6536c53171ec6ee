//! Word n-gram language model: add-one smoothing over a closed vocabulary,
//! with a fixed-weight backoff to shorter histories that were never seen.
//!
//! The model is an evaluation fixture, so the scheme is deliberately plain:
//! every *seen* history stores a full add-one distribution over the
//! vocabulary (which always sums to 1), and an *unseen* history defers to
//! the next shorter one at a flat 0.4 discount. Words outside the vocabulary
//! get the add-one mass of an unseen type, discounted once per history
//! token.

use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

pub const SENTENCE_START: &str = "<s>";
pub const SENTENCE_END: &str = "</s>";
pub const UNKNOWN: &str = "<unk>";
pub const BACKOFF_WEIGHT: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct NGramLM {
    pub order: usize,
    /// ln P(word | history) for every seen history (length < order), smoothed
    /// add-one over the whole vocabulary.
    table: BTreeMap<Vec<String>, BTreeMap<String, f64>>,
    /// Every corpus word plus the sentence-end token; `<s>` is context only.
    pub vocab: BTreeSet<String>,
    /// ln probability of an out-of-vocabulary word under the empty history.
    ln_unk: f64,
}

fn check_token(w: &str) -> Result<()> {
    if w.is_empty() || w.chars().any(char::is_whitespace) {
        return Err(Error::Data(format!("bad token {w:?}: empty or contains whitespace")));
    }
    if w == SENTENCE_START || w == SENTENCE_END || w == UNKNOWN {
        return Err(Error::Data(format!("token {w} is reserved")));
    }
    Ok(())
}

/// Estimate an n-gram model from tokenized sentences.
///
/// Unigram events are the corpus words alone; higher orders pad with `<s>`
/// and append a `</s>` event per sentence, so bigrams and up model sentence
/// ends while the unigram stays a plain word frequency table.
pub fn train_ngram(sentences: &[Vec<String>], order: usize) -> Result<NGramLM> {
    if !(1..=4).contains(&order) {
        return Err(Error::Config(format!("n-gram order {order} outside [1, 4]")));
    }
    if sentences.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    for s in sentences {
        for w in s {
            check_token(w)?;
        }
    }

    let mut vocab: BTreeSet<String> = sentences.iter().flatten().cloned().collect();
    vocab.insert(SENTENCE_END.to_string());
    let v = vocab.len();

    // history -> (word -> count, total)
    let mut counts: BTreeMap<Vec<String>, (BTreeMap<String, usize>, usize)> = BTreeMap::new();
    let mut bump = |hist: Vec<String>, word: &str| {
        let e = counts.entry(hist).or_default();
        *e.0.entry(word.to_string()).or_insert(0) += 1;
        e.1 += 1;
    };
    for s in sentences {
        for w in s {
            bump(Vec::new(), w);
        }
    }
    for k in 2..=order {
        for s in sentences {
            let mut toks: Vec<String> = vec![SENTENCE_START.to_string(); k - 1];
            toks.extend(s.iter().cloned());
            toks.push(SENTENCE_END.to_string());
            for i in 0..=s.len() {
                bump(toks[i..i + k - 1].to_vec(), &toks[i + k - 1]);
            }
        }
    }

    let mut table = BTreeMap::new();
    for (hist, (events, total)) in counts {
        let denom = ((total + v) as f64).ln();
        let dist: BTreeMap<String, f64> = vocab
            .iter()
            .map(|w| {
                let c = events.get(w).copied().unwrap_or(0);
                (w.clone(), ((c + 1) as f64).ln() - denom)
            })
            .collect();
        table.insert(hist, dist);
    }

    let unigram_total: usize = sentences.iter().map(Vec::len).sum();
    let ln_unk = -(((unigram_total + v) as f64).ln());
    Ok(NGramLM { order, table, vocab, ln_unk })
}

impl NGramLM {
    /// ln P(word | history). The history is truncated to the model order;
    /// unseen histories back off one token at a time at a 0.4 discount, and
    /// out-of-vocabulary words take the unseen-type mass after backing off
    /// past every history token.
    pub fn log_p(&self, history: &[String], word: &str) -> f64 {
        let start = history.len().saturating_sub(self.order.saturating_sub(1));
        self.backoff(&history[start..], word)
    }

    fn backoff(&self, hist: &[String], word: &str) -> f64 {
        if !self.vocab.contains(word) {
            return hist.len() as f64 * BACKOFF_WEIGHT.ln() + self.ln_unk;
        }
        match self.table.get(hist) {
            Some(dist) => dist[word],
            None if hist.is_empty() => self.ln_unk,
            None => BACKOFF_WEIGHT.ln() + self.backoff(&hist[1..], word),
        }
    }

    /// ln probability of a sentence: every word event plus the final
    /// sentence-end event, each conditioned on the preceding window.
    pub fn log_prob_sentence(&self, words: &[String]) -> f64 {
        let mut hist: Vec<String> = vec![SENTENCE_START.to_string(); self.order.saturating_sub(1)];
        let mut lp = 0.0;
        for w in words.iter().map(String::as_str).chain(std::iter::once(SENTENCE_END)) {
            lp += self.log_p(&hist, w);
            if self.order > 1 {
                hist.remove(0);
                hist.push(w.to_string());
            }
        }
        lp
    }

    /// exp of the mean negative log probability per event (words plus one
    /// sentence end each).
    pub fn perplexity(&self, sentences: &[Vec<String>]) -> Result<f64> {
        let events: usize = sentences.iter().map(|s| s.len() + 1).sum();
        if events == 0 {
            return Err(Error::Degenerate("no events to score".into()));
        }
        let lp: f64 = sentences.iter().map(|s| self.log_prob_sentence(s)).sum();
        Ok((-lp / events as f64).exp())
    }

    fn entries_at(&self, k: usize) -> impl Iterator<Item = (&Vec<String>, &BTreeMap<String, f64>)> {
        self.table.iter().filter(move |(h, _)| h.len() == k - 1)
    }
}

/// Write the model as ARPA-style text: a `\data\` header, one `\k-grams:`
/// section per order with `logprob<TAB>tokens<TAB>backoff` lines (the
/// backoff column is the fixed ln 0.4 and omitted on the highest order),
/// and an `<unk>` line carrying the out-of-vocabulary mass.
pub fn write_lm(lm: &NGramLM, path: &Path) -> Result<()> {
    let mut out = String::from("\\data\\\n");
    for k in 1..=lm.order {
        let mut n: usize = lm.entries_at(k).map(|(_, d)| d.len()).sum();
        if k == 1 {
            n += 1; // <unk>
        }
        out.push_str(&format!("ngram {k}={n}\n"));
    }
    for k in 1..=lm.order {
        out.push_str(&format!("\n\\{k}-grams:\n"));
        if k == 1 {
            out.push_str(&format!("{}\t{}\n", lm.ln_unk, UNKNOWN));
        }
        for (hist, dist) in lm.entries_at(k) {
            for (w, lp) in dist {
                let mut toks = hist.join(" ");
                if !toks.is_empty() {
                    toks.push(' ');
                }
                toks.push_str(w);
                if k < lm.order {
                    out.push_str(&format!("{lp}\t{toks}\t{}\n", BACKOFF_WEIGHT.ln()));
                } else {
                    out.push_str(&format!("{lp}\t{toks}\n"));
                }
            }
        }
    }
    out.push_str("\n\\end\\\n");
    fs::write(path, out)?;
    Ok(())
}

pub fn read_lm(path: &Path) -> Result<NGramLM> {
    let text = fs::read_to_string(path)?;
    let bad = |lineno: usize, msg: &str| {
        Error::Data(format!("{}:{}: {msg}", path.display(), lineno + 1))
    };

    let mut declared: Vec<usize> = Vec::new();
    let mut table: BTreeMap<Vec<String>, BTreeMap<String, f64>> = BTreeMap::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut ln_unk: Option<f64> = None;
    let mut section: Option<usize> = None;
    let mut saw_data = false;
    let mut saw_end = false;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if line == "\\data\\" {
            saw_data = true;
            continue;
        }
        if line == "\\end\\" {
            saw_end = true;
            continue;
        }
        if let Some(rest) = line.strip_prefix("ngram ") {
            let (k, n) = rest
                .split_once('=')
                .ok_or_else(|| bad(lineno, "expected ngram k=count"))?;
            let k: usize = k.trim().parse().map_err(|_| bad(lineno, "bad order"))?;
            let n: usize = n.trim().parse().map_err(|_| bad(lineno, "bad count"))?;
            if k != declared.len() + 1 {
                return Err(bad(lineno, "orders must be declared in sequence"));
            }
            declared.push(n);
            counts.push(0);
            continue;
        }
        if line.starts_with('\\') && line.ends_with("-grams:") {
            let k: usize = line[1..line.len() - 7]
                .parse()
                .map_err(|_| bad(lineno, "bad section header"))?;
            if k == 0 || k > declared.len() {
                return Err(bad(lineno, "section order was not declared"));
            }
            section = Some(k);
            continue;
        }
        let k = section.ok_or_else(|| bad(lineno, "entry outside any section"))?;
        let mut fields = line.split('\t');
        let lp: f64 = fields
            .next()
            .ok_or_else(|| bad(lineno, "missing log-probability"))?
            .parse()
            .map_err(|_| bad(lineno, "bad log-probability"))?;
        let toks = fields.next().ok_or_else(|| bad(lineno, "missing tokens"))?;
        let toks: Vec<String> = toks.split(' ').map(str::to_string).collect();
        if toks.len() != k {
            return Err(bad(lineno, "token count does not match the section order"));
        }
        counts[k - 1] += 1;
        if k == 1 && toks[0] == UNKNOWN {
            ln_unk = Some(lp);
            continue;
        }
        let word = toks.last().unwrap().clone();
        let hist = toks[..k - 1].to_vec();
        table.entry(hist).or_default().insert(word, lp);
    }

    if !saw_data || !saw_end {
        return Err(Error::Data(format!(
            "{}: missing \\data\\ or \\end\\ marker",
            path.display()
        )));
    }
    if declared.is_empty() {
        return Err(Error::Data(format!("{}: no orders declared", path.display())));
    }
    for (k, (&want, &got)) in declared.iter().zip(&counts).enumerate() {
        if want != got {
            return Err(Error::Data(format!(
                "{}: declared {want} entries at order {} but found {got}",
                path.display(),
                k + 1
            )));
        }
    }
    let ln_unk =
        ln_unk.ok_or_else(|| Error::Data(format!("{}: no <unk> entry", path.display())))?;
    let vocab: BTreeSet<String> = table
        .get(&Vec::new())
        .ok_or_else(|| Error::Data(format!("{}: no unigram section", path.display())))?
        .keys()
        .cloned()
        .collect();
    Ok(NGramLM { order: declared.len(), table, vocab, ln_unk })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn unigram_hand_count() {
        // "a a b": counts a=2, b=1 over 3 events; vocab {a, b, </s>}.
        let lm = train_ngram(&[sent("a a b")], 1).unwrap();
        assert!((lm.log_p(&[], "a").exp() - 0.5).abs() < 1e-12);
        assert!((lm.log_p(&[], "b").exp() - 2.0 / 6.0).abs() < 1e-12);
        assert!((lm.log_p(&[], SENTENCE_END).exp() - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn bigram_hand_count() {
        let lm = train_ngram(&[sent("a b a b")], 2).unwrap();
        let h = vec!["a".to_string()];
        assert!((lm.log_p(&h, "b").exp() - 0.6).abs() < 1e-12);
        // History "b" saw one "a" and one "</s>".
        let h = vec!["b".to_string()];
        assert!((lm.log_p(&h, "a").exp() - 0.4).abs() < 1e-12);
        assert!((lm.log_p(&h, SENTENCE_END).exp() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn seen_histories_normalize() {
        let corpus = [sent("a b c a"), sent("b c"), sent("a a b")];
        let lm = train_ngram(&corpus, 3).unwrap();
        for hist in lm.table.keys() {
            let total: f64 = lm.vocab.iter().map(|w| lm.log_p(hist, w).exp()).sum();
            assert!((total - 1.0).abs() < 1e-9, "history {hist:?} sums to {total}");
        }
        // Unseen history: the mass backs off and stays below 1.
        let h = vec!["c".to_string(), "c".to_string()];
        let total: f64 = lm.vocab.iter().map(|w| lm.log_p(&h, w).exp()).sum();
        assert!(total <= 1.0 + 1e-6);
        assert!((total - BACKOFF_WEIGHT).abs() < 1e-9);
    }

    #[test]
    fn backoff_discounts_by_missing_levels() {
        let lm = train_ngram(&[sent("a b"), sent("a c")], 3).unwrap();
        // ["b", "a"] was never seen, but ["a"] was.
        let h = vec!["b".to_string(), "a".to_string()];
        let direct = lm.log_p(&vec!["a".to_string()], "b");
        assert!((lm.log_p(&h, "b") - (BACKOFF_WEIGHT.ln() + direct)).abs() < 1e-12);
        // Out-of-vocabulary word: one discount per history token.
        let expect = 2.0 * BACKOFF_WEIGHT.ln() + lm.ln_unk;
        assert!((lm.log_p(&h, "zzz") - expect).abs() < 1e-12);
    }

    #[test]
    fn history_longer_than_order_is_truncated() {
        let lm = train_ngram(&[sent("a b a b a")], 2).unwrap();
        let long = vec!["x".into(), "y".into(), "a".into()];
        let short = vec!["a".to_string()];
        assert_eq!(lm.log_p(&long, "b"), lm.log_p(&short, "b"));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(train_ngram(&[sent("a")], 0), Err(Error::Config(_))));
        assert!(matches!(train_ngram(&[sent("a")], 5), Err(Error::Config(_))));
        assert!(matches!(train_ngram(&[], 2), Err(Error::Data(_))));
        let reserved = vec![vec!["<s>".to_string()]];
        assert!(matches!(train_ngram(&reserved, 2), Err(Error::Data(_))));
    }
}
