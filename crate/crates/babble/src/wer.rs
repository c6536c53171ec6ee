//! Word error rate via Levenshtein alignment over whitespace tokens, plus
//! corpus-level substitution reports.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WerBreakdown {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl WerBreakdown {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// One aligned step from the backtrace.
#[derive(Clone, Debug, PartialEq)]
enum AlignOp {
    Match,
    /// (reference index, hypothesis index)
    Sub(usize, usize),
    Del,
    Ins,
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Full edit-distance table: `d[i][j]` is the distance between the first `i`
/// reference tokens and the first `j` hypothesis tokens.
fn distance_table(r: &[&str], h: &[&str]) -> Vec<Vec<usize>> {
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = d[i - 1][j] + 1;
            let ins = d[i][j - 1] + 1;
            d[i][j] = sub.min(del).min(ins);
        }
    }
    d
}

/// Backtrace one optimal alignment. Ties prefer the diagonal move, then
/// deletion, then insertion, so "all" vs "al" counts as a substitution.
fn backtrace(r: &[&str], h: &[&str], d: &[Vec<usize>]) -> Vec<AlignOp> {
    let (mut i, mut j) = (r.len(), h.len());
    let mut ops = Vec::new();
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(r[i - 1] != h[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + cost {
                ops.push(if cost == 0 { AlignOp::Match } else { AlignOp::Sub(i - 1, j - 1) });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(AlignOp::Del);
            i -= 1;
        } else {
            ops.push(AlignOp::Ins);
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Word error rate of `hypothesis` against `reference`, with the edit
/// breakdown. The rate is (S + D + I) / reference length and can exceed 1.
pub fn word_error_rate(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r = tokens(reference);
    if r.is_empty() {
        return Err(Error::Degenerate(
            "empty reference: the error rate is undefined".into(),
        ));
    }
    let h = tokens(hypothesis);
    let d = distance_table(&r, &h);
    let (mut s, mut del, mut ins) = (0usize, 0usize, 0usize);
    for op in backtrace(&r, &h, &d) {
        match op {
            AlignOp::Match => {}
            AlignOp::Sub(..) => s += 1,
            AlignOp::Del => del += 1,
            AlignOp::Ins => ins += 1,
        }
    }
    Ok(WerBreakdown {
        wer: (s + del + ins) as f64 / r.len() as f64,
        substitutions: s,
        deletions: del,
        insertions: ins,
    })
}

/// Rank substitution pairs across a corpus of (reference, hypothesis) pairs.
/// Counts come from the same alignment `word_error_rate` uses; ties in count
/// break lexicographically on (reference word, hypothesis word).
pub fn top_word_errors(
    refs: &[String],
    hyps: &[String],
    k: usize,
) -> Result<Vec<(String, String, usize)>> {
    if refs.len() != hyps.len() {
        return Err(Error::Data(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (rs, hs) in refs.iter().zip(hyps) {
        let r = tokens(rs);
        let h = tokens(hs);
        let d = distance_table(&r, &h);
        for op in backtrace(&r, &h, &d) {
            if let AlignOp::Sub(i, j) = op {
                *counts.entry((r[i].to_string(), h[j].to_string())).or_insert(0) += 1;
            }
        }
    }
    let mut rows: Vec<(String, String, usize)> =
        counts.into_iter().map(|((a, b), c)| (a, b, c)).collect();
    // BTreeMap iteration is lexicographic; a stable sort on count keeps that
    // order within ties.
    rows.sort_by(|x, y| y.2.cmp(&x.2));
    rows.truncate(k);
    Ok(rows)
}
