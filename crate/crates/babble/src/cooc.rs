//! Codebook–label co-occurrence: which discrete codewords fire for which
//! corpus symbols, as counts and P(label | codeword) heatmap data.

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{SpeechModel, TrainFlags};
use crate::quantizer::{quantize, SelectMode};
use crate::rng;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct CooccurrenceMatrix {
    /// Distinct label ids seen, ascending; one row each.
    pub labels: Vec<u16>,
    /// Distinct codeword ids seen, ascending; one column each.
    pub codewords: Vec<u64>,
    pub counts: Vec<Vec<u64>>,
    /// P(label | codeword); every column sums to 1.
    pub conditional: Vec<Vec<f64>>,
}

/// Flatten per-group entry picks into one codeword id, first group most
/// significant: id = sum_g idx_g * V^(G-1-g).
pub fn codeword_id(indices: &[usize], entries: usize) -> u64 {
    indices.iter().fold(0u64, |acc, &i| acc * entries as u64 + i as u64)
}

/// Label each latent frame with the majority symbol over its receptive
/// field; ties pick the smallest symbol id.
pub fn majority_frame_labels(
    labels: &[u16],
    num_frames: usize,
    stride: usize,
    receptive_field: usize,
) -> Result<Vec<u16>> {
    let mut out = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let start = t * stride;
        let end = (start + receptive_field).min(labels.len());
        if start >= end {
            return Err(Error::Contract(format!(
                "frame {t} has an empty receptive field over {} labels",
                labels.len()
            )));
        }
        let mut tally: Vec<(u16, usize)> = Vec::new();
        for &l in &labels[start..end] {
            match tally.iter_mut().find(|(s, _)| *s == l) {
                Some((_, c)) => *c += 1,
                None => tally.push((l, 1)),
            }
        }
        // Max count first, then smallest id; ascending sort on (-count, id).
        tally.sort_by_key(|&(s, c)| (std::cmp::Reverse(c), s));
        out.push(tally[0].0);
    }
    Ok(out)
}

/// Accumulate (label, codeword) pairs into the co-occurrence matrix.
pub fn cooccurrence_from_pairs(pairs: &[(u16, u64)]) -> Result<CooccurrenceMatrix> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("no frames to correlate".into()));
    }
    let labels: Vec<u16> = pairs.iter().map(|p| p.0).collect::<BTreeSet<_>>().into_iter().collect();
    let codewords: Vec<u64> =
        pairs.iter().map(|p| p.1).collect::<BTreeSet<_>>().into_iter().collect();
    let row = |l: u16| labels.binary_search(&l).expect("label indexed");
    let col = |c: u64| codewords.binary_search(&c).expect("codeword indexed");
    let mut counts = vec![vec![0u64; codewords.len()]; labels.len()];
    for &(l, c) in pairs {
        counts[row(l)][col(c)] += 1;
    }
    let col_totals: Vec<u64> =
        (0..codewords.len()).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let conditional: Vec<Vec<f64>> = counts
        .iter()
        .map(|r| r.iter().zip(&col_totals).map(|(&c, &tot)| c as f64 / tot as f64).collect())
        .collect();
    Ok(CooccurrenceMatrix { labels, codewords, counts, conditional })
}

impl CooccurrenceMatrix {
    /// Mean over codewords of the strongest conditional in each column: 1.0
    /// means every codeword is specific to one label, 1/|labels| is chance.
    pub fn mean_max_conditional(&self) -> f64 {
        let m: f64 = (0..self.codewords.len())
            .map(|j| self.conditional.iter().map(|r| r[j]).fold(0.0, f64::max))
            .sum();
        m / self.codewords.len() as f64
    }
}

/// Quantize every utterance in eval mode and correlate each frame's hard
/// codeword with the majority symbol over that frame's receptive field.
pub fn codebook_label_cooccurrence(
    model: &SpeechModel,
    utts: &[Utterance],
) -> Result<CooccurrenceMatrix> {
    let flags = TrainFlags { encoder: false, quantizer: false, transformer: false, heads: false };
    let mut r = rng::stream(0, "cooc");
    let mut pairs = Vec::new();
    for u in utts {
        let labels = u
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("utterance {} has no alignment", u.id)))?;
        if labels.len() != u.samples.len() {
            return Err(Error::Data(format!(
                "utterance {}: {} labels for {} samples",
                u.id,
                labels.len(),
                u.samples.len()
            )));
        }
        let mut g = Graph::new();
        let bound = model.bind(&mut g, flags);
        let enc = crate::encoder::encode(&mut g, &bound.encoder, &model.cfg.encoder, &u.samples, false)?;
        // The argmax entry per group is temperature-invariant, so eval
        // quantization can run at tau = 1.
        let qr = quantize(&mut g, &bound.codebook, enc.frames, 1.0, false, SelectMode::Hard, &mut r)?;
        let frame_labels =
            majority_frame_labels(labels, enc.num_frames, enc.stride, enc.receptive_field)?;
        for (l, idx) in frame_labels.iter().zip(&qr.hard_indices) {
            pairs.push((*l, codeword_id(idx, model.cfg.quantizer.entries)));
        }
    }
    cooccurrence_from_pairs(&pairs)
}

/// One CSV line per (label, codeword) cell, zeros included.
pub fn write_cooccurrence_csv(m: &CooccurrenceMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("label,codeword,count,conditional\n");
    for (i, &l) in m.labels.iter().enumerate() {
        for (j, &c) in m.codewords.iter().enumerate() {
            writeln!(out, "{l},{c},{},{}", m.counts[i][j], m.conditional[i][j])
                .expect("string write");
        }
    }
    fs::write(path, out)?;
    Ok(())
}
