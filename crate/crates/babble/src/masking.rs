//! Span masking over latent frames, plus mask statistics.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Sample distinct span starts; spans may overlap and merge.
    OverlapFixed,
    /// Place non-overlapping spans with lengths drawn uniformly from [a, b].
    NoOverlapUniform { a: usize, b: usize },
    /// Non-overlapping spans with Poisson-distributed lengths (rounded, >= 1).
    NoOverlapPoisson { lambda: f64 },
    /// Non-overlapping spans with rounded normal lengths clamped to >= 1.
    NoOverlapNormal { mu: f64, sigma: f64 },
    /// Non-overlapping spans of one fixed length.
    NoOverlapFixed { len: usize },
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    /// Start probability: each frame is a span start with probability p.
    pub p: f64,
    /// Span length for `OverlapFixed`.
    pub m: usize,
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("mask probability {} outside (0, 1)", self.p)));
        }
        if self.m == 0 {
            return Err(Error::Config("span length must be positive".into()));
        }
        match self.strategy {
            MaskStrategy::NoOverlapUniform { a, b } => {
                if a == 0 || a > b {
                    return Err(Error::Config(format!("bad uniform span range [{a}, {b}]")));
                }
            }
            MaskStrategy::NoOverlapPoisson { lambda } => {
                if !(lambda > 0.0) {
                    return Err(Error::Config(format!("poisson rate {lambda} must be positive")));
                }
            }
            MaskStrategy::NoOverlapNormal { mu, sigma } => {
                if !(mu > 0.0) || !(sigma >= 0.0) {
                    return Err(Error::Config(format!("bad normal parameters ({mu}, {sigma})")));
                }
            }
            MaskStrategy::NoOverlapFixed { len } => {
                if len == 0 {
                    return Err(Error::Config("fixed span length must be positive".into()));
                }
            }
            MaskStrategy::OverlapFixed => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    /// Per-frame mask flags.
    pub mask: Vec<bool>,
    /// Maximal masked runs as (start, length), in order.
    pub spans: Vec<(usize, usize)>,
}

impl MaskSet {
    pub fn from_flags(mask: Vec<bool>) -> MaskSet {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < mask.len() {
            if mask[i] {
                let start = i;
                while i < mask.len() && mask[i] {
                    i += 1;
                }
                spans.push((start, i - start));
            } else {
                i += 1;
            }
        }
        MaskSet { mask, spans }
    }

    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// Sample a mask over `t` frames.
pub fn sample_mask(t: usize, cfg: &MaskConfig, rng: &mut ChaCha8Rng) -> Result<MaskSet> {
    cfg.validate()?;
    if t == 0 {
        return Err(Error::Contract("cannot mask an empty sequence".into()));
    }
    let mut mask = vec![false; t];
    match cfg.strategy {
        MaskStrategy::OverlapFixed => {
            let n_start = ((cfg.p * t as f64).round() as usize).max(1);
            let n_start = n_start.min(t);
            // Partial Fisher-Yates for distinct starts.
            let mut idx: Vec<usize> = (0..t).collect();
            for i in 0..n_start {
                let j = rng.gen_range(i..t);
                idx.swap(i, j);
            }
            for &s in &idx[..n_start] {
                let end = (s + cfg.m).min(t);
                for flag in &mut mask[s..end] {
                    *flag = true;
                }
            }
        }
        _ => {
            let n_place = ((cfg.p * t as f64).round() as usize).max(1);
            let budget = 10 * t;
            let mut attempts = 0usize;
            for _ in 0..n_place {
                let len = draw_len(cfg.strategy, rng).min(t);
                // Rejection-sample a start over cells that keep spans disjoint.
                loop {
                    if attempts >= budget {
                        break;
                    }
                    attempts += 1;
                    let s = rng.gen_range(0..=t - len);
                    if mask[s..s + len].iter().all(|&m| !m) {
                        for flag in &mut mask[s..s + len] {
                            *flag = true;
                        }
                        break;
                    }
                }
                if attempts >= budget {
                    break;
                }
            }
        }
    }
    Ok(MaskSet::from_flags(mask))
}

fn draw_len(strategy: MaskStrategy, rng: &mut ChaCha8Rng) -> usize {
    match strategy {
        MaskStrategy::OverlapFixed => unreachable!("overlap strategy has no per-span draw"),
        MaskStrategy::NoOverlapUniform { a, b } => rng.gen_range(a..=b),
        MaskStrategy::NoOverlapPoisson { lambda } => {
            let d = Poisson::new(lambda).expect("validated");
            (d.sample(rng).round() as usize).max(1)
        }
        MaskStrategy::NoOverlapNormal { mu, sigma } => {
            let d = Normal::new(mu, sigma).expect("validated");
            (d.sample(rng).round().max(1.0)) as usize
        }
        MaskStrategy::NoOverlapFixed { len } => len,
    }
}

#[derive(Clone, Debug)]
pub struct MaskStats {
    pub mean_len: f64,
    pub median_len: f64,
    pub max_len: usize,
    pub masked_fraction: f64,
    /// Span length -> count, pooled over all trials.
    pub histogram: BTreeMap<usize, u64>,
}

/// Pool span-run statistics over `n_trials` fresh masks per config.
pub fn mask_statistics(
    configs: &[MaskConfig],
    t: usize,
    n_trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MaskStats>> {
    if n_trials == 0 {
        return Err(Error::Contract("need at least one trial".into()));
    }
    let mut out = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut lengths: Vec<usize> = Vec::new();
        let mut masked = 0usize;
        for _ in 0..n_trials {
            let m = sample_mask(t, cfg, rng)?;
            masked += m.num_masked();
            lengths.extend(m.spans.iter().map(|&(_, l)| l));
        }
        lengths.sort_unstable();
        if lengths.is_empty() {
            return Err(Error::Degenerate("mask sampler produced no spans".into()));
        }
        let n = lengths.len();
        let mean = lengths.iter().sum::<usize>() as f64 / n as f64;
        let median = if n % 2 == 1 {
            lengths[n / 2] as f64
        } else {
            (lengths[n / 2 - 1] + lengths[n / 2]) as f64 / 2.0
        };
        let mut histogram = BTreeMap::new();
        for &l in &lengths {
            *histogram.entry(l).or_default() += 1;
        }
        out.push(MaskStats {
            mean_len: mean,
            median_len: median,
            max_len: *lengths.last().unwrap(),
            masked_fraction: masked as f64 / (t * n_trials) as f64,
            histogram,
        });
    }
    Ok(out)
}

/// Replace masked rows of `z` ([T, d]) with a learned embedding ([d]).
pub fn apply_mask(
    g: &mut Graph,
    z: NodeId,
    mask: &MaskSet,
    embedding: NodeId,
) -> Result<NodeId> {
    let (t, d) = {
        let tz = g.value(z);
        if tz.rank() != 2 {
            return Err(Error::Dim(format!("apply_mask expects [T, d], got {:?}", tz.shape)));
        }
        (tz.rows(), tz.cols())
    };
    if mask.mask.len() != t {
        return Err(Error::Dim(format!(
            "mask covers {} frames but sequence has {t}",
            mask.mask.len()
        )));
    }
    let te = g.value(embedding);
    if te.numel() != d {
        return Err(Error::Dim(format!(
            "mask embedding has {} entries for {d}-dim frames",
            te.numel()
        )));
    }
    let keep: Vec<f64> = mask.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    let fill: Vec<f64> = mask.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let keep = g.constant(Tensor::vector(keep));
    let fill = g.constant(Tensor::vector(fill));
    let kept = g.mul_col(z, keep)?;
    let emb_row = g.reshape(embedding, &[1, d])?;
    let tiled = g.gather_rows(emb_row, &vec![0; t])?;
    let filled = g.mul_col(tiled, fill)?;
    g.add(kept, filled)
}
