//! Product quantizer with Gumbel-softmax selection and straight-through
//! gradients, plus the diversity objective and codebook usage metrics.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub min: f64,
    pub decay: f64,
}

impl TemperatureSchedule {
    /// Temperature after `update` steps: max(min, start * decay^update).
    pub fn at(&self, update: u64) -> f64 {
        (self.start * self.decay.powf(update as f64)).max(self.min)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.min > 0.0 && self.min <= self.start) {
            return Err(Error::Config(format!(
                "temperature bounds ({}, {}) must be positive with min <= start",
                self.start, self.min
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1]", self.decay)));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    /// Number of codebook groups G.
    pub groups: usize,
    /// Entries per group V.
    pub entries: usize,
    /// Dimension of incoming latent frames.
    pub input_dim: usize,
    /// Dimension of the quantized output q.
    pub output_dim: usize,
    pub temperature: TemperatureSchedule,
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.entries == 0 {
            return Err(Error::Config("quantizer needs positive groups and entries".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("quantizer dims must be positive".into()));
        }
        if self.input_dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "input dim {} not divisible by {} groups",
                self.input_dim, self.groups
            )));
        }
        self.temperature.validate()
    }

    /// Total distinct codewords, V^G.
    pub fn num_codewords(&self) -> u64 {
        (self.entries as u64).pow(self.groups as u32)
    }
}

/// Owned quantizer parameters.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub config: QuantizerConfig,
    /// Stacked per-group entry tables, [G*V, input_dim/G].
    pub entries: Tensor,
    /// Logit projection, [input_dim, G*V] with bias [G*V].
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    /// Output projection, [input_dim, output_dim] with bias [output_dim].
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl Codebook {
    pub fn init(config: QuantizerConfig, rng: &mut ChaCha8Rng) -> Result<Codebook> {
        config.validate()?;
        let gv = config.groups * config.entries;
        let dg = config.input_dim / config.groups;
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        Ok(Codebook {
            config,
            entries: Tensor::new(vec![gv, dg], uniform(gv * dg, dg)).requiring_grad(),
            proj_w: Tensor::new(
                vec![config.input_dim, gv],
                uniform(config.input_dim * gv, config.input_dim),
            )
            .requiring_grad(),
            proj_b: Tensor::zeros(&[gv]).requiring_grad(),
            out_w: Tensor::new(
                vec![config.input_dim, config.output_dim],
                uniform(config.input_dim * config.output_dim, config.input_dim),
            )
            .requiring_grad(),
            out_b: Tensor::zeros(&[config.output_dim]).requiring_grad(),
        })
    }
}

pub struct CodebookBound {
    pub config: QuantizerConfig,
    pub entries: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

impl Codebook {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> CodebookBound {
        let leaf = |g: &mut Graph, t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            t.grad = None;
            g.leaf(t)
        };
        CodebookBound {
            config: self.config,
            entries: leaf(g, &self.entries),
            proj_w: leaf(g, &self.proj_w),
            proj_b: leaf(g, &self.proj_b),
            out_w: leaf(g, &self.out_w),
            out_b: leaf(g, &self.out_b),
        }
    }
}

/// How codewords are selected in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    /// One-hot argmax forward, soft gradients (straight-through).
    Hard,
    /// Soft mixture forward; fully differentiable.
    Soft,
}

pub struct QuantizeResult {
    /// Quantized frames, [T, output_dim].
    pub q: NodeId,
    /// Mean selection distribution per group, [G, V], from noise-free,
    /// temperature-free softmax of the logits.
    pub usage: NodeId,
    /// Per-group selection distributions actually used, each [T, V].
    pub soft_probs: Vec<NodeId>,
    /// Per-frame hard entry choices, [T][G].
    pub hard_indices: Vec<Vec<usize>>,
}

/// Gumbel-softmax over logits with additive noise and temperature.
pub fn gumbel_probs(logits: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    if logits.len() != noise.len() {
        return Err(Error::Dim(format!(
            "{} logits vs {} noise draws",
            logits.len(),
            noise.len()
        )));
    }
    let scaled: Vec<f64> = logits.iter().zip(noise).map(|(l, n)| (l + n) / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / z).collect())
}

/// Draw standard Gumbel noise: -ln(-ln u) with u clamped away from {0, 1}.
pub fn sample_gumbel(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Quantize latent frames `z` ([T, input_dim]).
///
/// Training draws fresh Gumbel noise per frame and group; evaluation is
/// noise-free and fully deterministic.
pub fn quantize(
    g: &mut Graph,
    bound: &CodebookBound,
    z: NodeId,
    tau: f64,
    train: bool,
    mode: SelectMode,
    rng: &mut ChaCha8Rng,
) -> Result<QuantizeResult> {
    let cfg = &bound.config;
    cfg.validate()?;
    if tau <= 0.0 {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let (t, d) = {
        let tz = g.value(z);
        if tz.rank() != 2 {
            return Err(Error::Dim(format!("quantize expects [T, d], got {:?}", tz.shape)));
        }
        (tz.rows(), tz.cols())
    };
    if d != cfg.input_dim {
        return Err(Error::Dim(format!(
            "frames have dim {d}, quantizer expects {}",
            cfg.input_dim
        )));
    }

    let logits = g.matmul(z, bound.proj_w)?;
    let logits = g.add_row(logits, bound.proj_b)?;

    let v = cfg.entries;
    let dg = cfg.input_dim / cfg.groups;
    let mut picked = Vec::with_capacity(cfg.groups);
    let mut usage_rows = Vec::with_capacity(cfg.groups);
    let mut soft_probs = Vec::with_capacity(cfg.groups);
    let mut hard_cols: Vec<Vec<usize>> = Vec::with_capacity(cfg.groups);
    for gi in 0..cfg.groups {
        let group_logits = g.slice_cols(logits, gi * v, v)?;

        // Usage statistics always come from the clean logits.
        let clean = g.softmax(group_logits, 1)?;
        usage_rows.push(g.mean_axis0(clean)?);

        let noisy = if train {
            let noise = Tensor::matrix(t, v, sample_gumbel(t * v, rng));
            let noise = g.constant(noise);
            g.add(group_logits, noise)?
        } else {
            group_logits
        };
        let scaled = g.scale(noisy, 1.0 / tau)?;
        let probs = g.softmax(scaled, 1)?;
        soft_probs.push(probs);

        let hard: Vec<usize> = {
            let tp = g.value(probs);
            (0..t).map(|r| crate::tensor::argmax(tp.row(r))).collect()
        };
        hard_cols.push(hard);

        let table = g.slice_rows(bound.entries, gi * v, v)?;
        let sel = match mode {
            SelectMode::Hard => {
                let onehot = g.straight_through_rows(probs)?;
                g.matmul(onehot, table)?
            }
            SelectMode::Soft => g.matmul(probs, table)?,
        };
        debug_assert_eq!(g.value(sel).shape, vec![t, dg]);
        picked.push(sel);
    }

    let cat = g.concat_cols(&picked)?;
    let q = g.matmul(cat, bound.out_w)?;
    let q = g.add_row(q, bound.out_b)?;
    let usage = g.concat_rows(&usage_rows)?;

    let hard_indices: Vec<Vec<usize>> =
        (0..t).map(|r| hard_cols.iter().map(|col| col[r]).collect()).collect();
    Ok(QuantizeResult { q, usage, soft_probs, hard_indices })
}

/// Project latents straight through the output projection, bypassing
/// codeword selection. Used when targets are the continuous latents.
pub fn project_latents(g: &mut Graph, bound: &CodebookBound, z: NodeId) -> Result<NodeId> {
    let q = g.matmul(z, bound.out_w)?;
    g.add_row(q, bound.out_b)
}

/// Diversity objective on mean usage [G, V]: (1/GV) * sum p ln p.
/// Minimizing drives usage towards uniform; the minimum -ln(V)/V is reached
/// exactly when every group's usage is uniform.
pub fn diversity_loss(g: &mut Graph, usage: NodeId) -> Result<NodeId> {
    let (groups, entries) = {
        let u = g.value(usage);
        if u.rank() != 2 {
            return Err(Error::Dim(format!("usage must be [G, V], got {:?}", u.shape)));
        }
        if u.data.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract("usage contains negative probabilities".into()));
        }
        (u.rows(), u.cols())
    };
    let h = g.xlogx(usage)?;
    let s = g.sum(h)?;
    g.scale(s, 1.0 / (groups * entries) as f64)
}

/// Eager twin of [`diversity_loss`] for metrics and tests.
pub fn diversity_loss_value(usage: &Tensor) -> Result<f64> {
    if usage.rank() != 2 {
        return Err(Error::Dim(format!("usage must be [G, V], got {:?}", usage.shape)));
    }
    if usage.data.iter().any(|&p| p < 0.0) {
        return Err(Error::Contract("usage contains negative probabilities".into()));
    }
    let sum: f64 = usage.data.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum();
    Ok(sum / usage.numel() as f64)
}

/// Codebook health in [0, 1): (GV - sum_g exp(H_g)) / GV, where H_g is the
/// entropy of group g's mean usage. 0 at uniform usage, approaching
/// (GV - G)/GV when every group collapses to one entry.
pub fn perplexity_metric(usage: &Tensor) -> Result<f64> {
    if usage.rank() != 2 {
        return Err(Error::Dim(format!("usage must be [G, V], got {:?}", usage.shape)));
    }
    let gv = usage.numel() as f64;
    let mut total = 0.0;
    for gi in 0..usage.rows() {
        let row = usage.row(gi);
        let h: f64 = row.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
        total += h.exp();
    }
    Ok((gv - total) / gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_schedule_examples() {
        let s = TemperatureSchedule { start: 2.0, min: 0.5, decay: 0.999995 };
        assert_eq!(s.at(0), 2.0);
        assert_eq!(s.at(10_000_000), 0.5);
        assert!((s.at(138_629) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gumbel_probs_examples() {
        let p = gumbel_probs(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let p = gumbel_probs(&[1.0, 0.0], &[0.0, 0.0], 0.01).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
        let p = gumbel_probs(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], 1.0).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (got, l) in p.iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - l.exp() / z).abs() < 1e-12);
        }
    }
}
