//! Transformer context network with a convolutional relative positional
//! stage, multi-head self-attention, and LayerDrop.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub blocks: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Probability of skipping each block during training.
    pub layerdrop: f64,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    /// Pre-norm blocks when true, post-norm otherwise.
    pub prenorm: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::Config("transformer dims and heads must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.pos_conv_kernel == 0 || self.pos_conv_groups == 0 {
            return Err(Error::Config("positional conv kernel and groups must be positive".into()));
        }
        if self.model_dim % self.pos_conv_groups != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} conv groups",
                self.model_dim, self.pos_conv_groups
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.layerdrop) {
            return Err(Error::Config(format!("layerdrop {} outside [0, 1]", self.layerdrop)));
        }
        Ok(())
    }

    /// Small geometry for tests and examples.
    pub fn toy(model_dim: usize, blocks: usize) -> Self {
        TransformerConfig {
            blocks,
            model_dim,
            ffn_dim: model_dim * 2,
            heads: 2,
            dropout: 0.0,
            layerdrop: 0.0,
            pos_conv_kernel: 9,
            pos_conv_groups: 2,
            prenorm: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct TransformerParams {
    /// Positional conv weight [d, d/groups, K] and bias [d].
    pub pos_w: Tensor,
    pub pos_b: Tensor,
    pub pos_ln_g: Tensor,
    pub pos_ln_b: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl TransformerParams {
    pub fn init(cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let n: usize = shape.iter().product();
            let bound = (1.0 / fan_in as f64).sqrt();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
                .requiring_grad()
        };
        let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).requiring_grad();
        let zeros = |n: usize| Tensor::zeros(&[n]).requiring_grad();
        let pos_w = uniform(
            vec![d, d / cfg.pos_conv_groups, cfg.pos_conv_kernel],
            (d / cfg.pos_conv_groups) * cfg.pos_conv_kernel,
        );
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: uniform(vec![d, d], d),
                bq: zeros(d),
                wk: uniform(vec![d, d], d),
                bk: zeros(d),
                wv: uniform(vec![d, d], d),
                bv: zeros(d),
                wo: uniform(vec![d, d], d),
                bo: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w1: uniform(vec![d, cfg.ffn_dim], d),
                b1: zeros(cfg.ffn_dim),
                w2: uniform(vec![cfg.ffn_dim, d], cfg.ffn_dim),
                b2: zeros(d),
            })
            .collect();
        Ok(TransformerParams {
            pos_w,
            pos_b: zeros(d),
            pos_ln_g: ones(d),
            pos_ln_b: zeros(d),
            blocks,
        })
    }
}

pub struct BlockBound {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub struct TransformerBound {
    pub pos_w: NodeId,
    pub pos_b: NodeId,
    pub pos_ln_g: NodeId,
    pub pos_ln_b: NodeId,
    pub blocks: Vec<BlockBound>,
}

impl TransformerParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> TransformerBound {
        let leaf = |g: &mut Graph, t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            t.grad = None;
            g.leaf(t)
        };
        TransformerBound {
            pos_w: leaf(g, &self.pos_w),
            pos_b: leaf(g, &self.pos_b),
            pos_ln_g: leaf(g, &self.pos_ln_g),
            pos_ln_b: leaf(g, &self.pos_ln_b),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockBound {
                    ln1_g: leaf(g, &b.ln1_g),
                    ln1_b: leaf(g, &b.ln1_b),
                    wq: leaf(g, &b.wq),
                    bq: leaf(g, &b.bq),
                    wk: leaf(g, &b.wk),
                    bk: leaf(g, &b.bk),
                    wv: leaf(g, &b.wv),
                    bv: leaf(g, &b.bv),
                    wo: leaf(g, &b.wo),
                    bo: leaf(g, &b.bo),
                    ln2_g: leaf(g, &b.ln2_g),
                    ln2_b: leaf(g, &b.ln2_b),
                    w1: leaf(g, &b.w1),
                    b1: leaf(g, &b.b1),
                    w2: leaf(g, &b.w2),
                    b2: leaf(g, &b.b2),
                })
                .collect(),
        }
    }
}

const LN_EPS: f64 = 1e-5;

fn layer_norm_affine(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
) -> Result<NodeId> {
    let ln = g.layer_norm(x, LN_EPS)?;
    let scaled = g.mul_row(ln, gamma)?;
    g.add_row(scaled, beta)
}

/// Convolutional relative positional stage:
/// layer_norm(x + gelu(grouped_conv(x))).
pub fn positional_embed(
    g: &mut Graph,
    bound: &TransformerBound,
    cfg: &TransformerConfig,
    x: NodeId,
) -> Result<NodeId> {
    let t = g.value(x).rows();
    let k = cfg.pos_conv_kernel;
    let xt = g.transpose(x)?; // [d, T]
    let (pad_l, pad_r) = (k / 2, k / 2);
    let conv = g.conv1d(xt, bound.pos_w, 1, cfg.pos_conv_groups, pad_l, pad_r)?;
    // Even kernels give T+1 outputs; trim the trailing frame.
    let conv = if k % 2 == 0 { g.slice_cols(conv, 0, t)? } else { conv };
    let conv = g.add_col(conv, bound.pos_b)?;
    let conv = g.transpose(conv)?; // [T, d]
    let act = g.gelu(conv)?;
    let sum = g.add(x, act)?;
    layer_norm_affine(g, sum, bound.pos_ln_g, bound.pos_ln_b)
}

fn attention(
    g: &mut Graph,
    blk: &BlockBound,
    cfg: &TransformerConfig,
    x: NodeId,
    valid_len: usize,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let t = g.value(x).rows();
    let d = cfg.model_dim;
    let dh = d / cfg.heads;
    let q = g.matmul(x, blk.wq)?;
    let q = g.add_row(q, blk.bq)?;
    let k = g.matmul(x, blk.wk)?;
    let k = g.add_row(k, blk.bk)?;
    let v = g.matmul(x, blk.wv)?;
    let v = g.add_row(v, blk.bv)?;

    let pad_bias = if valid_len < t {
        let mut m = vec![0.0; t * t];
        for r in 0..t {
            for c in valid_len..t {
                m[r * t + c] = -1e30;
            }
        }
        Some(Tensor::matrix(t, t, m))
    } else {
        None
    };

    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(bias) = &pad_bias {
            scores = g.add_const(scores, bias)?;
        }
        let probs = g.softmax(scores, 1)?;
        let probs = g.dropout(probs, cfg.dropout, train, rng)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    let out = g.matmul(cat, blk.wo)?;
    g.add_row(out, blk.bo)
}

fn ffn(
    g: &mut Graph,
    blk: &BlockBound,
    cfg: &TransformerConfig,
    x: NodeId,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let h = g.matmul(x, blk.w1)?;
    let h = g.add_row(h, blk.b1)?;
    let h = g.gelu(h)?;
    let h = g.dropout(h, cfg.dropout, train, rng)?;
    let out = g.matmul(h, blk.w2)?;
    g.add_row(out, blk.b2)
}

pub struct ContextOutput {
    /// [T, model_dim]
    pub frames: NodeId,
    /// Which blocks actually ran (false = dropped by LayerDrop).
    pub blocks_run: Vec<bool>,
}

/// Run the context network over latent frames `x` ([T, model_dim]).
///
/// Rows at index >= `valid_len` are padding: they are zeroed before the
/// positional stage and excluded from every attention softmax, so valid
/// outputs do not depend on padding contents.
pub fn transformer_forward(
    g: &mut Graph,
    bound: &TransformerBound,
    cfg: &TransformerConfig,
    x: NodeId,
    valid_len: usize,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ContextOutput> {
    cfg.validate()?;
    let (t, d) = {
        let tx = g.value(x);
        if tx.rank() != 2 {
            return Err(Error::Dim(format!("expected [T, d], got {:?}", tx.shape)));
        }
        (tx.rows(), tx.cols())
    };
    if d != cfg.model_dim {
        return Err(Error::Dim(format!("frames have dim {d}, model dim is {}", cfg.model_dim)));
    }
    if valid_len == 0 || valid_len > t {
        return Err(Error::Contract(format!("valid length {valid_len} outside 1..={t}")));
    }

    let mut h = if valid_len < t {
        let keep: Vec<f64> =
            (0..t).map(|i| if i < valid_len { 1.0 } else { 0.0 }).collect();
        let keep = g.constant(Tensor::vector(keep));
        g.mul_col(x, keep)?
    } else {
        x
    };
    h = positional_embed(g, bound, cfg, h)?;

    let mut blocks_run = Vec::with_capacity(cfg.blocks);
    for blk in &bound.blocks {
        let run = if train && cfg.layerdrop > 0.0 {
            rng.gen::<f64>() >= cfg.layerdrop
        } else {
            true
        };
        blocks_run.push(run);
        if !run {
            continue;
        }
        if cfg.prenorm {
            let n1 = layer_norm_affine(g, h, blk.ln1_g, blk.ln1_b)?;
            let a = attention(g, blk, cfg, n1, valid_len, train, rng)?;
            let a = g.dropout(a, cfg.dropout, train, rng)?;
            h = g.add(h, a)?;
            let n2 = layer_norm_affine(g, h, blk.ln2_g, blk.ln2_b)?;
            let f = ffn(g, blk, cfg, n2, train, rng)?;
            let f = g.dropout(f, cfg.dropout, train, rng)?;
            h = g.add(h, f)?;
        } else {
            let a = attention(g, blk, cfg, h, valid_len, train, rng)?;
            let a = g.dropout(a, cfg.dropout, train, rng)?;
            let sum = g.add(h, a)?;
            h = layer_norm_affine(g, sum, blk.ln1_g, blk.ln1_b)?;
            let f = ffn(g, blk, cfg, h, train, rng)?;
            let f = g.dropout(f, cfg.dropout, train, rng)?;
            let sum2 = g.add(h, f)?;
            h = layer_norm_affine(g, sum2, blk.ln2_g, blk.ln2_b)?;
        }
    }
    Ok(ContextOutput { frames: h, blocks_run })
}
