//! Temporal convolutional feature encoder: raw waveform to latent frames.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Normalize over channels after every block (with a learned affine).
    LayerNormEveryBlock,
    /// Normalize each channel over time after the first block only.
    FirstBlockOutputNorm,
    /// No normalization anywhere.
    None,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels per block.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernels: Vec<usize>,
    pub norm_mode: NormMode,
    /// Weight on the squared-activation penalty of the final latents.
    pub penalty_weight: f64,
    /// Factor applied to gradients flowing back out of the encoder.
    pub grad_scale: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.strides.len() != n || self.kernels.len() != n {
            return Err(Error::Config(format!(
                "encoder block lists disagree: {} channels, {} strides, {} kernels",
                n,
                self.strides.len(),
                self.kernels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0)
            || self.strides.iter().any(|&s| s == 0)
            || self.kernels.iter().any(|&k| k == 0)
        {
            return Err(Error::Config("encoder channels, strides, kernels must be positive".into()));
        }
        if !(self.grad_scale > 0.0 && self.grad_scale <= 1.0) {
            return Err(Error::Config(format!("grad scale {} outside (0, 1]", self.grad_scale)));
        }
        if self.penalty_weight < 0.0 {
            return Err(Error::Config("negative penalty weight".into()));
        }
        Ok(())
    }

    /// Seven-block geometry used throughout: stride 320, ~49 Hz latents.
    pub fn base() -> Self {
        EncoderConfig {
            channels: vec![512; 7],
            strides: vec![5, 2, 2, 2, 2, 2, 2],
            kernels: vec![10, 3, 3, 3, 3, 2, 2],
            norm_mode: NormMode::LayerNormEveryBlock,
            penalty_weight: 10.0,
            grad_scale: 0.1,
        }
    }

    /// Three-block geometry small enough for unit tests and examples.
    pub fn toy(channels: usize) -> Self {
        EncoderConfig {
            channels: vec![channels; 3],
            strides: vec![5, 2, 2],
            kernels: vec![10, 4, 4],
            norm_mode: NormMode::LayerNormEveryBlock,
            penalty_weight: 10.0,
            grad_scale: 0.1,
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// (total stride, receptive field, frame rate in Hz).
    pub fn geometry(&self) -> (usize, usize, f64) {
        let stride: usize = self.strides.iter().product();
        let mut rf = 1usize;
        for (&s, &k) in self.strides.iter().zip(&self.kernels).rev() {
            rf = (rf - 1) * s + k;
        }
        let rate = f64::from(crate::wav::SAMPLE_RATE) / stride as f64;
        (stride, rf, rate)
    }

    /// Frames produced for an input of `len` samples, or None if too short.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        let mut l = len;
        for (&s, &k) in self.strides.iter().zip(&self.kernels) {
            if l < k {
                return None;
            }
            l = (l - k) / s + 1;
        }
        Some(l)
    }

    /// Frames whose receptive field lies entirely within `valid_len` samples.
    pub fn valid_frames(&self, valid_len: usize, total_frames: usize) -> usize {
        let (stride, rf, _) = self.geometry();
        if valid_len < rf {
            return 0;
        }
        (((valid_len - rf) / stride) + 1).min(total_frames)
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    /// [C_out, C_in, K]
    pub w: Tensor,
    /// [C_out]
    pub b: Tensor,
    pub norm_g: Option<Tensor>,
    pub norm_b: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub blocks: Vec<ConvBlock>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut c_in = 1usize;
        for (i, ((&c_out, &k), _)) in
            cfg.channels.iter().zip(&cfg.kernels).zip(&cfg.strides).enumerate()
        {
            let bound = (1.0 / (c_in * k) as f64).sqrt();
            let w = Tensor::new(
                vec![c_out, c_in, k],
                (0..c_out * c_in * k).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
            .requiring_grad();
            let b = Tensor::zeros(&[c_out]).requiring_grad();
            let has_norm = match cfg.norm_mode {
                NormMode::LayerNormEveryBlock => true,
                NormMode::FirstBlockOutputNorm => i == 0,
                NormMode::None => false,
            };
            let (norm_g, norm_b) = if has_norm {
                (
                    Some(Tensor::new(vec![c_out], vec![1.0; c_out]).requiring_grad()),
                    Some(Tensor::zeros(&[c_out]).requiring_grad()),
                )
            } else {
                (None, None)
            };
            blocks.push(ConvBlock { w, b, norm_g, norm_b });
            c_in = c_out;
        }
        Ok(EncoderParams { blocks })
    }
}

pub struct BlockBound {
    pub w: NodeId,
    pub b: NodeId,
    pub norm_g: Option<NodeId>,
    pub norm_b: Option<NodeId>,
}

pub struct EncoderBound {
    pub blocks: Vec<BlockBound>,
}

impl EncoderParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderBound {
        let leaf = |g: &mut Graph, t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            t.grad = None;
            g.leaf(t)
        };
        EncoderBound {
            blocks: self
                .blocks
                .iter()
                .map(|blk| BlockBound {
                    w: leaf(g, &blk.w),
                    b: leaf(g, &blk.b),
                    norm_g: blk.norm_g.as_ref().map(|t| leaf(g, t)),
                    norm_b: blk.norm_b.as_ref().map(|t| leaf(g, t)),
                })
                .collect(),
        }
    }
}

pub struct LatentSequence {
    /// [T, C] time-major latent frames.
    pub frames: NodeId,
    pub num_frames: usize,
    pub stride: usize,
    pub receptive_field: usize,
    pub frame_rate: f64,
    /// Weighted squared-activation penalty (present when training and
    /// `penalty_weight > 0`).
    pub penalty: Option<NodeId>,
}

const LN_EPS: f64 = 1e-5;

/// Run the encoder over one waveform. The input must cover at least one
/// receptive field.
pub fn encode(
    g: &mut Graph,
    bound: &EncoderBound,
    cfg: &EncoderConfig,
    wave: &[f64],
    train: bool,
) -> Result<LatentSequence> {
    cfg.validate()?;
    let (stride, rf, rate) = cfg.geometry();
    if wave.len() < rf {
        return Err(Error::Dim(format!(
            "waveform of {} samples is shorter than the receptive field {rf}",
            wave.len()
        )));
    }
    let mut x = g.constant(Tensor::new(vec![1, wave.len()], wave.to_vec()));
    for (i, blk) in bound.blocks.iter().enumerate() {
        x = g.conv1d(x, blk.w, cfg.strides[i], 1, 0, 0)?;
        x = g.add_col(x, blk.b)?;
        match cfg.norm_mode {
            NormMode::LayerNormEveryBlock => {
                // Normalize each frame over its channels.
                let xt = g.transpose(x)?;
                let mut ln = g.layer_norm(xt, LN_EPS)?;
                ln = g.mul_row(ln, blk.norm_g.unwrap())?;
                ln = g.add_row(ln, blk.norm_b.unwrap())?;
                x = g.transpose(ln)?;
            }
            NormMode::FirstBlockOutputNorm if i == 0 => {
                // Normalize each channel over time.
                x = g.layer_norm(x, LN_EPS)?;
                x = g.mul_col(x, blk.norm_g.unwrap())?;
                x = g.add_col(x, blk.norm_b.unwrap())?;
            }
            _ => {}
        }
        x = g.gelu(x)?;
    }
    let z = g.transpose(x)?;
    let z = g.grad_scale(z, cfg.grad_scale)?;
    let num_frames = g.value(z).rows();
    debug_assert_eq!(Some(num_frames), cfg.num_frames(wave.len()));
    let penalty = if train && cfg.penalty_weight > 0.0 {
        let sq = g.mul(z, z)?;
        let s = g.sum(sq)?;
        Some(g.scale(s, cfg.penalty_weight)?)
    } else {
        None
    };
    Ok(LatentSequence {
        frames: z,
        num_frames,
        stride,
        receptive_field: rf,
        frame_rate: rate,
        penalty,
    })
}
