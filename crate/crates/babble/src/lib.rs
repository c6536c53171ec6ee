//! Self-supervised speech representation learning at desk scale, from scratch.
//!
//! The crate builds a complete pipeline on synthetic audio: a reverse-mode
//! autodiff engine, a temporal convolutional feature encoder, a Gumbel-softmax
//! product quantizer, span masking, a Transformer context network, contrastive
//! pre-training, CTC fine-tuning, and beam-search decoding with n-gram
//! language model fusion.
//!
//! Start with the runnable examples (`cargo run --example <name>`):
//!
//! - `autodiff_basics` — tape construction, backward, finite-difference checks
//! - `synthesize_corpus` — generate a synthetic corpus and inspect the manifest
//! - `encoder_geometry` — stride product, receptive field, and frame counts
//! - `mask_statistics` — span-mask run-length statistics across strategies
//! - `quantizer_playground` — Gumbel softmax, diversity loss, codebook usage
//! - `pretrain_toy` — a short contrastive pre-training run with live metrics
//! - `finetune_and_decode` — CTC fine-tuning, greedy and beam decoding, WER
//! - `cooccurrence_map` — codeword-to-symbol conditional probability table
//!
//! The same functionality is reachable from the thin `babble` binary; see
//! `babble --help`.

#![forbid(unsafe_code)]

pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod cooc;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod lm;
pub mod masking;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod transformer;
pub mod wav;
pub mod wer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
