//! Contrastive pre-training: masked latent prediction against quantized
//! targets, with the diversity objective, Adam, a warmup/decay schedule,
//! metrics logging, validation tracking, and resumable checkpoints.

use crate::checkpoint::{self, Checkpoint, Entry};
use crate::corpus::{batch_crop, Crop, Utterance};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::masking::{apply_mask, sample_mask, MaskConfig, MaskSet};
use crate::model::{collect_grads, SpeechModel, TrainFlags};
use crate::optim::{Adam, AdamConfig};
use crate::quantizer::{
    diversity_loss, perplexity_metric, project_latents, quantize, SelectMode,
};
use crate::rng;
use crate::transformer::transformer_forward;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NegativesSource {
    /// Distractors drawn from other masked frames of the same utterance.
    SameUtteranceMasked,
    /// Any other frame of the same utterance.
    SameUtteranceAny,
    /// Any frame of any utterance in the batch.
    Batch,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Number of distractors K.
    pub negatives: usize,
    /// Similarity temperature.
    pub kappa: f64,
    /// Weight on the diversity objective.
    pub alpha: f64,
    pub negatives_source: NegativesSource,
    /// Score only the U frames nearest each span edge when set.
    #[serde(default)]
    pub edge_limit: Option<usize>,
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives == 0 {
            return Err(Error::Config("need at least one distractor".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config(format!("kappa {} must be positive", self.kappa)));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be nonnegative", self.alpha)));
        }
        if self.edge_limit == Some(0) {
            return Err(Error::Config("edge limit must be positive when set".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Continuous,
    Quantized,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Continuous,
    Quantized,
    /// Soft codeword mixtures; keeps the whole pipeline differentiable.
    QuantizedSoft,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QuantizationModes {
    pub inputs: InputMode,
    pub targets: TargetMode,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub contrastive: ContrastiveConfig,
    pub mask: MaskConfig,
    pub quantization: QuantizationModes,
    /// Cut the gradient from the quantizer branch back into the encoder.
    #[serde(default)]
    pub stop_encoder_grad: bool,
    pub adam: AdamConfig,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_updates: u64,
    pub batch_utterances: usize,
    pub max_batch_samples: usize,
    pub crop_len: usize,
    /// Utterances held out from the end of the corpus for validation.
    pub val_utterances: usize,
    pub val_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        self.mask.validate()?;
        self.adam.validate()?;
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak lr {} must be positive", self.peak_lr)));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if self.batch_utterances == 0 {
            return Err(Error::Config("batch must contain at least one utterance".into()));
        }
        if self.crop_len == 0 || self.crop_len > self.max_batch_samples {
            return Err(Error::Config(format!(
                "crop length {} must be in 1..={}",
                self.crop_len, self.max_batch_samples
            )));
        }
        if self.val_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("val and checkpoint intervals must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr` over `warmup_fraction * total` updates, then
/// linear decay to zero at `total`.
pub fn lr_at(peak: f64, warmup_fraction: f64, total: u64, update: u64) -> f64 {
    if total == 0 || update >= total {
        return 0.0;
    }
    let t = total as f64;
    let w = warmup_fraction * t;
    let u = update as f64;
    if u < w {
        peak * u / w
    } else {
        peak * (t - u) / (t - w)
    }
}

/// Frames actually scored by the contrastive objective: all masked frames,
/// or with `edge_limit` U, the U nearest each end of every masked run.
pub fn scored_frames(mask: &MaskSet, edge_limit: Option<usize>) -> Vec<usize> {
    match edge_limit {
        None => mask.masked_indices(),
        Some(u) => {
            let mut out = BTreeSet::new();
            for &(s, l) in &mask.spans {
                let take = u.min(l);
                out.extend(s..s + take);
                out.extend(s + l - take..s + l);
            }
            out.into_iter().collect()
        }
    }
}

/// Draw `k` distractor frame indices for target frame `t`, with replacement,
/// from the source set chosen by `cfg`. Batch-level sources are assembled by
/// the training step instead.
pub fn sample_distractors(
    mask: &MaskSet,
    t: usize,
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = match cfg.negatives_source {
        NegativesSource::SameUtteranceMasked => {
            mask.masked_indices().into_iter().filter(|&i| i != t).collect()
        }
        NegativesSource::SameUtteranceAny => (0..mask.mask.len()).filter(|&i| i != t).collect(),
        NegativesSource::Batch => {
            return Err(Error::Contract(
                "batch-level distractors are sampled over the whole batch".into(),
            ))
        }
    };
    sample_with_replacement(&candidates, cfg.negatives, rng)
}

fn sample_with_replacement(
    candidates: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Degenerate(
            "no distractor candidates after excluding the target frame".into(),
        ));
    }
    Ok((0..k).map(|_| candidates[rng.gen_range(0..candidates.len())]).collect())
}

/// Contrastive loss for one frame: -ln of the softmax weight the positive
/// gets among cosine similarities divided by kappa.
pub fn contrastive_loss(
    g: &mut Graph,
    context: NodeId,
    target: NodeId,
    distractors: NodeId,
    kappa: f64,
) -> Result<NodeId> {
    if !(kappa > 0.0) {
        return Err(Error::Contract(format!("kappa {kappa} must be positive")));
    }
    let f = g.value(target).numel();
    let k = {
        let d = g.value(distractors);
        if d.rank() != 2 || d.cols() != f {
            return Err(Error::Dim(format!(
                "distractors {:?} incompatible with {f}-dim target",
                d.shape
            )));
        }
        d.rows()
    };
    let target_row = g.reshape(target, &[1, f])?;
    let cands = g.concat_rows(&[target_row, distractors])?;
    let ctx_row = g.reshape(context, &[1, f])?;
    let ctx_rep = g.gather_rows(ctx_row, &vec![0; k + 1])?;
    let sims = g.cos_sim_rows(ctx_rep, cands)?;
    let scaled = g.scale(sims, 1.0 / kappa)?;
    let mat = g.reshape(scaled, &[1, k + 1])?;
    let lse = g.logsumexp_rows(mat)?;
    let lse = g.sum(lse)?;
    let pos = g.slice_cols(mat, 0, 1)?;
    let pos = g.sum(pos)?;
    g.sub(lse, pos)
}

#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub l_m: f64,
    pub l_d: f64,
    pub total: f64,
    pub perplexity: f64,
    pub accuracy: f64,
    pub masked_frames: usize,
    pub scored_frames: usize,
}

pub struct StepOutput {
    pub metrics: StepMetrics,
    /// Present when `train` was set.
    pub grads: Option<BTreeMap<String, Vec<f64>>>,
}

/// Intermediate nodes for one crop's forward pass, exposed so tests can
/// verify the data flow (e.g. that targets come from unmasked latents).
pub struct CropForward {
    pub enc_frames: NodeId,
    pub quant_input: NodeId,
    pub masked_input: NodeId,
    pub targets: NodeId,
    pub context_proj: NodeId,
    pub usage: Option<NodeId>,
    pub penalty: Option<NodeId>,
    pub mask: MaskSet,
    pub num_frames: usize,
}

fn check_modes(model: &SpeechModel, cfg: &PretrainConfig) -> Result<()> {
    if cfg.quantization.inputs == InputMode::Quantized
        && model.cfg.quantizer.output_dim != model.cfg.encoder.out_channels()
    {
        return Err(Error::Config(
            "quantized inputs require the quantizer output dim to match encoder channels".into(),
        ));
    }
    Ok(())
}

/// Forward one crop: encode, quantize the unmasked latents for targets,
/// mask, contextualize, and project for scoring.
pub fn crop_forward(
    g: &mut Graph,
    bound: &crate::model::ModelBound,
    model: &SpeechModel,
    cfg: &PretrainConfig,
    crop: &Crop,
    tau: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<CropForward> {
    let needs_quantizer = cfg.quantization.inputs == InputMode::Quantized
        || cfg.quantization.targets != TargetMode::Continuous;
    let wave = &crop.samples[..crop.valid_len];
    let enc = encode(g, &bound.encoder, &model.cfg.encoder, wave, train)?;
    let t = enc.num_frames;
    let mask = sample_mask(t, &cfg.mask, rng)?;

    let quant_in = if cfg.stop_encoder_grad { g.stop_grad(enc.frames) } else { enc.frames };
    let qres = if needs_quantizer {
        let mode = if cfg.quantization.targets == TargetMode::QuantizedSoft {
            SelectMode::Soft
        } else {
            SelectMode::Hard
        };
        Some(quantize(g, &bound.codebook, quant_in, tau, train, mode, rng)?)
    } else {
        None
    };

    let targets = match cfg.quantization.targets {
        TargetMode::Continuous => project_latents(g, &bound.codebook, quant_in)?,
        _ => qres.as_ref().expect("quantizer ran").q,
    };

    let base_in = match cfg.quantization.inputs {
        InputMode::Continuous => enc.frames,
        InputMode::Quantized => qres.as_ref().expect("quantizer ran").q,
    };
    let masked_input = apply_mask(g, base_in, &mask, bound.mask_embedding)?;
    let proj_in = match bound.input_proj {
        Some((w, b)) => {
            let p = g.matmul(masked_input, w)?;
            g.add_row(p, b)?
        }
        None => masked_input,
    };
    let ctx =
        transformer_forward(g, &bound.transformer, &model.cfg.transformer, proj_in, t, train, rng)?;
    let (cw, cb) = bound.context_proj;
    let c_proj = g.matmul(ctx.frames, cw)?;
    let c_proj = g.add_row(c_proj, cb)?;

    Ok(CropForward {
        enc_frames: enc.frames,
        quant_input: quant_in,
        masked_input,
        targets,
        context_proj: c_proj,
        usage: qres.as_ref().map(|q| q.usage),
        penalty: enc.penalty,
        mask,
        num_frames: t,
    })
}

/// One batched forward (and optionally backward) pass.
pub fn pretrain_step(
    model: &SpeechModel,
    crops: &[Crop],
    cfg: &PretrainConfig,
    tau: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    cfg.validate()?;
    if crops.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    check_modes(model, cfg)?;

    let mut g = Graph::new();
    let bound = model.bind(&mut g, TrainFlags::pretrain());

    let mut target_parts: Vec<NodeId> = Vec::new();
    let mut ctx_parts: Vec<NodeId> = Vec::new();
    let mut usage_parts: Vec<NodeId> = Vec::new();
    let mut penalties: Vec<NodeId> = Vec::new();
    // (global offset, mask) per crop.
    let mut layouts: Vec<(usize, MaskSet)> = Vec::new();
    let mut offset = 0usize;

    for crop in crops {
        let fwd = crop_forward(&mut g, &bound, model, cfg, crop, tau, train, rng)?;
        if let Some(p) = fwd.penalty {
            penalties.push(p);
        }
        if let Some(u) = fwd.usage {
            usage_parts.push(u);
        }
        target_parts.push(fwd.targets);
        ctx_parts.push(fwd.context_proj);
        layouts.push((offset, fwd.mask));
        offset += fwd.num_frames;
    }

    let global_targets = g.concat_rows(&target_parts)?;
    let global_ctx = g.concat_rows(&ctx_parts)?;
    let total_frames = offset;
    let k = cfg.contrastive.negatives;

    // Assemble candidate index lists for every scored frame in the batch.
    let mut cand_idx: Vec<usize> = Vec::new();
    let mut ctx_idx: Vec<usize> = Vec::new();
    let mut masked_total = 0usize;
    let mut scored_total = 0usize;
    for (off, mask) in &layouts {
        masked_total += mask.num_masked();
        let scored = scored_frames(mask, cfg.contrastive.edge_limit);
        for &t in &scored {
            let gt = off + t;
            let distractors = match cfg.contrastive.negatives_source {
                NegativesSource::Batch => {
                    let candidates: Vec<usize> =
                        (0..total_frames).filter(|&i| i != gt).collect();
                    sample_with_replacement(&candidates, k, rng)?
                }
                _ => sample_distractors(mask, t, &cfg.contrastive, rng)?
                    .into_iter()
                    .map(|i| off + i)
                    .collect(),
            };
            cand_idx.push(gt);
            cand_idx.extend(distractors);
            ctx_idx.extend(std::iter::repeat(gt).take(k + 1));
            scored_total += 1;
        }
    }
    if scored_total == 0 {
        return Err(Error::Degenerate("mask produced no scored frames".into()));
    }

    let cands = g.gather_rows(global_targets, &cand_idx)?;
    let ctxs = g.gather_rows(global_ctx, &ctx_idx)?;
    let sims = g.cos_sim_rows(ctxs, cands)?;
    let scaled = g.scale(sims, 1.0 / cfg.contrastive.kappa)?;
    let mat = g.reshape(scaled, &[scored_total, k + 1])?;

    // Accuracy: positive (column 0) strictly highest, ties resolved to the
    // lowest index by argmax.
    let accuracy = {
        let m = g.value(mat);
        let mut correct = 0usize;
        for r in 0..scored_total {
            if crate::tensor::argmax(m.row(r)) == 0 {
                correct += 1;
            }
        }
        correct as f64 / scored_total as f64
    };

    let lse = g.logsumexp_rows(mat)?;
    let lse_sum = g.sum(lse)?;
    let pos = g.slice_cols(mat, 0, 1)?;
    let pos_sum = g.sum(pos)?;
    let diff = g.sub(lse_sum, pos_sum)?;
    let l_m = g.scale(diff, 1.0 / scored_total as f64)?;

    let (l_d, perplexity) = if usage_parts.is_empty() {
        (None, 0.0)
    } else {
        let mut acc = usage_parts[0];
        for &u in &usage_parts[1..] {
            acc = g.add(acc, u)?;
        }
        let mean_usage = g.scale(acc, 1.0 / usage_parts.len() as f64)?;
        let ppl = perplexity_metric(g.value(mean_usage))?;
        (Some(diversity_loss(&mut g, mean_usage)?), ppl)
    };

    let mut total = l_m;
    if let Some(ld) = l_d {
        let weighted = g.scale(ld, cfg.contrastive.alpha)?;
        total = g.add(total, weighted)?;
    }
    if !penalties.is_empty() {
        let mut acc = penalties[0];
        for &p in &penalties[1..] {
            acc = g.add(acc, p)?;
        }
        let mean_pen = g.scale(acc, 1.0 / crops.len() as f64)?;
        total = g.add(total, mean_pen)?;
    }

    let metrics = StepMetrics {
        l_m: g.value(l_m).item(),
        l_d: l_d.map(|n| g.value(n).item()).unwrap_or(0.0),
        total: g.value(total).item(),
        perplexity,
        accuracy,
        masked_frames: masked_total,
        scored_frames: scored_total,
    };

    let grads = if train {
        g.backward(total)?;
        Some(collect_grads(&g, &bound))
    } else {
        None
    };
    Ok(StepOutput { metrics, grads })
}

/// Evaluation pass over held-out utterances: eval-mode masked prediction
/// with rng derived from `(seed, update)` so runs are reproducible.
pub fn validate(
    model: &SpeechModel,
    val_utts: &[Utterance],
    cfg: &PretrainConfig,
    tau: f64,
    update: u64,
) -> Result<StepMetrics> {
    let mut vrng = rng::stream(cfg.seed, &format!("val/{update}"));
    let crops = batch_crop(val_utts, cfg.max_batch_samples, cfg.crop_len, &mut vrng)?;
    let out = pretrain_step(model, &crops, cfg, tau, false, &mut vrng)?;
    Ok(out.metrics)
}

const BEST_VAL_KEY: &str = "meta/best_val_lm";
const RNG_KEY: &str = "rng/state";

/// Serialize the full training state (parameters, Adam moments, rng, best
/// validation loss) as one checkpoint.
pub fn save_training_state(
    path: &Path,
    model: &SpeechModel,
    adam: &Adam,
    update: u64,
    tau: f64,
    train_rng: &ChaCha8Rng,
    best_val: f64,
    config_hash: [u8; 32],
) -> Result<()> {
    let mut entries: Vec<Entry> = Vec::new();
    model.visit(|name, t| {
        entries.push(Entry { name, shape: t.shape.clone(), data: t.data.clone() });
    });
    model.visit(|name, t| {
        let zero = vec![0.0; t.numel()];
        let m = adam.m.get(&name).unwrap_or(&zero);
        entries.push(Entry {
            name: format!("opt/m/{name}"),
            shape: t.shape.clone(),
            data: m.clone(),
        });
        let v = adam.v.get(&name).unwrap_or(&zero);
        entries.push(Entry {
            name: format!("opt/v/{name}"),
            shape: t.shape.clone(),
            data: v.clone(),
        });
    });
    entries.push(Entry { name: RNG_KEY.into(), shape: vec![6], data: rng::save_state(train_rng) });
    entries.push(Entry { name: BEST_VAL_KEY.into(), shape: vec![1], data: vec![best_val] });
    let ckpt = Checkpoint { config_hash, update, tau, entries };
    checkpoint::write_checkpoint(path, &ckpt)
}

pub struct ResumeState {
    pub update: u64,
    pub tau: f64,
    pub rng: ChaCha8Rng,
    pub best_val: f64,
}

/// Restore model parameters and optimizer state in place.
pub fn load_training_state(
    path: &Path,
    model: &mut SpeechModel,
    adam: &mut Adam,
    expected_hash: [u8; 32],
) -> Result<ResumeState> {
    let ckpt = checkpoint::read_checkpoint(path)?;
    if ckpt.config_hash != expected_hash {
        return Err(Error::Checkpoint(
            "checkpoint was written under a different configuration".into(),
        ));
    }
    let mut err: Option<Error> = None;
    model.visit_mut(|name, t| {
        if err.is_some() {
            return;
        }
        match ckpt.entries.iter().find(|e| e.name == name) {
            Some(e) if e.shape == t.shape => t.data.copy_from_slice(&e.data),
            Some(e) => {
                err = Some(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?} does not match model shape {:?}",
                    e.shape, t.shape
                )))
            }
            None => err = Some(Error::Checkpoint(format!("{name}: missing from checkpoint"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    adam.m.clear();
    adam.v.clear();
    for e in &ckpt.entries {
        if let Some(name) = e.name.strip_prefix("opt/m/") {
            adam.m.insert(name.to_string(), e.data.clone());
        } else if let Some(name) = e.name.strip_prefix("opt/v/") {
            adam.v.insert(name.to_string(), e.data.clone());
        }
    }
    adam.t = ckpt.update;
    let rng_entry = ckpt
        .get(RNG_KEY)
        .ok_or_else(|| Error::Checkpoint("missing rng state".into()))?;
    let rng = rng::restore_state(&rng_entry.data)?;
    let best_val = ckpt
        .get(BEST_VAL_KEY)
        .map(|e| e.data[0])
        .unwrap_or(f64::INFINITY);
    Ok(ResumeState { update: ckpt.update, tau: ckpt.tau, rng, best_val })
}

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub update: u64,
    pub metrics: StepMetrics,
    pub lr: f64,
    pub tau: f64,
}

pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub best_path: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub best_val: f64,
    pub final_val: Option<f64>,
}

fn metrics_line(row: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        row.update,
        row.metrics.l_m,
        row.metrics.l_d,
        row.metrics.total,
        row.metrics.perplexity,
        row.metrics.accuracy,
        row.lr,
        row.tau
    )
}

/// Run (or resume) pre-training over a corpus. The last `val_utterances`
/// utterances are held out; the rest cycle through batches by update index.
/// `run_limit` caps how many updates this invocation performs before
/// checkpointing and returning, so long runs can be split across calls.
pub fn train(
    model: &mut SpeechModel,
    utts: &[Utterance],
    cfg: &PretrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    run_limit: Option<u64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if utts.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    if cfg.val_utterances >= utts.len() {
        return Err(Error::Data(format!(
            "cannot hold out {} of {} utterances",
            cfg.val_utterances,
            utts.len()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let (train_utts, val_utts) = utts.split_at(utts.len() - cfg.val_utterances);
    let hash = checkpoint::config_hash(&(model.cfg.clone(), cfg.clone()))?;

    let mut adam = Adam::new(cfg.adam)?;
    let mut train_rng = rng::stream(cfg.seed, "train");
    let mut start = 0u64;
    let mut best_val = f64::INFINITY;
    if let Some(ck) = resume {
        let state = load_training_state(ck, model, &mut adam, hash)?;
        start = state.update;
        train_rng = state.rng;
        best_val = state.best_val;
    }

    let metrics_path = out_dir.join("metrics.csv");
    let checkpoint_path = out_dir.join("checkpoint.bin");
    let best_path = out_dir.join("best.bin");
    let mut metrics_file = if start == 0 {
        let mut f = fs::File::create(&metrics_path)?;
        writeln!(f, "update,L_m,L_d,total,perplexity,accuracy,lr,tau")?;
        f
    } else {
        fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?
    };

    let schedule = model.cfg.quantizer.temperature;
    let end = match run_limit {
        Some(limit) => (start + limit).min(cfg.total_updates),
        None => cfg.total_updates,
    };
    let mut rows = Vec::new();
    let mut final_val = None;
    for update in start..end {
        let batch: Vec<Utterance> = (0..cfg.batch_utterances)
            .map(|j| {
                let i = (update as usize * cfg.batch_utterances + j) % train_utts.len();
                train_utts[i].clone()
            })
            .collect();
        let crops = batch_crop(&batch, cfg.max_batch_samples, cfg.crop_len, &mut train_rng)?;
        let tau = schedule.at(update);
        let lr = lr_at(cfg.peak_lr, cfg.warmup_fraction, cfg.total_updates, update);
        let out = pretrain_step(model, &crops, cfg, tau, true, &mut train_rng)?;
        let grads = out.grads.expect("training step returns gradients");
        adam.begin_step();
        let mut opt_err: Option<Error> = None;
        model.visit_mut(|name, t| {
            if opt_err.is_some() {
                return;
            }
            if let Some(grad) = grads.get(name) {
                if let Err(e) = adam.apply(name, t, grad, lr) {
                    opt_err = Some(e);
                }
            }
        });
        if let Some(e) = opt_err {
            return Err(e);
        }

        let row = MetricsRow { update, metrics: out.metrics, lr, tau };
        writeln!(metrics_file, "{}", metrics_line(&row))?;
        rows.push(row);

        let done = update + 1 == cfg.total_updates;
        if !val_utts.is_empty() && ((update + 1) % cfg.val_every == 0 || done) {
            let vm = validate(model, val_utts, cfg, tau, update + 1)?;
            eprintln!(
                "update {}: val L_m {:.4} (train L_m {:.4}, acc {:.3})",
                update + 1,
                vm.l_m,
                rows.last().unwrap().metrics.l_m,
                rows.last().unwrap().metrics.accuracy
            );
            if vm.l_m < best_val {
                best_val = vm.l_m;
                save_training_state(
                    &best_path,
                    model,
                    &adam,
                    update + 1,
                    schedule.at(update + 1),
                    &train_rng,
                    best_val,
                    hash,
                )?;
            }
            if done {
                final_val = Some(vm.l_m);
            }
        }
        if (update + 1) % cfg.checkpoint_every == 0 || done {
            save_training_state(
                &checkpoint_path,
                model,
                &adam,
                update + 1,
                schedule.at(update + 1),
                &train_rng,
                best_val,
                hash,
            )?;
        }
    }
    if end < cfg.total_updates || start >= end {
        // Stopped before the schedule finished (or had nothing to run);
        // leave a rolling checkpoint so a later call can pick up here.
        save_training_state(
            &checkpoint_path,
            model,
            &adam,
            end.max(start),
            schedule.at(end.max(start)),
            &train_rng,
            best_val,
            hash,
        )?;
    }
    Ok(TrainOutcome { metrics_path, checkpoint_path, best_path, rows, best_val, final_val })
}
