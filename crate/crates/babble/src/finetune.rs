//! CTC fine-tuning: a character head on the context network, a frozen
//! feature encoder, staged transformer unfreezing, time/channel masking on
//! the encoder outputs, and a tri-state learning-rate schedule.

use crate::corpus::Utterance;
use crate::ctc;
use crate::decode::{check_alphabet, greedy_decode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::masking::{apply_mask, MaskSet};
use crate::model::{collect_grads, ModelBound, SpeechModel, TrainFlags};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::Tensor;
use crate::transformer::transformer_forward;
use crate::wer::word_error_rate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

fn default_timestep_span() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Task symbols, one character per class; `|` is the word boundary.
    /// Class ids are 1-based; 0 is the CTC blank and has no symbol.
    pub alphabet: Vec<char>,
    /// Probability that a frame starts a masked time span.
    pub timestep_mask_prob: f64,
    #[serde(default = "default_timestep_span")]
    pub timestep_mask_span: usize,
    /// Probability that a channel starts a zeroed channel block.
    pub channel_mask_prob: f64,
    pub channel_mask_span: usize,
    pub updates: u64,
    /// Candidate peak learning rates for the sweep.
    pub peak_lrs: Vec<f64>,
    /// Updates during which only the classifier head trains.
    pub classifier_only_updates: u64,
    /// LayerDrop rate while fine-tuning (overrides the pre-training rate).
    pub layerdrop: f64,
    pub batch_utterances: usize,
    pub adam: AdamConfig,
    /// Held-out utterances (taken from the end of the corpus) for dev WER.
    pub dev_utterances: usize,
    /// Dev evaluation cadence in updates.
    pub eval_every: u64,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        check_alphabet(&self.alphabet)?;
        for (name, p) in [
            ("timestep_mask_prob", self.timestep_mask_prob),
            ("channel_mask_prob", self.channel_mask_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.timestep_mask_span == 0 || self.channel_mask_span == 0 {
            return Err(Error::Config("mask spans must be at least 1".into()));
        }
        if self.peak_lrs.is_empty() || self.peak_lrs.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::Config("peak_lrs must be nonempty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.layerdrop) {
            return Err(Error::Config(format!("layerdrop {} outside [0, 1)", self.layerdrop)));
        }
        if self.batch_utterances == 0 {
            return Err(Error::Config("batch_utterances must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.adam.validate()
    }
}

/// Warm up linearly over the first 10% of `total`, hold the peak for the
/// next 40%, then decay linearly to zero over the final 50%.
pub fn tri_state_lr(peak: f64, total: u64, update: u64) -> f64 {
    if total == 0 || update >= total {
        return 0.0;
    }
    let t = total as f64;
    let u = update as f64;
    let warm = 0.1 * t;
    let hold_end = 0.5 * t;
    if u < warm {
        peak * u / warm
    } else if u < hold_end {
        peak
    } else {
        peak * (t - u) / (t - hold_end)
    }
}

/// Map a transcript to 1-based target ids; spaces become the `|` boundary.
pub fn encode_transcript(text: &str, alphabet: &[char]) -> Result<Vec<usize>> {
    check_alphabet(alphabet)?;
    let mut ids = Vec::with_capacity(text.len());
    for ch in text.chars() {
        let ch = if ch == ' ' { '|' } else { ch };
        match alphabet.iter().position(|&a| a == ch) {
            Some(i) => ids.push(i + 1),
            None => {
                return Err(Error::Data(format!(
                    "transcript symbol {ch:?} is not in the task alphabet"
                )))
            }
        }
    }
    Ok(ids)
}

/// Masking on encoder outputs: every frame starts a masked time span with
/// probability `timestep_mask_prob` (span frames replaced by the learned
/// mask embedding, overlaps allowed), then every channel starts a zeroed
/// block of `channel_mask_span` channels with probability
/// `channel_mask_prob`.
pub fn finetune_mask(
    g: &mut Graph,
    x: NodeId,
    embedding: NodeId,
    cfg: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let (t, d) = {
        let tx = g.value(x);
        if tx.rank() != 2 {
            return Err(Error::Dim(format!("expected [T, d], got {:?}", tx.shape)));
        }
        (tx.rows(), tx.cols())
    };
    if cfg.channel_mask_span > d {
        return Err(Error::Config(format!(
            "channel mask span {} exceeds {d} channels",
            cfg.channel_mask_span
        )));
    }
    let time_starts: Vec<bool> =
        (0..t).map(|_| rng.gen::<f64>() < cfg.timestep_mask_prob).collect();
    let mut flags = vec![false; t];
    for (i, &s) in time_starts.iter().enumerate() {
        if s {
            for f in flags.iter_mut().skip(i).take(cfg.timestep_mask_span) {
                *f = true;
            }
        }
    }
    let mask = MaskSet::from_flags(flags);
    let mut out = if mask.num_masked() > 0 { apply_mask(g, x, &mask, embedding)? } else { x };

    let chan_starts: Vec<bool> =
        (0..d).map(|_| rng.gen::<f64>() < cfg.channel_mask_prob).collect();
    let mut keep = vec![1.0; d];
    for (i, &s) in chan_starts.iter().enumerate() {
        if s {
            for k in keep.iter_mut().skip(i).take(cfg.channel_mask_span) {
                *k = 0.0;
            }
        }
    }
    if keep.contains(&0.0) {
        let row = g.constant(Tensor::vector(keep));
        out = g.mul_row(out, row)?;
    }
    Ok(out)
}

/// Audio paired with its encoded CTC target.
#[derive(Clone, Debug)]
pub struct LabeledAudio {
    pub id: String,
    pub samples: Vec<f64>,
    pub target: Vec<usize>,
}

/// Encode transcribed utterances into training items. Missing transcripts or
/// out-of-alphabet symbols fail here, before any training step runs.
pub fn label_utterances(utts: &[Utterance], alphabet: &[char]) -> Result<Vec<LabeledAudio>> {
    utts.iter()
        .map(|u| {
            let text = u
                .transcript
                .as_ref()
                .ok_or_else(|| Error::Data(format!("utterance {} has no transcript", u.id)))?;
            Ok(LabeledAudio {
                id: u.id.clone(),
                samples: u.samples.clone(),
                target: encode_transcript(text, alphabet)?,
            })
        })
        .collect()
}

/// Forward one utterance to per-frame log class probabilities [T, C+1].
/// The encoder always runs in eval mode: it is never trained here.
fn utterance_log_probs(
    g: &mut Graph,
    bound: &ModelBound,
    model: &SpeechModel,
    cfg: &FinetuneConfig,
    samples: &[f64],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let enc = crate::encoder::encode(g, &bound.encoder, &model.cfg.encoder, samples, false)?;
    let mut x = enc.frames;
    if train {
        x = finetune_mask(g, x, bound.mask_embedding, cfg, rng)?;
    }
    if let Some((w, b)) = bound.input_proj {
        x = g.matmul(x, w)?;
        x = g.add_row(x, b)?;
    }
    let mut tcfg = model.cfg.transformer.clone();
    tcfg.layerdrop = cfg.layerdrop;
    let ctx = transformer_forward(g, &bound.transformer, &tcfg, x, enc.num_frames, train, rng)?;
    let (cw, cb) = bound
        .classifier
        .ok_or_else(|| Error::Contract("model has no classifier head".into()))?;
    let logits = g.matmul(ctx.frames, cw)?;
    let logits = g.add_row(logits, cb)?;
    let lse = g.logsumexp_rows(logits)?;
    let neg = g.scale(lse, -1.0)?;
    g.add_col(logits, neg)
}

/// Per-frame class log-probabilities for one utterance in evaluation mode,
/// shaped `[frames, classes + 1]` with the blank in column 0.
pub fn transcription_log_probs(
    model: &SpeechModel,
    cfg: &FinetuneConfig,
    samples: &[f64],
) -> Result<Tensor> {
    let mut rng = rng::stream(cfg.seed, "ft/eval");
    let mut g = Graph::new();
    let flags = TrainFlags { encoder: false, quantizer: false, transformer: false, heads: false };
    let bound = model.bind(&mut g, flags);
    let lp = utterance_log_probs(&mut g, &bound, model, cfg, samples, false, &mut rng)?;
    Ok(g.value(lp).clone())
}

#[derive(Debug)]
pub struct FinetuneStepOutput {
    /// Mean CTC loss over the batch.
    pub loss: f64,
    pub grads: Option<BTreeMap<String, Vec<f64>>>,
}

/// One fine-tuning step. The encoder is frozen throughout; the transformer
/// (with the mask embedding and input projection) only receives gradients
/// once `update >= classifier_only_updates`.
pub fn finetune_step(
    model: &SpeechModel,
    batch: &[LabeledAudio],
    cfg: &FinetuneConfig,
    update: u64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<FinetuneStepOutput> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, TrainFlags::finetune(update < cfg.classifier_only_updates));
    let mut total: Option<NodeId> = None;
    for item in batch {
        let lp = utterance_log_probs(&mut g, &bound, model, cfg, &item.samples, train, rng)?;
        let loss = ctc::ctc_loss(&mut g, lp, &item.target)?;
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
    }
    let total = g.scale(total.unwrap(), 1.0 / batch.len() as f64)?;
    let loss = g.value(total).item();
    if !loss.is_finite() {
        return Err(Error::Numeric {
            node: total.0,
            msg: format!("non-finite fine-tune loss {loss} at update {update}"),
        });
    }
    let grads = if train {
        g.backward(total)?;
        Some(collect_grads(&g, &bound))
    } else {
        None
    };
    Ok(FinetuneStepOutput { loss, grads })
}

/// Corpus-level greedy WER of the model on transcribed utterances.
pub fn greedy_wer(model: &SpeechModel, utts: &[Utterance], cfg: &FinetuneConfig) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::Degenerate("no utterances to score".into()));
    }
    let mut rng = rng::stream(cfg.seed, "ft/eval");
    let mut edits = 0usize;
    let mut words = 0usize;
    for u in utts {
        let reference = u
            .transcript
            .as_ref()
            .ok_or_else(|| Error::Data(format!("utterance {} has no transcript", u.id)))?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, TrainFlags::finetune(true));
        let lp = utterance_log_probs(&mut g, &bound, model, cfg, &u.samples, false, &mut rng)?;
        let hyp = greedy_decode(g.value(lp), &cfg.alphabet)?;
        let b = word_error_rate(reference, &hyp)?;
        edits += b.edits();
        words += reference.split_whitespace().count();
    }
    Ok(edits as f64 / words as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct FinetuneRow {
    pub update: u64,
    pub ctc_loss: f64,
    pub lr: f64,
    pub dev_wer: Option<f64>,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub rows: Vec<FinetuneRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_dev_wer: Option<f64>,
}

/// Fine-tune in place at one peak learning rate. Writes `finetune.csv`
/// (`update,ctc_loss,lr,dev_wer` with dev_wer blank between evaluations)
/// and a final `finetuned.bin` checkpoint into `out_dir`.
pub fn finetune_train(
    model: &mut SpeechModel,
    utts: &[Utterance],
    cfg: &FinetuneConfig,
    peak_lr: f64,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if !(peak_lr > 0.0) {
        return Err(Error::Config(format!("peak lr {peak_lr} must be positive")));
    }
    match &model.classifier {
        None => model.add_classifier(cfg.alphabet.len(), cfg.seed),
        Some(head) => {
            if head.w.cols() != cfg.alphabet.len() + 1 {
                return Err(Error::Config(format!(
                    "classifier has {} classes but the alphabet needs {}",
                    head.w.cols(),
                    cfg.alphabet.len() + 1
                )));
            }
        }
    }
    if cfg.dev_utterances >= utts.len() {
        return Err(Error::Config(format!(
            "dev split of {} leaves no training utterances (corpus has {})",
            cfg.dev_utterances,
            utts.len()
        )));
    }
    let (train_utts, dev_utts) = utts.split_at(utts.len() - cfg.dev_utterances);
    let train_items = label_utterances(train_utts, &cfg.alphabet)?;

    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("finetune.csv");
    let checkpoint_path = out_dir.join("finetuned.bin");
    let mut csv = String::from("update,ctc_loss,lr,dev_wer\n");

    let mut adam = Adam::new(cfg.adam.clone())?;
    let mut trng = rng::stream(cfg.seed, "ft/train");
    let mut rows = Vec::new();
    let mut final_dev_wer = None;

    for update in 0..cfg.updates {
        let batch: Vec<LabeledAudio> = (0..cfg.batch_utterances)
            .map(|j| {
                let i = (update as usize * cfg.batch_utterances + j) % train_items.len();
                train_items[i].clone()
            })
            .collect();
        let lr = tri_state_lr(peak_lr, cfg.updates, update);
        let step = finetune_step(model, &batch, cfg, update, true, &mut trng)?;
        let grads = step.grads.as_ref().unwrap();
        adam.begin_step();
        let mut opt_err: Option<Error> = None;
        model.visit_mut(|name, p| {
            if opt_err.is_none() {
                if let Some(grad) = grads.get(name) {
                    if let Err(e) = adam.apply(name, p, grad, lr) {
                        opt_err = Some(e);
                    }
                }
            }
        });
        if let Some(e) = opt_err {
            return Err(e);
        }

        let evaluate = !dev_utts.is_empty()
            && ((update + 1) % cfg.eval_every == 0 || update + 1 == cfg.updates);
        let dev = if evaluate {
            let w = greedy_wer(model, dev_utts, cfg)?;
            final_dev_wer = Some(w);
            eprintln!("update {:>5}  ctc {:.4}  dev_wer {w:.4}", update, step.loss);
            Some(w)
        } else {
            None
        };
        let row = FinetuneRow { update, ctc_loss: step.loss, lr, dev_wer: dev };
        writeln!(
            csv,
            "{},{},{},{}",
            row.update,
            row.ctc_loss,
            row.lr,
            row.dev_wer.map_or(String::new(), |w| w.to_string())
        )
        .expect("string write");
        rows.push(row);
    }

    fs::write(&metrics_path, csv)?;
    let hash = crate::checkpoint::config_hash(&(model.cfg.clone(), cfg.clone()))?;
    let mut entries = Vec::new();
    model.visit(|name, t| {
        entries.push(crate::checkpoint::Entry {
            name,
            shape: t.shape.clone(),
            data: t.data.clone(),
        });
    });
    let ckpt = crate::checkpoint::Checkpoint {
        config_hash: hash,
        update: cfg.updates,
        tau: 0.0,
        entries,
    };
    crate::checkpoint::write_checkpoint(&checkpoint_path, &ckpt)?;
    Ok(FinetuneOutcome { rows, metrics_path, checkpoint_path, final_dev_wer })
}

#[derive(Debug)]
pub struct SweepRun {
    pub peak_lr: f64,
    pub dev_wer: f64,
    pub out_dir: PathBuf,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub model: SpeechModel,
    pub peak_lr: f64,
    pub dev_wer: f64,
    pub runs: Vec<SweepRun>,
}

/// Fine-tune one copy of the model per candidate peak learning rate and keep
/// the one with the lowest dev WER (ties prefer the smaller rate).
pub fn finetune_sweep(
    base: &SpeechModel,
    utts: &[Utterance],
    cfg: &FinetuneConfig,
    out_dir: &Path,
) -> Result<SweepOutcome> {
    cfg.validate()?;
    if cfg.dev_utterances == 0 {
        return Err(Error::Config("the sweep selects by dev WER; dev_utterances is 0".into()));
    }
    let mut runs = Vec::new();
    let mut best: Option<(f64, f64, SpeechModel)> = None;
    for (i, &lr) in cfg.peak_lrs.iter().enumerate() {
        let mut model = base.clone();
        let dir = out_dir.join(format!("lr{i}"));
        let outcome = finetune_train(&mut model, utts, cfg, lr, &dir)?;
        let wer = outcome
            .final_dev_wer
            .ok_or_else(|| Error::Contract("sweep run produced no dev WER".into()))?;
        runs.push(SweepRun { peak_lr: lr, dev_wer: wer, out_dir: dir });
        if best.as_ref().map_or(true, |(bw, bl, _)| (wer, lr) < (*bw, *bl)) {
            best = Some((wer, lr, model));
        }
    }
    let (dev_wer, peak_lr, model) = best.expect("peak_lrs is nonempty");
    Ok(SweepOutcome { model, peak_lr, dev_wer, runs })
}
