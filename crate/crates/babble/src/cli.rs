//! Command-line front end: one subcommand per pipeline stage, driven by a
//! JSON run configuration with shipped presets.
//!
//! Conventions shared by every subcommand:
//!
//! * every artifact file written is printed to stdout, one path per line;
//! * the resolved configuration and the effective seed go to stderr;
//! * `--config` takes a preset name (looked up in `presets/`) or a path to
//!   a JSON file; unknown keys in the file are rejected;
//! * `--seed` overrides every seed in the configuration at once;
//! * `BABBLE_OUT_ROOT`, when set, re-roots relative `--out` paths.

use crate::checkpoint::{load_model, read_checkpoint};
use crate::cooc::{codebook_label_cooccurrence, write_cooccurrence_csv};
use crate::corpus::{load_corpus, read_manifest, read_transcripts, synthesize_corpus, SynthSpec};
use crate::decode::{beam_decode, greedy_decode, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::finetune::{finetune_sweep, transcription_log_probs, FinetuneConfig};
use crate::lm::{read_lm, train_ngram, write_lm, NGramLM};
use crate::masking::mask_statistics;
use crate::model::{ModelConfig, SpeechModel};
use crate::pretrain::{self, PretrainConfig};
use crate::rng;
use crate::wer::{top_word_errors, word_error_rate};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Everything one experiment needs, as a single JSON document.
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSpec,
    /// Corpus size rendered by `synth` (overridable with `--utterances`).
    pub corpus_utterances: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub decode: DecodeConfig,
    /// Word n-gram order for `lm`.
    pub lm_order: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.corpus_utterances == 0 {
            return Err(Error::Config("corpus_utterances must be positive".into()));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.decode.validate()?;
        if self.lm_order == 0 {
            return Err(Error::Config("lm_order must be positive".into()));
        }
        Ok(())
    }

    /// Route one `--seed` value to every stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }
}

/// Resolve a `--config` argument: first as a literal path, then as a preset
/// name under `presets/` in the working directory, then under the shipped
/// `presets/` next to the workspace manifest.
pub fn find_config(spec: &str) -> Option<PathBuf> {
    let direct = PathBuf::from(spec);
    if direct.is_file() {
        return Some(direct);
    }
    let local = Path::new("presets").join(format!("{spec}.json"));
    if local.is_file() {
        return Some(local);
    }
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(format!("{spec}.json"));
    if shipped.is_file() {
        return Some(shipped);
    }
    None
}

pub fn load_run_config(spec: &str) -> Result<RunConfig> {
    let path = find_config(spec)
        .ok_or_else(|| Error::Config(format!("no config file or preset named {spec:?}")))?;
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Re-root a relative output directory under `BABBLE_OUT_ROOT` when set.
fn resolve_out(out: PathBuf) -> PathBuf {
    if out.is_relative() {
        if let Ok(root) = std::env::var("BABBLE_OUT_ROOT") {
            if !root.is_empty() {
                return PathBuf::from(root).join(out);
            }
        }
    }
    out
}

fn log_resolved(cfg: &RunConfig, seed: u64) -> Result<()> {
    eprintln!("seed: {seed}");
    eprintln!("resolved config: {}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

fn emit(path: &Path) {
    println!("{}", path.display());
}

#[derive(Parser, Debug)]
#[command(
    name = "babble",
    version,
    about = "Self-supervised speech representations on synthetic audio",
    after_help = "Configs: --config takes a preset name (`toy`, `base-geometry`, looked up in \
                  presets/) or a path to a run-config JSON file. Unknown keys are rejected. \
                  Set BABBLE_OUT_ROOT to re-root relative --out paths.\n\
                  Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric error."
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a synthetic labeled corpus (WAVs, alignments, manifests)
    Synth(SynthArgs),
    /// Sample span masks and report run-length statistics
    MaskStats(MaskStatsArgs),
    /// Contrastive pre-training; writes metrics and checkpoints
    Pretrain(PretrainArgs),
    /// CTC fine-tuning of a pre-trained checkpoint, with a peak-lr sweep
    Finetune(FinetuneArgs),
    /// Train a word n-gram language model from corpus transcripts
    Lm(LmArgs),
    /// Decode a corpus to hypothesis transcripts
    Decode(DecodeArgs),
    /// Score hypothesis transcripts against the corpus references
    Eval(EvalArgs),
    /// Cross-tabulate codebook usage against ground-truth symbol labels
    Cooc(CoocArgs),
    /// Rank the most frequent reference-to-hypothesis word confusions
    Errors(ErrorsArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Preset name (toy, base-geometry) or path to a run-config JSON file
    #[arg(long, value_name = "NAME|PATH")]
    config: String,
    /// Override every seed in the configuration
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    /// Load the config, apply the seed override, and return it with the
    /// seed the caller should report.
    fn load(&self, default_seed: impl Fn(&RunConfig) -> u64) -> Result<(RunConfig, u64)> {
        let mut cfg = load_run_config(&self.config)?;
        let seed = match self.seed {
            Some(s) => {
                cfg.override_seed(s);
                s
            }
            None => default_seed(&cfg),
        };
        log_resolved(&cfg, seed)?;
        Ok((cfg, seed))
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory that receives WAVs, alignments, and manifests
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the number of utterances to render
    #[arg(long)]
    utterances: Option<usize>,
}

#[derive(Args, Debug)]
struct MaskStatsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory that receives the statistics tables
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Length of the frame sequence each mask is drawn over
    #[arg(long, default_value_t = 749)]
    frames: usize,
    /// Number of independent masks to pool
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus directory containing manifest.tsv
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Directory that receives metrics.csv and checkpoints
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the total number of updates (0 writes an initial checkpoint
    /// and exits)
    #[arg(long)]
    updates: Option<u64>,
    /// Resume from this checkpoint instead of initializing fresh weights
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    /// Stop after this many updates in this invocation, checkpointing for a
    /// later resume
    #[arg(long, value_name = "N")]
    run_limit: Option<u64>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus directory containing manifest.tsv and transcripts
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Pre-trained checkpoint to start from
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Directory that receives one subdirectory per swept peak lr plus the
    /// winning finetuned.bin
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the number of fine-tuning updates per sweep run
    #[arg(long)]
    updates: Option<u64>,
}

#[derive(Args, Debug)]
struct LmArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus directory containing manifest.trans.tsv
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Directory that receives lm.arpa
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the n-gram order
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus directory to transcribe
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Fine-tuned checkpoint with a classifier head
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Language model file (required in beam_lm mode)
    #[arg(long, value_name = "FILE")]
    lm: Option<PathBuf>,
    /// Directory that receives hypotheses.tsv
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the beam width
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus directory whose transcripts are the references
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Hypothesis TSV (id<TAB>text) as written by decode
    #[arg(long, value_name = "FILE")]
    hyp: PathBuf,
    /// Directory that receives scores.tsv
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CoocArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus directory with frame alignments
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Checkpoint whose codebook is analyzed
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Directory that receives cooc.csv
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ErrorsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus directory whose transcripts are the references
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Hypothesis TSV (id<TAB>text) as written by decode
    #[arg(long, value_name = "FILE")]
    hyp: PathBuf,
    /// Directory that receives errors.tsv
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Keep this many confusion pairs
    #[arg(long, default_value_t = 20)]
    top: usize,
}

/// Parse `argv` and run; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::MaskStats(a) => cmd_mask_stats(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Lm(a) => cmd_lm(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Cooc(a) => cmd_cooc(a),
        Cmd::Errors(a) => cmd_errors(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let (cfg, _) = a.cfg.load(|c| c.synth.seed)?;
    let out = resolve_out(a.out);
    let n = a.utterances.unwrap_or(cfg.corpus_utterances);
    let manifest = synthesize_corpus(&cfg.synth, n, &out)?;
    for e in &manifest.entries {
        let id = Path::new(&e.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        emit(&manifest.root.join(&e.path));
        emit(&manifest.root.join(format!("{id}.align.bin")));
    }
    emit(&manifest.root.join("manifest.tsv"));
    emit(&manifest.root.join("manifest.trans.tsv"));
    eprintln!("rendered {} utterances", manifest.len());
    Ok(())
}

fn cmd_mask_stats(a: MaskStatsArgs) -> Result<()> {
    let (cfg, seed) = a.cfg.load(|c| c.pretrain.seed)?;
    let out = resolve_out(a.out);
    fs::create_dir_all(&out)?;
    let mut r = rng::stream(seed, "mask-stats");
    let stats = mask_statistics(&[cfg.pretrain.mask], a.frames, a.trials, &mut r)?;
    let s = &stats[0];
    let kind = serde_json::to_value(cfg.pretrain.mask.strategy)?["kind"]
        .as_str()
        .unwrap_or("unknown")
        .to_string();

    let stats_path = out.join("mask_stats.csv");
    let mut f = fs::File::create(&stats_path)?;
    writeln!(f, "strategy,frames,trials,mean_run,median_run,max_run,masked_fraction")?;
    writeln!(
        f,
        "{kind},{},{},{},{},{},{}",
        a.frames, a.trials, s.mean_len, s.median_len, s.max_len, s.masked_fraction
    )?;

    let hist_path = out.join("mask_histogram.csv");
    let mut h = fs::File::create(&hist_path)?;
    writeln!(h, "length,count")?;
    for (len, count) in &s.histogram {
        writeln!(h, "{len},{count}")?;
    }

    emit(&stats_path);
    emit(&hist_path);
    eprintln!(
        "mean run {:.2}, median {:.1}, max {}, masked fraction {:.3}",
        s.mean_len, s.median_len, s.max_len, s.masked_fraction
    );
    Ok(())
}

fn read_corpus_dir(dir: &Path) -> Result<Vec<crate::corpus::Utterance>> {
    let manifest = read_manifest(&dir.join("manifest.tsv"))?;
    load_corpus(&manifest)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let (mut cfg, seed) = a.cfg.load(|c| c.pretrain.seed)?;
    if let Some(u) = a.updates {
        cfg.pretrain.total_updates = u;
    }
    let out = resolve_out(a.out);
    let utts = read_corpus_dir(&a.corpus)?;
    let mut model = SpeechModel::init(cfg.model.clone(), seed)?;
    let outcome =
        pretrain::train(&mut model, &utts, &cfg.pretrain, &out, a.resume.as_deref(), a.run_limit)?;
    emit(&outcome.metrics_path);
    emit(&outcome.checkpoint_path);
    if outcome.best_path.is_file() {
        emit(&outcome.best_path);
    }
    if let Some(v) = outcome.final_val {
        eprintln!("final validation L_m {v:.4} (best {:.4})", outcome.best_val);
    }
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let (mut cfg, seed) = a.cfg.load(|c| c.finetune.seed)?;
    if let Some(u) = a.updates {
        cfg.finetune.updates = u;
    }
    let out = resolve_out(a.out);
    let ckpt = read_checkpoint(&a.model)?;
    let mut model = load_model(&cfg.model, &ckpt)?;
    if model.classifier.is_none() {
        model.add_classifier(cfg.finetune.alphabet.len(), seed);
    }
    let utts = read_corpus_dir(&a.corpus)?;
    let sweep = finetune_sweep(&model, &utts, &cfg.finetune, &out)?;
    for run in &sweep.runs {
        emit(&run.out_dir.join("finetune.csv"));
        emit(&run.out_dir.join("finetuned.bin"));
        eprintln!("peak lr {:>9.2e}: dev WER {:.3}", run.peak_lr, run.dev_wer);
    }
    // The winning run already serialized exactly this model; copy it up.
    let best = sweep
        .runs
        .iter()
        .find(|r| r.peak_lr == sweep.peak_lr)
        .ok_or_else(|| Error::Contract("sweep winner missing from runs".into()))?;
    let winner = out.join("finetuned.bin");
    fs::copy(best.out_dir.join("finetuned.bin"), &winner)?;
    emit(&winner);
    eprintln!("selected peak lr {:.2e} at dev WER {:.3}", sweep.peak_lr, sweep.dev_wer);
    Ok(())
}

fn transcript_sentences(corpus: &Path) -> Result<BTreeMap<String, String>> {
    read_transcripts(&corpus.join("manifest.trans.tsv"))
}

fn cmd_lm(a: LmArgs) -> Result<()> {
    let (cfg, _) = a.cfg.load(|c| c.synth.seed)?;
    let out = resolve_out(a.out);
    let order = a.order.unwrap_or(cfg.lm_order);
    let trans = transcript_sentences(&a.corpus)?;
    let sentences: Vec<Vec<String>> = trans
        .values()
        .map(|t| t.split_whitespace().map(String::from).collect())
        .collect();
    let lm = train_ngram(&sentences, order)?;
    fs::create_dir_all(&out)?;
    let path = out.join("lm.arpa");
    write_lm(&lm, &path)?;
    emit(&path);
    let ppl = lm.perplexity(&sentences)?;
    eprintln!(
        "order {} model over {} words; self-perplexity {:.2}",
        lm.order,
        lm.vocab.len(),
        ppl
    );
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let (cfg, _) = a.cfg.load(|c| c.finetune.seed)?;
    let mut dcfg = cfg.decode;
    if let Some(b) = a.beam {
        dcfg.beam = b;
    }
    dcfg.validate()?;
    let out = resolve_out(a.out);
    let lm: Option<NGramLM> = match (dcfg.mode, &a.lm) {
        (DecodeMode::BeamLm, Some(p)) => Some(read_lm(p)?),
        (DecodeMode::BeamLm, None) => {
            return Err(Error::Config("beam_lm decoding needs --lm".into()))
        }
        _ => None,
    };
    let ckpt = read_checkpoint(&a.model)?;
    let model = load_model(&cfg.model, &ckpt)?;
    let classes = match &model.classifier {
        Some(c) => c.w.shape[1] - 1,
        None => {
            return Err(Error::Checkpoint(
                "checkpoint has no classifier head; fine-tune first".into(),
            ))
        }
    };
    if classes != cfg.finetune.alphabet.len() {
        return Err(Error::Config(format!(
            "checkpoint head covers {classes} classes but the alphabet has {}",
            cfg.finetune.alphabet.len()
        )));
    }
    let utts = read_corpus_dir(&a.corpus)?;
    fs::create_dir_all(&out)?;
    let path = out.join("hypotheses.tsv");
    let mut f = fs::File::create(&path)?;
    for u in &utts {
        let lp = transcription_log_probs(&model, &cfg.finetune, &u.samples)?;
        let hyp = match dcfg.mode {
            DecodeMode::Greedy => greedy_decode(&lp, &cfg.finetune.alphabet)?,
            _ => beam_decode(&lp, &cfg.finetune.alphabet, lm.as_ref(), &dcfg)?,
        };
        writeln!(f, "{}\t{hyp}", u.id)?;
    }
    emit(&path);
    eprintln!("decoded {} utterances", utts.len());
    Ok(())
}

/// References and hypotheses paired by utterance id; ids must match exactly.
fn paired_texts(corpus: &Path, hyp: &Path) -> Result<Vec<(String, String, String)>> {
    let refs = transcript_sentences(corpus)?;
    let hyps = read_transcripts(hyp)?;
    for id in refs.keys() {
        if !hyps.contains_key(id) {
            return Err(Error::Data(format!("no hypothesis for utterance {id}")));
        }
    }
    for id in hyps.keys() {
        if !refs.contains_key(id) {
            return Err(Error::Data(format!("hypothesis for unknown utterance {id}")));
        }
    }
    Ok(refs
        .into_iter()
        .map(|(id, r)| {
            let h = hyps[&id].clone();
            (id, r, h)
        })
        .collect())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (_cfg, _) = a.cfg.load(|c| c.synth.seed)?;
    let out = resolve_out(a.out);
    let pairs = paired_texts(&a.corpus, &a.hyp)?;
    fs::create_dir_all(&out)?;
    let path = out.join("scores.tsv");
    let mut f = fs::File::create(&path)?;
    writeln!(f, "id\twer\tsub\tdel\tins\tref_words")?;
    let (mut edits, mut words) = (0usize, 0usize);
    let (mut subs, mut dels, mut inss) = (0usize, 0usize, 0usize);
    for (id, r, h) in &pairs {
        let b = word_error_rate(r, h)?;
        let n = r.split_whitespace().count();
        writeln!(
            f,
            "{id}\t{:.4}\t{}\t{}\t{}\t{n}",
            b.wer, b.substitutions, b.deletions, b.insertions
        )?;
        edits += b.edits();
        words += n;
        subs += b.substitutions;
        dels += b.deletions;
        inss += b.insertions;
    }
    let corpus_wer = edits as f64 / words as f64;
    writeln!(f, "ALL\t{corpus_wer:.4}\t{subs}\t{dels}\t{inss}\t{words}")?;
    emit(&path);
    eprintln!("corpus WER {corpus_wer:.4} over {} utterances", pairs.len());
    Ok(())
}

fn cmd_cooc(a: CoocArgs) -> Result<()> {
    let (cfg, _) = a.cfg.load(|c| c.pretrain.seed)?;
    let out = resolve_out(a.out);
    let ckpt = read_checkpoint(&a.model)?;
    let model = load_model(&cfg.model, &ckpt)?;
    let utts = read_corpus_dir(&a.corpus)?;
    let m = codebook_label_cooccurrence(&model, &utts)?;
    fs::create_dir_all(&out)?;
    let path = out.join("cooc.csv");
    write_cooccurrence_csv(&m, &path)?;
    emit(&path);
    eprintln!(
        "{} labels x {} codewords; mean max conditional {:.3}",
        m.labels.len(),
        m.codewords.len(),
        m.mean_max_conditional()
    );
    Ok(())
}

fn cmd_errors(a: ErrorsArgs) -> Result<()> {
    let (_cfg, _) = a.cfg.load(|c| c.synth.seed)?;
    let out = resolve_out(a.out);
    let pairs = paired_texts(&a.corpus, &a.hyp)?;
    let refs: Vec<String> = pairs.iter().map(|(_, r, _)| r.clone()).collect();
    let hyps: Vec<String> = pairs.iter().map(|(_, _, h)| h.clone()).collect();
    let top = top_word_errors(&refs, &hyps, a.top)?;
    fs::create_dir_all(&out)?;
    let path = out.join("errors.tsv");
    let mut f = fs::File::create(&path)?;
    writeln!(f, "reference\thypothesis\tcount")?;
    for (r, h, c) in &top {
        writeln!(f, "{r}\t{h}\t{c}")?;
    }
    emit(&path);
    eprintln!("{} confusion pairs", top.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_presets_parse_and_validate() {
        for name in ["toy", "base-geometry"] {
            let cfg = load_run_config(name).unwrap();
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn the_seed_flag_reaches_every_stage() {
        let mut cfg = load_run_config("toy").unwrap();
        cfg.override_seed(99);
        assert_eq!(cfg.synth.seed, 99);
        assert_eq!(cfg.pretrain.seed, 99);
        assert_eq!(cfg.finetune.seed, 99);
    }

    #[test]
    fn unknown_config_keys_are_rejected_as_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let toy = find_config("toy").unwrap();
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(toy).unwrap()).unwrap();
        v.as_object_mut().unwrap().insert("surprise".into(), serde_json::json!(1));
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let err = load_run_config(path.to_str().unwrap()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("surprise"));
    }

    #[test]
    fn missing_presets_are_usage_errors() {
        let err = load_run_config("no-such-preset").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn relative_outputs_follow_the_output_root() {
        // Relative paths pass through untouched when the variable is unset.
        std::env::remove_var("BABBLE_OUT_ROOT");
        assert_eq!(resolve_out(PathBuf::from("runs/a")), PathBuf::from("runs/a"));
        std::env::set_var("BABBLE_OUT_ROOT", "/tmp/babble-root");
        assert_eq!(
            resolve_out(PathBuf::from("runs/a")),
            PathBuf::from("/tmp/babble-root/runs/a")
        );
        assert_eq!(resolve_out(PathBuf::from("/abs/stays")), PathBuf::from("/abs/stays"));
        std::env::remove_var("BABBLE_OUT_ROOT");
    }
}
