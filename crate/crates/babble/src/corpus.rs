//! Synthetic speech-like corpus: formant synthesis, manifests, alignments,
//! normalization, and batch cropping.
//!
//! Each utterance is a sequence of "phones". A phone is a sum of three sine
//! partials at symbol-specific formant frequencies plus white noise, held for
//! a random duration. An optional boundary symbol with formants (0, 0, 0)
//! renders as noise-floor silence and separates words in the transcript.

use crate::error::{Error, Result};
use crate::rng;
use crate::wav;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const AMPLITUDE: f64 = 0.25;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Symbol inventory; index order defines label ids.
    pub alphabet: Vec<char>,
    /// One formant triple (Hz) per symbol, parallel to `alphabet`.
    pub formant_table: Vec<[f64; 3]>,
    /// Per-phone duration in samples, inclusive bounds.
    pub symbol_duration_range: (usize, usize),
    /// Utterance length in phones, inclusive bounds.
    pub utterance_length_range: (usize, usize),
    /// Std-dev of additive white noise.
    pub noise_level: f64,
    pub seed: u64,
    /// Symbol rendered between words; must be in `alphabet` when set.
    #[serde(default)]
    pub boundary_symbol: Option<char>,
    /// Word length in phones (boundary excluded), inclusive bounds.
    #[serde(default)]
    pub word_length_range: Option<(usize, usize)>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() {
            return Err(Error::Data("empty alphabet".into()));
        }
        if self.formant_table.len() != self.alphabet.len() {
            return Err(Error::Data(format!(
                "alphabet has {} symbols but formant table has {} rows",
                self.alphabet.len(),
                self.formant_table.len()
            )));
        }
        for (i, a) in self.alphabet.iter().enumerate() {
            for (j, b) in self.alphabet.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(Error::Data(format!("duplicate symbol {a:?}")));
                }
                if self.formant_table[i] == self.formant_table[j] {
                    return Err(Error::Data(format!(
                        "symbols {a:?} and {b:?} share formants {:?}",
                        self.formant_table[i]
                    )));
                }
            }
        }
        let (dmin, dmax) = self.symbol_duration_range;
        if dmin == 0 || dmin > dmax {
            return Err(Error::Data(format!("bad duration range ({dmin}, {dmax})")));
        }
        let (lmin, lmax) = self.utterance_length_range;
        if lmin == 0 || lmin > lmax {
            return Err(Error::Data(format!("bad utterance length range ({lmin}, {lmax})")));
        }
        if self.noise_level < 0.0 {
            return Err(Error::Data("negative noise level".into()));
        }
        if let Some(b) = self.boundary_symbol {
            if !self.alphabet.contains(&b) {
                return Err(Error::Data(format!("boundary symbol {b:?} not in alphabet")));
            }
            let (wmin, wmax) = self
                .word_length_range
                .ok_or_else(|| Error::Data("boundary symbol set without word length range".into()))?;
            if wmin == 0 || wmin > wmax {
                return Err(Error::Data(format!("bad word length range ({wmin}, {wmax})")));
            }
        } else if self.word_length_range.is_some() {
            return Err(Error::Data("word length range set without boundary symbol".into()));
        }
        Ok(())
    }

    pub fn symbol_id(&self, c: char) -> Option<u16> {
        self.alphabet.iter().position(|&a| a == c).map(|i| i as u16)
    }

    /// Eight-symbol inventory with word structure; used by the examples.
    pub fn demo(seed: u64) -> Self {
        let mut alphabet: Vec<char> = "abcdefgh".chars().collect();
        let mut formants: Vec<[f64; 3]> = (0..alphabet.len())
            .map(|i| {
                let i = i as f64;
                [300.0 + 120.0 * i, 1200.0 + 180.0 * i, 2600.0 + 240.0 * i]
            })
            .collect();
        alphabet.push('|');
        formants.push([0.0, 0.0, 0.0]);
        SynthSpec {
            alphabet,
            formant_table: formants,
            symbol_duration_range: (400, 800),
            utterance_length_range: (12, 24),
            noise_level: 0.02,
            seed,
            boundary_symbol: Some('|'),
            word_length_range: Some((2, 4)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    /// Dequantized samples in [-1, 1).
    pub samples: Vec<f64>,
    pub transcript: Option<String>,
    /// Per-sample symbol ids, same length as `samples`.
    pub labels: Option<Vec<u16>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub path: String,
    pub num_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn utterance_id(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Render one utterance; the sample clock runs across phones so partials stay
/// phase-continuous at symbol boundaries.
fn render(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u16>, String) {
    let (lmin, lmax) = spec.utterance_length_range;
    let n_phones = rng.gen_range(lmin..=lmax);
    let boundary_id = spec.boundary_symbol.and_then(|b| spec.symbol_id(b));

    let mut phone_ids: Vec<u16> = Vec::with_capacity(n_phones);
    match (boundary_id, spec.word_length_range) {
        (Some(b), Some((wmin, wmax))) => {
            let pool: Vec<u16> =
                (0..spec.alphabet.len() as u16).filter(|&i| i != b).collect();
            while phone_ids.len() < n_phones {
                if !phone_ids.is_empty() {
                    phone_ids.push(b);
                }
                let remaining = n_phones - phone_ids.len();
                let w = rng.gen_range(wmin..=wmax).min(remaining.max(1));
                for _ in 0..w.min(remaining) {
                    phone_ids.push(pool[rng.gen_range(0..pool.len())]);
                }
            }
            // The drawn length is a budget; never end on a boundary.
            if phone_ids.last() == Some(&b) {
                phone_ids.pop();
            }
        }
        _ => {
            for _ in 0..n_phones {
                phone_ids.push(rng.gen_range(0..spec.alphabet.len()) as u16);
            }
        }
    }

    let (dmin, dmax) = spec.symbol_duration_range;
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut clock = 0usize;
    for &id in &phone_ids {
        let dur = rng.gen_range(dmin..=dmax);
        let formants = spec.formant_table[id as usize];
        for _ in 0..dur {
            let t = clock as f64 / f64::from(wav::SAMPLE_RATE);
            let mut x = 0.0;
            for f in formants {
                x += AMPLITUDE * (2.0 * std::f64::consts::PI * f * t).sin();
            }
            if spec.noise_level > 0.0 {
                x += spec.noise_level * noise.sample(rng);
            }
            samples.push(x);
            labels.push(id);
            clock += 1;
        }
    }

    let transcript: String = phone_ids
        .iter()
        .map(|&id| {
            let c = spec.alphabet[id as usize];
            if Some(id) == boundary_id {
                ' '
            } else {
                c
            }
        })
        .collect();
    (samples, labels, transcript)
}

/// Render `n` utterances in memory. Samples are identical to what a write /
/// read round trip through 16-bit WAV files would produce, so in-memory and
/// on-disk corpora with the same spec agree exactly.
pub fn render_utterances(spec: &SynthSpec, n: usize) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Data("corpus size must be positive".into()));
    }
    let mut rng = rng::stream(spec.seed, "corpus");
    Ok((0..n)
        .map(|i| {
            let (raw, labels, transcript) = render(spec, &mut rng);
            Utterance {
                id: format!("utt_{i:04}"),
                samples: wav::quantize(&raw),
                transcript: Some(transcript),
                labels: Some(labels),
            }
        })
        .collect())
}

/// Synthesize `n` utterances under `out_dir`, writing one WAV and one
/// alignment file per utterance plus `manifest.tsv` and `manifest.trans.tsv`.
/// Returns the manifest. Fully determined by `spec.seed`.
pub fn synthesize_corpus(spec: &SynthSpec, n: usize, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Data("corpus size must be positive".into()));
    }
    fs::create_dir_all(out_dir)?;
    let root = out_dir
        .canonicalize()
        .map_err(|e| Error::Data(format!("{}: {e}", out_dir.display())))?;

    let mut rng = rng::stream(spec.seed, "corpus");
    let mut entries = Vec::with_capacity(n);
    let mut transcripts: Vec<(String, String)> = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("utt_{i:04}");
        let (raw, labels, transcript) = render(spec, &mut rng);
        let pcm: Vec<i16> = raw.iter().map(|&x| wav::quantize_one(x)).collect();
        let rel = format!("{id}.wav");
        wav::write_wav(&root.join(&rel), &pcm)?;
        write_alignment(&root.join(format!("{id}.align.bin")), &labels)?;
        entries.push(ManifestEntry { path: rel, num_samples: pcm.len() });
        transcripts.push((id, transcript));
    }

    let manifest = Manifest { root: root.clone(), entries };
    write_manifest(&manifest, &root.join("manifest.tsv"))?;
    write_transcripts(&transcripts, &root.join("manifest.trans.tsv"))?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(w, "root\t{}", manifest.root.display())?;
    for e in &manifest.entries {
        writeln!(w, "{}\t{}", e.path, e.num_samples)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let f = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty manifest", path.display())))??;
    let root = header
        .strip_prefix("root\t")
        .ok_or_else(|| Error::Data(format!("{}: first line must be root\\t<path>", path.display())))?;
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (p, n) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected path\\tnum_samples", path.display(), lineno + 2))
        })?;
        let num_samples: usize = n.parse().map_err(|_| {
            Error::Data(format!("{}:{}: bad sample count {n:?}", path.display(), lineno + 2))
        })?;
        entries.push(ManifestEntry { path: p.to_string(), num_samples });
    }
    Ok(Manifest { root: PathBuf::from(root), entries })
}

fn write_transcripts(rows: &[(String, String)], path: &Path) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    for (id, t) in rows {
        writeln!(w, "{id}\t{t}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_transcripts(path: &Path) -> Result<BTreeMap<String, String>> {
    let f = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (id, t) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected id\\ttranscript", path.display(), lineno + 1))
        })?;
        out.insert(id.to_string(), t.to_string());
    }
    Ok(out)
}

pub fn write_alignment(path: &Path, labels: &[u16]) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    for &l in labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_alignment(path: &Path) -> Result<Vec<u16>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::Data(format!("{}: odd byte count", path.display())));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

/// Load every utterance in the manifest, together with transcripts from the
/// sibling `.trans.tsv` and alignments from per-utterance `.align.bin` files
/// where present. Verifies manifest sample counts against file contents.
pub fn load_corpus(manifest: &Manifest) -> Result<Vec<Utterance>> {
    let trans_path = manifest.root.join("manifest.trans.tsv");
    let transcripts = if trans_path.exists() {
        read_transcripts(&trans_path)?
    } else {
        BTreeMap::new()
    };
    let mut utts = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let wav_path = manifest.root.join(&e.path);
        let samples = wav::read_wav(&wav_path)?;
        if samples.len() != e.num_samples {
            return Err(Error::Data(format!(
                "{}: manifest says {} samples, file has {}",
                wav_path.display(),
                e.num_samples,
                samples.len()
            )));
        }
        let id = utterance_id(&e.path);
        let align_path = manifest.root.join(format!("{id}.align.bin"));
        let labels = if align_path.exists() {
            let l = read_alignment(&align_path)?;
            if l.len() != samples.len() {
                return Err(Error::Data(format!(
                    "{}: alignment has {} labels for {} samples",
                    align_path.display(),
                    l.len(),
                    samples.len()
                )));
            }
            Some(l)
        } else {
            None
        };
        utts.push(Utterance {
            id: id.clone(),
            samples,
            transcript: transcripts.get(&id).cloned(),
            labels,
        });
    }
    Ok(utts)
}

/// Standardize to zero mean and unit population variance.
pub fn normalize(wave: &[f64]) -> Result<Vec<f64>> {
    if wave.is_empty() {
        return Err(Error::Degenerate("cannot normalize an empty waveform".into()));
    }
    let n = wave.len() as f64;
    let mean = wave.iter().sum::<f64>() / n;
    let var = wave.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        return Err(Error::Degenerate("constant waveform has no scale".into()));
    }
    let inv = 1.0 / var.sqrt();
    Ok(wave.iter().map(|x| (x - mean) * inv).collect())
}

#[derive(Clone, Debug)]
pub struct Crop {
    pub utt_index: usize,
    pub id: String,
    /// Normalized samples, exactly `crop_len` long.
    pub samples: Vec<f64>,
    pub offset: usize,
    /// Number of real samples; the tail beyond this is zero padding.
    pub valid_len: usize,
    pub labels: Option<Vec<u16>>,
    pub transcript: Option<String>,
}

/// Greedily pack random fixed-length crops, one per utterance in order, until
/// the sample budget is exhausted. Crops are normalized after cutting; an
/// utterance shorter than `crop_len` is taken whole and zero-padded.
pub fn batch_crop(
    utts: &[Utterance],
    max_batch_samples: usize,
    crop_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Crop>> {
    if utts.is_empty() {
        return Err(Error::Data("no utterances to crop".into()));
    }
    if crop_len == 0 || crop_len > max_batch_samples {
        return Err(Error::Contract(format!(
            "crop length {crop_len} must be in 1..={max_batch_samples}"
        )));
    }
    let mut crops = Vec::new();
    let mut used = 0usize;
    for (i, u) in utts.iter().enumerate() {
        if used + crop_len > max_batch_samples {
            break;
        }
        if u.samples.is_empty() {
            return Err(Error::Data(format!("{}: empty waveform", u.id)));
        }
        let take = crop_len.min(u.samples.len());
        let offset = if u.samples.len() > take {
            rng.gen_range(0..=u.samples.len() - take)
        } else {
            0
        };
        let mut samples = normalize(&u.samples[offset..offset + take])?;
        samples.resize(crop_len, 0.0);
        crops.push(Crop {
            utt_index: i,
            id: u.id.clone(),
            samples,
            offset,
            valid_len: take,
            labels: u.labels.as_ref().map(|l| l[offset..offset + take].to_vec()),
            transcript: u.transcript.clone(),
        });
        used += crop_len;
    }
    Ok(crops)
}
