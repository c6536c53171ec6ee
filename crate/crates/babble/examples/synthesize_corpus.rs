//! Render a labeled synthetic corpus to disk and poke at what came out:
//! manifests, transcripts, per-sample alignments, and the raw waveform.

use babble::corpus::{load_corpus, synthesize_corpus, SynthSpec};
use babble::Result;
use std::path::Path;

fn main() -> Result<()> {
    let spec = SynthSpec::demo(11);
    let out = Path::new("target/examples/corpus");
    let manifest = synthesize_corpus(&spec, 6, out)?;

    println!("wrote {} utterances under {}", manifest.len(), manifest.root.display());
    for e in &manifest.entries {
        println!("  {}  ({} samples)", e.path, e.num_samples);
    }

    let utts = load_corpus(&manifest)?;
    let u = &utts[0];
    println!("\nfirst utterance: {}", u.id);
    println!("transcript: {:?}", u.transcript.as_deref().unwrap());

    // The alignment labels every sample with its symbol id; collapse the
    // runs to see the phone sequence and its durations.
    let labels = u.labels.as_ref().unwrap();
    let mut runs: Vec<(u16, usize)> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some((sym, n)) if *sym == l => *n += 1,
            _ => runs.push((l, 1)),
        }
    }
    println!("phone runs (symbol id x samples):");
    for (sym, n) in runs.iter().take(10) {
        let c = spec.alphabet[*sym as usize];
        println!("  {c:?} (id {sym})  {n} samples");
    }
    if runs.len() > 10 {
        println!("  ... {} more runs", runs.len() - 10);
    }

    let peak = u.samples.iter().fold(0f64, |m, &x| m.max(x.abs()));
    println!("\n{} samples, peak amplitude {peak:.3}", u.samples.len());
    println!("first 8 samples: {:?}", &u.samples[..8]);
    Ok(())
}
