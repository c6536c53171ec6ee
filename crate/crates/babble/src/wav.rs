//! 16-bit PCM mono WAV reading and writing.

use crate::error::{Error, Result};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use std::path::Path;

pub const SAMPLE_RATE: u32 = 16_000;

fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

pub fn write_wav(path: &Path, samples: &[i16]) -> Result<()> {
    let mut w = WavWriter::create(path, spec())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for &s in samples {
        w.write_sample(s)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.finalize()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_wav_i16(path: &Path) -> Result<Vec<i16>> {
    let mut r =
        WavReader::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let got = r.spec();
    if got != spec() {
        return Err(Error::Data(format!(
            "{}: expected 16 kHz mono 16-bit PCM, got {} Hz, {} ch, {} bit",
            path.display(),
            got.sample_rate,
            got.channels,
            got.bits_per_sample
        )));
    }
    r.samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Map 16-bit PCM to floats in [-1, 1).
pub fn dequantize(samples: &[i16]) -> Vec<f64> {
    samples.iter().map(|&s| f64::from(s) / 32768.0).collect()
}

/// Map floats to 16-bit PCM, clamping to the representable range.
pub fn quantize(samples: &[f64]) -> Vec<f64> {
    // Returned as f64 so callers can keep exact dequantized values in memory.
    samples
        .iter()
        .map(|&x| f64::from(quantize_one(x)) / 32768.0)
        .collect()
}

pub fn quantize_one(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    Ok(dequantize(&read_wav_i16(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_dequantize_is_stable() {
        let xs = [0.0, 0.5, -0.5, 0.999, -1.0, 0.1234];
        let once = quantize(&xs);
        let twice = quantize(&once);
        assert_eq!(once, twice);
    }
}
