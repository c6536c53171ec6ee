//! How the convolutional feature encoder maps samples to frames: total
//! stride, receptive field, frame rate, and the frame counts for a few
//! clip lengths.

use babble::encoder::EncoderConfig;
use babble::Result;

fn describe(name: &str, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    let (stride, rf, rate) = cfg.geometry();
    println!("{name}:");
    println!("  blocks:          {}", cfg.channels.len());
    println!("  strides:         {:?}", cfg.strides);
    println!("  kernels:         {:?}", cfg.kernels);
    println!("  total stride:    {stride} samples/frame");
    println!("  receptive field: {rf} samples");
    println!("  frame rate:      {rate:.1} Hz");
    for &len in &[400usize, 3200, 16000, 49600] {
        match cfg.num_frames(len) {
            Some(t) => println!("  {len:>6} samples -> {t} frames"),
            None => println!("  {len:>6} samples -> too short"),
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    describe("full-scale preset", &EncoderConfig::base())?;
    println!();
    describe("toy preset", &EncoderConfig::toy(16))?;

    // Zero-padded batches: frames whose receptive field spills past the real
    // samples are dropped from the loss, so short clips in a padded batch
    // contribute only their fully-covered prefix.
    let toy = EncoderConfig::toy(16);
    let padded_to = 4000;
    let total = toy.num_frames(padded_to).unwrap();
    println!("\npadded batch of {padded_to} samples -> {total} frames per row");
    for &valid in &[4000usize, 2500, 1000, 54] {
        let v = toy.valid_frames(valid, total);
        println!("  row with {valid:>4} real samples: {v} usable frames");
    }
    Ok(())
}
