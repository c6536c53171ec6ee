//! The product quantizer up close: Gumbel-softmax selection at different
//! temperatures, straight-through hard choices, codebook usage, diversity
//! loss, and perplexity.

use babble::quantizer::{
    diversity_loss_value, perplexity_metric, quantize, Codebook, QuantizerConfig, SelectMode,
    TemperatureSchedule,
};
use babble::rng;
use babble::{Graph, Result, Tensor};
use rand::Rng;

fn main() -> Result<()> {
    let cfg = QuantizerConfig {
        groups: 2,
        entries: 6,
        input_dim: 8,
        output_dim: 8,
        temperature: TemperatureSchedule { start: 2.0, min: 0.5, decay: 0.9999 },
    };
    let mut r = rng::stream(3, "quantizer-example");
    let codebook = Codebook::init(cfg, &mut r)?;
    println!(
        "codebook: {} groups x {} entries = {} composite codewords",
        cfg.groups,
        cfg.entries,
        cfg.num_codewords()
    );

    // Ten random latent frames pushed through the quantizer at a hot and a
    // cold temperature. The soft selection sharpens as tau drops.
    let t = 10;
    let z: Vec<f64> = (0..t * cfg.input_dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    for tau in [2.0, 0.5, 0.1] {
        let mut g = Graph::new();
        let bound = codebook.bind(&mut g, false);
        let zn = g.constant(Tensor::matrix(t, cfg.input_dim, z.clone()));
        let mut qr = rng::stream(3, "gumbel");
        let out = quantize(&mut g, &bound, zn, tau, true, SelectMode::Soft, &mut qr)?;
        let probs = g.value(out.soft_probs[0]);
        let first: Vec<f64> =
            probs.data[..cfg.entries].iter().map(|p| (p * 1000.0).round() / 1000.0).collect();
        let peak = first.iter().cloned().fold(0.0, f64::max);
        println!("tau {tau:>4}: group-0 selection for frame 0: {first:?} (peak {peak:.3})");
    }

    // Hard mode keeps the argmax forward; the selected entries are what the
    // co-occurrence analysis counts later.
    let mut g = Graph::new();
    let bound = codebook.bind(&mut g, false);
    let zn = g.constant(Tensor::matrix(t, cfg.input_dim, z.clone()));
    let mut qr = rng::stream(3, "gumbel");
    let out = quantize(&mut g, &bound, zn, 1.0, false, SelectMode::Hard, &mut qr)?;
    println!("\nhard selections per frame (one entry per group):");
    for (i, idx) in out.hard_indices.iter().enumerate() {
        println!("  frame {i}: {idx:?}");
    }
    let q = g.value(out.q);
    println!("quantized output shape: {:?}", q.shape);

    // Diversity: uniform usage is the optimum; a collapsed codebook pays.
    let v = cfg.entries;
    let uniform = Tensor::matrix(cfg.groups, v, vec![1.0 / v as f64; cfg.groups * v]);
    let mut collapsed_rows = vec![0.0; cfg.groups * v];
    collapsed_rows[0] = 1.0;
    collapsed_rows[v] = 1.0;
    let collapsed = Tensor::matrix(cfg.groups, v, collapsed_rows);
    let usage = g.value(out.usage).clone();
    println!("\ndiversity loss (lower is better):");
    println!("  uniform usage:   {:+.6}", diversity_loss_value(&uniform)?);
    println!("  observed usage:  {:+.6}", diversity_loss_value(&usage)?);
    println!("  collapsed usage: {:+.6}", diversity_loss_value(&collapsed)?);
    println!("codebook perplexity (max {}):", v * cfg.groups);
    println!("  uniform usage:   {:.3}", perplexity_metric(&uniform)?);
    println!("  observed usage:  {:.3}", perplexity_metric(&usage)?);
    println!("  collapsed usage: {:.3}", perplexity_metric(&collapsed)?);

    // The annealing schedule the trainer follows.
    let sched = cfg.temperature;
    println!("\ntemperature schedule:");
    for u in [0u64, 2000, 5000, 10000, 20000] {
        println!("  update {u:>6}: tau {:.4}", sched.at(u));
    }
    Ok(())
}
