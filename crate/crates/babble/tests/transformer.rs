use babble::check::finite_difference_check_multi;
use babble::graph::Graph;
use babble::rng;
use babble::tensor::Tensor;
use babble::transformer::{
    positional_embed, transformer_forward, TransformerConfig, TransformerParams,
};
use rand::Rng;

fn frames(t: usize, d: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "x");
    Tensor::matrix(t, d, (0..t * d).map(|_| r.gen_range(-1.0..1.0)).collect())
}

#[test]
fn zero_conv_positional_stage_is_layer_norm() {
    let cfg = TransformerConfig::toy(8, 1);
    let mut params = TransformerParams::init(&cfg, &mut rng::stream(0, "p")).unwrap();
    for v in params.pos_w.data.iter_mut() {
        *v = 0.0;
    }
    for v in params.pos_b.data.iter_mut() {
        *v = 0.0;
    }
    let x = frames(6, 8, 1);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let xn = g.leaf(x.clone());
    let out = positional_embed(&mut g, &bound, &cfg, xn).unwrap();
    let direct = {
        let mut g2 = Graph::new();
        let xn2 = g2.leaf(x);
        let ln = g2.layer_norm(xn2, 1e-5).unwrap();
        g2.value(ln).data.clone()
    };
    let got = &g.value(out).data;
    for (a, b) in got.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn interior_translation_equivariance() {
    // Shifting the input sequence shifts the output in the interior; frames
    // within one kernel of either edge are excluded.
    let cfg = TransformerConfig::toy(8, 0); // positional stage only
    let params = TransformerParams::init(&cfg, &mut rng::stream(3, "p")).unwrap();
    let t = 40;
    let shift = 5;
    let body = frames(t, 8, 4);

    let run = |x: Tensor| {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let xn = g.leaf(x);
        let out =
            transformer_forward(&mut g, &bound, &cfg, xn, t + shift, false, &mut rng::stream(0, "r"))
                .unwrap();
        g.value(out.frames).data.clone()
    };

    // Padded versions: zeros ahead vs zeros behind the same body.
    let mut lead = vec![0.0; shift * 8];
    lead.extend_from_slice(&body.data);
    let mut trail = body.data.clone();
    trail.extend(vec![0.0; shift * 8]);
    let shifted = run(Tensor::matrix(t + shift, 8, lead));
    let plain = run(Tensor::matrix(t + shift, 8, trail));

    let k = cfg.pos_conv_kernel;
    for i in k..t - k {
        for j in 0..8 {
            let a = plain[i * 8 + j];
            let b = shifted[(i + shift) * 8 + j];
            assert!(
                (a - b).abs() < 1e-9,
                "frame {i} dim {j}: {a} vs shifted {b}"
            );
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    // Build a tiny attention by hand through the public forward: with one
    // block and no dropout the softmax inside must produce rows summing to 1.
    // We verify indirectly: a uniform value matrix makes the attention output
    // equal that constant row regardless of scores.
    let mut cfg = TransformerConfig::toy(4, 1);
    cfg.prenorm = false;
    let mut params = TransformerParams::init(&cfg, &mut rng::stream(5, "p")).unwrap();
    // Value projection maps everything to a constant row c by zero weight +
    // bias c; then attn output rows = sum_j p_ij * c = c exactly when each
    // row of p sums to 1.
    let blk = &mut params.blocks[0];
    for v in blk.wv.data.iter_mut() {
        *v = 0.0;
    }
    blk.bv = Tensor::vector(vec![0.3, -0.7, 1.1, 0.0]).requiring_grad();
    for v in blk.wo.data.iter_mut() {
        *v = 0.0;
    }
    // wo = identity so the attention output stays c.
    for i in 0..4 {
        blk.wo.data[i * 4 + i] = 1.0;
    }

    let t = 7;
    let x = frames(t, 4, 6);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let xn = g.leaf(x.clone());

    // Reimplement the post-norm block's first half using the same bound
    // params to extract the attention result before the residual.
    // Simpler: compare forward(x) against forward(x') where x' scrambles
    // only the attention scores via wq; with constant values the output
    // cannot change.
    let out1 =
        transformer_forward(&mut g, &bound, &cfg, xn, t, false, &mut rng::stream(7, "r")).unwrap();
    let v1 = g.value(out1.frames).data.clone();

    let mut params2 = params.clone();
    for v in params2.blocks[0].wq.data.iter_mut() {
        *v *= -3.0; // radically different scores
    }
    let mut g2 = Graph::new();
    let bound2 = params2.bind(&mut g2, false);
    let xn2 = g2.leaf(x);
    let out2 =
        transformer_forward(&mut g2, &bound2, &cfg, xn2, t, false, &mut rng::stream(8, "r"))
            .unwrap();
    let v2 = g2.value(out2.frames).data.clone();
    for (a, b) in v1.iter().zip(&v2) {
        assert!((a - b).abs() < 1e-9, "attention must average values with weights summing to 1");
    }
}

#[test]
fn full_layerdrop_reduces_to_positional_stage() {
    let mut cfg = TransformerConfig::toy(8, 3);
    cfg.layerdrop = 1.0;
    let params = TransformerParams::init(&cfg, &mut rng::stream(9, "p")).unwrap();
    let x = frames(10, 8, 10);

    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let xn = g.leaf(x.clone());
    let out =
        transformer_forward(&mut g, &bound, &cfg, xn, 10, true, &mut rng::stream(11, "r"))
            .unwrap();
    assert!(out.blocks_run.iter().all(|&b| !b));

    let mut g2 = Graph::new();
    let bound2 = params.bind(&mut g2, false);
    let xn2 = g2.leaf(x);
    let pos = positional_embed(&mut g2, &bound2, &cfg, xn2).unwrap();
    assert_eq!(g.value(out.frames).data, g2.value(pos).data);
}

#[test]
fn layerdrop_skip_frequency_is_calibrated() {
    let mut cfg = TransformerConfig::toy(4, 2);
    cfg.layerdrop = 0.3;
    let params = TransformerParams::init(&cfg, &mut rng::stream(12, "p")).unwrap();
    let x = frames(3, 4, 13);
    let mut r = rng::stream(14, "drop");
    let n = 4000usize;
    let mut skipped = 0usize;
    let mut total = 0usize;
    for _ in 0..n {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let xn = g.leaf(x.clone());
        let out = transformer_forward(&mut g, &bound, &cfg, xn, 3, true, &mut r).unwrap();
        skipped += out.blocks_run.iter().filter(|&&b| !b).count();
        total += out.blocks_run.len();
    }
    let p = skipped as f64 / total as f64;
    let sigma = (0.3 * 0.7 / total as f64).sqrt();
    assert!(
        (p - 0.3).abs() < 3.0 * sigma,
        "skip rate {p} should be within 3 sigma ({sigma}) of 0.3"
    );
}

#[test]
fn eval_mode_ignores_layerdrop_and_dropout() {
    let mut cfg = TransformerConfig::toy(4, 2);
    cfg.layerdrop = 0.9;
    cfg.dropout = 0.5;
    let params = TransformerParams::init(&cfg, &mut rng::stream(15, "p")).unwrap();
    let x = frames(5, 4, 16);
    let run = |seed: u64| {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let xn = g.leaf(x.clone());
        let out =
            transformer_forward(&mut g, &bound, &cfg, xn, 5, false, &mut rng::stream(seed, "r"))
                .unwrap();
        assert!(out.blocks_run.iter().all(|&b| b));
        g.value(out.frames).data.clone()
    };
    assert_eq!(run(1), run(2));
}

#[test]
fn padding_contents_cannot_leak_into_valid_frames() {
    let cfg = TransformerConfig::toy(8, 2);
    let params = TransformerParams::init(&cfg, &mut rng::stream(17, "p")).unwrap();
    let valid = 8;
    let t = 14;
    let body = frames(valid, 8, 18);

    let run = |pad_fill: f64, seed: u64| {
        let mut data = body.data.clone();
        let mut r = rng::stream(seed, "pad");
        data.extend((0..(t - valid) * 8).map(|_| r.gen_range(-5.0..5.0) + pad_fill));
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let xn = g.leaf(Tensor::matrix(t, 8, data));
        let out =
            transformer_forward(&mut g, &bound, &cfg, xn, valid, false, &mut rng::stream(0, "r"))
                .unwrap();
        g.value(out.frames).data[..valid * 8].to_vec()
    };

    let a = run(0.0, 100);
    let b = run(3.0, 200);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9, "padding leaked: {x} vs {y}");
    }
}

#[test]
fn two_block_network_passes_finite_difference() {
    let mut cfg = TransformerConfig::toy(4, 2);
    cfg.pos_conv_kernel = 3;
    let params = TransformerParams::init(&cfg, &mut rng::stream(19, "p")).unwrap();
    let x = frames(4, 4, 20).requiring_grad();
    // Check input plus a representative parameter from each part:
    // positional conv weight, an attention projection, an ffn weight, a norm.
    let blk = params.blocks[1].clone();
    let tensors =
        vec![x, params.pos_w.clone(), blk.wq.clone(), blk.w1.clone(), params.blocks[0].ln1_g.clone()];
    let err = finite_difference_check_multi(
        |g, ids| {
            let mut params = params.clone();
            params.pos_w = g.value(ids[1]).clone();
            params.blocks[1].wq = g.value(ids[2]).clone();
            params.blocks[1].w1 = g.value(ids[3]).clone();
            params.blocks[0].ln1_g = g.value(ids[4]).clone();
            // Rebind everything except the checked tensors as constants, and
            // splice the checked node ids straight into the bound structure.
            let mut bound = params.bind(g, false);
            bound.pos_w = ids[1];
            bound.blocks[1].wq = ids[2];
            bound.blocks[1].w1 = ids[3];
            bound.blocks[0].ln1_g = ids[4];
            let out =
                transformer_forward(g, &bound, &cfg, ids[0], 4, false, &mut rng::stream(0, "r"))?;
            let sq = g.mul(out.frames, out.frames)?;
            g.sum(sq)
        },
        &tensors,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn prenorm_and_postnorm_differ_but_both_run() {
    let x = frames(6, 8, 21);
    let run = |prenorm: bool| {
        let mut cfg = TransformerConfig::toy(8, 2);
        cfg.prenorm = prenorm;
        let params = TransformerParams::init(&cfg, &mut rng::stream(22, "p")).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let xn = g.leaf(x.clone());
        let out =
            transformer_forward(&mut g, &bound, &cfg, xn, 6, false, &mut rng::stream(0, "r"))
                .unwrap();
        g.value(out.frames).data.clone()
    };
    let pre = run(true);
    let post = run(false);
    assert_ne!(pre, post);
    assert!(pre.iter().all(|v| v.is_finite()));
    assert!(post.iter().all(|v| v.is_finite()));
}

#[test]
fn even_positional_kernel_preserves_length() {
    let mut cfg = TransformerConfig::toy(8, 1);
    cfg.pos_conv_kernel = 128.min(8); // even kernel
    let params = TransformerParams::init(&cfg, &mut rng::stream(23, "p")).unwrap();
    let x = frames(12, 8, 24);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let xn = g.leaf(x);
    let out = positional_embed(&mut g, &bound, &cfg, xn).unwrap();
    assert_eq!(g.value(out).shape, vec![12, 8]);
}
