//! The full model: encoder, quantizer, context network, and task heads,
//! with a flat name-indexed parameter registry.

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::quantizer::{Codebook, QuantizerConfig};
use crate::rng;
use crate::tensor::Tensor;
use crate::transformer::{TransformerConfig, TransformerParams};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub transformer: TransformerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.quantizer.validate()?;
        self.transformer.validate()?;
        if self.quantizer.input_dim != self.encoder.out_channels() {
            return Err(Error::Config(format!(
                "quantizer reads {}-dim latents but encoder emits {}",
                self.quantizer.input_dim,
                self.encoder.out_channels()
            )));
        }
        Ok(())
    }
}

/// Linear projection parameters.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(d_in: usize, d_out: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Linear {
        let bound = (1.0 / d_in as f64).sqrt();
        Linear {
            w: Tensor::matrix(d_in, d_out, (0..d_in * d_out).map(|_| rng.gen_range(-bound..bound)).collect())
                .requiring_grad(),
            b: Tensor::zeros(&[d_out]).requiring_grad(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpeechModel {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams,
    /// Learned replacement for masked latent frames, [enc_channels].
    pub mask_embedding: Tensor,
    pub codebook: Codebook,
    pub transformer: TransformerParams,
    /// Bridges encoder channels to model_dim when they differ.
    pub input_proj: Option<Linear>,
    /// Projects context frames to the quantizer output space for scoring.
    pub context_proj: Linear,
    /// CTC head over model_dim, present after fine-tuning starts.
    pub classifier: Option<Linear>,
}

impl SpeechModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<SpeechModel> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "init");
        let enc_dim = cfg.encoder.out_channels();
        let d_model = cfg.transformer.model_dim;
        let f_dim = cfg.quantizer.output_dim;
        let encoder = EncoderParams::init(&cfg.encoder, &mut r)?;
        let mask_embedding = {
            let bound = (1.0 / enc_dim as f64).sqrt();
            Tensor::new(
                vec![enc_dim],
                (0..enc_dim).map(|_| r.gen_range(-bound..bound)).collect(),
            )
            .requiring_grad()
        };
        let codebook = Codebook::init(cfg.quantizer, &mut r)?;
        let transformer = TransformerParams::init(&cfg.transformer, &mut r)?;
        let input_proj =
            (enc_dim != d_model).then(|| Linear::init(enc_dim, d_model, &mut r));
        let context_proj = Linear::init(d_model, f_dim, &mut r);
        Ok(SpeechModel {
            cfg,
            encoder,
            mask_embedding,
            codebook,
            transformer,
            input_proj,
            context_proj,
            classifier: None,
        })
    }

    /// Attach a CTC classifier over `num_classes` labels plus blank.
    pub fn add_classifier(&mut self, num_classes: usize, seed: u64) {
        let mut r = rng::stream(seed, "classifier");
        self.classifier =
            Some(Linear::init(self.cfg.transformer.model_dim, num_classes + 1, &mut r));
    }

    /// Visit every parameter in a stable order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor)) {
        for (i, blk) in self.encoder.blocks.iter().enumerate() {
            f(format!("enc/b{i}/w"), &blk.w);
            f(format!("enc/b{i}/b"), &blk.b);
            if let Some(t) = &blk.norm_g {
                f(format!("enc/b{i}/ng"), t);
            }
            if let Some(t) = &blk.norm_b {
                f(format!("enc/b{i}/nb"), t);
            }
        }
        f("mask/emb".into(), &self.mask_embedding);
        f("quant/entries".into(), &self.codebook.entries);
        f("quant/proj_w".into(), &self.codebook.proj_w);
        f("quant/proj_b".into(), &self.codebook.proj_b);
        f("quant/out_w".into(), &self.codebook.out_w);
        f("quant/out_b".into(), &self.codebook.out_b);
        f("ctx/pos_w".into(), &self.transformer.pos_w);
        f("ctx/pos_b".into(), &self.transformer.pos_b);
        f("ctx/pos_ln_g".into(), &self.transformer.pos_ln_g);
        f("ctx/pos_ln_b".into(), &self.transformer.pos_ln_b);
        for (i, blk) in self.transformer.blocks.iter().enumerate() {
            let p = format!("ctx/blk{i}");
            f(format!("{p}/ln1_g"), &blk.ln1_g);
            f(format!("{p}/ln1_b"), &blk.ln1_b);
            f(format!("{p}/wq"), &blk.wq);
            f(format!("{p}/bq"), &blk.bq);
            f(format!("{p}/wk"), &blk.wk);
            f(format!("{p}/bk"), &blk.bk);
            f(format!("{p}/wv"), &blk.wv);
            f(format!("{p}/bv"), &blk.bv);
            f(format!("{p}/wo"), &blk.wo);
            f(format!("{p}/bo"), &blk.bo);
            f(format!("{p}/ln2_g"), &blk.ln2_g);
            f(format!("{p}/ln2_b"), &blk.ln2_b);
            f(format!("{p}/w1"), &blk.w1);
            f(format!("{p}/b1"), &blk.b1);
            f(format!("{p}/w2"), &blk.w2);
            f(format!("{p}/b2"), &blk.b2);
        }
        if let Some(p) = &self.input_proj {
            f("proj/in/w".into(), &p.w);
            f("proj/in/b".into(), &p.b);
        }
        f("proj/ctx/w".into(), &self.context_proj.w);
        f("proj/ctx/b".into(), &self.context_proj.b);
        if let Some(p) = &self.classifier {
            f("ctc/w".into(), &p.w);
            f("ctc/b".into(), &p.b);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, blk) in self.encoder.blocks.iter_mut().enumerate() {
            f(&format!("enc/b{i}/w"), &mut blk.w);
            f(&format!("enc/b{i}/b"), &mut blk.b);
            if let Some(t) = blk.norm_g.as_mut() {
                f(&format!("enc/b{i}/ng"), t);
            }
            if let Some(t) = blk.norm_b.as_mut() {
                f(&format!("enc/b{i}/nb"), t);
            }
        }
        f("mask/emb", &mut self.mask_embedding);
        f("quant/entries", &mut self.codebook.entries);
        f("quant/proj_w", &mut self.codebook.proj_w);
        f("quant/proj_b", &mut self.codebook.proj_b);
        f("quant/out_w", &mut self.codebook.out_w);
        f("quant/out_b", &mut self.codebook.out_b);
        f("ctx/pos_w", &mut self.transformer.pos_w);
        f("ctx/pos_b", &mut self.transformer.pos_b);
        f("ctx/pos_ln_g", &mut self.transformer.pos_ln_g);
        f("ctx/pos_ln_b", &mut self.transformer.pos_ln_b);
        for (i, blk) in self.transformer.blocks.iter_mut().enumerate() {
            let p = format!("ctx/blk{i}");
            f(&format!("{p}/ln1_g"), &mut blk.ln1_g);
            f(&format!("{p}/ln1_b"), &mut blk.ln1_b);
            f(&format!("{p}/wq"), &mut blk.wq);
            f(&format!("{p}/bq"), &mut blk.bq);
            f(&format!("{p}/wk"), &mut blk.wk);
            f(&format!("{p}/bk"), &mut blk.bk);
            f(&format!("{p}/wv"), &mut blk.wv);
            f(&format!("{p}/bv"), &mut blk.bv);
            f(&format!("{p}/wo"), &mut blk.wo);
            f(&format!("{p}/bo"), &mut blk.bo);
            f(&format!("{p}/ln2_g"), &mut blk.ln2_g);
            f(&format!("{p}/ln2_b"), &mut blk.ln2_b);
            f(&format!("{p}/w1"), &mut blk.w1);
            f(&format!("{p}/b1"), &mut blk.b1);
            f(&format!("{p}/w2"), &mut blk.w2);
            f(&format!("{p}/b2"), &mut blk.b2);
        }
        if let Some(p) = self.input_proj.as_mut() {
            f("proj/in/w", &mut p.w);
            f("proj/in/b", &mut p.b);
        }
        f("proj/ctx/w", &mut self.context_proj.w);
        f("proj/ctx/b", &mut self.context_proj.b);
        if let Some(p) = self.classifier.as_mut() {
            f("ctc/w", &mut p.w);
            f("ctc/b", &mut p.b);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _| names.push(n));
        names
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }
}

/// Which parameter groups receive gradients in a given step.
#[derive(Clone, Copy, Debug)]
pub struct TrainFlags {
    pub encoder: bool,
    pub quantizer: bool,
    pub transformer: bool,
    pub heads: bool,
}

impl TrainFlags {
    pub fn pretrain() -> Self {
        TrainFlags { encoder: true, quantizer: true, transformer: true, heads: true }
    }

    /// Fine-tuning never updates the encoder or quantizer.
    pub fn finetune(classifier_only: bool) -> Self {
        TrainFlags {
            encoder: false,
            quantizer: false,
            transformer: !classifier_only,
            heads: true,
        }
    }

    fn allows(&self, name: &str) -> bool {
        if name.starts_with("enc/") {
            self.encoder
        } else if name.starts_with("quant/") {
            self.quantizer
        } else if name.starts_with("ctx/") || name == "mask/emb" || name == "proj/in/w" || name == "proj/in/b" {
            self.transformer
        } else {
            // proj/ctx and ctc heads
            self.heads
        }
    }
}

/// NodeIds for every parameter bound into one graph.
pub struct ModelBound {
    pub encoder: crate::encoder::EncoderBound,
    pub mask_embedding: NodeId,
    pub codebook: crate::quantizer::CodebookBound,
    pub transformer: crate::transformer::TransformerBound,
    pub input_proj: Option<(NodeId, NodeId)>,
    pub context_proj: (NodeId, NodeId),
    pub classifier: Option<(NodeId, NodeId)>,
    /// name -> node, for gradient extraction.
    pub ids: BTreeMap<String, NodeId>,
}

impl SpeechModel {
    /// Bind all parameters as graph leaves. `flags` controls which groups
    /// require gradients.
    pub fn bind(&self, g: &mut Graph, flags: TrainFlags) -> ModelBound {
        let leaf = |g: &mut Graph, name: &str, t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = flags.allows(name);
            t.grad = None;
            g.leaf(t)
        };
        let mut ids = BTreeMap::new();

        let encoder = crate::encoder::EncoderBound {
            blocks: self
                .encoder
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| crate::encoder::BlockBound {
                    w: {
                        let id = leaf(g, &format!("enc/b{i}/w"), &blk.w);
                        ids.insert(format!("enc/b{i}/w"), id);
                        id
                    },
                    b: {
                        let id = leaf(g, &format!("enc/b{i}/b"), &blk.b);
                        ids.insert(format!("enc/b{i}/b"), id);
                        id
                    },
                    norm_g: blk.norm_g.as_ref().map(|t| {
                        let id = leaf(g, &format!("enc/b{i}/ng"), t);
                        ids.insert(format!("enc/b{i}/ng"), id);
                        id
                    }),
                    norm_b: blk.norm_b.as_ref().map(|t| {
                        let id = leaf(g, &format!("enc/b{i}/nb"), t);
                        ids.insert(format!("enc/b{i}/nb"), id);
                        id
                    }),
                })
                .collect(),
        };

        let mask_embedding = leaf(g, "mask/emb", &self.mask_embedding);
        ids.insert("mask/emb".into(), mask_embedding);

        let codebook = crate::quantizer::CodebookBound {
            config: self.codebook.config,
            entries: leaf(g, "quant/entries", &self.codebook.entries),
            proj_w: leaf(g, "quant/proj_w", &self.codebook.proj_w),
            proj_b: leaf(g, "quant/proj_b", &self.codebook.proj_b),
            out_w: leaf(g, "quant/out_w", &self.codebook.out_w),
            out_b: leaf(g, "quant/out_b", &self.codebook.out_b),
        };
        ids.insert("quant/entries".into(), codebook.entries);
        ids.insert("quant/proj_w".into(), codebook.proj_w);
        ids.insert("quant/proj_b".into(), codebook.proj_b);
        ids.insert("quant/out_w".into(), codebook.out_w);
        ids.insert("quant/out_b".into(), codebook.out_b);

        let transformer = crate::transformer::TransformerBound {
            pos_w: leaf(g, "ctx/pos_w", &self.transformer.pos_w),
            pos_b: leaf(g, "ctx/pos_b", &self.transformer.pos_b),
            pos_ln_g: leaf(g, "ctx/pos_ln_g", &self.transformer.pos_ln_g),
            pos_ln_b: leaf(g, "ctx/pos_ln_b", &self.transformer.pos_ln_b),
            blocks: self
                .transformer
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| {
                    let p = format!("ctx/blk{i}");
                    let mut mk = |suffix: &str, t: &Tensor| {
                        let name = format!("{p}/{suffix}");
                        let id = leaf(g, &name, t);
                        ids.insert(name, id);
                        id
                    };
                    crate::transformer::BlockBound {
                        ln1_g: mk("ln1_g", &blk.ln1_g),
                        ln1_b: mk("ln1_b", &blk.ln1_b),
                        wq: mk("wq", &blk.wq),
                        bq: mk("bq", &blk.bq),
                        wk: mk("wk", &blk.wk),
                        bk: mk("bk", &blk.bk),
                        wv: mk("wv", &blk.wv),
                        bv: mk("bv", &blk.bv),
                        wo: mk("wo", &blk.wo),
                        bo: mk("bo", &blk.bo),
                        ln2_g: mk("ln2_g", &blk.ln2_g),
                        ln2_b: mk("ln2_b", &blk.ln2_b),
                        w1: mk("w1", &blk.w1),
                        b1: mk("b1", &blk.b1),
                        w2: mk("w2", &blk.w2),
                        b2: mk("b2", &blk.b2),
                    }
                })
                .collect(),
        };
        ids.insert("ctx/pos_w".into(), transformer.pos_w);
        ids.insert("ctx/pos_b".into(), transformer.pos_b);
        ids.insert("ctx/pos_ln_g".into(), transformer.pos_ln_g);
        ids.insert("ctx/pos_ln_b".into(), transformer.pos_ln_b);

        let input_proj = self.input_proj.as_ref().map(|p| {
            let w = leaf(g, "proj/in/w", &p.w);
            let b = leaf(g, "proj/in/b", &p.b);
            ids.insert("proj/in/w".into(), w);
            ids.insert("proj/in/b".into(), b);
            (w, b)
        });
        let context_proj = {
            let w = leaf(g, "proj/ctx/w", &self.context_proj.w);
            let b = leaf(g, "proj/ctx/b", &self.context_proj.b);
            ids.insert("proj/ctx/w".into(), w);
            ids.insert("proj/ctx/b".into(), b);
            (w, b)
        };
        let classifier = self.classifier.as_ref().map(|p| {
            let w = leaf(g, "ctc/w", &p.w);
            let b = leaf(g, "ctc/b", &p.b);
            ids.insert("ctc/w".into(), w);
            ids.insert("ctc/b".into(), b);
            (w, b)
        });

        ModelBound {
            encoder,
            mask_embedding,
            codebook,
            transformer,
            input_proj,
            context_proj,
            classifier,
            ids,
        }
    }
}

/// Collect gradients by parameter name after backward.
pub fn collect_grads(g: &Graph, bound: &ModelBound) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, &id) in &bound.ids {
        if let Some(gr) = g.grad(id) {
            out.insert(name.clone(), gr.to_vec());
        }
    }
    out
}
