//! Tiny vision transformer.
//!
//! Patch embedding -> pre-norm blocks (attention, then FFN, residual both)
//! -> mean-pooled linear head. Token masking swaps selected embeddings for
//! one shared learnable mask token *before* positional addition, so masked
//! tokens keep their position identity. MC dropout lives in exactly one
//! place: the hidden layer of block 1's FFN. A single linear decoder maps
//! masked-token features back to reconstruction targets.

use crate::error::{Error, Result};
use crate::hog;
use crate::rng::StreamRng;
use crate::tensor::{load_records, save_records, Graph, Param, ParamStore};
use crate::Tensor;
use std::path::Path;

pub const DEFAULT_MC_DROPOUT_P: f64 = 0.1;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub num_classes: usize,
    pub mc_dropout_p: f64,
    /// Width of the reconstruction decoder's output per token.
    pub decoder_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            ffn_mult: 4,
            num_classes: 4,
            mc_dropout_p: DEFAULT_MC_DROPOUT_P,
            decoder_dim: hog::TargetKind::Hog.dim(8),
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidArg { op: "vit_config", msg };
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(bad(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.ffn_mult == 0 || self.embed_dim == 0 {
            return Err(bad("depth, ffn_mult, and embed_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(bad(format!("num_classes {} must be >= 2", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.mc_dropout_p) {
            return Err(bad(format!(
                "mc_dropout_p {} must lie in [0,1)",
                self.mc_dropout_p
            )));
        }
        if self.decoder_dim == 0 {
            return Err(bad("decoder_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Patch tokens for a batch, pre-positional. `positional` is a value
/// snapshot of the positional table at embed time (the trainable parameter
/// itself is re-bound inside `forward`).
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub embeddings: Tensor,
    pub positional: Tensor,
    pub mask_flags: Vec<Vec<bool>>,
}

impl TokenBatch {
    pub fn batch(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn masked_count(&self, image: usize) -> usize {
        self.mask_flags[image].iter().filter(|&&f| f).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DropoutMode {
    Off,
    Active { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct VitOutput {
    pub logits: Tensor,
    pub token_features: Tensor,
    pub block1_features: Tensor,
}

#[derive(Debug, Clone)]
pub struct Vit {
    cfg: VitConfig,
    store: ParamStore,
}

impl Vit {
    pub fn new(cfg: VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;
        let f = cfg.embed_dim * cfg.ffn_mult;
        let mut stream_index = 0u64;
        // Linear weights drawn N(0, 1/sqrt(fan_in)) so activations keep
        // unit-order variance at these small widths; positional embeddings
        // stay at the conventional small scale.
        let mut draw = |shape: &[usize], std: f64| {
            let mut rng = StreamRng::new(seed, "vit-init", stream_index);
            stream_index += 1;
            Tensor::randn(shape, std, &mut rng)
        };
        let d_std = 1.0 / (d as f64).sqrt();
        let f_std = 1.0 / (f as f64).sqrt();
        let patch_std = 1.0 / (cfg.patch_dim() as f64).sqrt();
        // Residual-branch output projections start 1/sqrt(2*depth) smaller
        // so the stream stays near-identity at init and deep stacks train
        // stably.
        let branch = 1.0 / (2.0 * cfg.depth as f64).sqrt();

        store.add("patch_embed.weight", draw(&[cfg.patch_dim(), d], patch_std))?;
        store.add("patch_embed.bias", Tensor::zeros(&[d]))?;
        store.add("pos_embed", draw(&[cfg.tokens(), d], INIT_STD))?;
        store.add("mask_token", Tensor::zeros(&[d]))?;
        for i in 0..cfg.depth {
            store.add(&format!("block{i}.ln1.gain"), Tensor::full(&[d], 1.0))?;
            store.add(&format!("block{i}.ln1.bias"), Tensor::zeros(&[d]))?;
            for proj in ["q", "k", "v", "out"] {
                let std = if proj == "out" { d_std * branch } else { d_std };
                store.add(&format!("block{i}.attn.{proj}.weight"), draw(&[d, d], std))?;
                store.add(&format!("block{i}.attn.{proj}.bias"), Tensor::zeros(&[d]))?;
            }
            store.add(&format!("block{i}.ln2.gain"), Tensor::full(&[d], 1.0))?;
            store.add(&format!("block{i}.ln2.bias"), Tensor::zeros(&[d]))?;
            store.add(&format!("block{i}.ffn.w1"), draw(&[d, f], d_std))?;
            store.add(&format!("block{i}.ffn.b1"), Tensor::zeros(&[f]))?;
            store.add(&format!("block{i}.ffn.w2"), draw(&[f, d], f_std * branch))?;
            store.add(&format!("block{i}.ffn.b2"), Tensor::zeros(&[d]))?;
        }
        store.add("final.ln.gain", Tensor::full(&[d], 1.0))?;
        store.add("final.ln.bias", Tensor::zeros(&[d]))?;
        store.add("head.weight", draw(&[d, cfg.num_classes], d_std))?;
        store.add("head.bias", Tensor::zeros(&[cfg.num_classes]))?;
        store.add("decoder.weight", draw(&[d, cfg.decoder_dim], d_std))?;
        store.add("decoder.bias", Tensor::zeros(&[cfg.decoder_dim]))?;
        Ok(Self { cfg, store })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn p(&self, name: &str) -> &Param {
        self.store
            .by_name(name)
            .unwrap_or_else(|| panic!("internal parameter {name:?} missing"))
    }

    /// Patchifies and projects a `[B, 3, S, S]` batch into pre-positional
    /// tokens `[B, N, D]`.
    pub fn embed(&self, g: &mut Graph, images: &Tensor) -> Result<TokenBatch> {
        let s = images.shape();
        let side = self.cfg.image_size;
        if s.len() != 4 || s[0] == 0 || s[1] != 3 || s[2] != side || s[3] != side {
            return Err(Error::BadShape {
                op: "vit.embed",
                expected: format!("[B, 3, {side}, {side}] image batch"),
                shape: s.to_vec(),
            });
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArg {
                op: "vit.embed",
                msg: "pixel values must lie in [0,1]".into(),
            });
        }
        let b = s[0];
        let n = self.cfg.tokens();
        let pd = self.cfg.patch_dim();
        let plane = 3 * side * side;
        let mut raw = Vec::with_capacity(b * n * pd);
        for i in 0..b {
            let img = Tensor::new(
                vec![3, side, side],
                images.data()[i * plane..(i + 1) * plane].to_vec(),
            )?;
            raw.extend_from_slice(hog::rgb_tokens(&img, self.cfg.patch_size)?.data());
        }
        let raw = Tensor::new(vec![b, n, pd], raw)?;
        let w = g.param(self.p("patch_embed.weight"));
        let bias = g.param(self.p("patch_embed.bias"));
        let proj = g.matmul(&raw, &w)?;
        let embeddings = g.add(&proj, &bias)?;
        Ok(TokenBatch {
            embeddings,
            positional: self.p("pos_embed").value().clone(),
            mask_flags: vec![vec![false; n]; b],
        })
    }

    /// Single-image convenience wrapper producing a B=1 batch.
    pub fn embed_one(&self, g: &mut Graph, image: &Tensor) -> Result<TokenBatch> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::BadShape {
                op: "vit.embed_one",
                expected: "[3, S, S] image".into(),
                shape: s.to_vec(),
            });
        }
        let batch = Tensor::new(
            vec![1, s[0], s[1], s[2]],
            image.data().to_vec(),
        )?;
        self.embed(g, &batch)
    }

    /// Replaces the selected token embeddings with the shared mask token.
    /// Pure: the input batch is left untouched. The replacement is built
    /// from graph ops so the mask token receives gradients.
    pub fn apply_mask(
        &self,
        g: &mut Graph,
        batch: &TokenBatch,
        selected: &[usize],
    ) -> Result<TokenBatch> {
        let n = self.cfg.tokens();
        let d = self.cfg.embed_dim;
        let mut chosen = vec![false; n];
        for &idx in selected {
            if idx >= n {
                return Err(Error::InvalidArg {
                    op: "vit.apply_mask",
                    msg: format!("token index {idx} out of range for {n} tokens"),
                });
            }
            if chosen[idx] {
                return Err(Error::InvalidArg {
                    op: "vit.apply_mask",
                    msg: format!("duplicate token index {idx}"),
                });
            }
            chosen[idx] = true;
        }
        if selected.is_empty() {
            return Ok(batch.clone());
        }
        let keep = Tensor::from_fn(&[n, d], |i| if chosen[i / d] { 0.0 } else { 1.0 });
        let sel_col = Tensor::from_fn(&[n, 1], |i| if chosen[i] { 1.0 } else { 0.0 });
        let mask_tok = g.param(self.p("mask_token"));
        let mask_row = g.reshape(&mask_tok, &[1, d])?;
        let fill = g.matmul(&sel_col, &mask_row)?;
        let kept = g.mul(&batch.embeddings, &keep)?;
        let embeddings = g.add(&kept, &fill)?;
        let mask_flags = batch
            .mask_flags
            .iter()
            .map(|flags| {
                flags
                    .iter()
                    .enumerate()
                    .map(|(i, &f)| f || chosen[i])
                    .collect()
            })
            .collect();
        Ok(TokenBatch {
            embeddings,
            positional: batch.positional.clone(),
            mask_flags,
        })
    }

    fn run_blocks(
        &self,
        g: &mut Graph,
        batch: &TokenBatch,
        dropout: DropoutMode,
        depth: usize,
    ) -> Result<(Tensor, Tensor)> {
        let b = batch.batch();
        let n = self.cfg.tokens();
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let hd = self.cfg.head_dim();
        let pos = g.param(self.p("pos_embed"));
        let mut x = g.add(&batch.embeddings, &pos)?;
        let mut block1 = None;
        for i in 0..depth {
            let ln1g = g.param(self.p(&format!("block{i}.ln1.gain")));
            let ln1b = g.param(self.p(&format!("block{i}.ln1.bias")));
            let h = g.layer_norm(&x, &ln1g, &ln1b)?;
            let mut qkv = Vec::with_capacity(3);
            for proj in ["q", "k", "v"] {
                let w = g.param(self.p(&format!("block{i}.attn.{proj}.weight")));
                let bias = g.param(self.p(&format!("block{i}.attn.{proj}.bias")));
                let t = g.matmul(&h, &w)?;
                let t = g.add(&t, &bias)?;
                let t = g.reshape(&t, &[b, n, heads, hd])?;
                qkv.push(g.swap_axes(&t, 1, 2)?);
            }
            let kt = g.swap_axes(&qkv[1], 2, 3)?;
            let scores = g.matmul(&qkv[0], &kt)?;
            let scores = g.scale(&scores, 1.0 / (hd as f64).sqrt())?;
            let attn = g.softmax(&scores)?;
            let ctx = g.matmul(&attn, &qkv[2])?;
            let ctx = g.swap_axes(&ctx, 1, 2)?;
            let ctx = g.reshape(&ctx, &[b, n, d])?;
            let wo = g.param(self.p(&format!("block{i}.attn.out.weight")));
            let bo = g.param(self.p(&format!("block{i}.attn.out.bias")));
            let proj = g.matmul(&ctx, &wo)?;
            let proj = g.add(&proj, &bo)?;
            x = g.add(&x, &proj)?;

            let ln2g = g.param(self.p(&format!("block{i}.ln2.gain")));
            let ln2b = g.param(self.p(&format!("block{i}.ln2.bias")));
            let h2 = g.layer_norm(&x, &ln2g, &ln2b)?;
            let w1 = g.param(self.p(&format!("block{i}.ffn.w1")));
            let b1 = g.param(self.p(&format!("block{i}.ffn.b1")));
            let hidden = g.matmul(&h2, &w1)?;
            let hidden = g.add(&hidden, &b1)?;
            let mut hidden = g.gelu(&hidden)?;
            if i == 0 {
                if let DropoutMode::Active { seed } = dropout {
                    if self.cfg.mc_dropout_p > 0.0 {
                        hidden = g.dropout(&hidden, self.cfg.mc_dropout_p, seed)?;
                    }
                }
            }
            let w2 = g.param(self.p(&format!("block{i}.ffn.w2")));
            let b2 = g.param(self.p(&format!("block{i}.ffn.b2")));
            let out = g.matmul(&hidden, &w2)?;
            let out = g.add(&out, &b2)?;
            x = g.add(&x, &out)?;
            if i == 0 {
                block1 = Some(x.clone());
            }
        }
        let block1 = block1.expect("depth >= 1 is enforced by config validation");
        Ok((x, block1))
    }

    /// Full forward: positional addition, all blocks, the closing
    /// normalization of the pre-norm stack, then a mean-pooled head.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &TokenBatch,
        dropout: DropoutMode,
    ) -> Result<VitOutput> {
        let (stream, block1) = self.run_blocks(g, batch, dropout, self.cfg.depth)?;
        let fg = g.param(self.p("final.ln.gain"));
        let fb = g.param(self.p("final.ln.bias"));
        let features = g.layer_norm(&stream, &fg, &fb)?;
        let pooled = g.mean_axis(&features, 1)?;
        let hw = g.param(self.p("head.weight"));
        let hb = g.param(self.p("head.bias"));
        let logits = g.matmul(&pooled, &hw)?;
        let logits = g.add(&logits, &hb)?;
        Ok(VitOutput {
            logits,
            token_features: features,
            block1_features: block1,
        })
    }

    /// Positional addition plus block 1 only — the uncertainty probe.
    pub fn forward_block1(
        &self,
        g: &mut Graph,
        batch: &TokenBatch,
        dropout: DropoutMode,
    ) -> Result<Tensor> {
        let (_, block1) = self.run_blocks(g, batch, dropout, 1)?;
        Ok(block1)
    }

    /// Linear reconstruction decoder over masked-token features `[M, D]`.
    pub fn decode(&self, g: &mut Graph, features: &Tensor) -> Result<Tensor> {
        let s = features.shape();
        if s.len() != 2 || s[0] == 0 || s[1] != self.cfg.embed_dim {
            return Err(Error::BadShape {
                op: "vit.decode",
                expected: format!("[M >= 1, {}] features", self.cfg.embed_dim),
                shape: s.to_vec(),
            });
        }
        let w = g.param(self.p("decoder.weight"));
        let bias = g.param(self.p("decoder.bias"));
        let out = g.matmul(features, &w)?;
        g.add(&out, &bias)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_records(&self.store, path)
    }

    /// Installs weights from checkpoint records. Decoder parameters may be
    /// absent or differently shaped (targets of different widths); they then
    /// keep their fresh initialization. Any other mismatch is an error.
    pub fn adopt_weights(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let known: Vec<String> = self.store.iter().map(|p| p.name().to_string()).collect();
        for (name, _) in records {
            if !known.iter().any(|k| k == name) && !name.starts_with("decoder.") {
                return Err(Error::InvalidArg {
                    op: "vit.adopt_weights",
                    msg: format!("checkpoint has unknown parameter {name:?}"),
                });
            }
        }
        for name in &known {
            let record = records.iter().find(|(n, _)| n == name);
            match record {
                Some((_, value)) => {
                    if name.starts_with("decoder.")
                        && value.shape() != self.store.by_name(name).unwrap().value().shape()
                    {
                        continue;
                    }
                    self.store.set_by_name(name, value.clone())?;
                }
                None if name.starts_with("decoder.") => {}
                None => {
                    return Err(Error::InvalidArg {
                        op: "vit.adopt_weights",
                        msg: format!("checkpoint is missing parameter {name:?}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let records = load_records(path)?;
        self.adopt_weights(&records)
    }
}
