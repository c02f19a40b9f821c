//! Vision Transformer image encoder.
//!
//! Grayscale input, conv patch embedding (kernel = stride = patch size),
//! a learned CLS token and positional table, pre-norm blocks
//! (norm → attention → residual; norm → MLP → residual), and a final layer
//! normalization whose CLS state is the image embedding.
//!
//! There is no pretrained checkpoint to load here: the "pretrained frozen
//! encoder" role is played by a fixed-seed random init that is then frozen,
//! which preserves the trainable/frozen split under test.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lora::LoraLinear;
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{Graph, Result, Scalar, TensorError, TensorId};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Square input edge, pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// MLP hidden width = `mlp_ratio * embed_dim`.
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    /// Desk-scale default: small enough for f64 gradient checks in seconds.
    pub fn toy() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
        }
    }

    /// Minimal geometry for end-to-end finite-difference checks.
    pub fn micro() -> Self {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(TensorError::InvalidArgument {
                op: "encoder-config",
                detail: format!(
                    "image size {} not divisible by patch size {}",
                    self.image_size, self.patch_size
                ),
            });
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "encoder-config",
                detail: format!(
                    "embed dim {} not divisible by {} heads",
                    self.embed_dim, self.num_heads
                ),
            });
        }
        if self.depth == 0 {
            return Err(TensorError::InvalidArgument {
                op: "encoder-config",
                detail: "depth 0".into(),
            });
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count including the CLS position.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

pub struct Block {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub attn_out: LoraLinear,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub mlp_in: LoraLinear,
    pub mlp_out: LoraLinear,
}

pub struct VitEncoder {
    pub cfg: EncoderConfig,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final_gamma: ParamId,
    pub ln_final_beta: ParamId,
    frozen: bool,
}

/// Per-batch encoder activations. Ids are valid for the graph that ran
/// [`VitEncoder::encode`].
pub struct EncoderOutput {
    pub batch: usize,
    /// `[batch, embed_dim]`, CLS state after the final layer normalization.
    pub cls_embedding: TensorId,
    /// `[batch, embed_dim]`, CLS state out of the last block, before the
    /// final normalization.
    pub cls_penultimate: TensorId,
    /// Per block: `[batch * patches, embed_dim]`, CLS position excluded.
    pub layer_tokens: Vec<TensorId>,
}

fn linear_init<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_out: usize,
    d_in: usize,
) -> LoraLinear {
    let weight = store.add(
        &format!("{name}.weight"),
        trunc_normal(rng, d_out * d_in, INIT_STD),
        vec![d_out, d_in],
        true,
    );
    let bias = store.add(&format!("{name}.bias"), vec![T::zero(); d_out], vec![d_out], false);
    LoraLinear { weight, bias, adapter: None }
}

impl VitEncoder {
    /// Initialize all encoder weights (truncated normal, std 0.02) with a
    /// reproducible seed. Parameters start trainable; call
    /// [`VitEncoder::set_frozen`] to fix them.
    pub fn init<T: Scalar>(cfg: EncoderConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let patch_weight = store.add(
            "encoder.patch_embed.weight",
            trunc_normal(&mut rng, d * cfg.patch_size * cfg.patch_size, INIT_STD),
            vec![d, 1, cfg.patch_size, cfg.patch_size],
            true,
        );
        let patch_bias =
            store.add("encoder.patch_embed.bias", vec![T::zero(); d], vec![d], false);
        let cls_token =
            store.add("encoder.cls_token", trunc_normal(&mut rng, d, INIT_STD), vec![1, d], true);
        let pos_embed = store.add(
            "encoder.pos_embed",
            trunc_normal(&mut rng, cfg.tokens() * d, INIT_STD),
            vec![cfg.tokens(), d],
            true,
        );
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let base = format!("encoder.block{i}");
            let ln1_gamma =
                store.add(&format!("{base}.ln1.gamma"), vec![T::one(); d], vec![d], false);
            let ln1_beta =
                store.add(&format!("{base}.ln1.beta"), vec![T::zero(); d], vec![d], false);
            let q = linear_init(store, &mut rng, &format!("{base}.attn.q"), d, d);
            let k = linear_init(store, &mut rng, &format!("{base}.attn.k"), d, d);
            let v = linear_init(store, &mut rng, &format!("{base}.attn.v"), d, d);
            let attn_out = linear_init(store, &mut rng, &format!("{base}.attn.out"), d, d);
            let ln2_gamma =
                store.add(&format!("{base}.ln2.gamma"), vec![T::one(); d], vec![d], false);
            let ln2_beta =
                store.add(&format!("{base}.ln2.beta"), vec![T::zero(); d], vec![d], false);
            let mlp_in = linear_init(store, &mut rng, &format!("{base}.mlp_in"), cfg.hidden(), d);
            let mlp_out = linear_init(store, &mut rng, &format!("{base}.mlp_out"), d, cfg.hidden());
            blocks.push(Block {
                ln1_gamma,
                ln1_beta,
                q,
                k,
                v,
                attn_out,
                ln2_gamma,
                ln2_beta,
                mlp_in,
                mlp_out,
            });
        }
        let ln_final_gamma = store.add("encoder.ln_final.gamma", vec![T::one(); d], vec![d], false);
        let ln_final_beta = store.add("encoder.ln_final.beta", vec![T::zero(); d], vec![d], false);
        Ok(VitEncoder {
            cfg,
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            ln_final_gamma,
            ln_final_beta,
            frozen: false,
        })
    }

    /// Every base parameter of the encoder, adapters excluded.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_weight, self.patch_bias, self.cls_token, self.pos_embed];
        for b in &self.blocks {
            ids.extend([b.ln1_gamma, b.ln1_beta, b.ln2_gamma, b.ln2_beta]);
            for l in [&b.q, &b.k, &b.v, &b.attn_out, &b.mlp_in, &b.mlp_out] {
                ids.push(l.weight);
                ids.push(l.bias);
            }
        }
        ids.push(self.ln_final_gamma);
        ids.push(self.ln_final_beta);
        ids
    }

    /// Freeze (or unfreeze) all base weights, the CLS token, and the
    /// positional table. Adapter parameters are untouched.
    pub fn set_frozen<T: Scalar>(&mut self, store: &mut ParamStore<T>, frozen: bool) {
        for id in self.base_params() {
            store.set_requires_grad(id, !frozen);
        }
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Encode a batch of grayscale images in `[0,1]`, shape
    /// `[batch, 1, image_size, image_size]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: TensorId,
    ) -> Result<EncoderOutput> {
        self.encode_with(g, store, images, true)
    }

    /// Like [`VitEncoder::encode`], but `keep_layer_tokens = false` skips
    /// materializing per-block patch-token maps (classification only needs
    /// the CLS states).
    pub fn encode_with<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: TensorId,
        keep_layer_tokens: bool,
    ) -> Result<EncoderOutput> {
        let cfg = &self.cfg;
        let shape = g.shape(images).to_vec();
        let expect_tail = [1, cfg.image_size, cfg.image_size];
        if shape.len() != 4 || shape[1..] != expect_tail {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                detail: format!("image batch {shape:?}, expected [b, 1, {0}, {0}]", cfg.image_size),
            });
        }
        let batch = shape[0];
        let (d, p, n) = (cfg.embed_dim, cfg.patches(), cfg.tokens());

        // Patch embedding: conv -> [b, d, g, g] -> tokens [b, p, d].
        let pw = g.param(store, self.patch_weight);
        let pb = g.param(store, self.patch_bias);
        let grid_map = g.conv2d(images, pw, Some(pb), cfg.patch_size, 0)?;
        let flat = g.reshape(grid_map, vec![batch, d, p])?;
        let patches = g.transpose_batched(flat)?; // [b, p, d]

        // Prepend CLS, add positions.
        let cls = g.param(store, self.cls_token);
        let cls_rows = g.embedding_lookup(cls, &vec![0; batch])?; // [b, d]
        let cls_col = g.reshape(cls_rows, vec![batch, 1, d])?;
        let with_cls = g.concat(&[cls_col, patches], 1)?; // [b, n, d]
        let pos = g.param(store, self.pos_embed);
        let tokens3 = g.add_broadcast(with_cls, pos)?;
        let mut x = g.reshape(tokens3, vec![batch * n, d])?;

        let mut layer_tokens = Vec::with_capacity(cfg.depth);
        let patch_rows: Vec<usize> =
            (0..batch).flat_map(|f| (1..n).map(move |t| f * n + t)).collect();
        for block in &self.blocks {
            x = self.block_forward(g, store, block, x, batch)?;
            if keep_layer_tokens {
                layer_tokens.push(g.embedding_lookup(x, &patch_rows)?);
            }
        }

        let cls_rows_idx: Vec<usize> = (0..batch).map(|f| f * n).collect();
        let cls_penultimate = g.embedding_lookup(x, &cls_rows_idx)?;

        let gf = g.param(store, self.ln_final_gamma);
        let bf = g.param(store, self.ln_final_beta);
        let normed = g.layer_norm(x, gf, bf, LAYER_NORM_EPS)?;
        let cls_embedding = g.embedding_lookup(normed, &cls_rows_idx)?;

        Ok(EncoderOutput { batch, cls_embedding, cls_penultimate, layer_tokens })
    }

    pub(crate) fn block_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block: &Block,
        x: TensorId,
        batch: usize,
    ) -> Result<TensorId> {
        let cfg = &self.cfg;

        let g1 = g.param(store, block.ln1_gamma);
        let b1 = g.param(store, block.ln1_beta);
        let z = g.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;

        let q = block.q.forward(g, store, z)?;
        let k = block.k.forward(g, store, z)?;
        let v = block.v.forward(g, store, z)?;
        let attn = g.attention(q, k, v, cfg.num_heads, batch)?;
        let attn_proj = block.attn_out.forward(g, store, attn)?;
        let h1 = g.add(x, attn_proj)?;

        let g2 = g.param(store, block.ln2_gamma);
        let b2 = g.param(store, block.ln2_beta);
        let z2 = g.layer_norm(h1, g2, b2, LAYER_NORM_EPS)?;
        let hidden = block.mlp_in.forward(g, store, z2)?;
        let act = g.gelu(hidden)?;
        let mlp = block.mlp_out.forward(g, store, act)?;
        g.add(h1, mlp)
    }
}
