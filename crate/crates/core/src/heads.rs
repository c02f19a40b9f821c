//! Task heads: the one-layer binary classification head and the small
//! U-shaped segmentation decoder, plus the mask-threshold rule that turns
//! predicted masks into quality labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{Graph, Result, Scalar, TensorError, TensorId};
use crate::vit::{EncoderConfig, EncoderOutput, INIT_STD};

/// Single fully connected layer mapping the CLS embedding to one logit.
/// Predicted label is 1 iff sigmoid(logit) > 0.5, i.e. logit > 0 (strict).
pub struct ClsHead {
    /// `[1, embed_dim]`
    pub weight: ParamId,
    /// `[1]`
    pub bias: ParamId,
}

impl ClsHead {
    /// Zero-initialized: a fresh head predicts logit 0 → label 0 everywhere.
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, embed_dim: usize) -> Self {
        let weight =
            store.add("head.weight", vec![T::zero(); embed_dim], vec![1, embed_dim], true);
        let bias = store.add("head.bias", vec![T::zero(); 1], vec![1], false);
        ClsHead { weight, bias }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// `embeddings: [batch, embed_dim] -> logits [batch]`.
    pub fn classify<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        embeddings: TensorId,
    ) -> Result<TensorId> {
        let w = g.param(store, self.weight);
        let wt = g.transpose(w)?; // [embed_dim, 1]
        let y = g.matmul(embeddings, wt)?; // [batch, 1]
        let b = g.param(store, self.bias);
        let y = g.add_broadcast(y, b)?;
        let batch = g.shape(y)[0];
        g.reshape(y, vec![batch])
    }
}

/// Hard decision from a logit: label 1 iff `sigmoid(logit) > 0.5`.
pub fn logit_to_label<T: Scalar>(logit: T) -> u8 {
    u8::from(logit > T::zero())
}

/// Lightweight U-shaped decoder over patch tokens from two encoder depths.
///
/// The deepest token map and a 1x1-projected mid-depth map are concatenated
/// at the patch grid resolution, then `(nearest-upsample2x -> conv3x3 ->
/// ReLU)` repeats `log2(patch_size)` times with channel widths halving from
/// `embed_dim`; a final 1x1 conv emits the one-channel logit map at the
/// input image size.
pub struct SegDecoder {
    /// 1x1 projection of the mid-depth tap, `[d, d, 1, 1]` + bias.
    pub skip_w: ParamId,
    pub skip_b: ParamId,
    /// 3x3 stages, each `[c_out, c_in, 3, 3]` + bias.
    pub stages: Vec<(ParamId, ParamId)>,
    /// Final 1x1 conv, `[1, c_last, 1, 1]` + bias.
    pub final_w: ParamId,
    pub final_b: ParamId,
    /// 0-based block indices tapped for skip / deep features.
    pub mid_tap: usize,
    pub deep_tap: usize,
}

impl SegDecoder {
    /// Stage count for a config; the patch size must be a power of two so
    /// repeated 2x upsampling lands exactly on the image resolution.
    fn stage_count(cfg: &EncoderConfig) -> Result<usize> {
        if !cfg.patch_size.is_power_of_two() {
            return Err(TensorError::InvalidArgument {
                op: "seg-decoder",
                detail: format!(
                    "patch size {} must be a power of two for 2x upsampling",
                    cfg.patch_size
                ),
            });
        }
        Ok(cfg.patch_size.trailing_zeros() as usize)
    }

    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        seed: u64,
    ) -> Result<Self> {
        let stages = Self::stage_count(cfg)?;
        if cfg.depth < 2 {
            return Err(TensorError::InvalidArgument {
                op: "seg-decoder",
                detail: "needs at least two encoder blocks for two taps".into(),
            });
        }
        let d = cfg.embed_dim;
        if stages > 0 && d >> stages == 0 {
            return Err(TensorError::InvalidArgument {
                op: "seg-decoder",
                detail: format!("embed dim {d} too narrow to halve over {stages} stages"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skip_w = store.add(
            "decoder.skip.weight",
            trunc_normal(&mut rng, d * d, INIT_STD),
            vec![d, d, 1, 1],
            true,
        );
        let skip_b = store.add("decoder.skip.bias", vec![T::zero(); d], vec![d], false);
        let mut stage_params = Vec::with_capacity(stages);
        let mut c_in = 2 * d; // deep map concatenated with projected skip
        for i in 0..stages {
            let c_out = d >> (i + 1);
            let w = store.add(
                &format!("decoder.stage{i}.weight"),
                trunc_normal(&mut rng, c_out * c_in * 9, INIT_STD),
                vec![c_out, c_in, 3, 3],
                true,
            );
            let b = store.add(&format!("decoder.stage{i}.bias"), vec![T::zero(); c_out], vec![c_out], false);
            stage_params.push((w, b));
            c_in = c_out;
        }
        let final_w = store.add(
            "decoder.final.weight",
            trunc_normal(&mut rng, c_in, INIT_STD),
            vec![1, c_in, 1, 1],
            true,
        );
        let final_b = store.add("decoder.final.bias", vec![T::zero(); 1], vec![1], false);
        Ok(SegDecoder {
            skip_w,
            skip_b,
            stages: stage_params,
            final_w,
            final_b,
            mid_tap: cfg.depth / 2 - 1,
            deep_tap: cfg.depth - 1,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.skip_w, self.skip_b];
        for &(w, b) in &self.stages {
            ids.push(w);
            ids.push(b);
        }
        ids.push(self.final_w);
        ids.push(self.final_b);
        ids
    }

    /// Tokens `[batch * patches, d] -> [batch, d, grid, grid]`.
    fn tokens_to_map<T: Scalar>(
        g: &mut Graph<T>,
        tokens: TensorId,
        batch: usize,
        cfg: &EncoderConfig,
    ) -> Result<TensorId> {
        let (p, d, grid) = (cfg.patches(), cfg.embed_dim, cfg.grid());
        let t3 = g.reshape(tokens, vec![batch, p, d])?;
        let t3t = g.transpose_batched(t3)?; // [batch, d, p]
        g.reshape(t3t, vec![batch, d, grid, grid])
    }

    /// Per-pixel foreground logit map `[batch, image_size, image_size]`.
    pub fn decode_mask<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        enc: &EncoderOutput,
        cfg: &EncoderConfig,
    ) -> Result<TensorId> {
        let batch = enc.batch;
        let deep = Self::tokens_to_map(g, enc.layer_tokens[self.deep_tap], batch, cfg)?;
        let mid = Self::tokens_to_map(g, enc.layer_tokens[self.mid_tap], batch, cfg)?;
        let sw = g.param(store, self.skip_w);
        let sb = g.param(store, self.skip_b);
        let skip = g.conv2d(mid, sw, Some(sb), 1, 0)?;
        let mut x = g.concat(&[deep, skip], 1)?;
        for &(wid, bid) in &self.stages {
            let up = g.upsample2x(x)?;
            let w = g.param(store, wid);
            let b = g.param(store, bid);
            let conv = g.conv2d(up, w, Some(b), 1, 1)?;
            x = g.relu(conv)?;
        }
        let fw = g.param(store, self.final_w);
        let fb = g.param(store, self.final_b);
        let logits = g.conv2d(x, fw, Some(fb), 1, 0)?; // [batch, 1, s, s]
        let s = g.shape(logits)[2];
        g.reshape(logits, vec![batch, s, s])
    }
}

/// Mask-area decision rule: a frame is positive iff the foreground pixel
/// count strictly exceeds `fraction` of the image area. The integer
/// boundary is `floor(fraction * H * W) + 1`, e.g. 502 at 224x224 with the
/// default 1% fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRule {
    pub fraction: f64,
    pub height: usize,
    pub width: usize,
    /// Minimum foreground count that labels a frame positive.
    pub pixel_threshold: usize,
}

impl ThresholdRule {
    pub fn new(fraction: f64, height: usize, width: usize) -> Self {
        let pixel_threshold = (fraction * (height * width) as f64).floor() as usize + 1;
        ThresholdRule { fraction, height, width, pixel_threshold }
    }

    /// Default 1% rule at a square working resolution.
    pub fn one_percent(size: usize) -> Self {
        Self::new(0.01, size, size)
    }

    pub fn label_from_count(&self, foreground: usize) -> u8 {
        u8::from(foreground >= self.pixel_threshold)
    }

    /// `mask` is row-major `height * width`, nonzero = foreground.
    pub fn mask_to_label(&self, mask: &[u8]) -> Result<u8> {
        if mask.len() != self.height * self.width {
            return Err(TensorError::ShapeMismatch {
                op: "mask-to-label",
                detail: format!(
                    "mask has {} pixels, rule covers {}x{}",
                    mask.len(),
                    self.height,
                    self.width
                ),
            });
        }
        Ok(self.label_from_count(mask.iter().filter(|&&v| v != 0).count()))
    }
}

/// Binarize a logit map at probability 0.5 (strict: sigmoid(l) > 0.5 ⇔ l > 0).
pub fn binarize_logits<T: Scalar>(logits: &[T]) -> Vec<u8> {
    logits.iter().map(|&l| u8::from(l > T::zero())).collect()
}
