//! Low-rank adaptation of linear projections.
//!
//! A wrapped projection computes `y = W·x + b + s·B·(A·x)` with
//! `s = alpha / rank`, `W` frozen, `A` Gaussian-initialized and `B` zero so
//! the adapted model starts exactly equal to the base model. Adapters can
//! be folded into the base weight (`merge`) and recovered (`unmerge`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Result as TensorResult, Scalar, TensorId};
use crate::vit::VitEncoder;

#[derive(Debug, thiserror::Error)]
pub enum LoraError {
    #[error("invalid lora config: {0}")]
    InvalidConfig(String),
    #[error("unknown target projection {0:?} (expected q, k, v, attn_out, mlp_in, mlp_out)")]
    UnknownTarget(String),
    #[error("layer {0} has no adapter to merge")]
    NoAdapter(String),
    #[error("layer {0} is already merged")]
    AlreadyMerged(String),
    #[error("layer {0} is not merged")]
    NotMerged(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    AttnOut,
    MlpIn,
    MlpOut,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Q,
        LoraTarget::K,
        LoraTarget::V,
        LoraTarget::AttnOut,
        LoraTarget::MlpIn,
        LoraTarget::MlpOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::AttnOut => "attn_out",
            LoraTarget::MlpIn => "mlp_in",
            LoraTarget::MlpOut => "mlp_out",
        }
    }

    pub fn parse(s: &str) -> Result<Self, LoraError> {
        LoraTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| LoraError::UnknownTarget(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    pub dropout_p: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0, targets: LoraTarget::ALL.to_vec(), dropout_p: 0.0 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<(), LoraError> {
        if self.rank == 0 {
            return Err(LoraError::InvalidConfig("rank must be >= 1".into()));
        }
        let s = self.scaling();
        if !s.is_finite() || s <= 0.0 {
            return Err(LoraError::InvalidConfig(format!("scaling {s} not finite positive")));
        }
        if self.targets.is_empty() {
            return Err(LoraError::InvalidConfig("empty target set".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(LoraError::InvalidConfig(format!("dropout_p {} not in [0,1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `[rank, d_in]`
    pub a: ParamId,
    /// `[d_out, rank]`
    pub b: ParamId,
    pub scaling: f64,
    pub dropout_p: f64,
    /// Whether the adapter delta is currently folded into the base weight.
    pub merged: bool,
}

/// Linear projection `y = W·x + b`, optionally wrapped by a low-rank
/// adapter. The plain (un-adapted) layers of the encoder are simply
/// `LoraLinear { adapter: None }`.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    /// `[d_out, d_in]`
    pub weight: ParamId,
    /// `[d_out]`
    pub bias: ParamId,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    /// `x: [rows, d_in] -> [rows, d_out]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: TensorId,
    ) -> TensorResult<TensorId> {
        let w = g.param(store, self.weight);
        let wt = g.transpose(w)?;
        let y = g.matmul(x, wt)?;
        let b = g.param(store, self.bias);
        let mut y = g.add_broadcast(y, b)?;
        if let Some(ad) = &self.adapter {
            if !ad.merged {
                let a_in = if ad.dropout_p > 0.0 {
                    match g.dropout_mask(g.shape(x).to_vec(), ad.dropout_p)? {
                        Some(mask) => g.mul(x, mask)?,
                        None => x,
                    }
                } else {
                    x
                };
                let a = g.param(store, ad.a);
                let at = g.transpose(a)?;
                let u = g.matmul(a_in, at)?; // [rows, rank]
                let bm = g.param(store, ad.b);
                let bt = g.transpose(bm)?;
                let v = g.matmul(u, bt)?; // [rows, d_out]
                let scaled = g.scale(v, ad.scaling)?;
                y = g.add(y, scaled)?;
            }
        }
        Ok(y)
    }
}

/// Wrap every targeted projection in every encoder block. `A` is drawn
/// from N(0, 0.02), `B` starts at zero, so injection leaves the model
/// function unchanged until training moves `B`.
pub fn inject<T: Scalar>(
    encoder: &mut VitEncoder,
    store: &mut ParamStore<T>,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<(), LoraError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).expect("valid std");
    let scaling = cfg.scaling();
    for (bi, block) in encoder.blocks.iter_mut().enumerate() {
        for &target in &cfg.targets {
            let layer = match target {
                LoraTarget::Q => &mut block.q,
                LoraTarget::K => &mut block.k,
                LoraTarget::V => &mut block.v,
                LoraTarget::AttnOut => &mut block.attn_out,
                LoraTarget::MlpIn => &mut block.mlp_in,
                LoraTarget::MlpOut => &mut block.mlp_out,
            };
            let shape = store.shape(layer.weight);
            let (d_out, d_in) = (shape[0], shape[1]);
            let a_data: Vec<T> =
                (0..cfg.rank * d_in).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
            let a = store.add(
                &format!("lora.{bi}.{}.A", target.name()),
                a_data,
                vec![cfg.rank, d_in],
                true,
            );
            let b = store.add(
                &format!("lora.{bi}.{}.B", target.name()),
                vec![T::zero(); d_out * cfg.rank],
                vec![d_out, cfg.rank],
                false,
            );
            layer.adapter = Some(LoraAdapter {
                a,
                b,
                scaling,
                dropout_p: cfg.dropout_p,
                merged: false,
            });
        }
    }
    Ok(())
}

fn delta<T: Scalar>(store: &ParamStore<T>, ad: &LoraAdapter) -> Vec<T> {
    // scaling * B·A, shape [d_out, d_in]
    let (d_out, rank) = {
        let s = store.shape(ad.b);
        (s[0], s[1])
    };
    let d_in = store.shape(ad.a)[1];
    let mut out = vec![T::zero(); d_out * d_in];
    T::gemm(
        d_out,
        rank,
        d_in,
        T::from_f64(ad.scaling),
        store.data(ad.b),
        store.data(ad.a),
        T::zero(),
        &mut out,
    );
    out
}

/// Fold `scaling·B·A` into the base weight. The layer then behaves as a
/// plain linear layer; merging twice is an error.
pub fn merge<T: Scalar>(store: &mut ParamStore<T>, layer: &mut LoraLinear) -> Result<(), LoraError> {
    let name = store.name(layer.weight).to_owned();
    let ad = layer.adapter.as_mut().ok_or_else(|| LoraError::NoAdapter(name.clone()))?;
    if ad.merged {
        return Err(LoraError::AlreadyMerged(name));
    }
    let d = delta(store, ad);
    for (w, dv) in store.data_mut(layer.weight).iter_mut().zip(d.iter()) {
        *w += *dv;
    }
    ad.merged = true;
    Ok(())
}

/// Subtract the adapter delta back out of a merged layer.
pub fn unmerge<T: Scalar>(
    store: &mut ParamStore<T>,
    layer: &mut LoraLinear,
) -> Result<(), LoraError> {
    let name = store.name(layer.weight).to_owned();
    let ad = layer.adapter.as_mut().ok_or_else(|| LoraError::NoAdapter(name.clone()))?;
    if !ad.merged {
        return Err(LoraError::NotMerged(name));
    }
    let d = delta(store, ad);
    for (w, dv) in store.data_mut(layer.weight).iter_mut().zip(d.iter()) {
        *w -= *dv;
    }
    ad.merged = false;
    Ok(())
}

/// Number of scalar parameters currently marked trainable.
pub fn count_trainable<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.trainable_count()
}

/// Closed-form adapter parameter count: `Σ_blocks Σ_targets r·(d_in + d_out)`.
pub fn adapter_param_count(encoder_dim: usize, hidden: usize, depth: usize, cfg: &LoraConfig) -> usize {
    let per_block: usize = cfg
        .targets
        .iter()
        .map(|t| {
            let (d_out, d_in) = match t {
                LoraTarget::Q | LoraTarget::K | LoraTarget::V | LoraTarget::AttnOut => {
                    (encoder_dim, encoder_dim)
                }
                LoraTarget::MlpIn => (hidden, encoder_dim),
                LoraTarget::MlpOut => (encoder_dim, hidden),
            };
            cfg.rank * (d_in + d_out)
        })
        .sum();
    per_block * depth
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::tensor::Graph;
    use crate::vit::EncoderConfig;

    fn random_layer(
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        tag: &str,
    ) -> LoraLinear {
        let w: Vec<f32> = (0..d_out * d_in).map(|_| rng.random_range(-0.5..0.5)).collect();
        let weight = store.add(&format!("{tag}.weight"), w, vec![d_out, d_in], true);
        let bias = store.add(
            &format!("{tag}.bias"),
            (0..d_out).map(|_| rng.random_range(-0.1..0.1)).collect(),
            vec![d_out],
            false,
        );
        let a = store.add(
            &format!("{tag}.A"),
            (0..rank * d_in).map(|_| rng.random_range(-0.5..0.5)).collect(),
            vec![rank, d_in],
            true,
        );
        let b = store.add(
            &format!("{tag}.B"),
            (0..d_out * rank).map(|_| rng.random_range(-0.5..0.5)).collect(),
            vec![d_out, rank],
            false,
        );
        LoraLinear {
            weight,
            bias,
            adapter: Some(LoraAdapter {
                a,
                b,
                scaling: alpha / rank as f64,
                dropout_p: 0.0,
                merged: false,
            }),
        }
    }

    fn layer_forward(store: &ParamStore<f32>, layer: &LoraLinear, x: &[f32], rows: usize, d_in: usize) -> Vec<f32> {
        let mut g: Graph<f32> = Graph::new();
        let xt = g.constant(x.to_vec(), vec![rows, d_in]).unwrap();
        let y = layer.forward(&mut g, store, xt).unwrap();
        g.data(y).to_vec()
    }

    #[test]
    fn injection_preserves_output_exactly_at_zero_init() {
        let cfg = EncoderConfig::micro();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut enc = crate::vit::VitEncoder::init(cfg, &mut store, 11).unwrap();
        enc.set_frozen(&mut store, true);

        let px: Vec<f64> = (0..cfg.image_size * cfg.image_size)
            .map(|i| (i % 7) as f64 / 7.0)
            .collect();
        let embed = |enc: &crate::vit::VitEncoder, store: &ParamStore<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let img = g.constant(px.clone(), vec![1, 1, cfg.image_size, cfg.image_size]).unwrap();
            let out = enc.encode(&mut g, store, img).unwrap();
            g.data(out.cls_embedding).to_vec()
        };
        let before = embed(&enc, &store);
        inject(&mut enc, &mut store, &LoraConfig::default(), 99).unwrap();
        let after = embed(&enc, &store);
        assert_eq!(before, after, "zero-init adapters changed the output");
    }

    #[test]
    fn merge_matches_unmerged_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for rank in [1usize, 2, 4, 8] {
            let mut store: ParamStore<f32> = ParamStore::new();
            let mut layer =
                random_layer(&mut store, &mut rng, 12, 10, rank, 2.0 * rank as f64, &format!("r{rank}"));
            let x: Vec<f32> = (0..16 * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let unmerged = layer_forward(&store, &layer, &x, 16, 10);
            merge(&mut store, &mut layer).unwrap();
            let merged = layer_forward(&store, &layer, &x, 16, 10);
            let max_diff = unmerged
                .iter()
                .zip(merged.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff < 1e-5, "rank {rank}: merged forward off by {max_diff}");
        }
    }

    #[test]
    fn merge_with_zero_b_keeps_weight_bitwise() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let w: Vec<f32> = (0..30).map(|i| i as f32 * 0.37).collect();
        let weight = store.add("l.weight", w.clone(), vec![5, 6], true);
        let bias = store.add("l.bias", vec![0.0; 5], vec![5], false);
        let a = store.add("l.A", vec![0.5; 2 * 6], vec![2, 6], true);
        let b = store.add("l.B", vec![0.0; 5 * 2], vec![5, 2], false);
        let mut layer = LoraLinear {
            weight,
            bias,
            adapter: Some(LoraAdapter { a, b, scaling: 2.0, dropout_p: 0.0, merged: false }),
        };
        merge(&mut store, &mut layer).unwrap();
        assert_eq!(store.data(weight), &w[..]);
    }

    #[test]
    fn merge_unmerge_round_trip_recovers_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut layer = random_layer(&mut store, &mut rng, 9, 7, 4, 8.0, "rt");
        let before = store.data(layer.weight).to_vec();
        merge(&mut store, &mut layer).unwrap();
        unmerge(&mut store, &mut layer).unwrap();
        let after = store.data(layer.weight);
        let max_diff =
            before.iter().zip(after.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max_diff < 1e-6, "round trip drifted by {max_diff}");
    }

    #[test]
    fn double_merge_and_stray_unmerge_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut layer = random_layer(&mut store, &mut rng, 4, 4, 2, 4.0, "dm");
        assert!(matches!(unmerge(&mut store, &mut layer), Err(LoraError::NotMerged(_))));
        merge(&mut store, &mut layer).unwrap();
        assert!(matches!(merge(&mut store, &mut layer), Err(LoraError::AlreadyMerged(_))));
        let mut plain = LoraLinear {
            weight: store.add("p.weight", vec![0.0; 4], vec![2, 2], true),
            bias: store.add("p.bias", vec![0.0; 2], vec![2], false),
            adapter: None,
        };
        assert!(matches!(merge(&mut store, &mut plain), Err(LoraError::NoAdapter(_))));
    }

    #[test]
    fn doubling_alpha_doubles_the_delta_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store: ParamStore<f32> = ParamStore::new();
        let layer = random_layer(&mut store, &mut rng, 6, 5, 2, 4.0, "sc");
        let ad = layer.adapter.as_ref().unwrap();
        let d1 = delta(&store, ad);
        let ad2 = LoraAdapter { scaling: 2.0 * ad.scaling, ..ad.clone() };
        let d2 = delta(&store, &ad2);
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert_eq!(2.0 * a, *b, "delta not exactly linear in alpha");
        }
    }

    #[test]
    fn full_rank_adapter_can_express_any_delta() {
        // r = min(d_in, d_out): pick A = I, B = Δ/s, then s·B·A = Δ
        let (d, rank) = (8usize, 8usize);
        let scaling = 16.0 / rank as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let target: Vec<f32> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut eye = vec![0.0f32; rank * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let a = store.add("f.A", eye, vec![rank, d], true);
        let b = store.add(
            "f.B",
            target.iter().map(|&v| v / scaling as f32).collect(),
            vec![d, rank],
            false,
        );
        let ad = LoraAdapter { a, b, scaling, dropout_p: 0.0, merged: false };
        let got = delta(&store, &ad);
        let residual: f32 = got
            .iter()
            .zip(target.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            .sqrt();
        assert!(residual < 1e-6, "reconstruction residual {residual}");
    }

    #[test]
    fn trainable_count_matches_closed_form() {
        let cfg = EncoderConfig::toy();
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut enc = crate::vit::VitEncoder::init(cfg, &mut store, 1).unwrap();
        enc.set_frozen(&mut store, true);
        assert_eq!(count_trainable(&store), 0);
        let lcfg = LoraConfig { rank: 4, ..LoraConfig::default() };
        inject(&mut enc, &mut store, &lcfg, 2).unwrap();
        let expect = adapter_param_count(cfg.embed_dim, cfg.hidden(), cfg.depth, &lcfg);
        assert_eq!(count_trainable(&store), expect);
        // enumerating requires_grad tensors agrees with the closed form
        let enumerated: usize = store
            .ids()
            .filter(|&id| store.requires_grad(id))
            .map(|id| store.numel(id))
            .sum();
        assert_eq!(enumerated, expect);
    }

    #[test]
    fn gradient_isolation_in_lora_mode() {
        let cfg = EncoderConfig::micro();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut enc = crate::vit::VitEncoder::init(cfg, &mut store, 17).unwrap();
        enc.set_frozen(&mut store, true);
        inject(&mut enc, &mut store, &LoraConfig { rank: 2, ..Default::default() }, 18).unwrap();
        // move B off its zero init so the A path carries signal
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".B") {
                for v in store.data_mut(id).iter_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
            }
        }
        let px: Vec<f64> =
            (0..cfg.image_size * cfg.image_size).map(|i| ((i * 31) % 11) as f64 / 11.0).collect();
        let mut g: Graph<f64> = Graph::new();
        let img = g.constant(px, vec![1, 1, cfg.image_size, cfg.image_size]).unwrap();
        let out = enc.encode(&mut g, &store, img).unwrap();
        let sq = g.mul(out.cls_embedding, out.cls_embedding).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        for &(pid, leaf) in g.param_leaves() {
            let name = store.name(pid);
            if name.starts_with("lora.") {
                let norm: f64 =
                    g.grad(leaf).map(|gr| gr.iter().map(|v| v * v).sum()).unwrap_or(0.0);
                assert!(norm > 0.0, "adapter {name} got no gradient");
            } else {
                assert!(g.grad(leaf).is_none(), "base param {name} accumulated gradient");
            }
        }
    }
}
