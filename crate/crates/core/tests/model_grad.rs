//! End-to-end finite-difference verification of the full models in f64:
//! encoder + adapters + classification head under BCE, and encoder +
//! adapters + segmentation decoder under Dice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use usiqa_core::losses::{bce_with_logits_mean, dice_loss_mean};
use usiqa_core::model::{HeadKind, IqaModel, ModelConfig, ModelHead, Strategy};
use usiqa_core::tensor::gradcheck::{gradcheck, DEFAULT_STEP};
use usiqa_core::vit::EncoderConfig;
use usiqa_core::{Graph, ParamStore};

fn micro_model(head: HeadKind, store: &mut ParamStore<f64>) -> IqaModel {
    let mut cfg = ModelConfig::new(EncoderConfig::micro(), head, Strategy::Lora);
    cfg.lora.as_mut().unwrap().rank = 2;
    cfg.init_seed = 77;
    let model = IqaModel::build(cfg, store).unwrap();
    // bump the zero-initialized tensors off the measure-zero point so
    // every trainable parameter has a generic gradient to verify
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_owned();
        if name.ends_with(".B") || name.starts_with("head.") || name.starts_with("decoder.") {
            for v in store.data_mut(id).iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    model
}

fn batch_images(rng: &mut ChaCha8Rng, batch: usize, size: usize) -> Vec<f64> {
    (0..batch * size * size).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let model = micro_model(HeadKind::Classification, &mut store);
    let size = model.cfg.encoder.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let px = batch_images(&mut rng, 2, size);
    let labels = [1.0, 0.0];

    let report = gradcheck(
        &mut store,
        |g: &mut Graph<f64>, s| {
            let img = g.constant(px.clone(), vec![2, 1, size, size])?;
            let logits = model.forward_logits(g, s, img).map_err(|e| match e {
                usiqa_core::model::ModelError::Tensor(t) => t,
                other => panic!("unexpected: {other}"),
            })?;
            bce_with_logits_mean(g, logits, &labels)
        },
        1e-5,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(
        report.passed(),
        "classifier end-to-end gradcheck failed: worst {:.3e}",
        report.worst()
    );
    // every adapter and the head must have been checked
    assert!(report.entries.iter().any(|e| e.param.starts_with("lora.")));
    assert!(report.entries.iter().any(|e| e.param.starts_with("head.")));
}

#[test]
fn segmentation_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let model = micro_model(HeadKind::Segmentation, &mut store);
    let size = model.cfg.encoder.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let px = batch_images(&mut rng, 2, size);
    let gt: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..size * size).map(|_| f64::from(rng.random_range(0..2))).collect())
        .collect();

    let report = gradcheck(
        &mut store,
        |g: &mut Graph<f64>, s| {
            let img = g.constant(px.clone(), vec![2, 1, size, size])?;
            let logits = model.forward_mask_logits(g, s, img).map_err(|e| match e {
                usiqa_core::model::ModelError::Tensor(t) => t,
                other => panic!("unexpected: {other}"),
            })?;
            dice_loss_mean(g, logits, &gt)
        },
        1e-5,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(
        report.passed(),
        "segmentation end-to-end gradcheck failed: worst {:.3e}",
        report.worst()
    );
    assert!(report.entries.iter().any(|e| e.param.starts_with("decoder.")));
}

#[test]
fn decoder_output_matches_image_size_and_routes_gradients_to_adapters() {
    let mut store: ParamStore<f64> = ParamStore::new();
    let model = micro_model(HeadKind::Segmentation, &mut store);
    let size = model.cfg.encoder.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let px = batch_images(&mut rng, 1, size);
    let gt = vec![(0..size * size).map(|i| f64::from(i % 5 == 0)).collect::<Vec<f64>>()];

    let mut g: Graph<f64> = Graph::new();
    let img = g.constant(px, vec![1, 1, size, size]).unwrap();
    let logits = model.forward_mask_logits(&mut g, &store, img).unwrap();
    assert_eq!(g.shape(logits), &[1, size, size]);
    let loss = dice_loss_mean(&mut g, logits, &gt).unwrap();
    g.backward(loss).unwrap();

    let mut adapter_norm = 0.0f64;
    for &(pid, leaf) in g.param_leaves() {
        if store.name(pid).starts_with("lora.") {
            if let Some(gr) = g.grad(leaf) {
                adapter_norm += gr.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    assert!(adapter_norm > 0.0, "decoder loss did not reach the adapters");
}

#[test]
fn classifier_head_gradcheck_through_bce() {
    // BCE ∘ sigmoid ∘ classify at 1e-6 (head parameters only, toy dim)
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 16;
    store.add("head.weight", (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(), vec![1, d], true);
    store.add("head.bias", vec![0.1], vec![1], true);
    let emb: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = [1.0, 0.0, 1.0];
    let report = gradcheck(
        &mut store,
        |g, s| {
            let e = g.constant(emb.clone(), vec![3, d])?;
            let w = g.param(s, s.lookup("head.weight").unwrap());
            let wt = g.transpose(w)?;
            let y = g.matmul(e, wt)?;
            let b = g.param(s, s.lookup("head.bias").unwrap());
            let y = g.add_broadcast(y, b)?;
            let logits = g.reshape(y, vec![3])?;
            bce_with_logits_mean(g, logits, &labels)
        },
        1e-6,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.passed(), "head gradcheck worst {:.3e}", report.worst());
}

#[test]
fn head_mismatch_is_an_error() {
    let mut store: ParamStore<f64> = ParamStore::new();
    let model = micro_model(HeadKind::Classification, &mut store);
    assert!(matches!(model.head, ModelHead::Cls(_)));
    let size = model.cfg.encoder.image_size;
    let mut g: Graph<f64> = Graph::new();
    let img = g.constant(vec![0.5; size * size], vec![1, 1, size, size]).unwrap();
    assert!(model.forward_mask_logits(&mut g, &store, img).is_err());
}
