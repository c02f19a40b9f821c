//! Training loop: AdamW over mini-batches, validation after every epoch,
//! and selection of the epoch checkpoint with the lowest validation loss
//! (ties resolved toward the earlier epoch).

pub mod adamw;
pub mod checkpoint;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, NamedTensor, WeightsKind};

use crate::data::pgm::read_pgm;
use crate::data::phantom::stable_mix;
use crate::data::preprocess::{preprocess_image, preprocess_mask};
use crate::data::{DataError, DatasetPaths, FrameRecord};
use crate::model::{HeadKind, IqaModel, ModelError};
use crate::params::ParamStore;
use crate::tensor::{Graph, TensorError};

const STREAM_SHUFFLE: u64 = 11;
const STREAM_DROPOUT: u64 = 12;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss {value} at epoch {epoch}, step {step}: aborting")]
    NonFinite { epoch: usize, step: usize, value: f64 },
}

/// Optimizer and loop hyperparameters. Strategy and head live in
/// [`crate::model::ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            epochs: 5,
            batch_size: 32,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            repeats: 5,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One frame preloaded at the model's working resolution.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub record: FrameRecord,
    /// `[working * working]`, values in [0,1].
    pub image: Vec<f32>,
    /// `[working * working]`, values in {0,1}.
    pub mask: Vec<u8>,
}

/// Read and preprocess every record. Frame order follows `records`.
pub fn load_frames(
    paths: &DatasetPaths,
    records: &[FrameRecord],
    working: usize,
) -> Result<Vec<LoadedFrame>, DataError> {
    records
        .iter()
        .map(|r| {
            let (w, h, img) = read_pgm(&paths.resolve(&r.image_path))?;
            let (mw, mh, mask) = read_pgm(&paths.resolve(&r.mask_path))?;
            if (mw, mh) != (w, h) {
                return Err(DataError::Format(format!(
                    "{}: mask {}x{} vs image {}x{}",
                    r.mask_path, mw, mh, w, h
                )));
            }
            Ok(LoadedFrame {
                record: r.clone(),
                image: preprocess_image(&img, h, w, working),
                mask: preprocess_mask(&mask, h, w, working),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochStats>,
}

fn batch_images(frames: &[&LoadedFrame], working: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(frames.len() * working * working);
    for f in frames {
        out.extend_from_slice(&f.image);
    }
    out
}

/// Forward one batch; returns the loss value and its node for backward.
fn batch_loss(
    model: &IqaModel,
    store: &ParamStore<f32>,
    frames: &[&LoadedFrame],
    g: &mut Graph<f32>,
) -> Result<(f64, crate::tensor::TensorId), TrainError> {
    let s = model.cfg.encoder.image_size;
    let images = g.constant(batch_images(frames, s), vec![frames.len(), 1, s, s])?;
    let loss = match model.cfg.head {
        HeadKind::Classification => {
            let logits = model.forward_logits(g, store, images)?;
            let labels: Vec<f64> = frames.iter().map(|f| f64::from(f.record.label)).collect();
            crate::losses::bce_with_logits_mean(g, logits, &labels)?
        }
        HeadKind::Segmentation => {
            let mask_logits = model.forward_mask_logits(g, store, images)?;
            let masks: Vec<Vec<f64>> = frames
                .iter()
                .map(|f| f.mask.iter().map(|&v| f64::from(v)).collect())
                .collect();
            crate::losses::dice_loss_mean(g, mask_logits, &masks)?
        }
    };
    Ok((f64::from(g.item(loss)), loss))
}

/// Mean loss over a frame set, forward only.
pub fn dataset_loss(
    model: &IqaModel,
    store: &ParamStore<f32>,
    frames: &[LoadedFrame],
    batch_size: usize,
) -> Result<f64, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::EmptySplit("loss"));
    }
    let mut total = 0.0;
    for chunk in frames.chunks(batch_size.max(1)) {
        let refs: Vec<&LoadedFrame> = chunk.iter().collect();
        let mut g: Graph<f32> = Graph::new();
        let (v, _) = batch_loss(model, store, &refs, &mut g)?;
        total += v * chunk.len() as f64;
    }
    Ok(total / frames.len() as f64)
}

/// Run the full loop and return the best checkpoint plus loss history.
pub fn train(
    model: &IqaModel,
    store: &mut ParamStore<f32>,
    train_frames: &[LoadedFrame],
    val_frames: &[LoadedFrame],
    tcfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if train_frames.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_frames.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let mut opt: AdamW<f32> = AdamW::new(tcfg.adamw());
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, Vec<NamedTensor>, f64)> = None;

    let mut order: Vec<usize> = (0..train_frames.len()).collect();
    for epoch in 0..tcfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(stable_mix(&[tcfg.seed, epoch as u64, STREAM_SHUFFLE]));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(tcfg.batch_size.max(1)).enumerate() {
            let refs: Vec<&LoadedFrame> = chunk.iter().map(|&i| &train_frames[i]).collect();
            let mut g: Graph<f32> = Graph::new();
            g.set_step_rng(Some(ChaCha8Rng::seed_from_u64(stable_mix(&[
                tcfg.seed,
                epoch as u64,
                step as u64,
                STREAM_DROPOUT,
            ]))));
            let (value, loss_id) = batch_loss(model, store, &refs, &mut g)?;
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, step, value });
            }
            epoch_loss += value * chunk.len() as f64;
            g.backward(loss_id)?;

            let mut grads: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
            for &(pid, leaf) in g.param_leaves() {
                if let Some(gr) = g.grad(leaf) {
                    match grads.entry(pid.index()) {
                        std::collections::btree_map::Entry::Vacant(e) => {
                            e.insert(gr.to_vec());
                        }
                        std::collections::btree_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(gr) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            drop(g);
            opt.step(store, &grads);
        }
        let train_loss = epoch_loss / train_frames.len() as f64;
        let val_loss = dataset_loss(model, store, val_frames, tcfg.batch_size)?;
        history.push(EpochStats { epoch, train_loss, val_loss });

        let better = match &best {
            None => true,
            Some((best_val, ..)) => val_loss < *best_val,
        };
        if better {
            let tensors: Vec<NamedTensor> = store
                .ids()
                .map(|id| NamedTensor {
                    name: store.name(id).to_owned(),
                    shape: store.shape(id).to_vec(),
                    data: store.data(id).to_vec(),
                })
                .collect();
            best = Some((val_loss, epoch, tensors, train_loss));
        }
    }

    let (val_loss, epoch, tensors, train_loss) = best.expect("epochs >= 1 or empty history");
    let meta = CheckpointMeta {
        model: model.cfg.clone(),
        train: *tcfg,
        weights: WeightsKind::Full,
        epoch,
        train_loss,
        val_loss,
        seed: tcfg.seed,
    };
    Ok(TrainOutcome { best: Checkpoint { meta, tensors }, history })
}

/// Rebuild a model and parameter store from a checkpoint.
pub fn restore_model(ckpt: &Checkpoint) -> Result<(IqaModel, ParamStore<f32>), TrainError> {
    let mut store: ParamStore<f32> = ParamStore::new();
    let model = IqaModel::build(ckpt.meta.model.clone(), &mut store)?;
    ckpt.restore_into(&mut store)?;
    Ok((model, store))
}
