//! Assembled models: encoder geometry, adaptation strategy, and head type
//! resolved from one config, which is also what checkpoints snapshot.

use serde::{Deserialize, Serialize};

use crate::heads::{ClsHead, SegDecoder, ThresholdRule};
use crate::lora::{self, LoraConfig, LoraError};
use crate::params::ParamStore;
use crate::tensor::{Graph, Scalar, TensorError, TensorId};
use crate::vit::{EncoderConfig, EncoderOutput, VitEncoder};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Frozen encoder, only the head trains.
    LinearProbe,
    /// Everything trains, no adapters.
    FullParameter,
    /// Frozen encoder, adapters + head train.
    Lora,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "linear_probe" => Ok(Strategy::LinearProbe),
            "full_parameter" => Ok(Strategy::FullParameter),
            "lora" => Ok(Strategy::Lora),
            other => Err(ModelError::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::LinearProbe => "linear_probe",
            Strategy::FullParameter => "full_parameter",
            Strategy::Lora => "lora",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification,
    Segmentation,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "classification" => Ok(HeadKind::Classification),
            "segmentation" => Ok(HeadKind::Segmentation),
            other => Err(ModelError::InvalidConfig(format!("unknown head {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Classification => "classification",
            HeadKind::Segmentation => "segmentation",
        }
    }
}

/// Single source of truth for a run: geometry, adaptation, head, and the
/// mask-threshold fraction all live here and travel inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    pub strategy: Strategy,
    /// Required when `strategy == Lora`; must be None otherwise.
    pub lora: Option<LoraConfig>,
    /// Mask-area fraction for the segmentation-as-classifier rule.
    pub threshold_fraction: f64,
    /// Seed for the fixed "pretrained" encoder init and head init.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, head: HeadKind, strategy: Strategy) -> Self {
        let lora = matches!(strategy, Strategy::Lora).then(LoraConfig::default);
        ModelConfig { encoder, head, strategy, lora, threshold_fraction: 0.01, init_seed: 42 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        match (self.strategy, &self.lora) {
            (Strategy::Lora, None) => {
                return Err(ModelError::InvalidConfig("lora strategy needs a lora config".into()))
            }
            (Strategy::Lora, Some(cfg)) => cfg.validate()?,
            (_, Some(_)) => {
                return Err(ModelError::InvalidConfig(format!(
                    "strategy {} does not take adapters",
                    self.strategy.name()
                )))
            }
            _ => {}
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "threshold fraction {} not in (0,1)",
                self.threshold_fraction
            )));
        }
        Ok(())
    }

    pub fn threshold_rule(&self) -> ThresholdRule {
        ThresholdRule::new(self.threshold_fraction, self.encoder.image_size, self.encoder.image_size)
    }
}

pub enum ModelHead {
    Cls(ClsHead),
    Seg(SegDecoder),
}

/// Encoder + head wired per the configured strategy, with freezing and
/// adapter injection already applied.
pub struct IqaModel {
    pub cfg: ModelConfig,
    pub encoder: VitEncoder,
    pub head: ModelHead,
}

impl IqaModel {
    pub fn build<T: Scalar>(cfg: ModelConfig, store: &mut ParamStore<T>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut encoder = VitEncoder::init(cfg.encoder, store, cfg.init_seed)?;
        match cfg.strategy {
            Strategy::LinearProbe => encoder.set_frozen(store, true),
            Strategy::FullParameter => encoder.set_frozen(store, false),
            Strategy::Lora => {
                encoder.set_frozen(store, true);
                let lcfg = cfg.lora.as_ref().expect("validated");
                lora::inject(&mut encoder, store, lcfg, cfg.init_seed.wrapping_add(1))?;
            }
        }
        let head = match cfg.head {
            HeadKind::Classification => ModelHead::Cls(ClsHead::init(store, cfg.encoder.embed_dim)),
            HeadKind::Segmentation => {
                ModelHead::Seg(SegDecoder::init(store, &cfg.encoder, cfg.init_seed.wrapping_add(2))?)
            }
        };
        Ok(IqaModel { cfg, encoder, head })
    }

    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: TensorId,
    ) -> Result<EncoderOutput, ModelError> {
        Ok(self.encoder.encode(g, store, images)?)
    }

    /// Classification path: logits `[batch]`.
    pub fn forward_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: TensorId,
    ) -> Result<TensorId, ModelError> {
        let ModelHead::Cls(head) = &self.head else {
            return Err(ModelError::InvalidConfig("model has no classification head".into()));
        };
        let enc = self.encoder.encode_with(g, store, images, false)?;
        Ok(head.classify(g, store, enc.cls_embedding)?)
    }

    /// Segmentation path: per-pixel logits `[batch, s, s]`.
    pub fn forward_mask_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: TensorId,
    ) -> Result<TensorId, ModelError> {
        let ModelHead::Seg(dec) = &self.head else {
            return Err(ModelError::InvalidConfig("model has no segmentation decoder".into()));
        };
        let enc = self.encoder.encode(g, store, images)?;
        Ok(dec.decode_mask(g, store, &enc, &self.cfg.encoder)?)
    }
}
