//! Frozen toy dual encoder: configuration, parameters, forward passes with
//! adapter hooks, zero-shot classification and contrastive pretraining.

mod bundle;
mod config;
mod encoder;
pub mod params;
mod pretrain;

pub use bundle::BackboneBundle;
pub use config::{BackboneConfig, PromptTemplate, MLP_RATIO};
pub use encoder::{zero_shot_probabilities, AdapterHook, BackboneNodes, Hidden, ImageInput, Modality, TextInput};
pub use pretrain::{contrastive_loss, pretrain_backbone, PretrainConfig};
