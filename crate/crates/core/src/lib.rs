//! Forgery detector built from a toy ViT with forgery-aware adapters between
//! its stages and language-guided alignment on top.
//!
//! [`model::FatFormer`] ties the pieces together; the modules can also be used
//! on their own on any [`numcore::Tape`].

pub mod encoders;
pub mod faa;
pub mod lga;
pub mod model;
pub mod wavelet;

pub use encoders::{EncoderOutput, ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig, TextPromptSet};
pub use faa::{AdapterConfig, ForgeryAwareAdapter, Interaction};
pub use lga::{LossForm, LossMode};
pub use model::{ConditionMode, FatFormer, ForwardOutput, ModelConfig, PromptMode};
pub use wavelet::{dwt2d, idwt2d, FrequencyBands};
