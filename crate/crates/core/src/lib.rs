//! Stroke-sequence autoencoders for Chinese character morphology.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`nn`], [`optim`], [`checkpoint`]: a small fp64
//!   tensor engine with reverse-mode differentiation, the layers both models
//!   need, AdamW with a cosine schedule, and a binary checkpoint container.
//! * [`strokegen`]: stroke data model, stroke-JSON ingestion, a synthetic
//!   radical-composition alphabet, rasterization into cumulative (form A) and
//!   incremental (form B) stroke-image sequences, padding and augmentation.
//! * [`vit`]: the vision-transformer autoencoder that maps a character image
//!   to its stroke-image sequence.
//! * [`rnt`]: the residual-conv encoder plus teacher-forced transformer
//!   decoder autoencoder.
//! * [`zeroshot`]: stroke-class recognition, confusable sets, parameter
//!   surgery and zero-shot evaluation.
//! * [`embed`]: character embeddings from the ViT decoder, cosine similarity
//!   and spherical k-means.
//! * [`pipeline`]: run configuration and the training / evaluation drivers
//!   used by the command-line tool.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embed;
pub mod error;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rnt;
pub mod strokegen;
pub mod tensor;
pub mod vit;
pub mod zeroshot;

pub use error::{Result, SaeError};
pub use tensor::Tensor;
