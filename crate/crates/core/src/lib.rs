//! Core of the meme-caption pipeline.
//!
//! The crate is organised bottom-up: dense matrices and a reverse-mode tape
//! ([`tensor`], [`autodiff`]) back the trainable pieces, which are the
//! image-text alignment layer ([`align`]), the caption decoder
//! ([`decoder`], trained by [`sft`] and refined by [`rl`]) and the reward
//! model ([`reward`]). [`corpus`], [`augment`] and [`encode`] turn a manifest
//! of memes into feature matrices; [`metrics`] scores generated captions.

pub mod agreement;
pub mod align;
pub mod augment;
pub mod autodiff;
pub mod corpus;
pub mod decoder;
pub mod encode;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod reward;
pub mod rl;
pub mod segment;
pub mod sft;
pub mod tensor;
pub mod tokenize;

pub use error::{Error, Result};
pub use tensor::Matrix;
