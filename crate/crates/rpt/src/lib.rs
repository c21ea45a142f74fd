//! Prediction-transfer regularization for domain-adaptive semantic
//! segmentation, at desk scale.
//!
//! The crate trains a small per-pixel segmentation network on labeled
//! synthetic street scenes (source domain) and adapts it to a color-shifted
//! unlabeled copy of that world (target domain). Adaptation combines an
//! adversarial feature-alignment term with three regularizers computed from
//! the model's own target predictions:
//!
//! - patch votes: superpixels vote a category; confident members are pulled
//!   toward it ([`losses::pcr_loss`]);
//! - cluster votes: appearance clusters of superpixels vote across images
//!   ([`losses::ccr_loss`]);
//! - spatial logic: an LSTM encoder-decoder scores whether each
//!   superpixel's category is plausible in its vertical context, and
//!   implausible superpixels are pushed away from their vote
//!   ([`losses::slr_loss`]).
//!
//! Entry points: [`scene::gen_dataset`] builds a benchmark, [`adapt::adapt`]
//! runs the adaptation loop, and [`adapt::run_benchmark`] compares
//! pretraining against adapted models on fresh scenes.

pub mod adapt;
pub mod color;
pub mod config;
pub mod error;
pub mod logic;
pub mod losses;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod render;
pub mod scene;
pub mod slic;
pub mod stats;
pub mod tensor;

pub use error::{Result, RptError};
