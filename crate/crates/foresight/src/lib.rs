//! Prediction of future activity sequences and their captions.
//!
//! Given the feature vectors of the last few observed activities in a video,
//! the [`predictor`] network jointly infers the labels of the next unobserved
//! activities and the start time of that future sequence. The [`captioner`]
//! then maps each predicted label plus the observed scene objects to a
//! natural-language caption with an encoder-decoder LSTM pair.
//!
//! Everything runs on a small f64 reverse-mode autodiff core ([`nd`]), so the
//! whole pipeline is testable against finite-difference and brute-force
//! oracles. [`datagen`] produces synthetic activity grammars with known
//! Bayes-optimal accuracies, and [`metrics`] scores both the label
//! predictions (precision/recall, top-k) and the captions (BLEU, ROUGE-L,
//! CIDEr).

pub mod captioner;
pub mod checkpoint;
pub mod datagen;
pub mod dataset;
pub mod layers;
pub mod metrics;
pub mod nd;
pub mod optim;
pub mod predictor;

pub use nd::{NdError, NodeId, Parameter, Tape, Tensor};
