//! Gradient-based epistemic uncertainty quantification for pre-trained
//! classifiers.
//!
//! The crate bundles a small reverse-mode autodiff engine, MLP/CNN
//! classifiers with SGD training, the REGrad family of gradient scores and
//! the usual gradient, perturbation and entropy baselines, threshold-free
//! metrics, synthetic datasets, and experiment harnesses for OOD detection,
//! calibration, active learning and numerical checks of the theory behind
//! the scores.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod scorers;
pub mod tensor;
pub mod training;

pub use autodiff::{grad_check, GradientBundle, Graph, NamedTensor, NodeId};
pub use error::{Result, UqError};
pub use models::{Model, ModelConfig, ParameterSet, ProbVector};
pub use tensor::Tensor;
