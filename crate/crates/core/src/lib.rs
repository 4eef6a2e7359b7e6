//! Quality-routed progressive deepfake detection.
//!
//! A face is scored by two indicators (visual quality and forgery
//! identifiability); each score is quantized into a step budget for one of
//! two recurrent detection branches. The branches read a backbone feature
//! map that a feature selection module progressively refines with
//! channel-window masks. Training runs in two stages: a supervised stage
//! with random masks, then a clipped-surrogate policy-gradient stage that
//! trains only the mask proposer.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar for common uses.

pub mod autograd;
pub mod backbone;
pub mod branches;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fsm;
pub mod indicators;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type DplModel64 = model::DplModel<f64>;
pub type DplModel32 = model::DplModel<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Adam64 = nn::Adam<f64>;
