//! Hybrid physics / deep-learning prognostics: a synthetic turbofan fleet,
//! UKF calibration of health modifiers, feature assembly, a small network
//! engine and prognostic metrics.

pub mod calibration;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fleet;
pub mod nnet;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type OperatingPoint = engine::OperatingPoint<f64>;
pub type HealthState = engine::HealthState<f64>;
pub type UkfState = calibration::UkfState<f64>;
pub type Network = nnet::Network<f64>;
pub type Network32 = nnet::Network<f32>;
pub type WindowSet = features::WindowSet<f64>;
pub type WindowSet32 = features::WindowSet<f32>;
pub type RowSet = features::RowSet<f64>;
pub type RowSet32 = features::RowSet<f32>;
