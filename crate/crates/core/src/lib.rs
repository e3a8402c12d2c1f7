//! Continuous-time generative models (diffusion and flow) used as offline
//! reinforcement-learning policies.
//!
//! The crate covers the full pipeline: a small reverse-mode autodiff engine
//! ([`numerics`]), probability paths ([`schedules`]), score and flow matching
//! objectives ([`matching`]), fixed-step ODE sampling ([`sampler`]),
//! continuous-normalizing-flow likelihoods ([`likelihood`]), an Implicit
//! Q-Learning critic ([`critic`]), the two policy extraction schemes
//! ([`policy`]) and synthetic tasks with known optimal policies ([`data`]).

pub mod checkpoint;
pub mod critic;
pub mod data;
pub mod error;
pub mod likelihood;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod par;
pub mod policy;
pub mod sampler;
pub mod schedules;

pub use error::{Error, Result};
