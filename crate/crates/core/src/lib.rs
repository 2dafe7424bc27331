//! Shared frozen backbone with pluggable FFN experts.
//!
//! A [`model::BackboneModel`] is pretrained once and frozen. Domain experts
//! ([`model::ExpertSubnetwork`]) replace the backbone FFN sublayers at chosen
//! layer positions and are trained in isolation against the frozen weights.
//! The [`lifecycle::ExpertRegistry`] holds one backbone plus any number of
//! experts, routes queries by a binary domain/expert table or a learned
//! planner, and accounts for every resident parameter byte.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod lifecycle;
pub mod manifest;
pub mod model;
pub mod par;
pub mod routing;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Rng, Tensor};
