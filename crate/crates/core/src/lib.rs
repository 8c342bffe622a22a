//! Prototype-based classification of 3D-printed objects against a swappable
//! set of CAD models.
//!
//! The pipeline renders each CAD model from a fixed set of viewpoints,
//! encodes the renders, averages them into one prototype per object and
//! classifies query photographs by cosine similarity to the prototypes. The
//! [`contrastive`] module holds the one-time encoder fine-tuning stage.

pub mod geometry;
pub mod renderer;
pub mod seed;
pub mod encoder;
pub mod contrastive;
pub mod prototypes;
pub mod classify;
pub mod eval;
