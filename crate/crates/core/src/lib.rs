//! Spatial graph convolutional network for online handwritten character
//! recognition.
//!
//! Pen trajectories are normalized and resampled ([`ink`]), turned into
//! geometric graphs ([`chargraph`]) and classified by a stack of B-spline
//! graph convolutions ([`splineconv`]), spatial transformers ([`transform`])
//! and cluster pooling ([`coarsen`]) assembled in [`network`].

pub mod chargraph;
pub mod cli;
pub mod coarsen;
pub mod error;
pub mod gradsuite;
pub mod ink;
pub mod network;
pub mod numcore;
pub mod serve;
pub mod splineconv;
pub mod trainer;
pub mod transform;

pub use error::{Result, SgcnError};
