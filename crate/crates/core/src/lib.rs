//! End-to-end utterance embedding for speaker and language recognition.
//!
//! A variable-length filterbank sequence goes through a residual CNN
//! frontend, an encoding layer (temporal average pooling, self-attentive
//! pooling or a learnable dictionary encoding) and a fully connected layer
//! that yields a fixed-size utterance embedding. Training uses softmax,
//! center or angular-margin softmax losses; evaluation scores trials with
//! cosine similarity and reports EER, minimum detection cost, C_avg and
//! top-k accuracy.

pub mod checkpoint;
pub mod config;
pub mod encoding;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod frontend;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
