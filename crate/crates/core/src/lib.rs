//! Wi-Fi MAC-layer traffic fingerprinting: app and in-app action recognition
//! from encrypted frame metadata, and behavior-based user identification
//! across MAC address rotation.

pub mod annotate;
pub mod classifier;
pub mod config;
pub mod error;
pub mod featex;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod profiler;
pub mod synthgen;
pub mod trace_model;

pub use error::{Error, Result};
