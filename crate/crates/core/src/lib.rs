//! Weakly supervised landmark grounding for navigation instructions.
//!
//! The crate covers the whole path from timestamped instructions and pose
//! traces to generator-ready route templates:
//!
//! * [`data`]: corpus types, JSON/JSONL formats, pose-trace subsampling.
//! * [`phrases`]: landmark phrase extraction from CoNLL-U parses.
//! * [`embeddings`]: text/image embedding providers and projection heads.
//! * [`alignment`]: timestamp-biased logits, CTC loss and gradients,
//!   finetuning, forced-alignment decoding and precision scoring.
//! * [`geometry`]: equirectangular boxes, detector inputs, refinement, de-duplication.
//! * [`route`]: detection pooling, outbound landmarks and template encoding.
//! * [`metrics`]: NE, SR, SPL, NDTW and SDTW over a navigation graph.
//! * [`pipeline`]: the staged end-to-end run and its on-disk artifacts.

pub mod alignment;
pub mod angles;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod phrases;
pub mod pipeline;
pub mod report;
pub mod route;
pub mod synthetic;

pub use error::{Error, Result};
