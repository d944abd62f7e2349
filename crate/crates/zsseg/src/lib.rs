//! Generative zero-shot point-cloud segmentation at desk scale.
//!
//! A frozen per-point backbone embeds scenes into a feature space, a
//! conditional generator synthesizes features for classes that were never
//! observed, and a final classifier is trained on the union of real seen
//! features and synthetic unseen features. Generator training is shaped by
//! masked-semantics contrastive recovery, prototype alignment between the
//! semantic and visual spaces, and a relational consistency regularizer
//! over class-distance structure.
//!
//! The crate ships a procedural toy benchmark (`datagen`) where a hidden
//! linear map ties semantic embeddings to visual cluster centers, so
//! seen-to-unseen transfer is measurable end to end, plus an evaluation
//! harness (`metrics`), an experiment driver (`runner`), and text-format
//! I/O for checkpoints, scenes, configs and word vectors.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod embeddings;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
pub use numerics::matrix::Matrix;
