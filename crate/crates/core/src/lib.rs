//! Streaming last-layer continual learning for binarized keyword-spotting networks.
//!
//! The crate covers the whole pipeline: a log-mel front-end, a frozen
//! binarized feature extractor, seven head-only update rules, a FLOP cost
//! model, dataset splitting and stream construction, and an experiment
//! harness that ties them together.

pub mod audio;
pub mod bnn;
pub mod cl;
pub mod dataset;
pub mod flops;
pub mod harness;
pub mod rng;
pub mod synthetic;
