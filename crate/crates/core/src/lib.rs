//! Core library for the ccot evaluation harness.
//!
//! The harness runs multimodal benchmarks through a two-step prompting
//! protocol: a first call asks the model for a scene graph of the image
//! (objects, attributes, relations as JSON), a second call answers the
//! actual question with that scene graph placed in context. Everything
//! else in this crate exists to make that protocol measurable and
//! reproducible:
//!
//! - [`sg`] — scene-graph model, strict/repairing JSON parser, canonical
//!   serialization, token-size accounting
//! - [`prompt`] — byte-exact prompt assembly for the protocol and all of
//!   its ablation variants
//! - [`backend`] — chat-call abstraction: OpenAI-compatible HTTP client,
//!   record/replay cassette
//! - [`synthworld`] — deterministic synthetic scenes plus an oracle
//!   backend whose answers depend only on what is in the prompt
//! - [`bench`] — benchmark file loading and metric computation
//! - [`pipeline`] — per-task execution, answer extraction, the paired
//!   image/caption protocol, and a bounded worker pool
//! - [`runstore`] — durable, resumable run persistence (JSONL records)
//! - [`config`] — harness configuration and the config hash that guards
//!   resume integrity

pub mod backend;
pub mod bench;
pub mod config;
pub mod pipeline;
pub mod prompt;
pub mod runstore;
pub mod sg;
pub mod synthworld;
