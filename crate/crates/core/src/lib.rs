//! Cross-domain transfer evaluation for frozen pathology patch embeddings.
//!
//! The crate takes precomputed patch embeddings (EMB1 files plus JSON Lines
//! manifests) and evaluates how well they transfer across cancer types and
//! species under four classification heads: prototype zero-shot,
//! text-anchored zero-shot, a trainable linear probe, and a residual
//! bottleneck adapter. Alongside the heads it ships the upstream pixel
//! math (Otsu masking, patch planning, Macenko stain normalization,
//! anti-aliased downscaling), rank-based evaluation metrics with
//! slide-level aggregation, embedding-space collapse diagnostics, and a
//! synthetic generator that reproduces the collapse-and-recovery
//! phenomenon at desk scale.
//!
//! Everything is deterministic: seeded sampling and training, pure scoring,
//! and reports whose bytes depend only on config and inputs.

pub mod diagnostics;
pub mod embedstore;
pub mod heads;
pub mod metrics;
pub mod preprocess;
pub mod runner;
pub mod synth;
