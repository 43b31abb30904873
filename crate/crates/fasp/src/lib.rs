//! Attention-head ablation workbench for decoder-only transformers.
//!
//! The crate measures what each attention head contributes to language-modeling
//! perplexity and to subgroup toxicity disparity (a social-bias metric), then
//! prunes heads under several strategies:
//!
//! - `fasp` — protect the heads most critical for perplexity, then prune the
//!   most bias-promoting of the rest;
//! - `fairness_only`, `performance_only`, `magnitude`, `gradient`, `random` —
//!   baseline strategies for comparison.
//!
//! Pruning is realized as per-head multiplicative gates on each head's context
//! vector, so a "pruned" model is the original weights plus a gate mask.
//!
//! Module map:
//!
//! - [`tensor`] — dense row-major f32 tensors and the small op set the forward
//!   pass needs (matmul, softmax, layer norm, GELU) plus Pearson correlation.
//! - [`rng`] — the documented counter-based RNG behind every seeded decision.
//! - [`tokenizer`] — byte-level (default) and word-level text/token codecs.
//! - [`model`] — gated transformer forward pass, perplexity, seeded sampling.
//! - [`weights_io`] — binary weight container and seeded toy-model factory.
//! - [`bias_eval`] — prompt datasets, toxicity scorers, the disparity metric.
//! - [`head_scoring`] — per-head ablation scores with a content-hash cache.
//! - [`pruning`] — plan construction for all strategies and sweep evaluation.
//! - [`analysis`] — cross-category score correlation, overlap sets, reports.

pub mod analysis;
pub mod bias_eval;
pub mod hashing;
pub mod head_scoring;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod weights_io;

pub use model::{HeadGateMask, HeadId, ModelConfig, ModelWeights, PerplexityResult};
pub use tensor::TensorF32;
