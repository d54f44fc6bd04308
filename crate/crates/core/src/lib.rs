//! Mixed-precision bit allocation driven by layer class separability.
//!
//! The pipeline: pool per-layer feature maps, score each layer with a masked
//! TF-IDF separability measure, map scores to importances, solve a budgeted
//! linear program for per-layer weight bit-widths, then simulate the
//! resulting quantization on a small CNN.

pub mod allocator;
pub mod feature_store;
pub mod pipeline;
pub mod quantsim;
pub mod report;
pub mod separability;
pub mod tensor;

pub use tensor::Tensor;
