//! Black-box merging of low-rank adapters.
//!
//! A pool of LoRA-style adapters is merged in two derivative-free stages,
//! both driven by CMA-ES against a loss oracle that only answers queries:
//!
//! 1. sparsity search: per-adapter retention ratios `α` for magnitude
//!    pruning of the `A` factors, with the merge weights held uniform;
//! 2. scaling search: signed per-adapter merge weights `β` over the pruned
//!    adapters.
//!
//! [`synth`] builds planted worlds with known ground truth so every claim can
//! be verified at desk scale; [`oracle`] provides the local evaluator, the
//! HTTP client and the reference server.

pub mod cmaes;
pub mod io;
pub mod lowrank;
pub mod oracle;
pub mod pipeline;
pub mod synth;
