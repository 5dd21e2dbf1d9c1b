//! Inverted activations: pointwise GELU/SiLU layers that save the layer
//! *output* for the backward pass instead of the input.
//!
//! A pointwise nonlinearity normally keeps its input tensor alive until the
//! backward pass so it can evaluate `f'(x)`. When the next layer in the graph
//! also saves its own input (which equals this layer's output), the pair ends
//! up holding two large tensors where one would do. Saving the output `y`
//! instead lets the two layers share a single tensor; the backward pass then
//! needs `f'(f⁻¹(y))`, which this crate evaluates through closed-form
//! per-branch approximations plus a one-bit indicator that records which
//! monotone half of `f` the input came from.
//!
//! Module map:
//!
//! - [`activation`] — exact GELU/SiLU math, branch geometry, a bisection
//!   inverse oracle, and the `q(y) ≈ f'(f⁻¹(y))` approximations with error
//!   measurement.
//! - [`codec`] — the three indicator encodings: bit-packed boolean arrays,
//!   sign-bit embedding, and mantissa-LSB embedding.
//! - [`layer`] — forward/backward kernels over flat tensors for each saving
//!   strategy, plus analytic memory accounting for layer blocks.
//! - [`quant`] — a Lloyd-Max k-bit gradient quantizer baseline for accuracy
//!   comparisons.
//! - [`tape`] — a minimal reverse-mode tape (Linear / activation / GeGLU /
//!   losses), gradient checking, and a paired-seed training harness.
//! - [`bench`] — micro-benchmark presets and runners used by the CLI.
//! - [`kv`] — the plain-text `key=value` file format shared by coefficient
//!   sets, quantizer tables, and configs.

pub mod activation;
pub mod bench;
pub mod codec;
pub mod kv;
pub mod layer;
mod math;
pub mod quant;
pub mod tape;

pub use activation::{ActivationKind, Branch, BranchCoefficients, ErrorReport, Measure};
pub use codec::PackedBits;
pub use layer::{ElementFormat, SavedActivation, Strategy, Tensor};

use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    Domain(String),
    /// Structurally invalid arguments (shape or length mismatch, bad code).
    Argument(String),
    /// Malformed text in a key-value file or config.
    Parse(String),
    /// An iterative procedure failed to converge.
    NonConvergence(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Argument(msg) => write!(f, "argument error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::NonConvergence(msg) => write!(f, "no convergence: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
