//! Attention-only transformer as unrolled subspace denoising.
//!
//! Tokens come from a mixture of noisy low-rank Gaussians; each layer is a
//! skip connection around multi-head subspace self-attention. The crate
//! provides the forward and backward passes, the per-cluster SNR metric, an
//! exact-rate verifier for the thresholded nonlinearity and Monte Carlo
//! checks of the concentration bounds behind it.

pub mod attention;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod trace;
pub mod train;

pub use attention::{mhsa, mssa, mssa_as_mhsa, unroll, AttentionConfig, LayerStack, MhsaParams, Phi};
pub use error::{Error, Result};
pub use linalg::{Matrix, OrthonormalBasis};
pub use metrics::{snr, snr_all, verify_theorem, LemmaReport, TheoremReport};
pub use model::{sample_bases, sample_tokens, GaussianMixtureConfig, ModelDims, Partition, SubspaceModel, TokenBatch};
pub use trace::{DenoiseTrace, TraceParams};
