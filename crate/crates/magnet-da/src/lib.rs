//! Desk-scale unsupervised domain adaptation.
//!
//! The crate trains a densely connected convolutional classifier on a labeled
//! source domain and an unlabeled target domain jointly, matching feature
//! distributions at several depths with MMD losses and sharpening target
//! predictions with an entropy term, while a small residual block bridges the
//! source and target classifiers. Synthetic photo / CAD / sketch shape
//! datasets provide controllable cross-modality tasks, and everything is
//! deterministic given a seed.
//!
//! Module map:
//! - [`tensor`] / [`autodiff`]: dense `f64` tensors and tape-based reverse-mode
//!   differentiation, with a finite-difference gradient checker.
//! - [`losses`]: Gaussian-kernel MMD, entropy, softmax NLL, and the combined
//!   training objective.
//! - [`network`]: the dense-block backbone, transition layers A/B with MMD
//!   taps, and the residual source/target classifier pair.
//! - [`data`]: synthetic dataset generation, the `DMDS` file format, splits.
//! - [`train`]: Nesterov-momentum training loop, evaluation, experiments.
//! - [`checkpoint`]: the `DMCK` model checkpoint format.
//! - [`cli`]: config-file parsing and run manifests for the `magnet-da` binary.

pub mod autodiff;
pub mod losses;
pub mod network;
pub mod bytesio;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{MagnetError, Result};
pub use tensor::Tensor;

/// Keep freed heap pages pooled in the process instead of handing them back
/// to the OS. Training allocates and frees megabyte-scale activation buffers
/// every iteration; with glibc's default trim behavior each round trip costs
/// a page-fault storm, which dominates the runtime in sandboxed kernels.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
pub(crate) fn tune_allocator() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 * 1024 * 1024);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 64 * 1024 * 1024);
        libc::mallopt(libc::M_TOP_PAD, 16 * 1024 * 1024);
    });
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
pub(crate) fn tune_allocator() {}
