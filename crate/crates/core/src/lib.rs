//! Attention-guided visual-tactile fusion for grasp stability prediction.
//!
//! A desk-scale, dependency-light stack: a tape-based autodiff tensor core,
//! the dual-stream attention fusion network, a planted-rule synthetic
//! visual-tactile dataset, training/evaluation with 3-fold cross-validation
//! and an ablation ladder, the minimum-force grasping policy, and an
//! LSGAN-based tactile image translation trainer with SSIM evaluation.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gan;
pub(crate) mod io_util;
pub mod ssim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{grad_check, Tape, Tensor, TensorId};
