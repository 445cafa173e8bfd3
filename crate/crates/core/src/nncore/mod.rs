//! Dense multilayer perceptrons with hand-written reverse-mode gradients.
//!
//! Every actor and critic in the crate is an [`MlpNet`]: ReLU hidden layers
//! and an identity or `tanh` output head. Batched forward/backward passes take
//! row-major `(batch, dim)` matrices; the single-sample [`MlpNet::forward`] and
//! [`MlpNet::backward`] are thin wrappers over a batch of one.
//!
//! Parameters have one canonical flat order, used by [`ParamVector`], by
//! [`AdamState`] and by the checkpoint format:
//!
//! ```text
//! for each layer l (input side first):
//!     W_l   row-major, shape (layer_sizes[l + 1], layer_sizes[l])
//!     b_l   length layer_sizes[l + 1]
//! ```

mod adam;
mod checkpoint;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use mlp::{param_count, soft_update, ForwardCache, Gradients, MlpNet, OutputActivation, ParamVector};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite gradient component at flat index {index} (layer {layer})")]
    NonFiniteGradient { layer: usize, index: usize },
    #[error("architecture mismatch: {expected:?} vs {actual:?}")]
    Architecture {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid layer sizes {0:?}: need at least two positive sizes")]
    InvalidLayers(Vec<usize>),
    #[error("soft-update rate {0} outside [0, 1]")]
    InvalidTau(f64),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
