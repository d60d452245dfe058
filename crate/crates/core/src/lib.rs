//! Instance-aware graph prompt learning at desk scale.
//!
//! A frozen message-passing backbone encodes each graph; a bottleneck of
//! parameterized hypercomplex multiplication (PHM) layers maps node
//! embeddings to intermediate prompts; those are quantized against an
//! EMA-trained codebook by temperature-controlled sampling, fused with a
//! shared static prompt, added to the embedded node features, and the
//! prompted graph is re-encoded for classification.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, checkpoints
//! and the command line live in the `gprompt` companion crate.

#![no_std]

extern crate alloc;

pub mod backbone;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod phm;
pub mod prompt;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vq;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Parameters, Tensor, TensorId};
