//! Streaming keyword-spotting inference engine.
//!
//! The centerpiece is an automatic graph rewrite that converts sequence
//! classifiers built for whole-utterance input into streaming models that
//! consume one frame at a time, by inserting ring-buffer states sized from
//! each layer's effective time filter size. Streaming state can live inside
//! the session (internal mode) or be threaded through extra model inputs
//! and outputs by the caller (external mode).
//!
//! The crate also ships an MFCC speech frontend (FFT and DFT transforms),
//! a zoo of keyword-spotting architectures with seeded weights, and a
//! simple self-describing model file format.

pub mod corpus;
pub mod error;
pub mod format;
pub mod frontend;
pub mod graph;
pub mod kernels;
pub mod rng;
pub mod runtime;
pub mod stream;
pub mod tensor;
pub mod wav;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Graph, LayerKind, Mode, Node, Shape};
pub use runtime::{new_session, run_non_streaming, step_external, StepResult, StreamSession};
pub use stream::{to_streaming, RingBufferSpec, StateMode, StateSpec};
pub use tensor::Tensor;
