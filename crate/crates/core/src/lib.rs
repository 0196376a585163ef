//! Parameter-efficient transfer learning on small Vision Transformers.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`], [`param`], [`gradcheck`]: a dense reverse-mode autodiff engine.
//! - [`vit`] and [`checkpoint`]: the backbone and its on-disk format.
//! - [`petl`]: transfer methods (full, linear, partial-k, mlp-k, bias, adapter,
//!   side-tune, prompt tuning and dynamic prompt tuning with a Meta-Net).
//! - [`train`]: masked optimization, evaluation and the seed protocol.
//! - [`data`]: deterministic synthetic tasks and the binary image corpus.
//! - [`runner`]: config-driven experiment matrices and ablations.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod petl;
pub mod runner;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::{DType, Element, Tensor};
