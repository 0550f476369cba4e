//! Task-specific adaptation of a frozen promptable segmenter.
//!
//! A miniature promptable backbone (image encoder, point-prompt encoder and a
//! three-mask decoder) is pretrained once and frozen. Adaptation trains only a
//! prompt learning module, which adds a residual offset to the prompt
//! embedding, and a point matching module, which refines boundary points
//! sampled from decoder features.

pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod image;
pub mod backbone;
pub mod plm;
pub mod pmm;
pub mod losses;
pub mod synth;
pub mod checkpoint;
pub mod trainer;
pub mod eval;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
