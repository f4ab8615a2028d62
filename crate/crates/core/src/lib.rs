//! Building blocks for developing small, hardware-efficient nanopore
//! basecallers end to end: a minimal autodiff tensor engine, fake
//! quantization with mixed-precision cost accounting, CTC loss and
//! decoding, a configurable quantized 1D-CNN basecaller, differentiable
//! architecture search with a latency cost model, skip-connection
//! removal by knowledge distillation, magnitude pruning, a synthetic
//! squiggle simulator, and alignment-based evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod fd;
pub mod net;
pub mod prune;
pub mod qabas;
pub mod quant;
pub mod sim;
pub mod skipclip;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
