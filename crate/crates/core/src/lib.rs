//! Layout-guided text-to-glyph diffusion at desk scale.
//!
//! The crate is built bottom-up:
//!
//! - [`tensor`], [`tape`], [`optim`], [`rng`], [`gradcheck`]: a small
//!   reverse-mode engine with Adam and deterministic random streams.
//! - [`align`]: prompt tokenizer, text/image encoders, the clause composition
//!   module and the contrastive alignment loss.
//! - [`diffusion`]: noise schedule, forward process and ancestral sampler.
//! - [`guidance`]: the layout generator and the layout-conditioned denoiser.
//! - [`data`]: the synthetic glyph world (scenes, renders, dataset files, PGM).
//! - [`metrics`]: template OCR, clip and Fréchet proxies.
//! - [`config`], [`checkpoint`], [`model`], [`train`], [`pipeline`]: run
//!   plumbing used by the `vlad` binary.
//!
//! With the default `parallel` feature, data-parallel work (kernels, scene
//! generation, sampling, OCR) runs on rayon; without it the same code runs
//! sequentially and produces identical bytes.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{Ablation, RunConfig};
pub use error::{Error, Result, TensorError};
pub use model::Vlad;
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
