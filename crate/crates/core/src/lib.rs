//! Zero-shot joint audio-video editing in latent space.
//!
//! Target latents for video and audio are optimized together: a
//! delta-denoising gradient compares guided noise predictions of a target
//! and a source branch, and a patch-level contrastive term ties
//! prompt-relevant audio patches to prompt-relevant video patches while
//! anchoring irrelevant regions to the source.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod contrastive;
pub mod edit;
pub mod error;
pub mod grid;
pub mod guidance;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod relevance;
pub mod rng;
pub mod sampler;
pub mod selftest;

pub use backend::{Backends, Denoiser, Modality};
pub use edit::{run_edit, EditConfig, EditOutcome, RunLog, StepRecord};
pub use error::{Error, Result};
pub use latent::{AudioLatent, PromptPair, VideoLatent};
