//! Event-gated flow matching on synthetic latent videos.
//!
//! The crate covers latent tensors and patchification, the synthetic
//! contact-scene generator, flow-matching interpolation, a small diffusion
//! transformer with hand-written gradients, an event head, the event gate,
//! guided sampling, the training objective and loop, and pseudo-event
//! targets derived from latent change.

pub mod backbone;
pub mod error;
pub mod flow;
pub mod gating;
pub mod latent;
pub mod losses;
pub mod params;
pub mod pseudo;
pub mod rng;
pub mod sampling;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{EvdError, Result};
