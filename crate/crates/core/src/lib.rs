//! Text-conditioned latent diffusion for cross-modal face recognition.
//!
//! A recognition encoder is split into an early branch producing latents and a
//! late branch producing recognition features. A conditional denoiser learns to
//! generate latents from attribute prompts, and a small refiner maps sampled
//! latents into the feature space where they are scored against image features.
//!
//! All model code is generic over [`Scalar`]; the aliases at the crate root fix
//! it to `f64`, which is what training and gradient checking use.

pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod prompts;
pub mod refiner;
pub mod scalar;
pub mod schedule;
pub mod seeding;
pub mod synthworld;

pub use error::{Error, Result};
pub use encoder::EncoderParams;
pub use numerics::{Mlp, MlpTape, NumericArray, Parameter, Params};
pub use scalar::Scalar;

pub type Array = NumericArray<f64>;
pub type Schedule = schedule::NoiseSchedule<f64>;
pub type Encoder = encoder::EncoderParams<f64>;
pub type Denoiser = diffusion::Denoiser<f64>;
pub type Refiner = refiner::Refiner<f64>;
pub type Dataset = synthworld::SyntheticDataset<f64>;
