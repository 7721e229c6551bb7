//! Continual single-image 3D occupancy reconstruction.
//!
//! A 2D image encoder, a variational latent encoder and an occupancy decoder
//! are trained over a stream of class-disjoint sessions. Forgetting is held
//! back by a KL term against an attention-weighted blend of stored latent
//! priors and by replaying pseudo-images regenerated from saliency patches.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod iso;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod priors;
pub mod replay;
pub(crate) mod seed;
pub mod shapes;
pub mod trainer;

pub use error::{Error, Result};
