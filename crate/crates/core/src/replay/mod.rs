//! Saliency extraction, patch harvesting, pseudo-image regeneration and the
//! replay buffer with per-object memory accounting.

mod buffer;
mod entry;
mod patches;
mod saliency;

pub use buffer::{BufferSize, BufferSpec, ReplayBuffer, ReplaySample};
pub use entry::{
    blend_canvas, capture_entry, regenerate_pseudo, upsample_bilinear, CaptureOptions, Payload,
    ReplayEntry, BAND_RADIUS,
};
pub use patches::{connected_components, extract_local_patches, threshold_mask, Mask, Patch};
pub use saliency::{attention_from_features, compute_saliency, upsample_normalized, SaliencyMap};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStrategy {
    Exact,
    ZeroPad,
    CompAndInt,
    RandomPatch,
    Compressed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMode {
    Dot,
    Additive,
}
