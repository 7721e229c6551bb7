//! Single-view reconstruction network: image encoder, latent encoder over
//! occupancy samples and a point-conditioned occupancy decoder.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{
    bce_loss, canonical_points, decode_logits, decode_occupancy, encode_image, encode_latent,
    reparameterize, EncodedImage, LatentVars, LOGSIGMA_MAX, LOGSIGMA_MIN,
};
pub use params::{Decoder, Encoder, LatentEncoder, Model, ModelParams, LOGSIGMA_INIT};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::shapes::{PointSample, RenderedView};

/// Query points per decoder pass during inference.
pub const DECODE_CHUNK: usize = 4096;

/// Diagonal Gaussian over the latent code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Dimension {
                op: "gaussian",
                left: vec![mu.len()],
                right: vec![sigma.len()],
            });
        }
        if let Some(i) = sigma.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Domain {
                op: "gaussian",
                detail: format!("sigma[{i}] = {} is not positive", sigma[i]),
            });
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite {
                op: "gaussian",
                index: 0,
            });
        }
        Ok(GaussianLatent { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianLatent {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

impl Model<Tensor> {
    /// Image feature `e` and the three stage maps as `[C, H, W]` tensors.
    pub fn encode_view(&self, view: &RenderedView) -> Result<(Vec<f64>, [Tensor; 3])> {
        let mut tape = Tape::new();
        let enc = self.encoder.to_tape(&mut tape)?;
        let out = encode_image(&mut tape, &enc, view)?;
        let maps = out.maps.map(|m| tape.value(m).clone());
        Ok((tape.value(out.feature).data().to_vec(), maps))
    }

    pub fn posterior(&self, feature: &[f64], sample: &PointSample) -> Result<GaussianLatent> {
        let mut tape = Tape::new();
        let lat = self.latent.to_tape(&mut tape)?;
        let e = tape.constant(Tensor::row(feature.to_vec()))?;
        let q = encode_latent(&mut tape, &lat, e, sample)?;
        GaussianLatent::new(
            tape.value(q.mu).data().to_vec(),
            tape.value(q.sigma).data().to_vec(),
        )
    }

    /// Occupancy probabilities at `points`, evaluated in fixed-size chunks.
    /// Rows are independent, so the result does not depend on chunking.
    pub fn decode(&self, feature: &[f64], z: &[f64], points: &[[f64; 3]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(DECODE_CHUNK) {
            let mut tape = Tape::new();
            let dec = self.decoder.to_tape(&mut tape)?;
            let e = tape.constant(Tensor::row(feature.to_vec()))?;
            let zv = tape.constant(Tensor::row(z.to_vec()))?;
            let p = decode_occupancy(&mut tape, &dec, e, zv, chunk)?;
            out.extend_from_slice(tape.value(p).data());
        }
        Ok(out)
    }
}
