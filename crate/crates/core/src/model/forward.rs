use std::cmp::Ordering;

use super::{Decoder, Encoder, LatentEncoder};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::shapes::{PointSample, RenderedView};

pub const LOGSIGMA_MIN: f64 = -6.0;
pub const LOGSIGMA_MAX: f64 = 2.0;

/// Image feature and the post-activation map of each conv stage.
#[derive(Clone, Copy, Debug)]
pub struct EncodedImage {
    pub feature: Var,
    pub maps: [Var; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub sigma: Var,
}

pub fn encode_image(
    tape: &mut Tape,
    enc: &Encoder<Var>,
    view: &RenderedView,
) -> Result<EncodedImage> {
    let expected = tape.value(enc.fc_w).shape()[0];
    let channels = tape.value(enc.conv_w[2]).shape()[0];
    if view.width != view.height
        || channels * (view.width / 8) * (view.height / 8) != expected
        || !view.width.is_multiple_of(8)
    {
        return Err(Error::Dimension {
            op: "encode_image",
            left: vec![view.height, view.width],
            right: vec![expected],
        });
    }
    let mut x = tape.constant(Tensor::new(
        vec![1, view.height, view.width],
        view.pixels.clone(),
    )?)?;
    let mut maps = Vec::with_capacity(3);
    for s in 0..3 {
        let c = tape.conv2d(x, enc.conv_w[s], 2, 1)?;
        let c = tape.add_channel_bias(c, enc.conv_b[s])?;
        x = tape.relu(c)?;
        maps.push(x);
    }
    let flat = tape.reshape(x, vec![1, expected])?;
    let h = tape.matmul(flat, enc.fc_w)?;
    let feature = tape.add_row(h, enc.fc_b)?;
    Ok(EncodedImage {
        feature,
        maps: [maps[0], maps[1], maps[2]],
    })
}

/// Rows `(x, y, z, occ)` in a canonical order, so the summary the latent
/// encoder sees does not depend on how the sample was ordered.
pub fn canonical_points(sample: &PointSample) -> Vec<[f64; 4]> {
    let mut rows: Vec<[f64; 4]> = sample
        .points
        .iter()
        .zip(&sample.occupancy)
        .map(|(p, &o)| [p[0], p[1], p[2], o])
        .collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    rows
}

pub fn encode_latent(
    tape: &mut Tape,
    lat: &LatentEncoder<Var>,
    feature: Var,
    sample: &PointSample,
) -> Result<LatentVars> {
    if sample.is_empty() {
        return Err(Error::contract("latent encoder needs at least one point"));
    }
    let rows = canonical_points(sample);
    let x = tape.constant(Tensor::new(vec![rows.len(), 4], rows.concat())?)?;
    let h = tape.matmul(x, lat.point_w)?;
    let h = tape.add_row(h, lat.point_b)?;
    let h = tape.relu(h)?;
    let pooled = tape.mean_rows(h)?;
    let joint = tape.concat(&[feature, pooled])?;
    let h = tape.matmul(joint, lat.hidden_w)?;
    let h = tape.add_row(h, lat.hidden_b)?;
    let h = tape.relu(h)?;
    let mu = tape.matmul(h, lat.mu_w)?;
    let mu = tape.add_row(mu, lat.mu_b)?;
    let ls = tape.matmul(h, lat.logsigma_w)?;
    let ls = tape.add_row(ls, lat.logsigma_b)?;
    let ls = tape.clamp(ls, LOGSIGMA_MIN, LOGSIGMA_MAX)?;
    let sigma = tape.exp(ls)?;
    Ok(LatentVars { mu, sigma })
}

/// `z = μ + σ ⊙ ε` for a fixed noise row `eps`.
pub fn reparameterize(tape: &mut Tape, q: LatentVars, eps: &[f64]) -> Result<Var> {
    let eps = tape.constant(Tensor::row(eps.to_vec()))?;
    let noise = tape.mul(q.sigma, eps)?;
    tape.add(q.mu, noise)
}

/// Occupancy logits `[N, 1]` for `points` given the object code `(feature, z)`.
pub fn decode_logits(
    tape: &mut Tape,
    dec: &Decoder<Var>,
    feature: Var,
    z: Var,
    points: &[[f64; 3]],
) -> Result<Var> {
    if points.is_empty() {
        return Err(Error::contract("decoder needs at least one query point"));
    }
    let code = tape.concat(&[feature, z])?;
    let c = tape.matmul(code, dec.code_w)?;
    let c = tape.add_row(c, dec.in_b)?;
    let p = tape.constant(Tensor::new(vec![points.len(), 3], points.concat())?)?;
    let h = tape.matmul(p, dec.point_w)?;
    let h = tape.add_row(h, c)?;
    let mut h = tape.relu(h)?;
    for &(w, b) in &dec.hidden {
        let a = tape.matmul(h, w)?;
        let a = tape.add_row(a, b)?;
        h = tape.relu(a)?;
    }
    let out = tape.matmul(h, dec.out_w)?;
    tape.add_row(out, dec.out_b)
}

pub fn decode_occupancy(
    tape: &mut Tape,
    dec: &Decoder<Var>,
    feature: Var,
    z: Var,
    points: &[[f64; 3]],
) -> Result<Var> {
    let logits = decode_logits(tape, dec, feature, z, points)?;
    tape.sigmoid(logits)
}

/// Mean BCE of the decoder's probabilities at `sample`'s points.
pub fn bce_loss(
    tape: &mut Tape,
    dec: &Decoder<Var>,
    feature: Var,
    z: Var,
    sample: &PointSample,
) -> Result<Var> {
    let probs = decode_occupancy(tape, dec, feature, z, &sample.points)?;
    tape.bce(probs, &sample.occupancy)
}
