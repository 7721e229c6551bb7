//! Binary checkpoints: `CREC`, `u16` version, `u32` latent size, a layer
//! table (name and shape per tensor), then the raw little-endian `f64` blocks
//! in table order. Anything after the last block is an opaque trailer.

use std::collections::BTreeMap;

use super::{Decoder, Encoder, LatentEncoder, Model};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CREC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub latent_dim: usize,
    pub tensors: Vec<(String, Tensor)>,
    pub trailer: Vec<u8>,
}

pub fn encode_checkpoint(
    latent_dim: usize,
    tensors: &[(String, &Tensor)],
    trailer: &[u8],
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(latent_dim as u32).to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(trailer);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "missing CREC header"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let latent_dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "layer name is not UTF-8"))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format("checkpoint", "layer too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint {
        latent_dim,
        tensors,
        trailer: bytes[r.pos..].to_vec(),
    })
}

impl Model<Tensor> {
    pub fn to_checkpoint(&self, trailer: &[u8]) -> Vec<u8> {
        encode_checkpoint(self.latent_dim(), &self.named(), trailer)
    }

    /// Rebuilds a model from named tensors, consuming the `encoder.`,
    /// `latent.` and `decoder.` entries of `map`.
    pub fn from_named(map: &mut BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing layer {name}")))
        };
        let mut three = |prefix: &str, suffix: &str| -> Result<[Tensor; 3]> {
            let v = (0..3)
                .map(|s| take(&format!("{prefix}{s}{suffix}")))
                .collect::<Result<Vec<_>>>()?;
            Ok(v.try_into().expect("three stages"))
        };
        let conv_w = three("encoder.conv", ".w")?;
        let conv_b = three("encoder.conv", ".b")?;
        let attn_proj = three("encoder.attn_proj", "")?;
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing layer {name}")))
        };
        let encoder = Encoder {
            conv_w,
            conv_b,
            fc_w: take("encoder.fc_w")?,
            fc_b: take("encoder.fc_b")?,
            attn_proj,
        };
        let latent = LatentEncoder {
            point_w: take("latent.point_w")?,
            point_b: take("latent.point_b")?,
            hidden_w: take("latent.hidden_w")?,
            hidden_b: take("latent.hidden_b")?,
            mu_w: take("latent.mu_w")?,
            mu_b: take("latent.mu_b")?,
            logsigma_w: take("latent.logsigma_w")?,
            logsigma_b: take("latent.logsigma_b")?,
        };
        let point_w = take("decoder.point_w")?;
        let code_w = take("decoder.code_w")?;
        let in_b = take("decoder.in_b")?;
        let mut hidden = Vec::new();
        while let Ok(w) = take(&format!("decoder.hidden{}.w", hidden.len())) {
            let b = take(&format!("decoder.hidden{}.b", hidden.len()))?;
            hidden.push((w, b));
        }
        let decoder = Decoder {
            point_w,
            code_w,
            in_b,
            hidden,
            out_w: take("decoder.out_w")?,
            out_b: take("decoder.out_b")?,
        };
        let model = Model {
            encoder,
            latent,
            decoder,
        };
        model.check_layout()?;
        Ok(model)
    }

    fn check_layout(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::format(
                "checkpoint",
                format!("inconsistent shape for {what}"),
            ))
        };
        let f = self.feature_dim();
        let d = self.latent_dim();
        let w = self.decoder.in_b.len();
        if self.latent.mu_w.shape().get(1) != Some(&d) || self.latent.logsigma_b.len() != d {
            return bad("latent heads");
        }
        if self.decoder.code_w.shape() != [f + d, w] || self.decoder.point_w.shape() != [3, w] {
            return bad("decoder input");
        }
        if self
            .decoder
            .hidden
            .iter()
            .any(|(hw, hb)| hw.shape() != [w, w] || hb.len() != w)
        {
            return bad("decoder hidden");
        }
        if self.decoder.out_w.shape() != [w, 1] {
            return bad("decoder output");
        }
        if self
            .encoder
            .attn_proj
            .iter()
            .zip(&self.encoder.conv_b)
            .any(|(p, b)| p.shape() != [f, b.len()])
        {
            return bad("attention projections");
        }
        Ok(())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, Vec<u8>)> {
        let ck = decode_checkpoint(bytes)?;
        let mut map: BTreeMap<String, Tensor> = ck.tensors.into_iter().collect();
        let model = Self::from_named(&mut map)?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::format(
                "checkpoint",
                format!("unexpected layer {extra}"),
            ));
        }
        if model.latent_dim() != ck.latent_dim {
            return Err(Error::format(
                "checkpoint",
                "latent size does not match the header",
            ));
        }
        Ok((model, ck.trailer))
    }
}
