use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// 2D image encoder: three stride-2 conv stages and a dense head. The
/// `attn_proj` matrices project the feature vector onto each stage's channel
/// dimension for saliency scoring; they do not enter the reconstruction loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub conv_w: [T; 3],
    pub conv_b: [T; 3],
    pub fc_w: T,
    pub fc_b: T,
    pub attn_proj: [T; 3],
}

/// Maps (image feature, point-set summary) to a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEncoder<T> {
    pub point_w: T,
    pub point_b: T,
    pub hidden_w: T,
    pub hidden_b: T,
    pub mu_w: T,
    pub mu_b: T,
    pub logsigma_w: T,
    pub logsigma_b: T,
}

/// Point-conditioned occupancy MLP over `point ⊕ feature ⊕ z`. The first
/// layer's weight is split into its point and code blocks so the code
/// contribution is computed once per object.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub point_w: T,
    pub code_w: T,
    pub in_b: T,
    pub hidden: Vec<(T, T)>,
    pub out_w: T,
    pub out_b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub encoder: Encoder<T>,
    pub latent: LatentEncoder<T>,
    pub decoder: Decoder<T>,
}

pub type ModelParams = Model<Tensor>;

macro_rules! visit_fields {
    ($self:ident, $f:ident, $prefix:literal, [$($field:ident),*]) => {
        $( $f(concat!($prefix, ".", stringify!($field)).to_string(), &$self.$field)?; )*
    };
}

impl<T> Encoder<T> {
    pub fn try_visit<'a, E>(
        &'a self,
        f: &mut dyn FnMut(String, &'a T) -> Result<(), E>,
    ) -> Result<(), E> {
        for s in 0..3 {
            f(format!("encoder.conv{s}.w"), &self.conv_w[s])?;
            f(format!("encoder.conv{s}.b"), &self.conv_b[s])?;
        }
        visit_fields!(self, f, "encoder", [fc_w, fc_b]);
        for s in 0..3 {
            f(format!("encoder.attn_proj{s}"), &self.attn_proj[s])?;
        }
        Ok(())
    }

    pub fn try_map<U, E>(
        &self,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<Encoder<U>, E> {
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for s in 0..3 {
            conv_w.push(f(format!("encoder.conv{s}.w"), &self.conv_w[s])?);
            conv_b.push(f(format!("encoder.conv{s}.b"), &self.conv_b[s])?);
        }
        let fc_w = f("encoder.fc_w".into(), &self.fc_w)?;
        let fc_b = f("encoder.fc_b".into(), &self.fc_b)?;
        let mut attn = Vec::new();
        for s in 0..3 {
            attn.push(f(format!("encoder.attn_proj{s}"), &self.attn_proj[s])?);
        }
        let arr = |v: Vec<U>| -> [U; 3] { v.try_into().ok().expect("three stages") };
        Ok(Encoder {
            conv_w: arr(conv_w),
            conv_b: arr(conv_b),
            fc_w,
            fc_b,
            attn_proj: arr(attn),
        })
    }
}

impl<T> LatentEncoder<T> {
    pub fn try_visit<'a, E>(
        &'a self,
        f: &mut dyn FnMut(String, &'a T) -> Result<(), E>,
    ) -> Result<(), E> {
        visit_fields!(
            self,
            f,
            "latent",
            [point_w, point_b, hidden_w, hidden_b, mu_w, mu_b, logsigma_w, logsigma_b]
        );
        Ok(())
    }

    pub fn try_map<U, E>(
        &self,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<LatentEncoder<U>, E> {
        Ok(LatentEncoder {
            point_w: f("latent.point_w".into(), &self.point_w)?,
            point_b: f("latent.point_b".into(), &self.point_b)?,
            hidden_w: f("latent.hidden_w".into(), &self.hidden_w)?,
            hidden_b: f("latent.hidden_b".into(), &self.hidden_b)?,
            mu_w: f("latent.mu_w".into(), &self.mu_w)?,
            mu_b: f("latent.mu_b".into(), &self.mu_b)?,
            logsigma_w: f("latent.logsigma_w".into(), &self.logsigma_w)?,
            logsigma_b: f("latent.logsigma_b".into(), &self.logsigma_b)?,
        })
    }
}

impl<T> Decoder<T> {
    pub fn try_visit<'a, E>(
        &'a self,
        f: &mut dyn FnMut(String, &'a T) -> Result<(), E>,
    ) -> Result<(), E> {
        visit_fields!(self, f, "decoder", [point_w, code_w, in_b]);
        for (i, (w, b)) in self.hidden.iter().enumerate() {
            f(format!("decoder.hidden{i}.w"), w)?;
            f(format!("decoder.hidden{i}.b"), b)?;
        }
        visit_fields!(self, f, "decoder", [out_w, out_b]);
        Ok(())
    }

    pub fn try_map<U, E>(
        &self,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<Decoder<U>, E> {
        let point_w = f("decoder.point_w".into(), &self.point_w)?;
        let code_w = f("decoder.code_w".into(), &self.code_w)?;
        let in_b = f("decoder.in_b".into(), &self.in_b)?;
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for (i, (w, b)) in self.hidden.iter().enumerate() {
            hidden.push((
                f(format!("decoder.hidden{i}.w"), w)?,
                f(format!("decoder.hidden{i}.b"), b)?,
            ));
        }
        Ok(Decoder {
            point_w,
            code_w,
            in_b,
            hidden,
            out_w: f("decoder.out_w".into(), &self.out_w)?,
            out_b: f("decoder.out_b".into(), &self.out_b)?,
        })
    }
}

impl<T> Model<T> {
    pub fn try_visit<'a, E>(
        &'a self,
        f: &mut dyn FnMut(String, &'a T) -> Result<(), E>,
    ) -> Result<(), E> {
        self.encoder.try_visit(f)?;
        self.latent.try_visit(f)?;
        self.decoder.try_visit(f)
    }

    pub fn try_map<U, E>(
        &self,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<Model<U>, E> {
        Ok(Model {
            encoder: self.encoder.try_map(f)?,
            latent: self.latent.try_map(f)?,
            decoder: self.decoder.try_map(f)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(String, &T) -> U) -> Model<U> {
        let r: Result<Model<U>, std::convert::Infallible> = self.try_map(&mut |n, t| Ok(f(n, t)));
        match r {
            Ok(m) => m,
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        let _ = self.try_visit::<std::convert::Infallible>(&mut |n, t| {
            out.push((n, t));
            Ok(())
        });
        out
    }

    /// Zips two trees with identical layout; `f` sees the matching leaves.
    pub fn zip_map<U, V>(&self, other: &Model<U>, mut f: impl FnMut(&T, &U) -> V) -> Model<V> {
        let others = other.named();
        let mut i = 0;
        self.map(|_, t| {
            let v = f(t, others[i].1);
            i += 1;
            v
        })
    }
}

fn he(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// Initial bias of the log-σ head (σ ≈ 0.14).
pub const LOGSIGMA_INIT: f64 = -2.0;

impl Model<Tensor> {
    /// Seeded He initialization for a square `image_size` input.
    pub fn init(cfg: &ModelConfig, image_size: usize, seed: u64) -> Result<Self> {
        if !image_size.is_multiple_of(8) || image_size < 16 {
            return Err(Error::config(
                "data.image_size",
                "must be a multiple of 8 and >= 16",
            ));
        }
        let mut rng = crate::seed::rng(seed, &[0x1417]);
        let ch = cfg.encoder_channels;
        let ins = [1, ch[0], ch[1]];
        let conv_w = [0, 1, 2].map(|s| he(&mut rng, &[ch[s], ins[s], 3, 3], ins[s] * 9, 1.0));
        let conv_b = [0, 1, 2].map(|s| Tensor::zeros(&[ch[s]]));
        let flat = ch[2] * (image_size / 8) * (image_size / 8);
        let f = cfg.feature_dim;
        let encoder = Encoder {
            conv_w,
            conv_b,
            fc_w: he(&mut rng, &[flat, f], flat, 0.5),
            fc_b: Tensor::zeros(&[1, f]),
            attn_proj: [0, 1, 2].map(|s| he(&mut rng, &[f, ch[s]], f, 0.5)),
        };

        let (pe, lh, d) = (cfg.point_embed_dim, cfg.latent_hidden, cfg.latent_dim);
        let latent = LatentEncoder {
            point_w: he(&mut rng, &[4, pe], 4, 1.0),
            point_b: Tensor::zeros(&[1, pe]),
            hidden_w: he(&mut rng, &[f + pe, lh], f + pe, 1.0),
            hidden_b: Tensor::zeros(&[1, lh]),
            mu_w: he(&mut rng, &[lh, d], lh, 0.5),
            mu_b: Tensor::zeros(&[1, d]),
            logsigma_w: he(&mut rng, &[lh, d], lh, 0.05),
            logsigma_b: Tensor::full(&[1, d], LOGSIGMA_INIT),
        };

        let w = cfg.decoder_width;
        let fan_first = 3 + f + d;
        let hidden = (1..cfg.decoder_depth)
            .map(|_| (he(&mut rng, &[w, w], w, 1.0), Tensor::zeros(&[1, w])))
            .collect();
        let decoder = Decoder {
            point_w: he(&mut rng, &[3, w], fan_first, 1.0),
            code_w: he(&mut rng, &[f + d, w], fan_first, 1.0),
            in_b: Tensor::zeros(&[1, w]),
            hidden,
            out_w: he(&mut rng, &[w, 1], w, 0.5),
            out_b: Tensor::zeros(&[1, 1]),
        };
        Ok(Model {
            encoder,
            latent,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.mu_b.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.fc_b.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Result<Model<Var>> {
        self.try_map(&mut |_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn zeros_like(&self) -> Model<Tensor> {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn is_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }
}

impl Encoder<Tensor> {
    pub fn to_tape(&self, tape: &mut Tape) -> Result<Encoder<Var>> {
        self.try_map(&mut |_, t| tape.constant(t.clone()))
    }
}

impl LatentEncoder<Tensor> {
    pub fn to_tape(&self, tape: &mut Tape) -> Result<LatentEncoder<Var>> {
        self.try_map(&mut |_, t| tape.constant(t.clone()))
    }
}

impl Decoder<Tensor> {
    pub fn to_tape(&self, tape: &mut Tape) -> Result<Decoder<Var>> {
        self.try_map(&mut |_, t| tape.constant(t.clone()))
    }

    /// Zeroes the output layer so every prediction is exactly 0.5.
    pub fn zero_output(&mut self) {
        self.out_w.data_mut().fill(0.0);
        self.out_b.data_mut().fill(0.0);
    }
}
