use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::priors::AttentionWeights;

/// Parameters plus everything needed to continue the stream: the next
/// session index, the shuffling RNG and the current attention logits.
/// Optimizer momentum starts from zero in every session, so checkpoints taken
/// at session boundaries carry no velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub session: usize,
    pub epoch: usize,
    pub model: ModelParams,
    pub rng: ChaCha8Rng,
    pub attention: Option<AttentionWeights>,
}

/// Trailer stored after the parameter blocks of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerTrailer {
    pub session: usize,
    pub epoch: usize,
    /// Hex-encoded 32-byte ChaCha seed.
    pub rng_seed: String,
    pub rng_stream: u64,
    /// Decimal word position (exceeds 64 bits in principle).
    pub rng_word_pos: String,
    pub attention: Option<AttentionWeights>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(TrainState {
            session: 0,
            epoch: 0,
            model: ModelParams::init(&cfg.model, cfg.data.image_size, cfg.seed)?,
            rng: crate::seed::rng(cfg.seed, &[0x7EA1]),
            attention: None,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let seed: String = self
            .rng
            .get_seed()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let trailer = TrainerTrailer {
            session: self.session,
            epoch: self.epoch,
            rng_seed: seed,
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            attention: self.attention.clone(),
        };
        Ok(self.model.to_checkpoint(&serde_json::to_vec(&trailer)?))
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        use rand::SeedableRng;
        let (model, trailer) = ModelParams::from_checkpoint(bytes)?;
        let t: TrainerTrailer = serde_json::from_slice(&trailer)?;
        let bad = || Error::format("checkpoint trailer", "bad rng state");
        if t.rng_seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&t.rng_seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(t.rng_stream);
        rng.set_word_pos(t.rng_word_pos.parse().map_err(|_| bad())?);
        Ok(TrainState {
            session: t.session,
            epoch: t.epoch,
            model,
            rng,
            attention: t.attention,
        })
    }
}
