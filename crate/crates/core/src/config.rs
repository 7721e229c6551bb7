//! Run configuration: a single JSON document with defaults for every key.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::{ReplayStrategy, SaliencyMode};
use crate::shapes::ShapeClass;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub replay: ReplayConfig,
    pub mesh: MeshConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            replay: ReplayConfig::default(),
            mesh: MeshConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Classes in stream order (before optional shuffling).
    pub classes: Vec<ShapeClass>,
    /// Number of classes per session, consumed in order.
    pub sessions: Vec<usize>,
    /// Explicit class-to-session assignment; overrides `classes`/`sessions`.
    pub assignment: Option<Vec<Vec<ShapeClass>>>,
    pub shuffle_classes: bool,
    pub res: usize,
    pub image_size: usize,
    pub instances_per_class: usize,
    pub points_per_object: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: ShapeClass::ALL.to_vec(),
            sessions: vec![5, 2, 2, 2, 2],
            assignment: None,
            shuffle_classes: false,
            res: 16,
            image_size: 32,
            instances_per_class: 20,
            points_per_object: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub encoder_channels: [usize; 3],
    pub point_embed_dim: usize,
    pub latent_hidden: usize,
    pub decoder_width: usize,
    pub decoder_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 64,
            feature_dim: 64,
            encoder_channels: [8, 16, 32],
            point_embed_dim: 32,
            latent_hidden: 64,
            decoder_width: 512,
            decoder_depth: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fractions of the session's epochs at which the rate is cut.
    pub drops: Vec<f64>,
    pub drop_factor: f64,
    pub momentum: f64,
    pub kl_weight: f64,
    pub replay_ratio: f64,
    /// Occupancy points decoded per object per step (subset of the stored sample).
    pub points_per_step: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch: 64,
            lr: 1e-3,
            drops: vec![0.3125, 0.4375, 0.5625, 0.6875],
            drop_factor: 0.2,
            momentum: 0.9,
            kl_weight: 1.0,
            replay_ratio: 0.5,
            points_per_step: 256,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub strategy: ReplayStrategy,
    pub saliency: SaliencyMode,
    /// Saliency maps per object: one global map plus up to `k_maps - 1` patches.
    pub k_maps: usize,
    pub tau: f64,
    pub m_priors: usize,
    pub objects_per_class: usize,
    pub attention_steps: usize,
    pub attention_step_size: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            strategy: ReplayStrategy::Exact,
            saliency: SaliencyMode::Dot,
            k_maps: 4,
            tau: 0.5,
            m_priors: 3,
            objects_per_class: 10,
            attention_steps: 200,
            attention_step_size: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    pub tau: f64,
    pub r0: usize,
    pub r_final: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            tau: 0.2,
            r0: 8,
            r_final: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Decode from a sampled latent instead of the posterior mean.
    pub sample_latent: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.2,
            sample_latent: false,
        }
    }
}

fn ensure(cond: bool, key: &str, message: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(key, message))
    }
}

fn in_open_unit(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

impl RunConfig {
    /// Parses JSON text; unknown keys and invalid values are rejected with
    /// the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn session_count(&self) -> usize {
        match &self.data.assignment {
            Some(a) => a.len(),
            None => self.data.sessions.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        ensure(d.res >= 4, "data.res", "must be >= 4")?;
        ensure(d.image_size >= 16, "data.image_size", "must be >= 16")?;
        ensure(
            d.image_size.is_multiple_of(8),
            "data.image_size",
            "must be a multiple of 8",
        )?;
        ensure(
            d.instances_per_class >= 3,
            "data.instances_per_class",
            "must be >= 3",
        )?;
        ensure(
            d.points_per_object >= 1,
            "data.points_per_object",
            "must be >= 1",
        )?;
        ensure(
            d.points_per_object <= d.res.pow(3),
            "data.points_per_object",
            "exceeds the R^3 occupancy budget",
        )?;
        crate::shapes::plan_sessions(d, self.seed)?;

        let m = &self.model;
        for (key, v) in [
            ("model.latent_dim", m.latent_dim),
            ("model.feature_dim", m.feature_dim),
            ("model.point_embed_dim", m.point_embed_dim),
            ("model.latent_hidden", m.latent_hidden),
            ("model.decoder_width", m.decoder_width),
            ("model.decoder_depth", m.decoder_depth),
        ] {
            ensure(v >= 1, key, "must be >= 1")?;
        }
        ensure(
            m.encoder_channels.iter().all(|&c| c >= 1),
            "model.encoder_channels",
            "must be >= 1",
        )?;

        let t = &self.train;
        ensure(t.epochs >= 1, "train.epochs", "must be >= 1")?;
        ensure(t.batch >= 1, "train.batch", "must be >= 1")?;
        ensure(
            t.lr > 0.0 && t.lr.is_finite(),
            "train.lr",
            "must be positive",
        )?;
        ensure(
            t.drops.iter().all(|&f| in_open_unit(f)) && t.drops.windows(2).all(|w| w[0] < w[1]),
            "train.drops",
            "must be strictly increasing fractions in (0, 1)",
        )?;
        ensure(
            t.drop_factor > 0.0 && t.drop_factor <= 1.0,
            "train.drop_factor",
            "must be in (0, 1]",
        )?;
        ensure(
            (0.0..1.0).contains(&t.momentum),
            "train.momentum",
            "must be in [0, 1)",
        )?;
        ensure(
            t.kl_weight >= 0.0 && t.kl_weight.is_finite(),
            "train.kl_weight",
            "must be >= 0",
        )?;
        ensure(
            t.replay_ratio >= 0.0 && t.replay_ratio.is_finite(),
            "train.replay_ratio",
            "must be >= 0",
        )?;
        ensure(
            t.points_per_step >= 1 && t.points_per_step <= d.points_per_object,
            "train.points_per_step",
            "must be in [1, data.points_per_object]",
        )?;
        if let Some(c) = t.grad_clip {
            ensure(c > 0.0, "train.grad_clip", "must be positive")?;
        }

        let r = &self.replay;
        ensure(r.k_maps >= 1, "replay.k_maps", "must be >= 1")?;
        ensure(in_open_unit(r.tau), "replay.tau", "must be in (0, 1)")?;
        ensure(r.m_priors >= 1, "replay.m_priors", "must be >= 1")?;
        ensure(
            r.objects_per_class >= 1,
            "replay.objects_per_class",
            "must be >= 1",
        )?;
        ensure(
            r.attention_step_size > 0.0,
            "replay.attention_step_size",
            "must be positive",
        )?;

        let me = &self.mesh;
        ensure(in_open_unit(me.tau), "mesh.tau", "must be in (0, 1)")?;
        ensure(
            me.r0.is_power_of_two() && me.r0 >= 1,
            "mesh.r0",
            "must be a power of two",
        )?;
        ensure(
            me.r_final.is_power_of_two(),
            "mesh.r_final",
            "must be a power of two",
        )?;
        ensure(me.r0 < me.r_final, "mesh.r_final", "must exceed mesh.r0")?;

        ensure(
            in_open_unit(self.eval.iou_threshold),
            "eval.iou_threshold",
            "must be in (0, 1)",
        )?;
        Ok(())
    }
}
