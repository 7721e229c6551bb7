use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    generate_instance, render_view, sample_points, PointSample, RenderedView, ShapeClass,
    ShapeParams, VoxelGrid,
};
use crate::config::DataConfig;
use crate::error::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One object: ground-truth grid, its rendered view and occupancy samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub class: ShapeClass,
    pub split: Split,
    pub seed: u64,
    pub params: ShapeParams,
    pub grid: VoxelGrid,
    pub view: RenderedView,
    pub sample: PointSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionDataset {
    pub index: usize,
    pub classes: Vec<ShapeClass>,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl SessionDataset {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Resolves the class-to-session assignment and checks that every class
/// appears in exactly one session.
pub fn plan_sessions(cfg: &DataConfig, seed: u64) -> Result<Vec<Vec<ShapeClass>>> {
    let plan = match &cfg.assignment {
        Some(a) => a.clone(),
        None => {
            let mut classes = cfg.classes.clone();
            if cfg.shuffle_classes {
                classes.shuffle(&mut crate::seed::rng(seed, &[0xC1A55]));
            }
            let total: usize = cfg.sessions.iter().sum();
            if total != classes.len() {
                return Err(Error::config(
                    "data.sessions",
                    format!(
                        "session sizes sum to {total} but {} classes are listed",
                        classes.len()
                    ),
                ));
            }
            let mut out = Vec::new();
            let mut it = classes.into_iter();
            for &n in &cfg.sessions {
                out.push(it.by_ref().take(n).collect());
            }
            out
        }
    };
    if plan.is_empty() {
        return Err(Error::config("data.sessions", "no sessions"));
    }
    let mut seen = BTreeSet::new();
    for (t, classes) in plan.iter().enumerate() {
        if classes.is_empty() {
            return Err(Error::config(
                "data.sessions",
                format!("session {t} has no classes"),
            ));
        }
        for c in classes {
            if !seen.insert(*c) {
                return Err(Error::config(
                    "data.classes",
                    format!("class {c} assigned more than once"),
                ));
            }
        }
    }
    Ok(plan)
}

fn split_sizes(n: usize) -> (usize, usize) {
    let train = ((n as f64 * TRAIN_FRACTION).round() as usize).max(1);
    let val = (n as f64 * VAL_FRACTION).round() as usize;
    let val = val.min(n.saturating_sub(train + 1));
    (train, val)
}

fn build_instance(
    cfg: &DataConfig,
    class: ShapeClass,
    split: Split,
    k: usize,
    seed: u64,
) -> Result<Instance> {
    let (params, grid) = generate_instance(class, cfg.res, seed)?;
    let mut rng = crate::seed::rng(seed, &[0x71E3]);
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let elevation = rng.random_range(0.15..0.6);
    let view = render_view(&grid, azimuth, elevation, cfg.image_size, cfg.image_size)?;
    let sample = sample_points(&grid, cfg.points_per_object, seed)?;
    Ok(Instance {
        id: format!("{}_{}_{}", class.name(), split.name(), k),
        class,
        split,
        seed,
        params,
        grid,
        view,
        sample,
    })
}

/// Generates every session's splits. Each instance derives its own seed
/// from `(seed, class, instance index)`, so the result does not depend on
/// how generation is scheduled across threads.
pub fn build_sessions(cfg: &DataConfig, seed: u64) -> Result<Vec<SessionDataset>> {
    let plan = plan_sessions(cfg, seed)?;
    let n = cfg.instances_per_class;
    let (n_train, n_val) = split_sizes(n);
    plan.into_iter()
        .enumerate()
        .map(|(index, classes)| {
            let jobs: Vec<(ShapeClass, usize)> = classes
                .iter()
                .flat_map(|&c| (0..n).map(move |i| (c, i)))
                .collect();
            let built = jobs
                .par_iter()
                .map(|&(class, i)| {
                    let (split, k) = if i < n_train {
                        (Split::Train, i)
                    } else if i < n_train + n_val {
                        (Split::Val, i - n_train)
                    } else {
                        (Split::Test, i - n_train - n_val)
                    };
                    let inst_seed = crate::seed::derive(seed, &[class.index() as u64, i as u64]);
                    build_instance(cfg, class, split, k, inst_seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut ds = SessionDataset {
                index,
                classes,
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            for inst in built {
                match inst.split {
                    Split::Train => ds.train.push(inst),
                    Split::Val => ds.val.push(inst),
                    Split::Test => ds.test.push(inst),
                }
            }
            Ok(ds)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(classes: Vec<ShapeClass>, sessions: Vec<usize>) -> DataConfig {
        DataConfig {
            classes,
            sessions,
            instances_per_class: 5,
            points_per_object: 64,
            ..DataConfig::default()
        }
    }

    #[test]
    fn default_plan_is_five_two_two_two_two() {
        let plan = plan_sessions(&DataConfig::default(), 0).unwrap();
        assert_eq!(
            plan.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![5, 2, 2, 2, 2]
        );
    }

    #[test]
    fn desk_plan_echoes_config() {
        let cfg = small(ShapeClass::ALL[..6].to_vec(), vec![2, 2, 2]);
        let plan = plan_sessions(&cfg, 0).unwrap();
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 2]);
    }

    #[test]
    fn shuffled_plan_is_deterministic() {
        let cfg = DataConfig {
            shuffle_classes: true,
            ..DataConfig::default()
        };
        let a = plan_sessions(&cfg, 11).unwrap();
        assert_eq!(a, plan_sessions(&cfg, 11).unwrap());
        assert_ne!(a, plan_sessions(&DataConfig::default(), 11).unwrap());
    }

    #[test]
    fn duplicate_assignment_rejected() {
        let cfg = DataConfig {
            assignment: Some(vec![
                vec![ShapeClass::Sphere],
                vec![ShapeClass::Box, ShapeClass::Sphere],
            ]),
            ..DataConfig::default()
        };
        assert!(matches!(plan_sessions(&cfg, 0), Err(Error::Config { .. })));
        let cfg = small(vec![ShapeClass::Sphere, ShapeClass::Sphere], vec![1, 1]);
        assert!(matches!(plan_sessions(&cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn sessions_are_disjoint_and_consistent() {
        let cfg = small(ShapeClass::ALL[..4].to_vec(), vec![2, 2]);
        let sessions = build_sessions(&cfg, 3).unwrap();
        assert_eq!(sessions.len(), 2);
        let mut ids = BTreeSet::new();
        for s in &sessions {
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 0, 2));
            for inst in s.instances() {
                assert!(s.classes.contains(&inst.class));
                assert!(ids.insert(inst.id.clone()));
                assert!(!inst.grid.is_degenerate());
                assert!(!inst.view.is_blank());
                for (p, &o) in inst.sample.points.iter().zip(&inst.sample.occupancy) {
                    assert_eq!(inst.grid.label_at(*p) as u8 as f64, o);
                }
            }
        }
        assert_eq!(sessions, build_sessions(&cfg, 3).unwrap());
    }

    #[test]
    fn default_split_is_seventy_ten_twenty() {
        assert_eq!(split_sizes(20), (14, 2));
        assert_eq!(split_sizes(10), (7, 1));
    }
}
