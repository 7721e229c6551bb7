use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::metrics::voxel_iou;
use crate::model::ModelParams;
use crate::shapes::{Instance, SessionDataset, ShapeClass};

/// Per-class mean test IOU for each session evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulativeEval {
    pub per_session: Vec<BTreeMap<ShapeClass, f64>>,
}

impl CumulativeEval {
    /// Per-session lists of class IOUs, the shape `IouMatrix::update` takes.
    pub fn matrix_row(&self) -> Vec<Vec<f64>> {
        self.per_session
            .iter()
            .map(|m| m.values().copied().collect())
            .collect()
    }
}

/// A pool sized by `CONTREC_THREADS` when set, else rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("CONTREC_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
            Error::config(
                "CONTREC_THREADS",
                format!("expected a positive integer, got {v:?}"),
            )
        })?;
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))
}

/// Reconstructs one test object on its voxel grid and scores it.
pub fn instance_iou(
    model: &ModelParams,
    inst: &Instance,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    let (e, _) = model.encode_view(&inst.view)?;
    let q = model.posterior(&e, &inst.sample)?;
    let z = if cfg.sample_latent {
        q.sample(&mut crate::seed::rng(seed, &[0xE7A1, inst.seed]))
    } else {
        q.mu.clone()
    };
    let probs = model.decode(&e, &z, &inst.grid.centers())?;
    let gt: Vec<bool> = inst.grid.cells().iter().map(|&c| c != 0).collect();
    voxel_iou(&probs, &gt, cfg.iou_threshold)
}

/// Test IOU of every class of every session in `sessions`. Objects are
/// scored in parallel; aggregation is keyed, so the table is independent of
/// scheduling.
pub fn evaluate_cumulative(
    model: &ModelParams,
    sessions: &[SessionDataset],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<CumulativeEval> {
    let jobs: Vec<(usize, &Instance)> = sessions
        .iter()
        .enumerate()
        .flat_map(|(s, d)| d.test.iter().map(move |i| (s, i)))
        .collect();
    let pool = thread_pool()?;
    let scores: Vec<f64> = pool.install(|| {
        jobs.par_iter()
            .map(|(_, inst)| instance_iou(model, inst, cfg, seed))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut acc: Vec<BTreeMap<ShapeClass, (f64, usize)>> = vec![BTreeMap::new(); sessions.len()];
    for ((s, inst), v) in jobs.iter().zip(scores) {
        let e = acc[*s].entry(inst.class).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    for (s, d) in sessions.iter().enumerate() {
        if let Some(c) = d.classes.iter().find(|c| !acc[s].contains_key(c)) {
            return Err(Error::contract(format!(
                "session {s} has no test objects of class {c}"
            )));
        }
    }
    Ok(CumulativeEval {
        per_session: acc
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .map(|(c, (sum, n))| (c, sum / n as f64))
                    .collect()
            })
            .collect(),
    })
}
