//! Session-by-session training: current data plus replayed pseudo-images,
//! BCE plus a KL pull toward the blended prior, then prior distillation and
//! buffer filling when the session closes.

mod eval;
mod schedule;
mod state;

pub use eval::{evaluate_cumulative, thread_pool, CumulativeEval};
pub use schedule::Schedule;
pub use state::{TrainState, TrainerTrailer};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{
    bce_loss, encode_image, encode_latent, reparameterize, GaussianLatent, Model, ModelParams,
};
use crate::priors::{
    combine_priors, distill_priors, fit_attention, AttentionFitOptions, AttentionWeights, PriorBank,
};
use crate::replay::{capture_entry, compute_saliency, CaptureOptions, ReplayBuffer};
use crate::shapes::{PointSample, RenderedView, SessionDataset, ShapeClass};

/// One training example: an image, its occupancy supervision and whether the
/// KL pull applies (current-session objects only).
#[derive(Clone, Copy, Debug)]
pub struct Item<'a> {
    pub view: &'a RenderedView,
    pub sample: &'a PointSample,
    pub kl: bool,
}

/// Per-item randomness, drawn up front so results do not depend on how the
/// batch is scheduled across threads.
#[derive(Clone, Debug)]
struct ItemNoise {
    eps: Vec<f64>,
    subset: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub loss: f64,
    pub bce: f64,
    pub kl: f64,
    pub items: usize,
}

struct ItemOutcome {
    grads: Model<Vec<f64>>,
    loss: f64,
    bce: f64,
    kl: f64,
}

fn item_forward(
    model: &ModelParams,
    item: &Item<'_>,
    noise: &ItemNoise,
    prior: Option<(&GaussianLatent, f64)>,
) -> Result<ItemOutcome> {
    let mut tape = Tape::new();
    let p = model.to_tape(&mut tape, true)?;
    let enc = encode_image(&mut tape, &p.encoder, item.view)?;
    let q = encode_latent(&mut tape, &p.latent, enc.feature, item.sample)?;
    let z = reparameterize(&mut tape, q, &noise.eps)?;
    let sub = item.sample.select(&noise.subset);
    let bce = bce_loss(&mut tape, &p.decoder, enc.feature, z, &sub)?;
    let (loss, kl) = match prior {
        Some((prior, weight)) if item.kl => {
            let pm = tape.constant(Tensor::row(prior.mu.clone()))?;
            let ps = tape.constant(Tensor::row(prior.sigma.clone()))?;
            let kl = tape.kl_diag(q.mu, q.sigma, pm, ps)?;
            let weighted = tape.scale(kl, weight)?;
            (tape.add(bce, weighted)?, tape.value(kl).item())
        }
        _ => (bce, 0.0),
    };
    let grads = tape.backward(loss)?;
    Ok(ItemOutcome {
        grads: p.zip_map(model, |v, t| grads.get_or_zeros(*v, t.len())),
        loss: tape.value(loss).item(),
        bce: tape.value(bce).item(),
        kl,
    })
}

/// Mean loss and parameter gradient over `items`. Items are independent;
/// their gradients are summed in order, so the result is bit-identical for
/// any thread count.
pub fn batch_gradient(
    model: &ModelParams,
    items: &[Item<'_>],
    prior: Option<(&GaussianLatent, f64)>,
    points_per_step: usize,
    seed: u64,
) -> Result<(Model<Vec<f64>>, BatchStats)> {
    if items.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let d = model.latent_dim();
    let mut rng = crate::seed::rng(seed, &[0xBA7C]);
    let noise: Vec<ItemNoise> = items
        .iter()
        .map(|it| {
            let eps = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = it.sample.len();
            let subset = if points_per_step >= n {
                (0..n).collect()
            } else {
                let mut idx = rand::seq::index::sample(&mut rng, n, points_per_step).into_vec();
                idx.sort_unstable();
                idx
            };
            ItemNoise { eps, subset }
        })
        .collect();
    let outcomes: Vec<ItemOutcome> = items
        .par_iter()
        .zip(&noise)
        .map(|(it, nz)| item_forward(model, it, nz, prior))
        .collect::<Result<_>>()?;
    let scale = 1.0 / items.len() as f64;
    let mut grads = model.map(|_, t| vec![0.0; t.len()]);
    let mut stats = BatchStats {
        items: items.len(),
        ..BatchStats::default()
    };
    for o in &outcomes {
        grads = grads.zip_map(&o.grads, |a, b| {
            a.iter().zip(b).map(|(x, y)| x + y * scale).collect()
        });
        stats.loss += o.loss * scale;
        stats.bce += o.bce * scale;
        stats.kl += o.kl * scale;
    }
    Ok((grads, stats))
}

/// `v ← μ·v + g`, `θ ← θ − lr·v`, with optional global-norm clipping of `g`.
pub fn sgd_step(
    model: &ModelParams,
    velocity: &Model<Vec<f64>>,
    grads: &Model<Vec<f64>>,
    lr: f64,
    momentum: f64,
    clip: Option<f64>,
) -> (ModelParams, Model<Vec<f64>>) {
    let norm = grads
        .named()
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let factor = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let v = velocity.zip_map(grads, |v, g| {
        v.iter()
            .zip(g)
            .map(|(v, g)| momentum * v + factor * g)
            .collect()
    });
    let m = model.zip_map(&v, |t, v| {
        let data = t.data().iter().zip(v).map(|(p, v)| p - lr * v).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    });
    (m, v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub per_class_iou: BTreeMap<ShapeClass, f64>,
    pub bank_size: usize,
    pub buffer_units: u64,
}

/// Loss history of a session, one entry per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionTrace {
    pub steps: Vec<BatchStats>,
    pub lrs: Vec<f64>,
}

/// Trains one session. `seen` holds every session so far; the last one is
/// the session being trained and must have index `state.session`.
pub fn run_session(
    state: &mut TrainState,
    seen: &[SessionDataset],
    bank: &mut PriorBank,
    buffer: &mut ReplayBuffer,
    cfg: &RunConfig,
) -> Result<(SessionReport, CumulativeEval, SessionTrace)> {
    let current = seen
        .last()
        .ok_or_else(|| Error::contract("no session to train"))?;
    let t = state.session;
    if current.index != t || seen.len() != t + 1 {
        return Err(Error::contract(format!(
            "trainer is at session {t} but was handed session {} of {}",
            current.index,
            seen.len()
        )));
    }
    if current.train.is_empty() {
        return Err(Error::contract(format!(
            "session {t} has no training objects"
        )));
    }
    let tc = &cfg.train;
    let sched = Schedule::from_config(tc);
    let prior = if t > 0 && tc.kl_weight > 0.0 && !bank.is_empty() {
        let att = match &state.attention {
            Some(a) if a.len() == bank.len() => a.clone(),
            _ => AttentionWeights::uniform(bank.len()),
        };
        Some(combine_priors(bank, &att)?)
    } else {
        None
    };
    let replaying = t > 0 && tc.replay_ratio > 0.0 && !buffer.is_empty();

    let pool = thread_pool()?;
    let mut velocity = state.model.map(|_, p| vec![0.0; p.len()]);
    let mut trace = SessionTrace::default();
    let mut final_loss = f64::NAN;
    let mut order: Vec<usize> = (0..current.train.len()).collect();
    for epoch in 0..tc.epochs {
        let lr = sched.lr_at(epoch);
        order.shuffle(&mut state.rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(tc.batch).enumerate() {
            let mut items: Vec<Item<'_>> = chunk
                .iter()
                .map(|&i| Item {
                    view: &current.train[i].view,
                    sample: &current.train[i].sample,
                    kl: true,
                })
                .collect();
            let replayed = if replaying {
                let n = (tc.replay_ratio * chunk.len() as f64).ceil() as usize;
                buffer.replay(n, state.rng.next_u64())?
            } else {
                Vec::new()
            };
            items.extend(replayed.iter().map(|r| Item {
                view: &r.image,
                sample: &r.sample,
                kl: false,
            }));
            let seed = state.rng.next_u64();
            let kl_prior = prior.as_ref().map(|p| (p, tc.kl_weight));
            let (grads, stats) = pool
                .install(|| {
                    batch_gradient(&state.model, &items, kl_prior, tc.points_per_step, seed)
                })
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        session: t,
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            if !stats.loss.is_finite() {
                return Err(Error::Diverged {
                    session: t,
                    epoch,
                    batch: b,
                    loss: stats.loss,
                });
            }
            let (m, v) = sgd_step(
                &state.model,
                &velocity,
                &grads,
                lr,
                tc.momentum,
                tc.grad_clip,
            );
            if !m.is_finite() {
                return Err(Error::Diverged {
                    session: t,
                    epoch,
                    batch: b,
                    loss: stats.loss,
                });
            }
            state.model = m;
            velocity = v;
            trace.steps.push(stats);
            trace.lrs.push(lr);
            epoch_loss += stats.loss;
            batches += 1;
        }
        final_loss = epoch_loss / batches as f64;
        state.epoch = epoch + 1;
        log::debug!("session {t} epoch {epoch}: loss {final_loss:.5} lr {lr:e}");
    }

    close_session(state, current, bank, buffer, cfg)?;
    let eval = evaluate_cumulative(&state.model, seen, &cfg.eval, cfg.seed)?;
    let report = SessionReport {
        session: t,
        epochs: tc.epochs,
        final_loss,
        per_class_iou: eval
            .per_session
            .iter()
            .flat_map(|m| m.iter().map(|(c, v)| (*c, *v)))
            .collect(),
        bank_size: bank.len(),
        buffer_units: buffer.size().total,
    };
    state.session += 1;
    state.epoch = 0;
    Ok((report, eval, trace))
}

/// Distills priors for the session's classes, refits the attention over the
/// grown bank and stores replay entries for the session's training objects.
fn close_session(
    state: &mut TrainState,
    session: &SessionDataset,
    bank: &mut PriorBank,
    buffer: &mut ReplayBuffer,
    cfg: &RunConfig,
) -> Result<()> {
    let t = session.index;
    let rc = &cfg.replay;
    let mut per_class = Vec::new();
    let mut targets = Vec::new();
    for &class in &session.classes {
        let objs: Vec<_> = session.train.iter().filter(|i| i.class == class).collect();
        let latents = objs
            .par_iter()
            .map(|inst| {
                let (e, _) = state.model.encode_view(&inst.view)?;
                state.model.posterior(&e, &inst.sample)
            })
            .collect::<Result<Vec<_>>>()?;
        if latents.is_empty() {
            continue;
        }
        let seed = crate::seed::derive(cfg.seed, &[0xD15, t as u64, class.index() as u64]);
        per_class.push((class, distill_priors(&latents, rc.m_priors, seed)?));
        targets.extend(latents);

        let mut chosen: Vec<usize> = (0..objs.len()).collect();
        chosen.shuffle(&mut state.rng);
        chosen.truncate(rc.objects_per_class);
        chosen.sort_unstable();
        let entries = chosen
            .par_iter()
            .map(|&i| {
                let inst = objs[i];
                let maps = compute_saliency(&inst.view, &state.model, rc.saliency)?;
                let opts = CaptureOptions {
                    k: rc.k_maps,
                    tau: rc.tau,
                    seed: crate::seed::derive(cfg.seed, &[0xCA9, t as u64, inst.seed]),
                };
                capture_entry(rc.strategy, class, &inst.view, &maps, &inst.sample, opts)
            })
            .collect::<Result<Vec<_>>>()?;
        for e in entries {
            buffer.insert(e)?;
        }
    }
    bank.close_session(t, per_class)?;
    let fit = fit_attention(
        bank,
        &targets,
        None,
        AttentionFitOptions {
            steps: rc.attention_steps,
            step_size: rc.attention_step_size,
        },
    )?;
    state.attention = Some(fit.attention);
    Ok(())
}

#[cfg(test)]
mod tests;
