//! Per-class variational priors, their attention-weighted blend and the KL
//! regularizer against it.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kl_diag_value, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::GaussianLatent;
use crate::shapes::ShapeClass;

pub const KMEANS_ITERATIONS: usize = 50;

/// `KL(q1 ‖ q2)` for diagonal Gaussians.
pub fn kl_gaussian(q1: &GaussianLatent, q2: &GaussianLatent) -> Result<f64> {
    if q1.dim() != q2.dim() {
        return Err(Error::contract(format!(
            "kl_gaussian over latents of size {} and {}",
            q1.dim(),
            q2.dim()
        )));
    }
    Ok(kl_diag_value(&q1.mu, &q1.sigma, &q2.mu, &q2.sigma))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters the posterior means into `m` groups (k-means++ seeding, then a
/// fixed number of Lloyd iterations). Each prior takes its cluster's centroid
/// as mean and the average member σ as scale. With fewer than `m` latents
/// one prior is produced per latent.
pub fn distill_priors(
    latents: &[GaussianLatent],
    m: usize,
    seed: u64,
) -> Result<Vec<GaussianLatent>> {
    if latents.is_empty() || m == 0 {
        return Err(Error::contract(
            "distill_priors needs at least one latent and m >= 1",
        ));
    }
    let d = latents[0].dim();
    if latents.iter().any(|l| l.dim() != d) {
        return Err(Error::contract("distill_priors over latents of mixed size"));
    }
    let m = if latents.len() < m {
        log::warn!("only {} latents for {m} priors; reducing m", latents.len());
        latents.len()
    } else {
        m
    };
    let mut rng = crate::seed::rng(seed, &[0xD157]);

    let mut centroids: Vec<Vec<f64>> = vec![latents[rng.random_range(0..latents.len())].mu.clone()];
    while centroids.len() < m {
        let weights: Vec<f64> = latents
            .iter()
            .map(|l| {
                centroids
                    .iter()
                    .map(|c| dist2(&l.mu, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            weights
                .iter()
                .position(|&w| {
                    r -= w;
                    r < 0.0
                })
                .unwrap_or_else(|| {
                    weights
                        .iter()
                        .rposition(|&w| w > 0.0)
                        .expect("positive total")
                })
        } else {
            rng.random_range(0..latents.len())
        };
        centroids.push(latents[pick].mu.clone());
    }

    let mut assign = vec![0; latents.len()];
    for _ in 0..KMEANS_ITERATIONS {
        for (a, l) in assign.iter_mut().zip(latents) {
            *a = (0..m)
                .min_by(|&i, &j| {
                    dist2(&l.mu, &centroids[i]).total_cmp(&dist2(&l.mu, &centroids[j]))
                })
                .expect("m >= 1");
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&GaussianLatent> = latents
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(l, _)| l)
                .collect();
            if !members.is_empty() {
                *centroid = mean_of(members.iter().map(|l| l.mu.as_slice()), d);
            }
        }
    }

    (0..m)
        .map(|c| {
            let members: Vec<&GaussianLatent> = latents
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(l, _)| l)
                .collect();
            let sigma = if members.is_empty() {
                mean_of(latents.iter().map(|l| l.sigma.as_slice()), d)
            } else {
                mean_of(members.iter().map(|l| l.sigma.as_slice()), d)
            };
            GaussianLatent::new(centroids[c].clone(), sigma)
        })
        .collect()
}

/// Mean taken as an offset from the first row, so identical rows average
/// to themselves exactly.
fn mean_of<'a>(mut rows: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let Some(first) = rows.next() else {
        return vec![0.0; d];
    };
    let mut acc = vec![0.0; d];
    let mut n = 1;
    for r in rows {
        for ((a, v), f) in acc.iter_mut().zip(r).zip(first) {
            *a += v - f;
        }
        n += 1;
    }
    first
        .iter()
        .zip(&acc)
        .map(|(f, a)| f + a / n as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub session: usize,
    pub class: ShapeClass,
    pub j: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PriorEntry {
    pub fn latent(&self) -> Result<GaussianLatent> {
        GaussianLatent::new(self.mu.clone(), self.sigma.clone())
    }
}

/// Append-only store of per-class priors; a session's entries are added in
/// one call when that session closes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorBank {
    entries: Vec<PriorEntry>,
}

impl PriorBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[PriorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latents(&self) -> Result<Vec<GaussianLatent>> {
        self.entries.iter().map(PriorEntry::latent).collect()
    }

    /// Adds the priors distilled for every class of `session`.
    pub fn close_session(
        &mut self,
        session: usize,
        per_class: Vec<(ShapeClass, Vec<GaussianLatent>)>,
    ) -> Result<()> {
        if self.entries.iter().any(|e| e.session >= session) {
            return Err(Error::contract(format!(
                "session {session} is already closed in the prior bank"
            )));
        }
        let dim = self.entries.first().map(|e| e.mu.len());
        for (class, priors) in per_class {
            for (j, p) in priors.into_iter().enumerate() {
                if dim.is_some_and(|d| d != p.dim()) {
                    return Err(Error::contract("prior latent size differs from the bank"));
                }
                self.entries.push(PriorEntry {
                    session,
                    class,
                    j,
                    mu: p.mu,
                    sigma: p.sigma,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: PriorBank = serde_json::from_str(text)?;
        bank.latents()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Softmax attention over every entry of a bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub logits: Vec<f64>,
}

impl AttentionWeights {
    pub fn uniform(n: usize) -> Self {
        AttentionWeights {
            logits: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        crate::autodiff::softmax(&self.logits)
    }
}

/// Weighted parameter average `Σ A·μ`, `Σ A·σ` over the bank.
pub fn combine_priors(bank: &PriorBank, attention: &AttentionWeights) -> Result<GaussianLatent> {
    blend(&bank.latents()?, &attention.weights())
}

fn blend(priors: &[GaussianLatent], weights: &[f64]) -> Result<GaussianLatent> {
    if priors.is_empty() {
        return Err(Error::contract("cannot combine an empty prior bank"));
    }
    if priors.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} attention weights for {} priors",
            weights.len(),
            priors.len()
        )));
    }
    let d = priors[0].dim();
    let mut mu = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    for (p, &w) in priors.iter().zip(weights) {
        for i in 0..d {
            mu[i] += w * p.mu[i];
            sigma[i] += w * p.sigma[i];
        }
    }
    GaussianLatent::new(mu, sigma)
}

/// `KL(q_t ‖ Q̃)` against the combined prior.
pub fn prior_kl_term(
    bank: &PriorBank,
    attention: &AttentionWeights,
    q: &GaussianLatent,
) -> Result<f64> {
    kl_gaussian(q, &combine_priors(bank, attention)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionFitOptions {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for AttentionFitOptions {
    fn default() -> Self {
        AttentionFitOptions {
            steps: 200,
            step_size: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionFit {
    pub attention: AttentionWeights,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Objective after each accepted step.
    pub history: Vec<f64>,
}

/// Objective value and logit gradient of the mean target KL.
fn attention_objective(
    priors: &[GaussianLatent],
    targets: &[GaussianLatent],
    logits: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let k = priors.len();
    let d = priors[0].dim();
    let mut tape = Tape::new();
    let a = tape.param(Tensor::vector(logits.to_vec()))?;
    let w = tape.softmax(a)?;
    let w = tape.reshape(w, vec![1, k])?;
    let mus = tape.constant(Tensor::matrix(
        k,
        d,
        priors.iter().flat_map(|p| p.mu.clone()).collect(),
    )?)?;
    let sigmas = tape.constant(Tensor::matrix(
        k,
        d,
        priors.iter().flat_map(|p| p.sigma.clone()).collect(),
    )?)?;
    let mu = tape.matmul(w, mus)?;
    let sigma = tape.matmul(w, sigmas)?;
    let mut total = None;
    for t in targets {
        let tm = tape.constant(Tensor::row(t.mu.clone()))?;
        let ts = tape.constant(Tensor::row(t.sigma.clone()))?;
        let kl = tape.kl_diag(tm, ts, mu, sigma)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, kl)?,
            None => kl,
        });
    }
    let loss = tape.scale(
        total.expect("non-empty targets"),
        1.0 / targets.len() as f64,
    )?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.get_or_zeros(a, k)))
}

/// Gradient descent on the attention logits. A step that would raise the
/// objective is halved until it does not, so the objective never increases.
pub fn fit_attention(
    bank: &PriorBank,
    targets: &[GaussianLatent],
    init: Option<&AttentionWeights>,
    opts: AttentionFitOptions,
) -> Result<AttentionFit> {
    let priors = bank.latents()?;
    if priors.is_empty() || targets.is_empty() {
        return Err(Error::contract(
            "fit_attention needs a non-empty bank and targets",
        ));
    }
    if targets.iter().any(|t| t.dim() != priors[0].dim()) {
        return Err(Error::contract("target latent size differs from the bank"));
    }
    let mut logits = match init {
        Some(a) if a.len() == priors.len() => a.logits.clone(),
        Some(a) => {
            return Err(Error::contract(format!(
                "{} initial logits for {} priors",
                a.len(),
                priors.len()
            )))
        }
        None => vec![0.0; priors.len()],
    };
    let (mut loss, mut grad) = attention_objective(&priors, targets, &logits)?;
    let initial_loss = loss;
    let mut history = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let mut step = opts.step_size;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = logits
                .iter()
                .zip(&grad)
                .map(|(l, g)| l - step * g)
                .collect();
            let (cl, cg) = attention_objective(&priors, targets, &cand)?;
            if cl <= loss {
                accepted = Some((cand, cl, cg));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, cl, cg)) => {
                logits = cand;
                loss = cl;
                grad = cg;
                history.push(loss);
            }
            None => break,
        }
    }
    Ok(AttentionFit {
        attention: AttentionWeights { logits },
        initial_loss,
        final_loss: loss,
        history,
    })
}
