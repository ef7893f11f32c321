//! The β-weighted variational objective and the training loop.
//!
//! Per conversation the loss is the summed frame cross-entropy plus β times
//! the KL terms of every window's graph: the closed-form Binomial bound on
//! each summary edge and the expected transform KL. Each pair contributes
//! once per window that contains it. A batch loss is divided by the number
//! of frames in the batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::DgpForward;
use crate::error::{domain, Error, Result};
use crate::model::{argmax_rows, ConversationForward, Model};
use crate::numcore::{Graph, NoiseSource, Real, Rng, Sgd, Tensor, Var, ZeroNoise};
use crate::params::bind;
use crate::synthdata::Conversation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    /// When set, the step size falls linearly from `lr` in the first epoch
    /// to this value in the last.
    pub lr_final: Option<f64>,
    pub momentum: f64,
    pub epochs: usize,
    /// Conversations per update.
    pub batch_size: usize,
    pub seed: u64,
    pub threads: usize,
    /// Rescale the summed batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.0005,
            lr: 0.5,
            lr_final: None,
            momentum: 0.0,
            epochs: 10,
            batch_size: 4,
            seed: 1,
            threads: 1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Step size used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_final {
            Some(end) if self.epochs > 1 => {
                let t = (epoch.clamp(1, self.epochs) - 1) as f64 / (self.epochs - 1) as f64;
                self.lr + t * (end - self.lr)
            }
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be ≥ 0, got {}", self.lr)));
        }
        if self.lr_final.is_some_and(|l| !(l > 0.0 && l <= self.lr)) {
            return Err(Error::Config("lr_final must lie in (0, lr]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("batch_size and threads must be positive".into()));
        }
        Ok(())
    }
}

/// `𝔼_α̃ KL(𝒩(α̃μ, α̃σ²) ‖ 𝒩(α̃μ⁰, α̃σ⁰²))` under `𝔼[α̃] = m`:
/// `½(r − 1 − ln r) + m(μ − μ⁰)²/(2σ⁰²)` with `r = σ²/σ⁰²`.
pub fn expected_transform_kl(m: f64, mu: f64, sigma: f64, mu0: f64, sigma0: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma0 > 0.0) {
        return Err(domain(format!("transform standard deviations must be positive, got ({sigma}, {sigma0})")));
    }
    if !(m > 0.0 && m < 0.5) {
        return Err(domain(format!("m must lie in (0, 1/2), got {m}")));
    }
    let r = (sigma / sigma0).powi(2);
    Ok(0.5 * (r - 1.0 - r.ln()) + m * (mu - mu0).powi(2) / (2.0 * sigma0 * sigma0))
}

/// Graph form of both KL terms, summed over pairs with each pair weighted by
/// the number of windows containing it.
pub fn kl_terms<T: Real>(g: &mut Graph<T>, fwd: &DgpForward) -> Result<Option<(Var, Var)>> {
    let Some(edges) = &fwd.edges else {
        return Ok(None);
    };
    let (m, m0) = (edges.posterior.m, edges.prior.m);
    let weights: Vec<f64> = fwd.table.multiplicity.iter().map(|&c| c as f64).collect();
    let w = g.constant(Tensor::from_f64(&[weights.len()], &weights)?);

    // m·ln(m/m⁰) + (1−m)·ln(h(m)/h(m⁰)), h(x) = 1 − x + x²/2
    let ratio = g.div(m, m0)?;
    let log_ratio = g.ln(ratio);
    let head = g.mul(m, log_ratio)?;
    let hm = h_of(g, m)?;
    let hm0 = h_of(g, m0)?;
    let hr = g.div(hm, hm0)?;
    let log_hr = g.ln(hr);
    let one_minus = g.rsub_scalar(T::one(), m);
    let tail = g.mul(one_minus, log_hr)?;
    let bound = g.add(head, tail)?;
    let bound = g.mul(bound, w)?;
    let kl_edges = g.sum(bound);

    let (mu, sigma) = (edges.posterior.mu_s, edges.posterior.sigma_s);
    let (mu0, sigma0) = (edges.prior.mu_s, edges.prior.sigma_s);
    let sr = g.div(sigma, sigma0)?;
    let r = g.square(sr);
    let log_r = g.ln(r);
    let var_term = g.sub(r, log_r)?;
    let var_term = g.add_scalar(var_term, -T::one());
    let var_term = g.mul_scalar(var_term, T::of(0.5));
    let dmu = g.sub(mu, mu0)?;
    let dmu2 = g.square(dmu);
    let s02 = g.square(sigma0);
    let s02 = g.mul_scalar(s02, T::of(2.0));
    let shift = g.div(dmu2, s02)?;
    let shift = g.mul(m, shift)?;
    let transform = g.add(var_term, shift)?;
    let transform = g.mul(transform, w)?;
    let kl_transform = g.sum(transform);
    Ok(Some((kl_edges, kl_transform)))
}

fn h_of<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let half = g.mul_scalar(sq, T::of(0.5));
    let one_minus = g.rsub_scalar(T::one(), x);
    g.add(one_minus, half)
}

/// Loss parts, each divided by the number of frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub ce: f64,
    pub kl_edges: f64,
    pub kl_transform: f64,
    pub total: f64,
    pub beta: f64,
}

impl ElboBreakdown {
    pub fn from_sums(ce: f64, kl_edges: f64, kl_transform: f64, beta: f64, frames: usize) -> Self {
        let n = frames.max(1) as f64;
        let (ce, kl_edges, kl_transform) = (ce / n, kl_edges / n, kl_transform / n);
        Self {
            ce,
            kl_edges,
            kl_transform,
            total: ce + beta * (kl_edges + kl_transform),
            beta,
        }
    }
}

/// One conversation's objective on a graph.
#[derive(Clone, Debug)]
pub struct ConversationObjective {
    /// `scale · (ce + β·(kl_edges + kl_transform))`.
    pub total: Var,
    pub kl_edges: Option<Var>,
    pub kl_transform: Option<Var>,
    pub forward: ConversationForward,
}

pub fn conversation_objective<T: Real>(
    model: &Model,
    g: &mut Graph<T>,
    p: &[Var],
    conv: &Conversation,
    noise: &mut dyn NoiseSource,
    beta: f64,
    scale: f64,
    train: bool,
) -> Result<ConversationObjective> {
    let forward = model.forward(g, p, conv, noise, train)?;
    let kl = match &forward.dgp {
        Some(fwd) => kl_terms(g, fwd)?,
        None => None,
    };
    let mut total = forward.ce;
    if let Some((ke, kt)) = kl {
        let both = g.add(ke, kt)?;
        let weighted = g.mul_scalar(both, T::of(beta));
        total = g.add(total, weighted)?;
    }
    let total = g.mul_scalar(total, T::of(scale));
    Ok(ConversationObjective {
        total,
        kl_edges: kl.map(|k| k.0),
        kl_transform: kl.map(|k| k.1),
        forward,
    })
}

/// The batch objective on one graph with a single noise stream; returns the
/// scalar loss node and its breakdown.
pub fn elbo_loss<T: Real>(
    model: &Model,
    g: &mut Graph<T>,
    p: &[Var],
    batch: &[Conversation],
    noise: &mut dyn NoiseSource,
    beta: f64,
) -> Result<(Var, ElboBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let frames: usize = batch.iter().map(Conversation::frame_count).sum();
    let mut totals = Vec::with_capacity(batch.len());
    let mut sums = [0.0f64; 3];
    for conv in batch {
        let obj = conversation_objective(model, g, p, conv, noise, beta, 1.0 / frames as f64, true)?;
        sums[0] += g.scalar_value(obj.forward.ce)?.as_f64();
        for (slot, v) in [(1, obj.kl_edges), (2, obj.kl_transform)] {
            if let Some(v) = v {
                sums[slot] += g.scalar_value(v)?.as_f64();
            }
        }
        totals.push(obj.total);
    }
    let all = g.concat(&totals)?;
    let total = g.sum(all);
    let breakdown = ElboBreakdown::from_sums(sums[0], sums[1], sums[2], beta, frames);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {breakdown:?}")));
    }
    Ok((total, breakdown))
}

/// Noiseless evaluation of one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub ce: f64,
    pub kl_edges: f64,
    pub kl_transform: f64,
    pub total: f64,
    pub accuracy: f64,
    pub frames: usize,
}

struct ConvEval {
    ce: f64,
    kl_edges: f64,
    kl_transform: f64,
    correct: usize,
    frames: usize,
}

fn eval_conversation(model: &Model, conv: &Conversation) -> Result<ConvEval> {
    let mut g = Graph::<f32>::new();
    let p = model.bind_constants(&mut g);
    let obj = conversation_objective(model, &mut g, &p, conv, &mut ZeroNoise, 0.0, 1.0, false)?;
    let read = |v: Option<Var>| v.map_or(Ok(0.0), |v| g.scalar_value(v).map(f64::from));
    let mut correct = 0;
    for (u, &y) in conv.utterances.iter().zip(&obj.forward.logits) {
        correct += argmax_rows(g.value(y)).iter().zip(&u.labels).filter(|(a, b)| a == b).count();
    }
    Ok(ConvEval {
        ce: f64::from(g.scalar_value(obj.forward.ce)?),
        kl_edges: read(obj.kl_edges)?,
        kl_transform: read(obj.kl_transform)?,
        correct,
        frames: obj.forward.frames,
    })
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Noiseless metrics over `data`: the graph samples sit at their means.
/// Per-conversation results are summed in dataset order, so the value does
/// not depend on `threads`.
pub fn evaluate(model: &Model, data: &[Conversation], beta: f64, threads: usize) -> Result<EvalMetrics> {
    let parts = pool(threads)?.install(|| data.par_iter().map(|c| eval_conversation(model, c)).collect::<Vec<_>>());
    let (mut ce, mut ke, mut kt, mut correct, mut frames) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for part in parts {
        let part = part?;
        ce += part.ce;
        ke += part.kl_edges;
        kt += part.kl_transform;
        correct += part.correct;
        frames += part.frames;
    }
    let b = ElboBreakdown::from_sums(ce, ke, kt, beta, frames);
    Ok(EvalMetrics {
        ce: b.ce,
        kl_edges: b.kl_edges,
        kl_transform: b.kl_transform,
        total: b.total,
        accuracy: correct as f64 / frames.max(1) as f64,
        frames,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean sampled training loss over the epoch's updates (absent for the
    /// initial record).
    pub train_loss: Option<f64>,
    pub train: EvalMetrics,
    pub test: Option<EvalMetrics>,
    /// Fraction of sampled summary edges that hit the clamp.
    pub clamped_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

struct StepPart {
    grads: Vec<Tensor<f32>>,
    loss: f64,
    clamped: usize,
    sampled: usize,
}

fn conversation_gradient(
    model: &Model,
    conv: &Conversation,
    beta: f64,
    scale: f64,
    noise: &mut dyn NoiseSource,
) -> Result<StepPart> {
    let mut g = Graph::<f32>::new();
    let p = bind(&mut g, model.store.tensors());
    let obj = conversation_objective(model, &mut g, &p, conv, noise, beta, scale, true)?;
    let loss = f64::from(g.scalar_value(obj.total)?);
    if !loss.is_finite() {
        return Err(Error::NonFinite(diagnose(&g, conv, &obj)));
    }
    let grads = g.backward(obj.total)?;
    let grads = p
        .iter()
        .zip(model.store.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    let lo = model.config.epsilon_alpha as f32;
    let (mut clamped, mut sampled) = (0, 0);
    for w in &obj.forward.windows {
        if let Some(a) = w.alpha {
            let vals = g.value(a).data();
            sampled += vals.len();
            clamped += vals.iter().filter(|&&x| x <= lo || x >= 1.0).count();
        }
    }
    Ok(StepPart {
        grads,
        loss,
        clamped,
        sampled,
    })
}

/// Names the first utterance or pair whose contribution is not finite.
fn diagnose(g: &Graph<f32>, conv: &Conversation, obj: &ConversationObjective) -> String {
    for (i, &y) in obj.forward.logits.iter().enumerate() {
        if !g.value(y).all_finite() {
            return format!("{}: logits of utterance {i} are not finite", conv.id);
        }
    }
    if let Some(fwd) = &obj.forward.dgp {
        if let Some(edges) = &fwd.edges {
            for (name, v) in [("m", edges.posterior.m), ("m0", edges.prior.m), ("sigma_s", edges.posterior.sigma_s)] {
                if let Some(q) = g.value(v).data().iter().position(|x| !x.is_finite()) {
                    return format!("{}: {name} of pair {:?} is not finite", conv.id, fwd.table.pairs[q]);
                }
            }
        }
    }
    format!("{}: loss is not finite", conv.id)
}

/// Trains `model` in place. After every epoch (and once before the first
/// update, as epoch 0) both datasets are evaluated without noise and
/// `on_epoch` is called, typically to write a checkpoint. A non-finite loss
/// or gradient stops training with the parameters of the last good update.
pub fn train(
    model: &mut Model,
    config: &TrainConfig,
    train_set: &[Conversation],
    test_set: &[Conversation],
    mut on_epoch: impl FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    for c in train_set.iter().chain(test_set) {
        model.check_conversation(c)?;
    }
    let workers = pool(config.threads)?;
    let record = |model: &Model, epoch, train_loss, clamped_fraction| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            train_loss,
            train: evaluate(model, train_set, config.beta, config.threads)?,
            test: if test_set.is_empty() {
                None
            } else {
                Some(evaluate(model, test_set, config.beta, config.threads)?)
            },
            clamped_fraction,
        })
    };
    let mut history = vec![record(model, 0, None, None)?];
    on_epoch(model, &history[0])?;
    let mut opt = (config.lr > 0.0).then(|| Sgd::new(config.lr as f32, config.momentum as f32));
    for epoch in 1..=config.epochs {
        if let Some(opt) = opt.as_mut() {
            opt.lr = config.lr_at(epoch) as f32;
        }
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::substream(config.seed, &[epoch as u64, u64::MAX]).shuffle(&mut order);
        let (mut loss_sum, mut steps, mut clamped, mut sampled) = (0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let frames: usize = batch.iter().map(|&c| train_set[c].frame_count()).sum();
            let scale = 1.0 / frames as f64;
            let parts = workers.install(|| {
                batch
                    .par_iter()
                    .map(|&c| {
                        let mut noise = Rng::substream(config.seed, &[epoch as u64, c as u64]);
                        conversation_gradient(model, &train_set[c], config.beta, scale, &mut noise)
                    })
                    .collect::<Vec<_>>()
            });
            let mut total: Option<Vec<Tensor<f32>>> = None;
            let mut batch_loss = 0.0;
            for part in parts {
                let part = match part {
                    Ok(p) => p,
                    Err(Error::NonFinite(msg)) => return Ok(stop(history, msg)),
                    Err(e) => return Err(e),
                };
                batch_loss += part.loss;
                clamped += part.clamped;
                sampled += part.sampled;
                match &mut total {
                    None => total = Some(part.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&part.grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            if let (Some(opt), Some(mut grads)) = (opt.as_mut(), total) {
                if let Some(limit) = config.clip_norm {
                    clip_global_norm(&mut grads, limit);
                }
                match opt.step(model.store.tensors_mut(), &grads) {
                    Ok(()) => {}
                    Err(Error::NonFinite(msg)) => return Ok(stop(history, msg)),
                    Err(e) => return Err(e),
                }
            }
            loss_sum += batch_loss;
            steps += 1;
        }
        let fraction = (sampled > 0).then(|| clamped as f64 / sampled as f64);
        let rec = record(model, epoch, Some(loss_sum / steps as f64), fraction)?;
        if !rec.train.total.is_finite() {
            return Ok(stop(history, format!("evaluation loss after epoch {epoch} is not finite")));
        }
        on_epoch(model, &rec)?;
        history.push(rec);
    }
    Ok(TrainOutcome { history, diverged: None })
}

/// Scales `grads` down so their joint L2 norm is at most `limit`. A
/// non-finite norm is left for the optimizer to reject.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], limit: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > limit {
        let k = (limit / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

fn stop(history: Vec<EpochRecord>, reason: String) -> TrainOutcome {
    TrainOutcome {
        history,
        diverged: Some(reason),
    }
}
