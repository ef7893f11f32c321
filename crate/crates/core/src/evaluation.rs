//! Relation-prediction scoring and frame accuracy.
//!
//! Edges are ranked by a deterministic score, the top 20% are called
//! positive, and the result is summarized by the balanced error
//! `(FNR + FPR)/2`, which is 0.5 for a random ranking at any positive rate.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{argmax_rows, Model};
use crate::numcore::{Graph, NoiseSource, Real, Rng, Tensor};
use crate::synthdata::Conversation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Posterior summary-edge mean `m`.
    Summary,
    /// Noiseless task-graph weight `ᾱ = m²·μ_s`.
    Task,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "summary" => Ok(Self::Summary),
            "task" => Ok(Self::Task),
            _ => Err(Error::Config(format!("unknown score mode {s:?} (expected summary or task)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub conversation: String,
    pub pair: (usize, usize),
    pub score: f64,
    pub label: bool,
}

pub type EdgeScoreSet = Vec<EdgeScore>;

/// Scores every candidate pair of every conversation once. Without `sampled`
/// the scores are posterior means and no random numbers are drawn; with it,
/// one sample of `α̃` (and `s`) per pair replaces the mean.
pub fn score_edges(
    model: &Model,
    data: &[Conversation],
    mode: ScoreMode,
    mut sampled: Option<&mut dyn NoiseSource>,
) -> Result<EdgeScoreSet> {
    let Some(dgp) = &model.dgp else {
        return Err(Error::Contract("the no-graph model has no edges to score".into()));
    };
    let mut out = Vec::new();
    for conv in data {
        model.check_conversation(conv)?;
        let mut g = Graph::<f32>::new();
        let p = model.bind_constants(&mut g);
        let xs: Vec<_> = conv.utterances.iter().map(|u| g.constant(u.frames.cast())).collect();
        let fwd = dgp.forward(&mut g, &p, &xs, model.config.window)?;
        let eps_alpha = model.config.epsilon_alpha;
        for (q, e) in dgp.edge_params(&g, &fwd).into_iter().enumerate() {
            let alpha = match sampled.as_deref_mut() {
                Some(noise) => crate::dgp::sample_summary_edge(e.m, noise.normal(), eps_alpha),
                None => e.m,
            };
            let score = match (mode, sampled.as_deref_mut()) {
                (ScoreMode::Summary, _) => alpha,
                (ScoreMode::Task, Some(noise)) => crate::dgp::sample_transform(alpha, e.mu_s, e.sigma_s, noise.normal()).1,
                (ScoreMode::Task, None) => alpha * alpha * e.mu_s,
            };
            let pair = fwd.table.pairs[q];
            out.push(EdgeScore {
                conversation: conv.id.clone(),
                pair,
                score,
                label: conv.relations.contains(&pair),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationReport {
    pub balanced_error: f64,
    pub fnr: f64,
    pub fpr: f64,
    /// Number of top-ranked entries called positive.
    pub threshold_rank: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// Fraction of entries called positive.
pub const TOP_FRACTION: f64 = 0.2;

/// Ranks by descending score (ties keep input order), calls the top 20%
/// positive and reports the balanced error.
pub fn relation_error(scores: &[EdgeScore]) -> Result<RelationReport> {
    let positives = scores.iter().filter(|s| s.label).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(domain(format!("need both labels, got {positives} positive and {negatives} negative")));
    }
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::NonFinite(format!("score of {} {:?}", s.conversation, s.pair)));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].score.total_cmp(&scores[a].score));
    let k = (TOP_FRACTION * scores.len() as f64).round() as usize;
    let tp = order[..k].iter().filter(|&&i| scores[i].label).count();
    let fp = k - tp;
    let fnr = (positives - tp) as f64 / positives as f64;
    let fpr = fp as f64 / negatives as f64;
    Ok(RelationReport {
        balanced_error: 0.5 * (fnr + fpr),
        fnr,
        fpr,
        threshold_rank: k,
        positives,
        negatives,
    })
}

/// Mean balanced error over `trials` uniformly random score assignments to
/// the same labels.
pub fn random_baseline(labels: &[bool], trials: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    let mut scores: Vec<EdgeScore> = labels
        .iter()
        .map(|&label| EdgeScore {
            conversation: String::new(),
            pair: (0, 0),
            score: 0.0,
            label,
        })
        .collect();
    for _ in 0..trials {
        for s in scores.iter_mut() {
            s.score = rng.uniform();
        }
        total += relation_error(&scores)?.balanced_error;
    }
    Ok(total / trials as f64)
}

/// Fraction of frames whose arg-max logit equals the label.
pub fn accuracy_of<T: Real>(logits: &[Tensor<T>], labels: &[Vec<usize>]) -> f64 {
    let (mut hit, mut all) = (0usize, 0usize);
    for (y, l) in logits.iter().zip(labels) {
        hit += argmax_rows(y).iter().zip(l).filter(|(a, b)| a == b).count();
        all += l.len();
    }
    hit as f64 / all.max(1) as f64
}

/// Frame accuracy with every graph sample at its mean.
pub fn frame_accuracy(model: &Model, data: &[Conversation], threads: usize) -> Result<f64> {
    Ok(crate::training::evaluate(model, data, 0.0, threads)?.accuracy)
}

/// Per-conversation predicted labels under the noiseless pass.
pub fn predictions(model: &Model, data: &[Conversation]) -> Result<Vec<Vec<Vec<usize>>>> {
    data.par_iter()
        .map(|conv| {
            let mut g = Graph::<f32>::new();
            let p = model.bind_constants(&mut g);
            let fwd = model.forward(&mut g, &p, conv, &mut crate::numcore::ZeroNoise, false)?;
            Ok(fwd.logits.iter().map(|&y| argmax_rows(g.value(y))).collect())
        })
        .collect()
}

/// Writes `metric,value` rows.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["metric", "value"]).map_err(fail)?;
    for (name, value) in rows {
        w.write_record([name.as_str(), &value.to_string()]).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

impl RelationReport {
    pub fn rows(&self) -> Vec<(String, f64)> {
        vec![
            ("balanced_error".into(), self.balanced_error),
            ("fnr".into(), self.fnr),
            ("fpr".into(), self.fpr),
            ("threshold_rank".into(), self.threshold_rank as f64),
            ("positives".into(), self.positives as f64),
            ("negatives".into(), self.negatives as f64),
        ]
    }
}
