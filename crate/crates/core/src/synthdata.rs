//! Synthetic conversations with planted utterance relations.
//!
//! Each utterance has a topic. Its frames are the topic's prototype vector
//! plus a position code and Gaussian noise. Utterance `i` is related to the
//! most recent earlier utterance with the same topic inside the window. The
//! label of frame `t` is `(2·topic + has_ref + ⌊t/phase⌋) mod C`, so the
//! `has_ref` bit can only be recovered from the conversation history.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numcore::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub topics: usize,
    pub classes: usize,
    pub dim: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub utterances: usize,
    pub window: usize,
    pub phase: usize,
    pub noise: f64,
    pub prototype_scale: f64,
    pub position_scale: f64,
    /// Seeds the topic prototypes. Kept apart from `seed` so datasets drawn
    /// with different seeds share one set of topics.
    pub prototype_seed: u64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            topics: 4,
            classes: 8,
            dim: 8,
            t_min: 12,
            t_max: 20,
            utterances: 10,
            window: 9,
            phase: 4,
            noise: 0.1,
            prototype_scale: 1.0,
            position_scale: 1.0,
            prototype_seed: 0x70_70_7e,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.topics >= 1, "topics ≥ 1"),
            (self.classes >= 2, "classes ≥ 2"),
            (self.dim >= 1, "dim ≥ 1"),
            (self.t_min >= 1 && self.t_min <= self.t_max, "1 ≤ t_min ≤ t_max"),
            (self.utterances >= 1, "utterances ≥ 1"),
            (self.window >= 1, "window ≥ 1"),
            (self.phase >= 1, "phase ≥ 1"),
            (self.noise >= 0.0 && self.noise.is_finite(), "noise ≥ 0"),
            (self.prototype_scale.is_finite() && self.position_scale.is_finite(), "finite scales"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, what)) => Err(domain(format!("invalid generator config: need {what}"))),
            None => Ok(()),
        }
    }

    pub fn label(&self, topic: usize, has_ref: bool, t: usize) -> usize {
        (2 * topic + usize::from(has_ref) + t / self.phase) % self.classes
    }

    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(self.prototype_seed);
        (0..self.topics)
            .map(|_| (0..self.dim).map(|_| self.prototype_scale * rng.normal()).collect())
            .collect()
    }

    /// Position code for frame `t`: alternating sines and cosines with
    /// periods that grow with the feature index.
    pub fn position_code(&self, t: usize, d: usize) -> f64 {
        let omega = std::f64::consts::PI / (self.phase as f64 * (1 + d / 2) as f64);
        let angle = omega * t as f64;
        self.position_scale * if d.is_multiple_of(2) { angle.sin() } else { angle.cos() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// Frame features [T×D].
    pub frames: Tensor<f32>,
    pub labels: Vec<usize>,
    pub topic: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    /// Ground-truth relations `(j, i)`, `j < i`.
    pub relations: Vec<(usize, usize)>,
}

impl Conversation {
    pub fn has_ref(&self, i: usize) -> bool {
        self.relations.iter().any(|&(_, k)| k == i)
    }

    pub fn frame_count(&self) -> usize {
        self.utterances.iter().map(|u| u.labels.len()).sum()
    }
}

/// Generates `count` conversations. Conversation `c` draws from its own
/// substream of `config.seed`, so the output does not depend on generation
/// order.
pub fn generate(config: &GenConfig, count: usize) -> Result<Vec<Conversation>> {
    config.validate()?;
    if count == 0 {
        return Err(domain("conversation count must be at least 1"));
    }
    let prototypes = config.prototypes();
    Ok((0..count).map(|c| generate_one(config, &prototypes, c)).collect())
}

fn generate_one(config: &GenConfig, prototypes: &[Vec<f64>], index: usize) -> Conversation {
    let mut rng = Rng::substream(config.seed, &[index as u64]);
    let mut topics = Vec::with_capacity(config.utterances);
    let mut utterances = Vec::with_capacity(config.utterances);
    let mut relations = Vec::new();
    for i in 0..config.utterances {
        let topic = rng.below(config.topics);
        let lo = i.saturating_sub(config.window);
        let antecedent = (lo..i).rev().find(|&j| topics[j] == topic);
        if let Some(j) = antecedent {
            relations.push((j, i));
        }
        topics.push(topic);
        let t_len = rng.range_inclusive(config.t_min, config.t_max);
        let mut data = Vec::with_capacity(t_len * config.dim);
        for t in 0..t_len {
            for d in 0..config.dim {
                let x = prototypes[topic][d] + config.position_code(t, d) + config.noise * rng.normal();
                data.push(x as f32);
            }
        }
        let labels = (0..t_len).map(|t| config.label(topic, antecedent.is_some(), t)).collect();
        utterances.push(Utterance {
            frames: Tensor::new(vec![t_len, config.dim], data).expect("shape matches data"),
            labels,
            topic,
        });
    }
    Conversation {
        id: format!("s{}-{index:05}", config.seed),
        utterances,
        relations,
    }
}

/// Probability that utterance `i` has a same-topic antecedent in its window.
pub fn ref_probability(config: &GenConfig, i: usize) -> f64 {
    let q = (config.topics as f64 - 1.0) / config.topics as f64;
    1.0 - q.powi(i.min(config.window) as i32)
}

/// Mean of [`ref_probability`] over utterance positions.
pub fn mean_ref_rate(config: &GenConfig) -> f64 {
    (0..config.utterances).map(|i| ref_probability(config, i)).sum::<f64>() / config.utterances as f64
}

/// Expected fraction of candidate pairs (`0 < i − j ≤ window`) that are relations.
pub fn expected_positive_pair_rate(config: &GenConfig) -> f64 {
    let pairs: usize = (0..config.utterances).map(|i| i.min(config.window)).sum();
    (0..config.utterances).map(|i| ref_probability(config, i)).sum::<f64>() / pairs as f64
}

/// Best frame accuracy for a classifier that sees only the current
/// utterance. Topic and frame position are recoverable from the frames, but
/// `has_ref` is not, so the best guess is its more likely value.
pub fn oracle_accuracy_ceiling(config: &GenConfig) -> f64 {
    let p = mean_ref_rate(config);
    p.max(1.0 - p)
}

/// The same ceiling by enumerating every topic sequence.
pub fn enumerated_accuracy_ceiling(config: &GenConfig) -> f64 {
    let (k, n) = (config.topics, config.utterances);
    let total = k.pow(n as u32);
    let mut refs = 0usize;
    let mut seq = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for s in seq.iter_mut() {
            *s = c % k;
            c /= k;
        }
        for i in 0..n {
            let lo = i.saturating_sub(config.window);
            refs += usize::from(seq[lo..i].contains(&seq[i]));
        }
    }
    let p = refs as f64 / (total * n) as f64;
    p.max(1.0 - p)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    frames: Vec<Vec<f32>>,
    labels: Vec<usize>,
    topic: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
    relations: Vec<(usize, usize)>,
}

impl From<&Conversation> for ConversationRecord {
    fn from(c: &Conversation) -> Self {
        let utterances = c
            .utterances
            .iter()
            .map(|u| {
                let t = u.labels.len();
                UtteranceRecord {
                    frames: (0..t).map(|r| u.frames.row(r).to_vec()).collect(),
                    labels: u.labels.clone(),
                    topic: u.topic,
                }
            })
            .collect();
        Self {
            id: c.id.clone(),
            utterances,
            relations: c.relations.clone(),
        }
    }
}

impl TryFrom<ConversationRecord> for Conversation {
    type Error = Error;

    fn try_from(r: ConversationRecord) -> Result<Self> {
        let mut utterances = Vec::with_capacity(r.utterances.len());
        for (i, u) in r.utterances.into_iter().enumerate() {
            let t = u.frames.len();
            let d = u.frames.first().map_or(0, Vec::len);
            if t == 0 || t != u.labels.len() || u.frames.iter().any(|f| f.len() != d) {
                return Err(Error::Format(format!("{}: utterance {i} has ragged frames or labels", r.id)));
            }
            let frames = Tensor::new(vec![t, d], u.frames.into_iter().flatten().collect())?;
            utterances.push(Utterance {
                frames,
                labels: u.labels,
                topic: u.topic,
            });
        }
        if let Some(&(j, i)) = r.relations.iter().find(|&&(j, i)| j >= i || i >= utterances.len()) {
            return Err(Error::Format(format!("{}: invalid relation ({j}, {i})", r.id)));
        }
        Ok(Self {
            id: r.id,
            utterances,
            relations: r.relations,
        })
    }
}

pub fn write_jsonl<W: Write>(out: W, conversations: &[Conversation]) -> Result<()> {
    let mut out = BufWriter::new(out);
    for c in conversations {
        serde_json::to_writer(&mut out, &ConversationRecord::from(c)).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_jsonl<R: Read>(input: R) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConversationRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        out.push(Conversation::try_from(rec)?);
    }
    Ok(out)
}

pub fn save(path: &Path, conversations: &[Conversation]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(file, conversations)
}

pub fn load(path: &Path) -> Result<Vec<Conversation>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(file)
}
