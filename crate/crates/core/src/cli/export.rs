//! Graph export for one window of one conversation, as JSON or DOT.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::Rng;
use crate::synthdata::Conversation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    pub id: String,
    pub utterance: usize,
    pub topic: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportEdge {
    pub source: String,
    pub target: String,
    pub m: f64,
    pub m0: f64,
    pub alpha_mean: f64,
    pub s_mean: f64,
    pub alpha_bar_mean: f64,
    /// `alpha_bar_mean` min-max scaled over the window's edges.
    pub weight: f64,
    /// Whether the pair is a ground-truth relation.
    pub relation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportGraph {
    pub conversation: String,
    pub window_end: usize,
    pub draws: usize,
    pub seed: u64,
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<ExportEdge>,
}

fn node_id(i: usize) -> String {
    format!("u{i}")
}

/// Samples the graphs of the window ending at utterance `end` (the last one
/// by default) `draws` times and averages the edge values.
pub fn export_graph(model: &Model, conv: &Conversation, end: Option<usize>, draws: usize, seed: u64) -> Result<ExportGraph> {
    let Some(dgp) = &model.dgp else {
        return Err(Error::Contract("the no-graph model has no graph to export".into()));
    };
    if draws == 0 {
        return Err(Error::Contract("draws must be positive".into()));
    }
    model.check_conversation(conv)?;
    let len = conv.utterances.len();
    let end = end.unwrap_or(len.saturating_sub(1));
    if end >= len {
        return Err(Error::Contract(format!("{} has {len} utterances, no utterance {end}", conv.id)));
    }
    let first = end.saturating_sub(model.config.window);
    let frames: Vec<_> = conv.utterances[first..=end].iter().map(|u| u.frames.clone()).collect();
    let params = model.store.cast::<f64>();
    let mut rng = Rng::new(seed);

    let mut sums: Vec<[f64; 3]> = Vec::new();
    let mut edges = Vec::new();
    for draw in 0..draws {
        let (summary, task, _) = dgp.build_graphs(&params, &frames, first, &mut rng)?;
        if draw == 0 {
            sums = vec![[0.0; 3]; summary.pairs.len()];
            edges = summary.pairs.iter().copied().zip(summary.params.iter().copied()).collect();
        }
        for (q, acc) in sums.iter_mut().enumerate() {
            acc[0] += summary.alpha[q];
            acc[1] += task.s[q];
            acc[2] += task.alpha_bar[q];
        }
    }
    let n = draws as f64;
    let means: Vec<[f64; 3]> = sums.iter().map(|a| a.map(|x| x / n)).collect();
    let (lo, hi) = means
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| (lo.min(a[2]), hi.max(a[2])));
    let scale = |x: f64| if hi > lo { (x - lo) / (hi - lo) } else { 1.0 };

    Ok(ExportGraph {
        conversation: conv.id.clone(),
        window_end: end,
        draws,
        seed,
        nodes: (first..=end)
            .map(|i| ExportNode {
                id: node_id(i),
                utterance: i,
                topic: conv.utterances[i].topic,
            })
            .collect(),
        edges: edges
            .iter()
            .zip(&means)
            .map(|(&((j, k), p), a)| ExportEdge {
                source: node_id(j),
                target: node_id(k),
                m: p.m,
                m0: p.m0,
                alpha_mean: a[0],
                s_mean: a[1],
                alpha_bar_mean: a[2],
                weight: scale(a[2]),
                relation: conv.relations.contains(&(j, k)),
            })
            .collect(),
    })
}

impl ExportGraph {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    /// DOT text. Edge colour runs from light grey (weight 0) to dark red
    /// (weight 1); ground-truth relations are drawn solid, others dashed.
    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digraph \"{}\" {{", self.conversation);
        let _ = writeln!(s, "  rankdir=LR;");
        let _ = writeln!(s, "  node [shape=circle];");
        for n in &self.nodes {
            let _ = writeln!(s, "  {} [label=\"{}\\ntopic {}\"];", n.id, n.id, n.topic);
        }
        let lerp = |a: f64, b: f64, t: f64| (a + (b - a) * t).round() as u8;
        for e in &self.edges {
            let t = e.weight.clamp(0.0, 1.0);
            let (r, g, b) = (lerp(220.0, 140.0, t), lerp(220.0, 0.0, t), lerp(220.0, 0.0, t));
            let _ = writeln!(
                s,
                "  {} -> {} [color=\"#{r:02x}{g:02x}{b:02x}\", penwidth={:.2}, style={}, label=\"{:.3}\"];",
                e.source,
                e.target,
                0.5 + 2.5 * t,
                if e.relation { "solid" } else { "dashed" },
                e.alpha_bar_mean
            );
        }
        s.push_str("}\n");
        s
    }
}
