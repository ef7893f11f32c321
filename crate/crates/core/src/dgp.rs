//! The deep graph random process over a window of utterances.
//!
//! Each utterance is encoded into a node embedding. Every node pair gets a
//! summary edge, a Binomial count with finite mean `m` sampled through the
//! proxy `𝒩(m, m(1−m))`, and a Gaussian transform weight `s`. The product
//! `ᾱ = s·α̃` weights a dense image of the node pair in the graph embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, NoiseSource, Real, Rng, Tensor, Var};
use crate::params::{Dense, Mlp, ParamStore, SruStack};

/// Constants of the edge parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConstants {
    /// Lower bound on `n`.
    pub epsilon: f64,
    /// Lower bound on every predicted standard deviation.
    pub epsilon_sigma: f64,
    /// Lower clamp on sampled summary edges.
    pub epsilon_alpha: f64,
}

impl Default for EdgeConstants {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            epsilon_sigma: 1e-3,
            epsilon_alpha: 1e-4,
        }
    }
}

/// Map from raw network outputs `(a, b)` to the summary-edge mean:
/// `n = softplus(a) + ε`, `σ̃ = softplus(b) + ε_σ`, `l = 2nσ̃²`.
pub fn summary_m(a: f64, b: f64, k: &EdgeConstants) -> f64 {
    let n = crate::numcore::activations::softplus(a) + k.epsilon;
    let sigma = crate::numcore::activations::softplus(b) + k.epsilon_sigma;
    crate::distributions::m_from_l(2.0 * n * sigma * sigma)
}

/// `α̃ = clamp(m + √(m(1−m))·z, ε_α, 1)`.
pub fn sample_summary_edge(m: f64, z: f64, epsilon_alpha: f64) -> f64 {
    (m + (m * (1.0 - m)).sqrt() * z).clamp(epsilon_alpha, 1.0)
}

/// `s = α̃·μ + √α̃·σ·z`; returns `(s, ᾱ = s·α̃)`.
pub fn sample_transform(alpha: f64, mu: f64, sigma: f64, z: f64) -> (f64, f64) {
    let s = alpha * mu + alpha.sqrt() * sigma * z;
    (s, s * alpha)
}

/// Candidate pairs `j < k` over a sequence of utterances, and for each
/// utterance `i` the pairs inside its window `[i−o, i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTable {
    pub pairs: Vec<(usize, usize)>,
    pub windows: Vec<Vec<usize>>,
    /// Number of windows containing each pair.
    pub multiplicity: Vec<usize>,
}

impl PairTable {
    pub fn new(len: usize, o: usize) -> Self {
        let mut pairs = Vec::new();
        for k in 0..len {
            for j in k.saturating_sub(o)..k {
                pairs.push((j, k));
            }
        }
        let mut multiplicity = vec![0; pairs.len()];
        let windows = (0..len)
            .map(|i| {
                let lo = i.saturating_sub(o);
                let w: Vec<usize> = (0..pairs.len()).filter(|&q| pairs[q].0 >= lo && pairs[q].1 <= i).collect();
                for &q in &w {
                    multiplicity[q] += 1;
                }
                w
            })
            .collect();
        Self {
            pairs,
            windows,
            multiplicity,
        }
    }
}

/// Per-pair edge quantities as graph vectors of length `P`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeVars {
    pub m: Var,
    pub mu_s: Var,
    pub sigma_s: Var,
}

/// Per-pair edge quantities as plain values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    pub m: f64,
    pub m0: f64,
    pub mu_s: f64,
    pub sigma_s: f64,
    pub mu_s0: f64,
    pub sigma_s0: f64,
}

/// Node encoder: SRU stack, max over frames, dense layer, rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub sru: SruStack,
    pub out: Dense,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize, depth: usize, d_node: usize, rng: &mut Rng) -> Self {
        let sru = SruStack::new(store, "encoder.sru", input, hidden, depth, rng);
        let out = Dense::new(store, "encoder.out", hidden, d_node, rng);
        Self { sru, out }
    }

    pub fn encode_node<T: Real>(&self, g: &mut Graph<T>, p: &[Var], frames: Var) -> Result<Var> {
        if g.value(frames).shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Contract("cannot encode an utterance with no frames".into()));
        }
        let h = self.sru.apply(g, p, frames)?;
        let pooled = g.max_rows(h)?;
        let v = self.out.apply(g, p, pooled)?;
        Ok(g.relu(v))
    }
}

/// Posterior or prior head: one network for `(a, b)`, one for `(c, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeHead {
    pub edge: Mlp,
    pub transform: Mlp,
}

impl EdgeHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_node: usize,
        edge_hidden: &[usize],
        transform_hidden: &[usize],
        rng: &mut Rng,
    ) -> Self {
        Self {
            edge: Mlp::new(store, &format!("{name}.edge"), 2 * d_node, edge_hidden, 2, rng),
            transform: Mlp::new(store, &format!("{name}.transform"), 2 * d_node, transform_hidden, 2, rng),
        }
    }

    /// Edge quantities for every row of `pairs` [P×2d].
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], pairs: Var, k: &EdgeConstants) -> Result<EdgeVars> {
        let ab = self.edge.apply(g, p, pairs)?;
        let a = g.column(ab, 0)?;
        let b = g.column(ab, 1)?;
        let n = g.softplus(a);
        let n = g.add_scalar(n, T::of(k.epsilon));
        let sigma = g.softplus(b);
        let sigma = g.add_scalar(sigma, T::of(k.epsilon_sigma));
        let sigma2 = g.square(sigma);
        let l = g.mul(n, sigma2)?;
        let l = g.mul_scalar(l, T::of(2.0));
        // m = l / (1 + l + √(1 + l²)), free of the cancellation in (1 + l − √(1 + l²))/2.
        let l2 = g.square(l);
        let l2 = g.add_scalar(l2, T::one());
        let root = g.sqrt(l2);
        let denom = g.add_scalar(l, T::one());
        let denom = g.add(denom, root)?;
        let m = g.div(l, denom)?;

        let cd = self.transform.apply(g, p, pairs)?;
        let mu_s = g.column(cd, 0)?;
        let d = g.column(cd, 1)?;
        let sigma_s = g.softplus(d);
        let sigma_s = g.add_scalar(sigma_s, T::of(k.epsilon_sigma));
        Ok(EdgeVars { m, mu_s, sigma_s })
    }
}

/// All DGP networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dgp {
    pub encoder: Encoder,
    pub posterior: EdgeHead,
    pub prior: EdgeHead,
    pub pair: Mlp,
    pub constants: EdgeConstants,
}

/// Everything computed once per utterance sequence.
#[derive(Clone, Debug)]
pub struct DgpForward {
    pub nodes: Vec<Var>,
    pub table: PairTable,
    /// Empty when the sequence has a single utterance.
    pub edges: Option<PairVars>,
}

#[derive(Clone, Debug)]
pub struct PairVars {
    pub posterior: EdgeVars,
    pub prior: EdgeVars,
    /// Dense image of each node pair [P×E].
    pub features: Var,
}

/// Samples drawn for one window.
#[derive(Clone, Debug)]
pub struct WindowSample {
    /// Indices into [`PairTable::pairs`].
    pub pairs: Vec<usize>,
    pub alpha: Option<Var>,
    pub s: Option<Var>,
    pub alpha_bar: Option<Var>,
    pub e: Var,
}

impl Dgp {
    pub fn d_embed(&self) -> usize {
        self.pair.layers.last().map_or(0, |l| l.output)
    }

    /// Encodes every utterance and evaluates both heads and the pair network
    /// on every candidate pair.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], utterances: &[Var], o: usize) -> Result<DgpForward> {
        if utterances.is_empty() {
            return Err(Error::Contract("graph over an empty window".into()));
        }
        let nodes = utterances
            .iter()
            .map(|&x| self.encoder.encode_node(g, p, x))
            .collect::<Result<Vec<_>>>()?;
        let table = PairTable::new(utterances.len(), o);
        if table.pairs.is_empty() {
            return Ok(DgpForward { nodes, table, edges: None });
        }
        let v = g.stack_rows(&nodes)?;
        let js: Vec<usize> = table.pairs.iter().map(|&(j, _)| j).collect();
        let ks: Vec<usize> = table.pairs.iter().map(|&(_, k)| k).collect();
        let vj = g.gather_rows(v, &js)?;
        let vk = g.gather_rows(v, &ks)?;
        let x = g.concat_cols(vj, vk)?;
        let posterior = self.posterior.apply(g, p, x, &self.constants)?;
        let prior = self.prior.apply(g, p, x, &self.constants)?;
        let features = self.pair.apply(g, p, x)?;
        Ok(DgpForward {
            nodes,
            table,
            edges: Some(PairVars {
                posterior,
                prior,
                features,
            }),
        })
    }

    /// Samples `α̃` and `s` for every pair in window `i` and reads out the
    /// graph embedding `e_i = Σ ᾱ_{jk} f̄([v_j, v_k])`. Draws all `α̃` noise
    /// first, then all `s` noise, in pair order.
    pub fn sample_window<T: Real>(
        &self,
        g: &mut Graph<T>,
        fwd: &DgpForward,
        i: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<WindowSample> {
        let pairs = fwd.table.windows[i].clone();
        let (Some(edges), false) = (&fwd.edges, pairs.is_empty()) else {
            let e = g.constant(Tensor::zeros(&[self.d_embed()]));
            return Ok(WindowSample {
                pairs,
                alpha: None,
                s: None,
                alpha_bar: None,
                e,
            });
        };
        let z1: Vec<f64> = pairs.iter().map(|_| noise.normal()).collect();
        let z2: Vec<f64> = pairs.iter().map(|_| noise.normal()).collect();
        let m = g.gather(edges.posterior.m, &pairs)?;
        let alpha = proxy_sample(g, m, &z1, self.constants.epsilon_alpha)?;
        let mu = g.gather(edges.posterior.mu_s, &pairs)?;
        let sigma = g.gather(edges.posterior.sigma_s, &pairs)?;
        let (s, alpha_bar) = transform_sample(g, alpha, mu, sigma, &z2)?;
        let f = g.gather_rows(edges.features, &pairs)?;
        let e = graph_embedding(g, alpha_bar, f)?;
        Ok(WindowSample {
            pairs,
            alpha: Some(alpha),
            s: Some(s),
            alpha_bar: Some(alpha_bar),
            e,
        })
    }

    /// Plain per-pair edge parameters from a completed forward pass.
    pub fn edge_params<T: Real>(&self, g: &Graph<T>, fwd: &DgpForward) -> Vec<EdgeParams> {
        let Some(edges) = &fwd.edges else {
            return Vec::new();
        };
        let col = |v: Var| g.value(v).to_f64_vec();
        let (m, mu, sg) = (col(edges.posterior.m), col(edges.posterior.mu_s), col(edges.posterior.sigma_s));
        let (m0, mu0, sg0) = (col(edges.prior.m), col(edges.prior.mu_s), col(edges.prior.sigma_s));
        (0..m.len())
            .map(|q| EdgeParams {
                m: m[q],
                m0: m0[q],
                mu_s: mu[q],
                sigma_s: sg[q],
                mu_s0: mu0[q],
                sigma_s0: sg0[q],
            })
            .collect()
    }
}

/// Reparameterized proxy sample `clamp(m + √(m(1−m))·z, ε_α, 1)` on a vector.
pub fn proxy_sample<T: Real>(g: &mut Graph<T>, m: Var, z: &[f64], epsilon_alpha: f64) -> Result<Var> {
    let one_minus = g.rsub_scalar(T::one(), m);
    let var = g.mul(m, one_minus)?;
    let sd = g.sqrt(var);
    let z = g.constant(Tensor::from_f64(&[z.len()], z)?);
    let shift = g.mul(sd, z)?;
    let raw = g.add(m, shift)?;
    Ok(g.clamp(raw, T::of(epsilon_alpha), T::one()))
}

/// Reparameterized `s = α̃μ + √α̃·σ·z` and `ᾱ = s·α̃` on vectors.
pub fn transform_sample<T: Real>(g: &mut Graph<T>, alpha: Var, mu: Var, sigma: Var, z: &[f64]) -> Result<(Var, Var)> {
    let mean = g.mul(alpha, mu)?;
    let root = g.sqrt(alpha);
    let sd = g.mul(root, sigma)?;
    let z = g.constant(Tensor::from_f64(&[z.len()], z)?);
    let shift = g.mul(sd, z)?;
    let s = g.add(mean, shift)?;
    let alpha_bar = g.mul(s, alpha)?;
    Ok((s, alpha_bar))
}

/// `Σ_q ᾱ_q · f_q` for weights [P] and pair features [P×E].
pub fn graph_embedding<T: Real>(g: &mut Graph<T>, alpha_bar: Var, features: Var) -> Result<Var> {
    g.matmul(alpha_bar, features)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryGraph {
    /// Utterance indices of the window's nodes.
    pub nodes: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
    pub pairs: Vec<(usize, usize)>,
    pub alpha: Vec<f64>,
    pub params: Vec<EdgeParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub nodes: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub s: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Dgp {
    /// Encodes a window of utterance frame matrices, samples both graphs over
    /// all pairs, and returns the embedding for the last node. Nodes are
    /// numbered from `first` upwards.
    pub fn build_graphs(
        &self,
        params: &[Tensor<f64>],
        window: &[Tensor<f32>],
        first: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<(SummaryGraph, TaskGraph, Vec<f64>)> {
        let mut g = Graph::<f64>::new();
        let p: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
        let xs: Vec<Var> = window.iter().map(|f| g.constant(f.cast())).collect();
        let fwd = self.forward(&mut g, &p, &xs, window.len().saturating_sub(1))?;
        let last = window.len() - 1;
        let sample = self.sample_window(&mut g, &fwd, last, noise)?;
        let read = |v: Option<Var>| v.map_or_else(Vec::new, |v| g.value(v).to_f64_vec());
        let all = self.edge_params(&g, &fwd);
        let pairs: Vec<(usize, usize)> = sample.pairs.iter().map(|&q| shift(fwd.table.pairs[q], first)).collect();
        let nodes: Vec<usize> = (first..first + window.len()).collect();
        let summary = SummaryGraph {
            nodes: nodes.clone(),
            embeddings: fwd.nodes.iter().map(|&v| g.value(v).to_f64_vec()).collect(),
            pairs: pairs.clone(),
            alpha: read(sample.alpha),
            params: sample.pairs.iter().map(|&q| all[q]).collect(),
        };
        let task = TaskGraph {
            nodes,
            pairs,
            s: read(sample.s),
            alpha_bar: read(sample.alpha_bar),
        };
        Ok((summary, task, g.value(sample.e).to_f64_vec()))
    }
}

fn shift((j, k): (usize, usize), by: usize) -> (usize, usize) {
    (j + by, k + by)
}
