//! The relational thinking network: an SRU stack over the frames of one
//! utterance, with the graph embedding appended to the input frames, and a
//! per-frame softmax classifier.

use crate::error::{Error, Result};
use crate::numcore::{Graph, NoiseSource, Real, Rng, Tensor, Var};
use crate::params::{Dense, ParamStore, SruLayer};

/// One SRU time step from primitives:
/// `[r̂, f̂, ĉ] = W_x x + b`, `r = σ(r̂)`, `f = σ(f̂)`,
/// `c = f⊙c_prev + (1−f)⊙ĉ`, `h = r⊙c + (1−r)⊙(W_h x)`.
pub fn sru_step<T: Real>(g: &mut Graph<T>, p: &[Var], layer: &SruLayer, x: Var, c_prev: Var) -> Result<(Var, Var)> {
    let hdim = layer.hidden;
    if g.value(c_prev).shape() != [hdim] {
        return Err(Error::shape("sru_step", format!("cell {:?} vs hidden {hdim}", g.value(c_prev).shape())));
    }
    let z = g.linear(x, p[layer.wx.index()], Some(p[layer.b.index()]))?;
    let block = |k: usize| (k * hdim..(k + 1) * hdim).collect::<Vec<_>>();
    let r_hat = g.gather(z, &block(0))?;
    let f_hat = g.gather(z, &block(1))?;
    let c_hat = g.gather(z, &block(2))?;
    let r = g.sigmoid(r_hat);
    let f = g.sigmoid(f_hat);
    let kept = g.mul(f, c_prev)?;
    let one_minus_f = g.rsub_scalar(T::one(), f);
    let fresh = g.mul(one_minus_f, c_hat)?;
    let c = g.add(kept, fresh)?;
    let highway = g.linear(x, p[layer.wh.index()], None)?;
    let gated = g.mul(r, c)?;
    let one_minus_r = g.rsub_scalar(T::one(), r);
    let carried = g.mul(one_minus_r, highway)?;
    let h = g.add(gated, carried)?;
    Ok((h, c))
}

/// A whole layer as a fold of [`sru_step`] from a zero cell; equal to the
/// fused `Graph::sru` kernel.
pub fn sru_layer_by_steps<T: Real>(g: &mut Graph<T>, p: &[Var], layer: &SruLayer, x: Var) -> Result<Var> {
    let (t, d) = g.value(x).as_matrix_dims()?;
    if d != layer.input {
        return Err(Error::shape("sru_layer_by_steps", format!("input width {d} vs {}", layer.input)));
    }
    let mut c = g.constant(Tensor::zeros(&[layer.hidden]));
    let mut hs = Vec::with_capacity(t);
    for step in 0..t {
        let row = g.gather_rows(x, &[step])?;
        let xt = row_as_vector(g, row, d)?;
        let (h, c_next) = sru_step(g, p, layer, xt, c)?;
        hs.push(h);
        c = c_next;
    }
    g.stack_rows(&hs)
}

fn row_as_vector<T: Real>(g: &mut Graph<T>, row: Var, d: usize) -> Result<Var> {
    let cols = (0..d).map(|k| g.column(row, k)).collect::<Result<Vec<_>>>()?;
    g.concat(&cols)
}

/// SRU classifier over frames, optionally fed a graph embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Rtn {
    pub layers: Vec<SruLayer>,
    pub out: Dense,
    /// Width of the graph embedding (0 for the no-graph baseline).
    pub embed: usize,
    /// Append the embedding to every layer's input rather than only the first.
    pub embed_every_layer: bool,
}

impl Rtn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        input: usize,
        embed: usize,
        hidden: usize,
        depth: usize,
        classes: usize,
        embed_every_layer: bool,
        rng: &mut Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let base = if l == 0 { input } else { hidden };
                let extra = if l == 0 || embed_every_layer { embed } else { 0 };
                SruLayer::new(store, &format!("rtn.sru.{l}"), base + extra, hidden, rng)
            })
            .collect();
        let out = Dense::new(store, "rtn.out", hidden, classes, rng);
        Self {
            layers,
            out,
            embed,
            embed_every_layer,
        }
    }

    /// Per-frame logits [T×C] for frames [T×D] and embedding `e` [E]. With a
    /// nonzero `dropout` rate an inverted-dropout mask drawn from `noise` is
    /// applied between layers.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        frames: Var,
        e: Option<Var>,
        dropout: f64,
        noise: &mut dyn NoiseSource,
    ) -> Result<Var> {
        let (t, _) = g.value(frames).as_matrix_dims()?;
        if t == 0 {
            return Err(Error::Contract("utterance with no frames".into()));
        }
        if (self.embed > 0) != e.is_some() {
            return Err(Error::Contract(format!("network expects an embedding of width {}", self.embed)));
        }
        let mut h = frames;
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 && dropout > 0.0 {
                h = apply_dropout(g, h, dropout, noise)?;
            }
            let input = match e {
                Some(e) if l == 0 || self.embed_every_layer => g.concat_broadcast(h, e)?,
                _ => h,
            };
            h = layer.apply(g, p, input)?;
        }
        self.out.apply(g, p, h)
    }
}

fn apply_dropout<T: Real>(g: &mut Graph<T>, h: Var, rate: f64, noise: &mut dyn NoiseSource) -> Result<Var> {
    let shape = g.value(h).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n).map(|_| if noise.uniform() < rate { 0.0 } else { keep }).collect();
    let mask = g.constant(Tensor::from_f64(&shape, &mask)?);
    g.mul(h, mask)
}

/// Mean per-frame cross-entropy of `logits` [T×C] against `labels`.
pub fn frame_xent<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let total = g.softmax_xent(logits, labels)?;
    Ok(g.mul_scalar(total, T::of(1.0 / labels.len().max(1) as f64)))
}
