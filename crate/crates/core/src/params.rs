//! Named parameter storage and the layer types built on it.
//!
//! Parameters live in a [`ParamStore`] as single-precision tensors in a fixed
//! registration order. A forward pass first binds every parameter as a graph
//! leaf with [`bind`], so the `i`-th parameter is always `Var` number `i` and
//! gradients come back in store order.

use crate::error::{Error, Result};
use crate::numcore::{Graph, Real, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, checking names and shapes against the current
    /// layout.
    pub fn load(&mut self, named: Vec<(String, Tensor<f32>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", self.tensors.len(), named.len())));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            if *name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
        }
        self.tensors = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    pub fn cast<T: Real>(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(Tensor::cast).collect()
    }
}

/// Binds every stored tensor as a trainable leaf, in store order.
pub fn bind<T: Real>(g: &mut Graph<T>, values: &[Tensor<T>]) -> Vec<Var> {
    values.iter().map(|t| g.param(t.clone())).collect()
}

fn glorot(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| ((2.0 * rng.uniform() - 1.0) * limit) as f32).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, output, input));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Self { w, b, input, output }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.w.0], Some(p[self.b.0]))
    }
}

/// Dense layers with rectified hidden activations and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: &[usize], output: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for (i, &h) in hidden.iter().chain(std::iter::once(&output)).enumerate() {
            layers.push(Dense::new(store, &format!("{name}.{i}"), width, h, rng));
            width = h;
        }
        Self { layers }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Copies this network's weights onto `other`, which must share its shape.
    pub fn copy_into(&self, other: &Mlp, store: &mut ParamStore) {
        for (a, b) in self.layers.iter().zip(&other.layers) {
            let (w, bias) = (store.get(a.w).clone(), store.get(a.b).clone());
            *store.get_mut(b.w) = w;
            *store.get_mut(b.b) = bias;
        }
    }
}

/// One SRU layer: `wx` [3H×D] produces the stacked (r̂, f̂, ĉ) pre-activations,
/// `wh` [H×D] the highway projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SruLayer {
    pub wx: ParamId,
    pub b: ParamId,
    pub wh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl SruLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let wx = store.add(format!("{name}.wx"), glorot(rng, 3 * hidden, input));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[3 * hidden]));
        let wh = store.add(format!("{name}.wh"), glorot(rng, hidden, input));
        Self { wx, b, wh, input, hidden }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.sru(x, p[self.wx.0], p[self.b.0], p[self.wh.0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SruStack {
    pub layers: Vec<SruLayer>,
}

impl SruStack {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, depth: usize, rng: &mut Rng) -> Self {
        let layers = (0..depth)
            .map(|l| SruLayer::new(store, &format!("{name}.{l}"), if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        Self { layers }
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.apply(g, p, h))
    }
}
