//! The full model: DGP graph generator feeding an RTN classifier, or the
//! RTN alone as the no-graph baseline.

use serde::{Deserialize, Serialize};

use crate::dgp::{Dgp, DgpForward, EdgeConstants, EdgeHead, Encoder, WindowSample};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NoiseSource, Real, Rng, Tensor, Var};
use crate::params::{Mlp, ParamStore};
use crate::rtn::Rtn;
use crate::synthdata::Conversation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub d_node: usize,
    pub edge_hidden: Vec<usize>,
    pub transform_hidden: Vec<usize>,
    pub pair_hidden: Vec<usize>,
    pub d_embed: usize,
    pub rtn_hidden: usize,
    pub rtn_layers: usize,
    /// Number of previous utterances in each graph window.
    pub window: usize,
    /// `false` gives the plain SRU classifier without graphs.
    pub use_graph: bool,
    pub embed_every_layer: bool,
    /// Inverted-dropout rate between RTN layers during training.
    pub dropout: f64,
    /// Start the prior networks as copies of the posterior networks.
    pub tie_prior_init: bool,
    pub epsilon: f64,
    pub epsilon_sigma: f64,
    pub epsilon_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        let k = EdgeConstants::default();
        Self {
            input_dim: 8,
            classes: 8,
            encoder_hidden: 32,
            encoder_layers: 2,
            d_node: 16,
            edge_hidden: vec![32],
            transform_hidden: vec![32],
            pair_hidden: vec![32],
            d_embed: 16,
            rtn_hidden: 32,
            rtn_layers: 2,
            window: 9,
            use_graph: true,
            embed_every_layer: false,
            dropout: 0.0,
            tie_prior_init: true,
            epsilon: k.epsilon,
            epsilon_sigma: k.epsilon_sigma,
            epsilon_alpha: k.epsilon_alpha,
        }
    }

    /// Layer sizes of the full-size speech configuration.
    pub fn paper() -> Self {
        Self {
            encoder_hidden: 1024,
            encoder_layers: 6,
            d_node: 128,
            edge_hidden: vec![128, 128],
            transform_hidden: vec![128, 128],
            pair_hidden: vec![128, 128],
            d_embed: 128,
            rtn_hidden: 1024,
            rtn_layers: 9,
            dropout: 0.1,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected desk or paper)"))),
        }
    }

    pub fn constants(&self) -> EdgeConstants {
        EdgeConstants {
            epsilon: self.epsilon,
            epsilon_sigma: self.epsilon_sigma,
            epsilon_alpha: self.epsilon_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_dim,
            self.classes,
            self.encoder_hidden,
            self.encoder_layers,
            self.d_node,
            self.d_embed,
            self.rtn_hidden,
            self.rtn_layers,
            self.window,
        ];
        if positive.contains(&0) || self.edge_hidden.contains(&0) || self.transform_hidden.contains(&0) || self.pair_hidden.contains(&0) {
            return Err(Error::Config("layer sizes and window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.epsilon > 0.0 && self.epsilon_sigma > 0.0 && self.epsilon_alpha > 0.0 && self.epsilon_alpha < 1.0) {
            return Err(Error::Config("epsilon constants must be positive and ε_α < 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub dgp: Option<Dgp>,
    pub rtn: Rtn,
}

/// Graph nodes of one conversation's forward pass.
#[derive(Clone, Debug)]
pub struct ConversationForward {
    pub logits: Vec<Var>,
    /// Summed frame cross-entropy.
    pub ce: Var,
    pub dgp: Option<DgpForward>,
    pub windows: Vec<WindowSample>,
    pub frames: usize,
}

impl Model {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let dgp = config.use_graph.then(|| {
            let c = &config;
            let encoder = Encoder::new(&mut store, c.input_dim, c.encoder_hidden, c.encoder_layers, c.d_node, &mut rng);
            let posterior = EdgeHead::new(&mut store, "posterior", c.d_node, &c.edge_hidden, &c.transform_hidden, &mut rng);
            let prior = EdgeHead::new(&mut store, "prior", c.d_node, &c.edge_hidden, &c.transform_hidden, &mut rng);
            if c.tie_prior_init {
                posterior.edge.copy_into(&prior.edge, &mut store);
                posterior.transform.copy_into(&prior.transform, &mut store);
            }
            let pair = Mlp::new(&mut store, "pair", 2 * c.d_node, &c.pair_hidden, c.d_embed, &mut rng);
            Dgp {
                encoder,
                posterior,
                prior,
                pair,
                constants: c.constants(),
            }
        });
        let embed = if config.use_graph { config.d_embed } else { 0 };
        let rtn = Rtn::new(
            &mut store,
            config.input_dim,
            embed,
            config.rtn_hidden,
            config.rtn_layers,
            config.classes,
            config.embed_every_layer,
            &mut rng,
        );
        Ok(Self { config, store, dgp, rtn })
    }

    /// Checks that a conversation fits this model's input and label sizes.
    pub fn check_conversation(&self, conv: &Conversation) -> Result<()> {
        for (i, u) in conv.utterances.iter().enumerate() {
            let (t, d) = u.frames.as_matrix_dims()?;
            if d != self.config.input_dim || t != u.labels.len() {
                return Err(Error::Contract(format!(
                    "{} utterance {i}: {t}×{d} frames with {} labels for a model of input width {}",
                    conv.id,
                    u.labels.len(),
                    self.config.input_dim
                )));
            }
            if let Some(&y) = u.labels.iter().find(|&&y| y >= self.config.classes) {
                return Err(Error::Contract(format!("{} utterance {i}: label {y} ≥ {}", conv.id, self.config.classes)));
            }
        }
        Ok(())
    }

    /// One pass over a conversation: graphs for every window (noise drawn in
    /// utterance order), then the classifier. `train` enables dropout.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        conv: &Conversation,
        noise: &mut dyn NoiseSource,
        train: bool,
    ) -> Result<ConversationForward> {
        if conv.utterances.is_empty() {
            return Err(Error::Contract(format!("{}: conversation has no utterances", conv.id)));
        }
        let xs: Vec<Var> = conv.utterances.iter().map(|u| g.constant(u.frames.cast())).collect();
        let (dgp_fwd, windows) = match &self.dgp {
            Some(dgp) => {
                let fwd = dgp.forward(g, p, &xs, self.config.window)?;
                let windows = (0..xs.len())
                    .map(|i| dgp.sample_window(g, &fwd, i, noise))
                    .collect::<Result<Vec<_>>>()?;
                (Some(fwd), windows)
            }
            None => (None, Vec::new()),
        };
        let dropout = if train { self.config.dropout } else { 0.0 };
        let mut logits = Vec::with_capacity(xs.len());
        let mut losses = Vec::with_capacity(xs.len());
        for (i, (&x, u)) in xs.iter().zip(&conv.utterances).enumerate() {
            let e = windows.get(i).map(|w| w.e);
            let y = self.rtn.forward(g, p, x, e, dropout, noise)?;
            losses.push(g.softmax_xent(y, &u.labels)?);
            logits.push(y);
        }
        let all = g.concat(&losses)?;
        let ce = g.sum(all);
        Ok(ConversationForward {
            logits,
            ce,
            dgp: dgp_fwd,
            windows,
            frames: conv.frame_count(),
        })
    }

    /// Binds parameters as constants, for passes that need no gradient.
    pub fn bind_constants<T: Real>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.store.tensors().iter().map(|t| g.constant(t.cast())).collect()
    }
}

/// Row-wise argmax of a logits matrix.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let (rows, _) = logits.as_matrix_dims().unwrap_or((0, 0));
    (0..rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ZeroNoise;
    use crate::synthdata::{generate, GenConfig};

    #[test]
    fn presets_and_validation() {
        assert_eq!(ModelConfig::preset("desk").unwrap(), ModelConfig::desk());
        assert_eq!(ModelConfig::preset("paper").unwrap().rtn_layers, 9);
        assert!(ModelConfig::preset("huge").is_err());
        assert!(Model::new(ModelConfig { d_node: 0, ..ModelConfig::desk() }, 0).is_err());
        assert!(Model::new(ModelConfig { dropout: 1.0, ..ModelConfig::desk() }, 0).is_err());
    }

    #[test]
    fn tied_prior_starts_equal_to_posterior() {
        let model = Model::new(ModelConfig::desk(), 3).unwrap();
        let dgp = model.dgp.as_ref().unwrap();
        for (a, b) in dgp.posterior.edge.layers.iter().zip(&dgp.prior.edge.layers) {
            assert_eq!(model.store.get(a.w), model.store.get(b.w));
        }
        let data = generate(&GenConfig::default(), 1).unwrap();
        let mut g = Graph::<f64>::new();
        let p = model.bind_constants(&mut g);
        let fwd = model.forward(&mut g, &p, &data[0], &mut ZeroNoise, false).unwrap();
        for e in dgp.edge_params(&g, fwd.dgp.as_ref().unwrap()) {
            assert_eq!(e.m, e.m0);
            assert_eq!(e.mu_s, e.mu_s0);
        }
    }

    #[test]
    fn baseline_has_no_graph_parameters() {
        let model = Model::new(ModelConfig { use_graph: false, ..ModelConfig::desk() }, 3).unwrap();
        assert!(model.store.names().iter().all(|n| n.starts_with("rtn.")));
        let data = generate(&GenConfig::default(), 1).unwrap();
        let mut g = Graph::<f32>::new();
        let p = model.bind_constants(&mut g);
        let fwd = model.forward(&mut g, &p, &data[0], &mut ZeroNoise, false).unwrap();
        assert!(fwd.dgp.is_none() && fwd.windows.is_empty());
        assert_eq!(fwd.logits.len(), 10);
    }

    #[test]
    fn mismatched_conversation_is_reported() {
        let model = Model::new(ModelConfig { input_dim: 5, ..ModelConfig::desk() }, 3).unwrap();
        let data = generate(&GenConfig::default(), 1).unwrap();
        assert!(matches!(model.check_conversation(&data[0]), Err(Error::Contract(_))));
    }
}
