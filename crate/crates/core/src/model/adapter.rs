use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PolicyStates, RewardTransformer};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub d_model: usize,
    pub depth: usize,
    pub hidden: usize,
}

/// A reward head stacked on the top-layer policy representation only.
///
/// Depth 1 is a single affine map to a scalar. Deeper heads insert GELU
/// hidden layers of width `hidden`.
#[derive(Clone, Debug)]
pub struct AdapterRewardHead {
    config: AdapterConfig,
    layers: Vec<(Tensor, Tensor)>,
}

impl AdapterRewardHead {
    pub fn new(d_model: usize, depth: usize, hidden: usize, seed: u64) -> Result<Self> {
        let config = AdapterConfig { d_model, depth, hidden };
        Self::validate(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![d_model];
        widths.extend(std::iter::repeat_n(hidden, depth - 1));
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| {
                let std = if w[1] == 1 { 0.02 } else { 1.0 / (w[0] as f64).sqrt() };
                let dist = Normal::new(0.0, std).expect("positive std");
                let data = (0..w[0] * w[1]).map(|_| dist.sample(&mut rng)).collect();
                (
                    Tensor::new(&[w[0], w[1]], data).expect("shape"),
                    Tensor::zeros(&[w[1]]),
                )
            })
            .collect();
        Ok(Self { config, layers })
    }

    fn validate(config: &AdapterConfig) -> Result<()> {
        if !matches!(config.depth, 1 | 4) {
            return Err(Error::parameter(format!("adapter depth must be 1 or 4, got {}", config.depth)));
        }
        if config.d_model == 0 || (config.depth > 1 && config.hidden == 0) {
            return Err(Error::parameter("adapter widths must be positive"));
        }
        Ok(())
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("adapter.{i}.w"), w));
            out.push((format!("adapter.{i}.b"), b));
        }
        out
    }

    pub fn from_named_tensors(config: AdapterConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        Self::validate(&config)?;
        let mut head = Self::new(config.d_model, config.depth, config.hidden, 0)?;
        if tensors.len() != 2 * head.layers.len() {
            return Err(Error::Format(format!(
                "expected {} adapter tensors, found {}",
                2 * head.layers.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let slot = head
                .layers
                .iter_mut()
                .enumerate()
                .flat_map(|(i, (w, b))| [(format!("adapter.{i}.w"), w), (format!("adapter.{i}.b"), b)])
                .find(|(n, _)| *n == name)
                .map(|(_, s)| s)
                .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!("tensor {name}: shape {:?} vs {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(head)
    }

    pub fn layers_mut(&mut self) -> &mut [(Tensor, Tensor)] {
        &mut self.layers
    }

    /// Rewards from precomputed top-layer states.
    pub fn forward_states(&self, states: &PolicyStates) -> Vec<f64> {
        let t = states.len();
        let mut x = states.final_hidden.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (k, n) = (w.shape()[0], w.shape()[1]);
            x = tensor::matmul(&x, w.data(), t, k, n);
            tensor::add_bias_rows(&mut x, b.data());
            if i < last {
                x.iter_mut().for_each(|v| *v = tensor::gelu(*v));
            }
        }
        x
    }

    /// Rewards at every position of `tokens`.
    pub fn forward(&self, model: &RewardTransformer, tokens: &[u32]) -> Result<Vec<f64>> {
        if model.config().d_model != self.config.d_model {
            return Err(Error::Dimension {
                op: "adapter",
                left: vec![model.config().d_model],
                right: vec![self.config.d_model],
            });
        }
        Ok(self.forward_states(&model.policy_states(tokens)?))
    }

    /// Records the head on `g`; returns the `T × 1` rewards and the parameter
    /// vars in (w, b) layer order.
    pub fn graph_forward(&self, g: &mut Graph, states: &PolicyStates) -> Result<(Var, Vec<Var>)> {
        let mut x = g.constant(&[states.len(), self.config.d_model], states.final_hidden.clone())?;
        let mut vars = Vec::new();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(w, true);
            let bv = g.param(b, true);
            vars.extend([wv, bv]);
            x = g.matmul(x, wv)?;
            x = g.add_bias(x, bv)?;
            if i < last {
                x = g.gelu(x);
            }
        }
        Ok((x, vars))
    }
}
