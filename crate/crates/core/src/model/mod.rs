//! The dual-channel Reward Transformer.
//!
//! A decoder-only policy channel produces next-token logits. Alongside it, a
//! narrower reward channel runs one position-wise block per layer that reads
//! the concatenation of the policy state and its own state, and a scalar head
//! turns the final reward state into a token-level reward estimate. The reward
//! channel reads from the policy channel but never writes to it.

mod adapter;
mod cache;
pub mod checkpoint;
mod graph;
mod infer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use adapter::{AdapterConfig, AdapterRewardHead};
pub use cache::KvSegment;
pub use graph::{BoundParams, GraphForward};
pub use infer::{LeafOutput, PolicyStates};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub d_reward: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            n_layers: 4,
            d_model: 96,
            n_heads: 4,
            d_ffn: 384,
            d_reward: 32,
            max_seq_len: 48,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("d_reward", self.d_reward),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::parameter(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::parameter(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    /// Hidden width of the reward-channel feed-forward block.
    pub fn reward_hidden(&self) -> usize {
        2 * self.d_reward
    }

    /// Multiply-accumulates per token spent in the policy layers, excluding
    /// attention scores (which only add to the policy side).
    pub fn policy_macs_per_token(&self) -> usize {
        let d = self.d_model;
        self.n_layers * (4 * d * d + 2 * d * self.d_ffn) + d * self.vocab_size
    }

    /// Multiply-accumulates per token spent in the reward channel and head.
    pub fn reward_macs_per_token(&self) -> usize {
        let (d, r, h) = (self.d_model, self.d_reward, self.reward_hidden());
        d * r + self.n_layers * ((d + r) * h + h * r) + r
    }
}

/// Which half of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Policy,
    Reward,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub channel: Channel,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
pub(crate) struct PolicyLayerIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct RewardLayerIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln_g: usize,
    pub ln_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embedding: usize,
    pub reward_in_w: usize,
    pub reward_in_b: usize,
    pub policy: Vec<PolicyLayerIdx>,
    pub reward: Vec<RewardLayerIdx>,
    pub head_w: usize,
    pub head_b: usize,
    pub reward_head_w: usize,
    pub reward_head_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, channel: Channel, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            Init::Ones => vec![1.0; n],
            Init::Zeros => vec![0.0; n],
        };
        self.params.push(Param {
            name,
            channel,
            tensor: Tensor::new(shape, data).expect("shape matches"),
        });
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, channel: Channel, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = self.add(format!("{prefix}.w"), channel, &[fan_in, fan_out], Init::Normal(std));
        let b = self.add(format!("{prefix}.b"), channel, &[fan_out], Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, channel: Channel, width: usize) -> (usize, usize) {
        let g = self.add(format!("{prefix}.g"), channel, &[width], Init::Ones);
        let b = self.add(format!("{prefix}.b"), channel, &[width], Init::Zeros);
        (g, b)
    }
}

#[derive(Clone, Debug)]
pub struct RewardTransformer {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
    positional: Vec<f64>,
}

const HEAD_INIT_STD: f64 = 0.02;

impl RewardTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let (d, r, v) = (config.d_model, config.d_reward, config.vocab_size);
        use Channel::*;

        let embedding = b.add("embedding".into(), Policy, &[v, d], Init::Normal(1.0));
        let (reward_in_w, reward_in_b) = b.linear("reward_in", Reward, d, r);
        let mut policy = Vec::with_capacity(config.n_layers);
        let mut reward = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("policy.{l}");
            let (wq, bq) = b.linear(&format!("{p}.q"), Policy, d, d);
            let (wk, bk) = b.linear(&format!("{p}.k"), Policy, d, d);
            let (wv, bv) = b.linear(&format!("{p}.v"), Policy, d, d);
            let (wo, bo) = b.linear(&format!("{p}.o"), Policy, d, d);
            let (ln1_g, ln1_b) = b.norm(&format!("{p}.ln1"), Policy, d);
            let (ff_w1, ff_b1) = b.linear(&format!("{p}.ff1"), Policy, d, config.d_ffn);
            let (ff_w2, ff_b2) = b.linear(&format!("{p}.ff2"), Policy, config.d_ffn, d);
            let (ln2_g, ln2_b) = b.norm(&format!("{p}.ln2"), Policy, d);
            policy.push(PolicyLayerIdx {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_g,
                ln1_b,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
                ln2_g,
                ln2_b,
            });
            let p = format!("reward.{l}");
            let h = config.reward_hidden();
            let (w1, b1) = b.linear(&format!("{p}.ff1"), Reward, d + r, h);
            let (w2, b2) = b.linear(&format!("{p}.ff2"), Reward, h, r);
            let (ln_g, ln_b) = b.norm(&format!("{p}.ln"), Reward, r);
            reward.push(RewardLayerIdx {
                w1,
                b1,
                w2,
                b2,
                ln_g,
                ln_b,
            });
        }
        let head_w = b.add("head.w".into(), Policy, &[d, v], Init::Normal(HEAD_INIT_STD));
        let head_b = b.add("head.b".into(), Policy, &[v], Init::Zeros);
        let reward_head_w = b.add("reward_head.w".into(), Reward, &[r, 1], Init::Normal(HEAD_INIT_STD));
        let reward_head_b = b.add("reward_head.b".into(), Reward, &[1], Init::Zeros);

        let layout = Layout {
            embedding,
            reward_in_w,
            reward_in_b,
            policy,
            reward,
            head_w,
            head_b,
            reward_head_w,
            reward_head_b,
        };
        let params = b.params;
        let positional = sinusoidal_table(config.max_seq_len, d);
        Ok(Self {
            config,
            params,
            layout,
            positional,
        })
    }

    /// Rebuilds a model from named tensors, validating every shape.
    pub fn from_named_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, tensor) in tensors {
            let slot = model
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
            if slot.tensor.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} does not match config-implied {:?}",
                    tensor.shape(),
                    slot.tensor.shape()
                )));
            }
            slot.tensor = tensor;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub(crate) fn p(&self, idx: usize) -> &Tensor {
        &self.params[idx].tensor
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn parameter_count(&self, channel: Channel) -> usize {
        self.params
            .iter()
            .filter(|p| p.channel == channel)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub(crate) fn positional_row(&self, pos: usize) -> &[f64] {
        let d = self.config.d_model;
        &self.positional[pos * d..(pos + 1) * d]
    }

    /// Replaces every reward-channel parameter with zeros.
    pub fn zero_reward_channel(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.channel == Channel::Reward) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copies the policy-channel weights of `other` into `self`.
    pub fn copy_policy_from(&mut self, other: &RewardTransformer) -> Result<()> {
        if self.config != other.config {
            return Err(Error::contract("copy_policy_from needs identical configs"));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.channel == Channel::Policy {
                mine.tensor = theirs.tensor.clone();
            }
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Vocabulary {
                    token: t,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

fn sinusoidal_table(max_len: usize, d: usize) -> Vec<f64> {
    let mut table = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            table[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}
