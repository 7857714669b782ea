use std::sync::Arc;

use super::{KvSegment, RewardTransformer};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Result of extending one cache with a block of tokens.
#[derive(Clone, Debug)]
pub struct LeafOutput {
    pub segment: Arc<KvSegment>,
    /// `tokens × vocab`, row-major.
    pub logits: Vec<f64>,
    pub rewards: Vec<f64>,
    vocab: usize,
}

impl LeafOutput {
    pub fn logits_row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits_row(self.rewards.len() - 1)
    }

    pub fn last_reward(&self) -> f64 {
        *self.rewards.last().expect("nonempty block")
    }
}

/// Frozen policy-channel activations for one sequence, used to train heads
/// that only read the policy channel.
#[derive(Clone, Debug)]
pub struct PolicyStates {
    pub tokens: Vec<u32>,
    /// Input to each layer, `T × d_model`; entry 0 is the embedded sequence.
    pub layer_inputs: Vec<Vec<f64>>,
    /// Output of the top layer, `T × d_model`.
    pub final_hidden: Vec<f64>,
}

impl PolicyStates {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = tensor::matmul(x, w.data(), rows, k, n);
    tensor::add_bias_rows(&mut out, b.data());
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl RewardTransformer {
    /// Token embeddings plus positional encodings, `T × d_model`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        self.check_capacity(tokens.len())?;
        let d = self.config.d_model;
        Tensor::new(&[tokens.len(), d], self.embed_rows(tokens, 0))
    }

    fn embed_rows(&self, tokens: &[u32], start: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let table = self.p(self.layout.embedding);
        let mut out = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            let pe = self.positional_row(start + i);
            out.extend(table.row(t as usize).iter().zip(pe).map(|(e, p)| e + p));
        }
        out
    }

    pub(crate) fn check_capacity(&self, requested: usize) -> Result<()> {
        if requested > self.config.max_seq_len {
            return Err(Error::Capacity {
                requested,
                capacity: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Full-sequence forward: per-position logits (`T × vocab`) and rewards.
    pub fn forward(&self, tokens: &[u32]) -> Result<(Tensor, Vec<f64>)> {
        if tokens.is_empty() {
            return Err(Error::contract("forward needs at least one token"));
        }
        let out = self.forward_incremental(None, tokens)?;
        let logits = Tensor::new(&[tokens.len(), self.config.vocab_size], out.logits)?;
        Ok((logits, out.rewards))
    }

    /// Extends `cache` (or an empty prefix) with `tokens`.
    pub fn forward_incremental(&self, cache: Option<&Arc<KvSegment>>, tokens: &[u32]) -> Result<LeafOutput> {
        let mut out = self.batched_forward_leaves(&[(cache, tokens)])?;
        Ok(out.pop().expect("one leaf"))
    }

    /// Extends several caches at once. Rows of all leaves are stacked for the
    /// dense layers; attention runs per leaf against its own prefix.
    pub fn batched_forward_leaves(&self, leaves: &[(Option<&Arc<KvSegment>>, &[u32])]) -> Result<Vec<LeafOutput>> {
        if leaves.is_empty() {
            return Err(Error::contract("batched forward needs at least one leaf"));
        }
        for (cache, tokens) in leaves {
            if tokens.is_empty() {
                return Err(Error::contract("each leaf needs at least one new token"));
            }
            self.check_tokens(tokens)?;
            self.check_capacity(cache.map_or(0, |c| c.total_len()) + tokens.len())?;
        }
        let (rows, _) = self.run(leaves, false)?;
        Ok(rows)
    }

    /// Policy-channel activations for a full sequence.
    pub fn policy_states(&self, tokens: &[u32]) -> Result<PolicyStates> {
        if tokens.is_empty() {
            return Err(Error::contract("policy states need at least one token"));
        }
        self.check_tokens(tokens)?;
        self.check_capacity(tokens.len())?;
        let (_, states) = self.run(&[(None, tokens)], true)?;
        Ok(states.expect("recorded"))
    }

    fn run(
        &self,
        leaves: &[(Option<&Arc<KvSegment>>, &[u32])],
        record: bool,
    ) -> Result<(Vec<LeafOutput>, Option<PolicyStates>)> {
        let cfg = &self.config;
        let (d, r, v) = (cfg.d_model, cfg.d_reward, cfg.vocab_size);
        let lay = &self.layout;

        let mut offsets = Vec::with_capacity(leaves.len() + 1);
        offsets.push(0);
        let mut x = Vec::new();
        for (cache, tokens) in leaves {
            let start = cache.map_or(0, |c| c.total_len());
            x.extend(self.embed_rows(tokens, start));
            offsets.push(offsets.last().unwrap() + tokens.len());
        }
        let rows = *offsets.last().unwrap();
        let chains: Vec<Vec<&KvSegment>> = leaves
            .iter()
            .map(|(cache, _)| cache.map_or_else(Vec::new, |c| c.chain()))
            .collect();

        let mut hr = linear(&x, rows, self.p(lay.reward_in_w), self.p(lay.reward_in_b));
        let mut h = x;
        let mut keys_out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(cfg.n_layers); leaves.len()];
        let mut values_out = keys_out.clone();
        let mut reward_states: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(cfg.n_layers + 1); leaves.len()];
        let mut layer_inputs = Vec::new();

        let snapshot = |hr: &[f64], states: &mut Vec<Vec<Vec<f64>>>| {
            for (li, st) in states.iter_mut().enumerate() {
                let last = offsets[li + 1] - 1;
                st.push(hr[last * r..(last + 1) * r].to_vec());
            }
        };
        snapshot(&hr, &mut reward_states);

        for l in 0..cfg.n_layers {
            if record {
                layer_inputs.push(h.clone());
            }
            let pl = &lay.policy[l];
            let q = linear(&h, rows, self.p(pl.wq), self.p(pl.bq));
            let k = linear(&h, rows, self.p(pl.wk), self.p(pl.bk));
            let vv = linear(&h, rows, self.p(pl.wv), self.p(pl.bv));
            let mut attn = vec![0.0; rows * d];
            for (li, (cache, _)) in leaves.iter().enumerate() {
                let (lo, hi) = (offsets[li], offsets[li + 1]);
                let start = cache.map_or(0, |c| c.total_len());
                let new_k = &k[lo * d..hi * d];
                let new_v = &vv[lo * d..hi * d];
                let mut chunks: Vec<(&[f64], &[f64])> = chains[li]
                    .iter()
                    .map(|s| (s.layer_keys(l), s.layer_values(l)))
                    .collect();
                chunks.push((new_k, new_v));
                for i in lo..hi {
                    let pos = start + (i - lo);
                    tensor::attend_chunks(&q[i * d..(i + 1) * d], &chunks, pos + 1, cfg.n_heads, &mut attn[i * d..(i + 1) * d], None);
                }
                keys_out[li].push(new_k.to_vec());
                values_out[li].push(new_v.to_vec());
            }
            let o = linear(&attn, rows, self.p(pl.wo), self.p(pl.bo));
            let (x1, _) = tensor::layer_norm_rows(&add(&h, &o), d, self.p(pl.ln1_g).data(), self.p(pl.ln1_b).data());
            let mut f = linear(&x1, rows, self.p(pl.ff_w1), self.p(pl.ff_b1));
            f.iter_mut().for_each(|z| *z = tensor::gelu(*z));
            let f = linear(&f, rows, self.p(pl.ff_w2), self.p(pl.ff_b2));
            let (h_next, _) = tensor::layer_norm_rows(&add(&h, &f), d, self.p(pl.ln2_g).data(), self.p(pl.ln2_b).data());

            let rl = &lay.reward[l];
            let cat = tensor::concat_rows(&h, d, &hr, r);
            let mut g = linear(&cat, rows, self.p(rl.w1), self.p(rl.b1));
            g.iter_mut().for_each(|z| *z = tensor::gelu(*z));
            let g = linear(&g, rows, self.p(rl.w2), self.p(rl.b2));
            let (hr_next, _) = tensor::layer_norm_rows(&add(&hr, &g), r, self.p(rl.ln_g).data(), self.p(rl.ln_b).data());

            h = h_next;
            hr = hr_next;
            snapshot(&hr, &mut reward_states);
        }

        let logits = linear(&h, rows, self.p(lay.head_w), self.p(lay.head_b));
        let rewards = linear(&hr, rows, self.p(lay.reward_head_w), self.p(lay.reward_head_b));

        let mut outputs = Vec::with_capacity(leaves.len());
        let iter = leaves.iter().zip(keys_out).zip(values_out).zip(reward_states);
        for (li, ((((cache, tokens), keys), values), states)) in iter.enumerate() {
            let (lo, hi) = (offsets[li], offsets[li + 1]);
            let segment = Arc::new(KvSegment::new(cache.cloned(), tokens.to_vec(), d, keys, values, states));
            outputs.push(LeafOutput {
                segment,
                logits: logits[lo * v..hi * v].to_vec(),
                rewards: rewards[lo..hi].to_vec(),
                vocab: v,
            });
        }
        let states = record.then(|| PolicyStates {
            tokens: leaves[0].1.to_vec(),
            layer_inputs,
            final_hidden: h,
        });
        Ok((outputs, states))
    }
}
