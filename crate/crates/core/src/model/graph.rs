use super::{Channel, PolicyStates, RewardTransformer};
use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};

/// Model parameters bound into a graph. Unbound entries are absent from the
/// tape.
pub struct BoundParams {
    vars: Vec<Option<Var>>,
}

impl BoundParams {
    fn get(&self, idx: usize) -> Var {
        self.vars[idx].expect("parameter bound for this forward")
    }

    /// Collects per-parameter gradients in model parameter order.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

/// Logits (`T × vocab`) and rewards (`T × 1`) recorded on a tape.
pub struct GraphForward {
    pub logits: Var,
    pub rewards: Var,
    pub params: BoundParams,
}

impl RewardTransformer {
    /// Binds every parameter; those whose channel passes `trainable` require
    /// gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(Channel) -> bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| Some(g.param(&p.tensor, trainable(p.channel))))
            .collect();
        BoundParams { vars }
    }

    /// Binds only the reward-channel parameters, all requiring gradients.
    pub fn bind_reward(&self, g: &mut Graph) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| (p.channel == Channel::Reward).then(|| g.param(&p.tensor, true)))
            .collect();
        BoundParams { vars }
    }

    /// Records the full forward pass on `g`.
    pub fn graph_forward(&self, g: &mut Graph, trainable: impl Fn(Channel) -> bool, tokens: &[u32]) -> Result<GraphForward> {
        let params = self.bind(g, trainable);
        let (logits, rewards) = self.graph_forward_with(g, &params, tokens)?;
        Ok(GraphForward { logits, rewards, params })
    }

    /// Full forward pass over already bound parameters; returns logits and
    /// rewards.
    pub fn graph_forward_with(&self, g: &mut Graph, params: &BoundParams, tokens: &[u32]) -> Result<(Var, Var)> {
        if tokens.is_empty() {
            return Err(Error::contract("forward needs at least one token"));
        }
        self.check_tokens(tokens)?;
        self.check_capacity(tokens.len())?;
        let cfg = &self.config;
        let lay = &self.layout;
        let t = tokens.len();
        let d = cfg.d_model;
        let p = |i: usize| params.get(i);

        let emb = g.embedding(p(lay.embedding), tokens)?;
        let pe: Vec<f64> = (0..t).flat_map(|i| self.positional_row(i).to_vec()).collect();
        let pe = g.constant(&[t, d], pe)?;
        let x = g.add(emb, pe)?;
        let mut hr = self.graph_reward_input(g, params, x)?;
        let mut h = x;
        for l in 0..cfg.n_layers {
            let pl = &lay.policy[l];
            let lin = |g: &mut Graph, x: Var, w: usize, b: usize| -> Result<Var> {
                let y = g.matmul(x, p(w))?;
                g.add_bias(y, p(b))
            };
            let q = lin(g, h, pl.wq, pl.bq)?;
            let k = lin(g, h, pl.wk, pl.bk)?;
            let v = lin(g, h, pl.wv, pl.bv)?;
            let a = g.causal_attention(q, k, v, cfg.n_heads)?;
            let o = lin(g, a, pl.wo, pl.bo)?;
            let res = g.add(h, o)?;
            let x1 = g.layer_norm(res, p(pl.ln1_g), p(pl.ln1_b))?;
            let f = lin(g, x1, pl.ff_w1, pl.ff_b1)?;
            let f = g.gelu(f);
            let f = lin(g, f, pl.ff_w2, pl.ff_b2)?;
            let res = g.add(h, f)?;
            let h_next = g.layer_norm(res, p(pl.ln2_g), p(pl.ln2_b))?;
            hr = self.graph_reward_block(g, params, l, h, hr)?;
            h = h_next;
        }
        let logits = g.matmul(h, p(lay.head_w))?;
        let logits = g.add_bias(logits, p(lay.head_b))?;
        let rewards = self.graph_reward_head(g, params, hr)?;
        Ok((logits, rewards))
    }

    /// Records only the reward channel over precomputed policy activations,
    /// using parameters from [`Self::bind_reward`] or [`Self::bind`].
    pub fn graph_reward_forward(&self, g: &mut Graph, params: &BoundParams, states: &PolicyStates) -> Result<Var> {
        let cfg = &self.config;
        let t = states.len();
        let x = g.constant(&[t, cfg.d_model], states.layer_inputs[0].clone())?;
        let mut hr = self.graph_reward_input(g, params, x)?;
        for l in 0..cfg.n_layers {
            let h = if l == 0 {
                x
            } else {
                g.constant(&[t, cfg.d_model], states.layer_inputs[l].clone())?
            };
            hr = self.graph_reward_block(g, params, l, h, hr)?;
        }
        self.graph_reward_head(g, params, hr)
    }

    fn graph_reward_input(&self, g: &mut Graph, params: &BoundParams, x: Var) -> Result<Var> {
        let y = g.matmul(x, params.get(self.layout.reward_in_w))?;
        g.add_bias(y, params.get(self.layout.reward_in_b))
    }

    fn graph_reward_block(&self, g: &mut Graph, params: &BoundParams, l: usize, h: Var, hr: Var) -> Result<Var> {
        let rl = &self.layout.reward[l];
        let cat = g.concat(h, hr)?;
        let y = g.matmul(cat, params.get(rl.w1))?;
        let y = g.add_bias(y, params.get(rl.b1))?;
        let y = g.gelu(y);
        let y = g.matmul(y, params.get(rl.w2))?;
        let y = g.add_bias(y, params.get(rl.b2))?;
        let res = g.add(hr, y)?;
        g.layer_norm(res, params.get(rl.ln_g), params.get(rl.ln_b))
    }

    fn graph_reward_head(&self, g: &mut Graph, params: &BoundParams, hr: Var) -> Result<Var> {
        let y = g.matmul(hr, params.get(self.layout.reward_head_w))?;
        g.add_bias(y, params.get(self.layout.reward_head_b))
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    fn toy() -> RewardTransformer {
        let cfg = ModelConfig {
            vocab_size: 16,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            d_reward: 3,
            max_seq_len: 12,
        };
        RewardTransformer::new(cfg, 11).unwrap()
    }

    #[test]
    fn tape_forward_matches_plain_bitwise() {
        let m = toy();
        let seq = [0u32, 5, 9, 2, 1];
        let (logits, rewards) = m.forward(&seq).unwrap();
        let mut g = Graph::new();
        let out = m.graph_forward(&mut g, |_| false, &seq).unwrap();
        assert_eq!(g.value(out.logits).data(), logits.data());
        assert_eq!(g.value(out.rewards).data(), &rewards[..]);

        let states = m.policy_states(&seq).unwrap();
        let mut g = Graph::new();
        let params = m.bind_reward(&mut g);
        let r = m.graph_reward_forward(&mut g, &params, &states).unwrap();
        assert_eq!(g.value(r).data(), &rewards[..]);
    }

    /// Central differences on a scalar probe of one block's outputs.
    #[test]
    fn block_gradients_match_finite_differences() {
        let mut m = toy();
        let seq = [0u32, 7, 3, 12];
        let loss_of = |m: &RewardTransformer| -> f64 {
            let (logits, rewards) = m.forward(&seq).unwrap();
            let a: f64 = logits.data().iter().enumerate().map(|(i, v)| v * ((i % 5) as f64 - 2.0)).sum();
            a + rewards.iter().map(|r| r * r).sum::<f64>()
        };
        let mut g = Graph::new();
        let out = m.graph_forward(&mut g, |_| true, &seq).unwrap();
        let la = g.value(out.logits).data().to_vec();
        let w: Vec<f64> = (0..la.len()).map(|i| (i % 5) as f64 - 2.0).collect();
        let wv = g.constant(&[seq.len(), 16], w).unwrap();
        let a = g.mul(out.logits, wv).unwrap();
        let a = g.sum(a);
        let sq = g.mul(out.rewards, out.rewards).unwrap();
        let b = g.sum(sq);
        let loss = g.add(a, b).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let analytic = out.params.collect(&mut grads);

        let eps = 1e-5;
        for (pi, grad) in analytic.iter().enumerate() {
            let grad = grad.as_ref().expect("all trainable");
            for j in (0..grad.len()).step_by(7) {
                let orig = m.params[pi].tensor.data()[j];
                m.params[pi].tensor.data_mut()[j] = orig + eps;
                let up = loss_of(&m);
                m.params[pi].tensor.data_mut()[j] = orig - eps;
                let down = loss_of(&m);
                m.params[pi].tensor.data_mut()[j] = orig;
                let num = (up - down) / (2.0 * eps);
                let rel = (grad[j] - num).abs() / grad[j].abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} [{j}]: {} vs {num}", m.params[pi].name, grad[j]);
            }
        }
    }

    fn reward_of_states(m: &RewardTransformer, states: &PolicyStates) -> Vec<f64> {
        let mut g = Graph::new();
        let params = m.bind_reward(&mut g);
        let r = m.graph_reward_forward(&mut g, &params, states).unwrap();
        g.value(r).data().to_vec()
    }

    #[test]
    fn reward_rows_depend_only_on_their_position() {
        let m = toy();
        let states = m.policy_states(&[0, 4, 9, 2, 7, 1]).unwrap();
        let base = reward_of_states(&m, &states);
        let d = m.config().d_model;
        for j in 0..states.len() {
            let mut s = states.clone();
            for layer in &mut s.layer_inputs {
                layer[j * d..(j + 1) * d].iter_mut().for_each(|x| *x += 0.5);
            }
            let r = reward_of_states(&m, &s);
            for i in 0..states.len() {
                if i == j {
                    assert_ne!(r[i], base[i]);
                } else {
                    assert_eq!(r[i], base[i], "row {i} moved when row {j} changed");
                }
            }
        }
    }

    /// With both reward feed-forward blocks zeroed, each block reduces to a
    /// layer norm of its reward input.
    #[test]
    fn zero_reward_ffn_leaves_normalized_input() {
        let mut m = toy();
        for l in 0..2 {
            for name in ["ff2.w", "ff2.b"] {
                m.param_mut(&format!("reward.{l}.{name}")).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let seq = [0u32, 5, 11, 2];
        let (_, rewards) = m.forward(&seq).unwrap();
        let states = m.policy_states(&seq).unwrap();
        let (d, r) = (8, 3);
        let p = |n: &str| m.param(n).unwrap().data().to_vec();
        let (w_in, b_in, w_out, b_out) = (p("reward_in.w"), p("reward_in.b"), p("reward_head.w"), p("reward_head.b"));
        for t in 0..seq.len() {
            let x = &states.layer_inputs[0][t * d..(t + 1) * d];
            let mut h: Vec<f64> = (0..r).map(|j| b_in[j] + (0..d).map(|i| x[i] * w_in[i * r + j]).sum::<f64>()).collect();
            for l in 0..2 {
                let (g, b) = (p(&format!("reward.{l}.ln.g")), p(&format!("reward.{l}.ln.b")));
                let mean = h.iter().sum::<f64>() / r as f64;
                let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r as f64;
                let inv = 1.0 / (var + crate::tensor::LAYER_NORM_EPS).sqrt();
                h = (0..r).map(|j| (h[j] - mean) * inv * g[j] + b[j]).collect();
            }
            let expect = b_out[0] + (0..r).map(|j| h[j] * w_out[j]).sum::<f64>();
            assert!((rewards[t] - expect).abs() < 1e-12, "{t}: {} vs {expect}", rewards[t]);
        }
    }
}
