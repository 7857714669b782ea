//! Preference data collection and training: policy pretraining, DPO, and the
//! Bradley-Terry objective for the reward channel and adapter baselines.

mod losses;
mod optim;
mod pairs;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::decoding::log_softmax;
use crate::error::{Error, Result};
use crate::model::{AdapterRewardHead, Channel, PolicyStates, RewardTransformer};
use crate::rng;
use crate::trajectory::{PreferencePair, Trajectory};

pub use losses::{
    bt_from_means, bt_loss, bt_loss_graph, dpo_loss_graph, lm_loss_graph, sequence_log_prob, sequence_log_prob_graph,
};
pub use optim::{cosine_lr, Adam};
pub use pairs::{collect_pairs, CollectConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FreezePolicy,
    DpoThenFreeze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub dpo_beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 5e-5,
            batch_size: 1,
            mode: TrainMode::FreezePolicy,
            dpo_beta: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::parameter("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::parameter(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.dpo_beta > 0.0) {
            return Err(Error::parameter("dpo_beta must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    fn as_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// One optimizer step of a loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

type Grads = Vec<Option<Vec<f64>>>;

fn accumulate(total: &mut Grads, grads: Grads) {
    if total.is_empty() {
        *total = grads;
        return;
    }
    for (t, g) in total.iter_mut().zip(grads) {
        match (t.as_mut(), g) {
            (Some(t), Some(g)) => t.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            (None, Some(g)) => *t = Some(g),
            _ => {}
        }
    }
}

/// Shuffled mini-batch loop with a cosine schedule. `item` returns the loss
/// and gradients of one example; `apply` receives batch-mean gradients.
/// Returns early with an empty history when there is nothing to train on.
fn optimize<T>(
    state: &mut T,
    n: usize,
    cfg: &TrainConfig,
    key: &str,
    label: &str,
    mut item: impl FnMut(&T, usize) -> Result<(f64, Grads)>,
    mut apply: impl FnMut(&mut T, &mut Adam, &Grads, f64),
    mut epoch_end: impl FnMut(&T, usize) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let mut history = Vec::new();
    if n == 0 {
        return Ok(history);
    }
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = Adam::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &format!("{key}/epoch/{epoch}")));
        for batch in order.chunks(cfg.batch_size) {
            let step = history.len();
            let lr = cosine_lr(cfg.learning_rate, step, total);
            let mut grads = Grads::new();
            let mut loss = 0.0;
            for &i in batch {
                let (l, g) = item(state, i)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite {
                        loss: l,
                        context: format!("{label} {i}"),
                    });
                }
                loss += l;
                accumulate(&mut grads, g);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            opt.begin_step();
            apply(state, &mut opt, &grads, lr);
            history.push(LossRecord {
                step,
                epoch,
                loss: loss * scale,
                learning_rate: lr,
            });
        }
        epoch_end(state, epoch)?;
    }
    Ok(history)
}

fn apply_model(model: &mut RewardTransformer, opt: &mut Adam, grads: &Grads, lr: f64, channel: Channel) {
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = &mut model.params_mut()[i];
        if p.channel == channel {
            opt.update(i, p.tensor.data_mut(), g, lr);
        }
    }
}

fn states_for(model: &RewardTransformer, pairs: &[PreferencePair]) -> Result<Vec<(PolicyStates, PolicyStates)>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.validate().map_err(|e| Error::contract(format!("pair {i}: {e}")))?;
            Ok((model.policy_states(&p.chosen_tokens())?, model.policy_states(&p.rejected_tokens())?))
        })
        .collect()
}

/// Trains the reward input projection, reward blocks and reward head with
/// the Bradley-Terry loss. Policy parameters are never touched.
pub fn train_reward_channel(model: &mut RewardTransformer, pairs: &[PreferencePair], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let states = states_for(model, pairs)?;
    optimize(
        model,
        pairs.len(),
        cfg,
        "reward",
        "pair",
        |m, i| {
            let mut g = Graph::new();
            let params = m.bind_reward(&mut g);
            let (w, l) = &states[i];
            let loss = losses::bt_loss_states(m, &mut g, &params, pairs[i].prompt.len(), w, l)?;
            let value = g.value(loss).data()[0];
            let mut grads = g.backward(loss)?;
            Ok((value, params.collect(&mut grads)))
        },
        |m, opt, grads, lr| apply_model(m, opt, grads, lr, Channel::Reward),
        |_, _| Ok(()),
    )
}

/// Trains an adapter head over the frozen top-layer states of `model`.
pub fn train_adapter(
    model: &RewardTransformer,
    adapter: &mut AdapterRewardHead,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if adapter.config().d_model != model.config().d_model {
        return Err(Error::Dimension {
            op: "adapter",
            left: vec![model.config().d_model],
            right: vec![adapter.config().d_model],
        });
    }
    let states = states_for(model, pairs)?;
    optimize(
        adapter,
        pairs.len(),
        cfg,
        "adapter",
        "pair",
        |a, i| {
            let mut g = Graph::new();
            let (w, l) = &states[i];
            let (rw, vars) = a.graph_forward(&mut g, w)?;
            let (rl, vars_l) = a.graph_forward(&mut g, l)?;
            let loss = losses::bt_loss_adapter(&mut g, pairs[i].prompt.len(), (rw, w.len()), (rl, l.len()))?;
            let value = g.value(loss).data()[0];
            let mut grads = g.backward(loss)?;
            let collected = vars
                .iter()
                .zip(&vars_l)
                .map(|(&a, &b)| {
                    let mut ga = grads.take(a).unwrap_or_default();
                    let gb = grads.take(b).unwrap_or_default();
                    if ga.is_empty() {
                        return Some(gb);
                    }
                    ga.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
                    Some(ga)
                })
                .collect();
            Ok((value, collected))
        },
        |a, opt, grads, lr| {
            for (i, (w, b)) in a.layers_mut().iter_mut().enumerate() {
                for (slot, t) in [(2 * i, w), (2 * i + 1, b)] {
                    if let Some(g) = &grads[slot] {
                        opt.update(slot, t.data_mut(), g, lr);
                    }
                }
            }
        },
        |_, _| Ok(()),
    )
}

/// Direct preference optimization of the policy channel against a frozen
/// reference.
pub fn train_dpo(
    model: &mut RewardTransformer,
    reference: &RewardTransformer,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if model.config() != reference.config() {
        return Err(Error::contract("reference model has a different configuration"));
    }
    let refs: Vec<(f64, f64)> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.validate().map_err(|e| Error::contract(format!("pair {i}: {e}")))?;
            let n = p.prompt.len();
            Ok((
                sequence_log_prob(reference, n, &p.chosen_tokens())?,
                sequence_log_prob(reference, n, &p.rejected_tokens())?,
            ))
        })
        .collect::<Result<_>>()?;
    optimize(
        model,
        pairs.len(),
        cfg,
        "dpo",
        "pair",
        |m, i| {
            let mut g = Graph::new();
            let params = m.bind(&mut g, |c| c == Channel::Policy);
            let loss = dpo_loss_graph(m, &mut g, &params, &pairs[i], refs[i], cfg.dpo_beta)?;
            let value = g.value(loss).data()[0];
            let mut grads = g.backward(loss)?;
            Ok((value, params.collect(&mut grads)))
        },
        |m, opt, grads, lr| apply_model(m, opt, grads, lr, Channel::Policy),
        |_, _| Ok(()),
    )
}

/// Outcome of the requested training mode.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub dpo: Vec<LossRecord>,
    pub reward: Vec<LossRecord>,
}

/// Runs DPO first when the mode asks for it, then trains the reward channel
/// over the resulting policy.
pub fn train(model: &mut RewardTransformer, pairs: &[PreferencePair], cfg: &TrainConfig) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    if cfg.mode == TrainMode::DpoThenFreeze {
        let reference = model.clone();
        report.dpo = train_dpo(model, &reference, pairs, cfg)?;
    }
    report.reward = train_reward_channel(model, pairs, cfg)?;
    Ok(report)
}

/// Perplexity over the response tokens of `data`.
pub fn perplexity(model: &RewardTransformer, data: &[Trajectory]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for t in data {
        if t.prompt.is_empty() || t.response.is_empty() {
            return Err(Error::contract("perplexity needs a prompt and a response"));
        }
        let tokens = t.tokens();
        let (logits, _) = model.forward(&tokens[..tokens.len() - 1])?;
        let v = model.config().vocab_size;
        for (j, &target) in t.response.iter().enumerate() {
            let row = t.prompt.len() - 1 + j;
            nll -= log_softmax(&logits.data()[row * v..(row + 1) * v])[target as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("perplexity of an empty set"));
    }
    Ok((nll / count as f64).exp())
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub history: Vec<LossRecord>,
    /// Held-out perplexity at initialization and after every epoch.
    pub held_out_perplexity: Vec<f64>,
}

/// Next-token cross-entropy on response tokens, policy channel only.
pub fn pretrain_policy(
    model: &mut RewardTransformer,
    corpus: &[Trajectory],
    held_out: &[Trajectory],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let mut ppl = Vec::new();
    if !held_out.is_empty() {
        ppl.push(perplexity(model, held_out)?);
    }
    let sequences: Vec<(usize, Vec<u32>)> = corpus.iter().map(|t| (t.prompt.len(), t.tokens())).collect();
    let history = optimize(
        model,
        sequences.len(),
        &cfg.as_train(),
        "pretrain",
        "sequence",
        |m, i| {
            let (p, tokens) = &sequences[i];
            let mut g = Graph::new();
            let params = m.bind(&mut g, |c| c == Channel::Policy);
            let loss = lm_loss_graph(m, &mut g, &params, *p, tokens)?;
            let value = g.value(loss).data()[0];
            let mut grads = g.backward(loss)?;
            Ok((value, params.collect(&mut grads)))
        },
        |m, opt, grads, lr| apply_model(m, opt, grads, lr, Channel::Policy),
        |m, _| {
            if !held_out.is_empty() {
                ppl.push(perplexity(m, held_out)?);
            }
            Ok(())
        },
    )?;
    Ok(PretrainReport {
        history,
        held_out_perplexity: ppl,
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{TaskSpec, EOS};

    fn toy(seed: u64) -> RewardTransformer {
        let cfg = ModelConfig {
            vocab_size: 16,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            d_reward: 4,
            max_seq_len: 24,
        };
        RewardTransformer::new(cfg, seed).unwrap()
    }

    /// Chosen responses contain token 7, rejected ones never do.
    fn separable(n: usize, seed: u64) -> Vec<PreferencePair> {
        let mut g = rng::stream(seed, "separable");
        let body = |with_seven: bool, g: &mut rand_chacha::ChaCha8Rng| -> Vec<u32> {
            let len = g.gen_range(2..6);
            let mut r: Vec<u32> = (0..len)
                .map(|_| loop {
                    let t = g.gen_range(3..13);
                    if t != 7 {
                        break t;
                    }
                })
                .collect();
            if with_seven {
                let at = g.gen_range(0..len);
                r[at] = 7;
            }
            r.push(EOS);
            r
        };
        (0..n)
            .map(|_| {
                let prompt = vec![0, g.gen_range(3..13), g.gen_range(3..13), 2];
                PreferencePair {
                    prompt,
                    chosen: body(true, &mut g),
                    rejected: body(false, &mut g),
                    chosen_oracle: 1.0,
                    rejected_oracle: 0.0,
                }
            })
            .collect()
    }

    fn ranking_accuracy(model: &RewardTransformer, pairs: &[PreferencePair]) -> f64 {
        let mean = |tokens: Vec<u32>, p: usize| {
            let (_, r) = model.forward(&tokens).unwrap();
            r[p..].iter().sum::<f64>() / (r.len() - p) as f64
        };
        let hits = pairs
            .iter()
            .filter(|p| mean(p.chosen_tokens(), p.prompt.len()) > mean(p.rejected_tokens(), p.prompt.len()))
            .count();
        hits as f64 / pairs.len() as f64
    }

    #[test]
    fn zero_pairs_leave_model_unchanged() {
        let mut m = toy(1);
        let before = m.clone();
        let h = train_reward_channel(&mut m, &[], &TrainConfig::default()).unwrap();
        assert!(h.is_empty());
        for (a, b) in m.params().iter().zip(before.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn reward_channel_learns_separable_pairs_with_policy_frozen() {
        let mut m = toy(2);
        let before = m.clone();
        let train_set = separable(300, 1);
        let held_out = separable(100, 2);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let history = train_reward_channel(&mut m, &train_set, &cfg).unwrap();
        assert_eq!(history.len(), 900);
        assert_eq!(history[0].learning_rate, 1e-3);
        assert!(history.windows(2).all(|w| w[1].learning_rate < w[0].learning_rate));
        let acc = ranking_accuracy(&m, &held_out);
        assert!(acc >= 0.95, "held-out accuracy {acc}");

        for (a, b) in m.params().iter().zip(before.params()) {
            match a.channel {
                Channel::Policy => assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name),
                Channel::Reward => assert_ne!(a.tensor.data(), b.tensor.data(), "{}", a.name),
            }
        }
        for p in &held_out[..10] {
            let t = p.chosen_tokens();
            assert_eq!(m.forward(&t).unwrap().0.data(), before.forward(&t).unwrap().0.data());
        }
    }

    #[test]
    fn nan_loss_names_the_pair() {
        let mut m = toy(3);
        let i = m.params().iter().position(|p| p.name == "reward_head.b").unwrap();
        m.params_mut()[i].tensor.data_mut()[0] = f64::NAN;
        let err = train_reward_channel(&mut m, &separable(4, 0), &TrainConfig::default()).unwrap_err();
        match err {
            Error::NonFinite { context, .. } => assert!(context.starts_with("pair ")),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn adapter_learns_separable_pairs() {
        let m = toy(4);
        let mut a = AdapterRewardHead::new(16, 1, 0, 9).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        train_adapter(&m, &mut a, &separable(200, 3), &cfg).unwrap();
        let held_out = separable(100, 4);
        let hits = held_out
            .iter()
            .filter(|p| {
                let n = p.prompt.len();
                let w = a.forward(&m, &p.chosen_tokens()).unwrap();
                let l = a.forward(&m, &p.rejected_tokens()).unwrap();
                let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
                mean(&w[n..]) > mean(&l[n..])
            })
            .count();
        assert!(hits >= 75, "{hits}/100");
    }

    #[test]
    fn dpo_raises_chosen_margin_and_keeps_reference() {
        let mut m = toy(5);
        let reference = m.clone();
        let snapshot = reference.clone();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let history = train_dpo(&mut m, &reference, &separable(60, 5), &cfg).unwrap();
        assert!((history[0].loss - std::f64::consts::LN_2).abs() < 1e-12);
        let margin = |model: &RewardTransformer, pairs: &[PreferencePair]| -> f64 {
            pairs
                .iter()
                .map(|p| {
                    let n = p.prompt.len();
                    sequence_log_prob(model, n, &p.chosen_tokens()).unwrap() - sequence_log_prob(model, n, &p.rejected_tokens()).unwrap()
                })
                .sum::<f64>()
                / pairs.len() as f64
        };
        let held_out = separable(40, 6);
        assert!(margin(&m, &held_out) > margin(&reference, &held_out));
        for (a, b) in reference.params().iter().zip(snapshot.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        for (a, b) in m.params().iter().zip(reference.params()) {
            if a.channel == Channel::Reward {
                assert_eq!(a.tensor.data(), b.tensor.data());
            }
        }
    }

    #[test]
    fn pretraining_memorizes_and_generalizes() {
        let task = TaskSpec::sortedness();
        let mut m = toy(6);
        let t = Trajectory::new(vec![0, 8, 4, 2], vec![4, 8, EOS]);
        let init = perplexity(&m, std::slice::from_ref(&t)).unwrap().ln();
        assert!((init - 16f64.ln()).abs() < 0.5, "{init}");
        let cfg = PretrainConfig {
            epochs: 150,
            learning_rate: 1e-2,
            batch_size: 1,
            seed: 0,
        };
        let report = pretrain_policy(&mut m, std::slice::from_ref(&t), &[], &cfg).unwrap();
        assert!(report.history.last().unwrap().loss < 0.05, "{:?}", report.history.last());

        let mut m = toy(7);
        let mut g = rng::stream(1, "corpus");
        let corpus = task.corpus(300, &mut g);
        let held_out = task.corpus(50, &mut g);
        let cfg = PretrainConfig {
            epochs: 2,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 0,
        };
        let report = pretrain_policy(&mut m, &corpus, &held_out, &cfg).unwrap();
        let ppl = &report.held_out_perplexity;
        assert_eq!(ppl.len(), 3);
        assert!(ppl[2] < ppl[0], "{ppl:?}");
        for p in m.params() {
            if p.channel == Channel::Reward {
                let fresh = toy(7);
                assert_eq!(p.tensor.data(), fresh.param(&p.name).unwrap().data());
            }
        }
    }

    #[test]
    fn train_runs_dpo_before_reward() {
        let mut m = toy(8);
        let cfg = TrainConfig {
            mode: TrainMode::DpoThenFreeze,
            epochs: 1,
            ..TrainConfig::default()
        };
        let report = train(&mut m, &separable(5, 7), &cfg).unwrap();
        assert_eq!((report.dpo.len(), report.reward.len()), (5, 5));
    }
}
