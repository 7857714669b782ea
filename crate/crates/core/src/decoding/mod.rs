//! Decoders: greedy, sampling, beam search, best-of-n, MCTS and streaming
//! lookahead (SLA).

mod beam;
mod counting;
mod mcts;
mod sampling;
mod sla;
mod tree;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvSegment, RewardTransformer};
use crate::rng;
use crate::tasks::EOS;

pub use beam::beam_search;
pub use counting::{CallCounts, CountingModel};
pub use mcts::{mcts_decode, mcts_step, MctsStats};
pub use sampling::{argmax, filtered_distribution, log_softmax, sample_decode, sample_from, top_tokens, SampleConfig};
pub use sla::{sla_decode, sla_step, SlaStats};
pub use tree::{ChildPolicy, SearchNode, SearchTree, TopKGreedy};

/// Outputs for one extended prefix.
#[derive(Clone, Debug)]
pub struct StepOutput<S> {
    pub state: S,
    /// Next-token logits after each new token.
    pub logits: Vec<Vec<f64>>,
    /// Reward estimate after each new token.
    pub rewards: Vec<f64>,
}

impl<S> StepOutput<S> {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.last().expect("nonempty block")
    }

    pub fn last_reward(&self) -> f64 {
        *self.rewards.last().expect("nonempty block")
    }
}

/// What a decoder needs from a model: extend cached prefixes with new
/// tokens, many at a time.
pub trait LanguageModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn max_seq_len(&self) -> usize;

    /// Extends each `(prefix, tokens)`; a `None` prefix is empty. Every
    /// `tokens` slice is nonempty.
    fn extend(&self, items: &[(Option<&Self::State>, &[u32])]) -> Result<Vec<StepOutput<Self::State>>>;

    /// The full token prefix a state represents.
    fn state_tokens(&self, state: &Self::State) -> Vec<u32>;

    fn extend_one(&self, state: Option<&Self::State>, tokens: &[u32]) -> Result<StepOutput<Self::State>> {
        let mut out = self.extend(&[(state, tokens)])?;
        Ok(out.pop().expect("one item"))
    }
}

impl LanguageModel for RewardTransformer {
    type State = Arc<KvSegment>;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }

    fn extend(&self, items: &[(Option<&Self::State>, &[u32])]) -> Result<Vec<StepOutput<Self::State>>> {
        let v = self.config().vocab_size;
        Ok(self
            .batched_forward_leaves(items)?
            .into_iter()
            .map(|o| StepOutput {
                logits: o.logits.chunks_exact(v).map(<[f64]>::to_vec).collect(),
                rewards: o.rewards,
                state: o.segment,
            })
            .collect())
    }

    fn state_tokens(&self, state: &Self::State) -> Vec<u32> {
        state.prefix_tokens()
    }
}

/// A model defined by plain functions of the prefix, for tests and fixtures.
pub struct ClosureModel<L, R> {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub logits: L,
    pub reward: R,
}

impl<L, R> ClosureModel<L, R>
where
    L: Fn(&[u32]) -> Vec<f64>,
    R: Fn(&[u32]) -> f64,
{
    pub fn new(vocab_size: usize, max_seq_len: usize, logits: L, reward: R) -> Self {
        Self {
            vocab_size,
            max_seq_len,
            logits,
            reward,
        }
    }
}

impl<L, R> LanguageModel for ClosureModel<L, R>
where
    L: Fn(&[u32]) -> Vec<f64>,
    R: Fn(&[u32]) -> f64,
{
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    fn extend(&self, items: &[(Option<&Self::State>, &[u32])]) -> Result<Vec<StepOutput<Self::State>>> {
        items
            .iter()
            .map(|(state, tokens)| {
                let mut prefix = state.cloned().unwrap_or_default();
                let mut out = StepOutput {
                    state: Vec::new(),
                    logits: Vec::with_capacity(tokens.len()),
                    rewards: Vec::with_capacity(tokens.len()),
                };
                for &t in tokens.iter() {
                    if t as usize >= self.vocab_size {
                        return Err(Error::Vocabulary {
                            token: t,
                            vocab_size: self.vocab_size,
                        });
                    }
                    prefix.push(t);
                    if prefix.len() > self.max_seq_len {
                        return Err(Error::Capacity {
                            requested: prefix.len(),
                            capacity: self.max_seq_len,
                        });
                    }
                    out.logits.push((self.logits)(&prefix));
                    out.rewards.push((self.reward)(&prefix));
                }
                out.state = prefix;
                Ok(out)
            })
            .collect()
    }

    fn state_tokens(&self, state: &Self::State) -> Vec<u32> {
        state.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Greedy,
    Temperature,
    TopK,
    TopP,
    Beam,
    BestOfN,
    Mcts,
    Sla,
}

impl Algorithm {
    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Error::parameter(format!("unknown decoding algorithm {name:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Greedy => "greedy",
            Algorithm::Temperature => "temperature",
            Algorithm::TopK => "top_k",
            Algorithm::TopP => "top_p",
            Algorithm::Beam => "beam",
            Algorithm::BestOfN => "best_of_n",
            Algorithm::Mcts => "mcts",
            Algorithm::Sla => "sla",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlaParams {
    pub depth: usize,
    pub width: usize,
    pub step: usize,
    /// Sample each child block at the decode temperature instead of taking
    /// the top first tokens with greedy continuation.
    pub sampled_children: bool,
}

impl Default for SlaParams {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 2,
            step: 10,
            sampled_children: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MctsParams {
    pub rollouts: usize,
    pub step: usize,
    pub ucb_c: f64,
    /// Children created per expansion.
    pub width: usize,
}

impl Default for MctsParams {
    fn default() -> Self {
        Self {
            rollouts: 16,
            step: 10,
            ucb_c: std::f64::consts::SQRT_2,
            width: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub algorithm: Algorithm,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub beam_width: usize,
    pub best_of: usize,
    pub sla: SlaParams,
    pub mcts: MctsParams,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Greedy,
            max_new_tokens: 32,
            temperature: 0.8,
            top_k: 50,
            top_p: 0.9,
            beam_width: 4,
            best_of: 8,
            sla: SlaParams::default(),
            mcts: MctsParams::default(),
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn with_algorithm(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_new_tokens", self.max_new_tokens),
            ("top_k", self.top_k),
            ("beam_width", self.beam_width),
            ("best_of", self.best_of),
            ("sla.depth", self.sla.depth),
            ("sla.width", self.sla.width),
            ("sla.step", self.sla.step),
            ("mcts.rollouts", self.mcts.rollouts),
            ("mcts.step", self.mcts.step),
            ("mcts.width", self.mcts.width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::parameter(format!("{name} must be at least 1")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::parameter(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::parameter(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.mcts.ucb_c >= 0.0 && self.mcts.ucb_c.is_finite()) {
            return Err(Error::parameter("ucb_c must be a nonnegative number"));
        }
        Ok(())
    }

    /// The sampling rule used by the stochastic algorithms.
    pub fn sampling(&self) -> SampleConfig {
        match self.algorithm {
            Algorithm::TopK => SampleConfig {
                temperature: 1.0,
                top_k: Some(self.top_k),
                top_p: 1.0,
            },
            Algorithm::TopP => SampleConfig {
                temperature: 1.0,
                top_k: None,
                top_p: self.top_p,
            },
            _ => SampleConfig::temperature(self.temperature),
        }
    }
}

/// A decoded response with per-step diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub response: Vec<u32>,
    /// Log-probability of each emitted token, when the decoder tracks it.
    pub log_probs: Vec<f64>,
    /// Q-value of each committed block, for the search decoders.
    pub chosen_q: Vec<f64>,
}

/// One line of a decode output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub prompt_id: usize,
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    pub algorithm: Algorithm,
    pub params: DecodeParams,
    pub chosen_q: Vec<f64>,
}

/// Number of new tokens a decode may emit after `prompt`.
pub(crate) fn budget<M: LanguageModel>(model: &M, prompt: &[u32], max_new_tokens: usize) -> Result<usize> {
    if prompt.is_empty() {
        return Err(Error::contract("prompt must contain at least one token"));
    }
    let room = model.max_seq_len().saturating_sub(prompt.len());
    if room == 0 {
        return Err(Error::Capacity {
            requested: prompt.len() + 1,
            capacity: model.max_seq_len(),
        });
    }
    Ok(max_new_tokens.min(room))
}

/// Sum of log-probabilities of the response tokens given the prompt.
pub fn trajectory_log_likelihood<M: LanguageModel>(model: &M, prompt: &[u32], response: &[u32]) -> Result<f64> {
    if response.is_empty() {
        return Ok(0.0);
    }
    let tokens = [prompt, &response[..response.len() - 1]].concat();
    let out = model.extend_one(None, &tokens)?;
    let offset = prompt.len() - 1;
    Ok(response
        .iter()
        .enumerate()
        .map(|(i, &t)| log_softmax(&out.logits[offset + i])[t as usize])
        .sum())
}

/// Emits the most likely token at every step.
pub fn greedy_decode<M: LanguageModel>(model: &M, prompt: &[u32], params: &DecodeParams) -> Result<Decoded> {
    let budget = budget(model, prompt, params.max_new_tokens)?;
    let mut out = model.extend_one(None, prompt)?;
    let mut decoded = Decoded::default();
    loop {
        let logits = out.last_logits();
        let tok = argmax(logits);
        decoded.log_probs.push(log_softmax(logits)[tok as usize]);
        decoded.response.push(tok);
        if tok == EOS || decoded.response.len() == budget {
            return Ok(decoded);
        }
        out = model.extend_one(Some(&out.state), &[tok])?;
    }
}

/// Scores a complete response.
pub trait Scorer {
    fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64>;
}

impl<F: Fn(&[u32], &[u32]) -> Result<f64>> Scorer for F {
    fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        self(prompt, response)
    }
}

/// The model's own reward estimate at the final token.
pub struct FinalReward<'a, M>(pub &'a M);

impl<M: LanguageModel> Scorer for FinalReward<'_, M> {
    fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        let tokens = [prompt, response].concat();
        Ok(self.0.extend_one(None, &tokens)?.last_reward())
    }
}

/// Draws `n` samples and keeps the best-scoring one (first on ties).
pub fn best_of_n<M: LanguageModel>(
    model: &M,
    prompt: &[u32],
    n: usize,
    params: &DecodeParams,
    scorer: &dyn Scorer,
) -> Result<Decoded> {
    if n == 0 {
        return Err(Error::parameter("best_of_n needs at least one sample"));
    }
    let cfg = params.sampling();
    let mut best: Option<(f64, Decoded)> = None;
    for i in 0..n {
        let mut g = rng::stream(params.seed, &format!("best_of/{i}"));
        let d = sample_decode(model, prompt, params.max_new_tokens, &cfg, &mut g)?;
        let s = scorer.score(prompt, &d.response)?;
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, d));
        }
    }
    Ok(best.expect("n >= 1").1)
}

/// Runs the decoder named by `params.algorithm`; `emit` receives tokens in
/// order as they are committed.
pub fn decode<M: LanguageModel>(
    model: &M,
    prompt: &[u32],
    params: &DecodeParams,
    emit: &mut dyn FnMut(&[u32]),
) -> Result<Decoded> {
    params.validate()?;
    let d = match params.algorithm {
        Algorithm::Greedy => greedy_decode(model, prompt, params)?,
        Algorithm::Temperature | Algorithm::TopK | Algorithm::TopP => {
            let mut g = rng::stream(params.seed, "sample");
            sample_decode(model, prompt, params.max_new_tokens, &params.sampling(), &mut g)?
        }
        Algorithm::Beam => beam_search(model, prompt, params)?,
        Algorithm::BestOfN => best_of_n(model, prompt, params.best_of, params, &FinalReward(model))?,
        Algorithm::Mcts => return mcts_decode(model, prompt, params, emit).map(|(d, _)| d),
        Algorithm::Sla => return sla_decode(model, prompt, params, emit).map(|(d, _)| d),
    };
    emit(&d.response);
    Ok(d)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// A small fixed-weight transformer over the task vocabulary.
    pub fn tiny_model(seed: u64) -> RewardTransformer {
        let cfg = crate::model::ModelConfig {
            vocab_size: 16,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            d_reward: 4,
            max_seq_len: 32,
        };
        RewardTransformer::new(cfg, seed).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::tiny_model;
    use super::*;

    fn fixed(probs: Vec<f64>) -> impl Fn(&[u32]) -> Vec<f64> {
        move |_| probs.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn eos_first_gives_single_token() {
        let m = ClosureModel::new(4, 8, fixed(vec![0.1, 0.6, 0.2, 0.1]), |_| 0.0);
        let d = greedy_decode(&m, &[0], &DecodeParams::default()).unwrap();
        assert_eq!(d.response, vec![EOS]);
    }

    #[test]
    fn likelihood_of_single_token() {
        let m = ClosureModel::new(3, 8, fixed(vec![0.5, 0.25, 0.25]), |_| 0.0);
        assert_eq!(trajectory_log_likelihood(&m, &[0], &[]).unwrap(), 0.0);
        let ll = trajectory_log_likelihood(&m, &[2], &[0]).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn likelihood_matches_greedy_log() {
        let m = tiny_model(3);
        let prompt = [0, 5, 7, 2];
        let d = greedy_decode(&m, &prompt, &DecodeParams::default()).unwrap();
        let ll = trajectory_log_likelihood(&m, &prompt, &d.response).unwrap();
        let logged: f64 = d.log_probs.iter().sum();
        assert!((ll - logged).abs() < 1e-9, "{ll} vs {logged}");
    }

    /// Greedy takes the 0.6 branch, whose best continuation is worth 0.6·0.5,
    /// while the 0.4 branch ends at once with probability 1.
    #[test]
    fn greedy_is_not_globally_optimal() {
        let logits = |p: &[u32]| -> Vec<f64> {
            let probs = match p[1..] {
                [] => [1e-9, 0.4, 0.6 - 1e-9],
                [2] => [0.5, 0.0, 0.5],
                _ => [0.0, 1.0, 0.0],
            };
            probs.iter().map(|&q: &f64| q.max(1e-300).ln()).collect()
        };
        let m = ClosureModel::new(3, 8, logits, |_| 0.0);
        let params = DecodeParams {
            max_new_tokens: 4,
            ..DecodeParams::default()
        };
        let g = greedy_decode(&m, &[0], &params).unwrap();
        let g_ll = trajectory_log_likelihood(&m, &[0], &g.response).unwrap();
        let (best, best_ll) = crate::tasks::brute_force_argmax(3, 4, |r| trajectory_log_likelihood(&m, &[0], r)).unwrap();
        assert!(g_ll < best_ll);
        assert_eq!(best, vec![EOS]);
    }

    #[test]
    fn best_of_one_is_the_sample() {
        let m = tiny_model(4);
        let params = DecodeParams::with_algorithm(Algorithm::BestOfN);
        let d = best_of_n(&m, &[0, 4, 2], 1, &params, &FinalReward(&m)).unwrap();
        let mut g = rng::stream(params.seed, "best_of/0");
        let s = sample_decode(&m, &[0, 4, 2], params.max_new_tokens, &params.sampling(), &mut g).unwrap();
        assert_eq!(d.response, s.response);
    }

    #[test]
    fn best_of_picks_max_under_injected_scorer() {
        let m = tiny_model(5);
        let params = DecodeParams::with_algorithm(Algorithm::BestOfN);
        let scorer = |_: &[u32], r: &[u32]| Ok(r.iter().map(|&t| t as f64).sum::<f64>());
        let d = best_of_n(&m, &[0, 4, 2], 6, &params, &scorer).unwrap();
        let best = scorer(&[], &d.response).unwrap();
        for i in 0..6 {
            let mut g = rng::stream(params.seed, &format!("best_of/{i}"));
            let s = sample_decode(&m, &[0, 4, 2], params.max_new_tokens, &params.sampling(), &mut g).unwrap();
            assert!(scorer(&[], &s.response).unwrap() <= best);
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in [Algorithm::Greedy, Algorithm::TopP, Algorithm::BestOfN, Algorithm::Sla] {
            assert_eq!(Algorithm::parse(a.name()).unwrap(), a);
        }
        assert!(Algorithm::parse("nucleus").is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = DecodeParams::default();
        p.top_p = 0.0;
        assert!(p.validate().is_err());
        p = DecodeParams::default();
        p.sla.depth = 0;
        assert!(p.validate().is_err());
        p = DecodeParams::default();
        p.temperature = -1.0;
        assert!(p.validate().is_err());
    }
}
