use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterRewardHead, RewardTransformer};
use crate::trajectory::PreferencePair;

/// Grid points on the position-fraction axis.
pub const GRID_POINTS: usize = 101;

/// Anything producing one reward per position of a token sequence.
pub trait TokenRewardModel {
    fn token_rewards(&self, tokens: &[u32]) -> Result<Vec<f64>>;
}

impl TokenRewardModel for RewardTransformer {
    fn token_rewards(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(self.forward(tokens)?.1)
    }
}

/// An adapter head over a fixed policy.
pub struct AdapterScorer<'a> {
    pub model: &'a RewardTransformer,
    pub adapter: &'a AdapterRewardHead,
}

impl TokenRewardModel for AdapterScorer<'_> {
    fn token_rewards(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.adapter.forward(self.model, tokens)
    }
}

/// Wraps a closure as a reward model.
pub struct RewardFn<F>(pub F);

impl<F: Fn(&[u32]) -> Vec<f64>> TokenRewardModel for RewardFn<F> {
    fn token_rewards(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok((self.0)(tokens))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrCurve {
    pub x: Vec<f64>,
    pub agreement: Vec<f64>,
    pub area: f64,
}

/// Prefix length `⌈j·T/(GRID_POINTS−1)⌉`, at least 1.
fn prefix_len(j: usize, t: usize) -> usize {
    let steps = GRID_POINTS - 1;
    (j * t).div_ceil(steps).max(1)
}

/// Running means of the first `m` entries for every `m`.
fn prefix_means(r: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    r.iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect()
}

fn response_rewards(scorer: &dyn TokenRewardModel, prompt_len: usize, tokens: &[u32]) -> Result<Vec<f64>> {
    let r = scorer.token_rewards(tokens)?;
    if r.len() != tokens.len() {
        return Err(Error::contract(format!("scorer returned {} rewards for {} tokens", r.len(), tokens.len())));
    }
    Ok(r[prompt_len..].to_vec())
}

/// Agreement curve of prefix-mean rankings against the pair ordering, and
/// its trapezoidal area.
pub fn autrc(scorer: &dyn TokenRewardModel, pairs: &[PreferencePair]) -> Result<TrCurve> {
    if pairs.is_empty() {
        return Err(Error::contract("no pairs to evaluate"));
    }
    let means = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.validate().map_err(|e| Error::contract(format!("pair {i}: {e}")))?;
            let n = p.prompt.len();
            Ok((
                prefix_means(&response_rewards(scorer, n, &p.chosen_tokens())?),
                prefix_means(&response_rewards(scorer, n, &p.rejected_tokens())?),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    agreement_curve(&means)
}

/// The curve from per-pair prefix means `(chosen, rejected)`, where entry
/// `m − 1` is the mean over the first `m` response positions.
pub fn agreement_curve(means: &[(Vec<f64>, Vec<f64>)]) -> Result<TrCurve> {
    if means.is_empty() {
        return Err(Error::contract("no pairs to evaluate"));
    }
    let mut hits = vec![0.0; GRID_POINTS];
    for (w, l) in means {
        if w.is_empty() || l.is_empty() {
            return Err(Error::contract("empty response"));
        }
        for (j, h) in hits.iter_mut().enumerate() {
            let a = w[prefix_len(j, w.len()) - 1];
            let b = l[prefix_len(j, l.len()) - 1];
            *h += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    let steps = (GRID_POINTS - 1) as f64;
    let x: Vec<f64> = (0..GRID_POINTS).map(|j| j as f64 / steps).collect();
    let agreement: Vec<f64> = hits.iter().map(|h| h / means.len() as f64).collect();
    let area = agreement.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / steps;
    Ok(TrCurve { x, agreement, area })
}
