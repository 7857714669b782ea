//! Win rates, tournaments, the AuTRC metric, analytic cost models and
//! latency measurement.

mod autrc;
mod cost;
mod latency;

use serde::{Deserialize, Serialize};

use crate::decoding::{decode, DecodeParams, LanguageModel};
use crate::error::{Error, Result};

pub use autrc::{agreement_curve, autrc, AdapterScorer, RewardFn, TokenRewardModel, TrCurve, GRID_POINTS};
pub use cost::{cost_mcts, cost_sla, log_base, CostParams, MctsCost, SlaCost};
pub use latency::{benchmark_latency, LatencyRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Win,
    Tie,
    Loss,
}

impl Verdict {
    /// Exact comparison of candidate against baseline.
    pub fn compare(candidate: f64, baseline: f64) -> Self {
        if candidate > baseline {
            Verdict::Win
        } else if candidate == baseline {
            Verdict::Tie
        } else {
            Verdict::Loss
        }
    }

    pub fn inverted(self) -> Self {
        match self {
            Verdict::Win => Verdict::Loss,
            Verdict::Tie => Verdict::Tie,
            Verdict::Loss => Verdict::Win,
        }
    }
}

/// One prompt of a tournament. A side whose decode failed has no score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub prompt_id: usize,
    pub candidate_score: Option<f64>,
    pub baseline_score: Option<f64>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_response: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baseline_response: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl MatchOutcome {
    pub fn inverted(&self) -> Self {
        MatchOutcome {
            candidate_score: self.baseline_score,
            baseline_score: self.candidate_score,
            verdict: self.verdict.inverted(),
            candidate_response: self.baseline_response.clone(),
            baseline_response: self.candidate_response.clone(),
            ..self.clone()
        }
    }
}

/// Wins plus half the ties, as a percentage.
pub fn win_rate(outcomes: &[MatchOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::contract("win rate of an empty tournament"));
    }
    let wins = outcomes.iter().filter(|o| o.verdict == Verdict::Win).count() as f64;
    let ties = outcomes.iter().filter(|o| o.verdict == Verdict::Tie).count() as f64;
    Ok(100.0 * (wins + ties / 2.0) / outcomes.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tournament {
    pub outcomes: Vec<MatchOutcome>,
    pub win_rate: f64,
}

impl Tournament {
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |v| self.outcomes.iter().filter(|o| o.verdict == v).count();
        (c(Verdict::Win), c(Verdict::Tie), c(Verdict::Loss))
    }
}

/// Decodes every prompt with both parameter sets and compares oracle scores.
/// A failed decode loses its prompt.
pub fn run_tournament<M: LanguageModel>(
    model: &M,
    prompts: &[Vec<u32>],
    candidate: &DecodeParams,
    baseline: &DecodeParams,
    oracle: &dyn Fn(&[u32], &[u32]) -> f64,
) -> Result<Tournament> {
    run_tournament_between((model, candidate), (model, baseline), prompts, oracle)
}

/// Like [`run_tournament`], with each side decoding from its own model.
pub fn run_tournament_between<C: LanguageModel, B: LanguageModel>(
    (candidate_model, candidate): (&C, &DecodeParams),
    (baseline_model, baseline): (&B, &DecodeParams),
    prompts: &[Vec<u32>],
    oracle: &dyn Fn(&[u32], &[u32]) -> f64,
) -> Result<Tournament> {
    candidate.validate()?;
    baseline.validate()?;
    let outcomes: Vec<MatchOutcome> = prompts
        .iter()
        .enumerate()
        .map(|(i, prompt)| {
            let c = decode(candidate_model, prompt, candidate, &mut |_| {});
            let b = decode(baseline_model, prompt, baseline, &mut |_| {});
            let score = |r: &Result<crate::decoding::Decoded>| r.as_ref().ok().map(|d| oracle(prompt, &d.response));
            let (cs, bs) = (score(&c), score(&b));
            let verdict = match (cs, bs) {
                (Some(x), Some(y)) => Verdict::compare(x, y),
                (None, Some(_)) => Verdict::Loss,
                (Some(_), None) => Verdict::Win,
                (None, None) => Verdict::Tie,
            };
            let diagnostic = match (&c, &b) {
                (Err(e), _) => Some(format!("candidate: {e}")),
                (_, Err(e)) => Some(format!("baseline: {e}")),
                _ => None,
            };
            MatchOutcome {
                prompt_id: i,
                candidate_score: cs,
                baseline_score: bs,
                verdict,
                candidate_response: c.map(|d| d.response).unwrap_or_default(),
                baseline_response: b.map(|d| d.response).unwrap_or_default(),
                diagnostic,
            }
        })
        .collect();
    let win_rate = win_rate(&outcomes)?;
    Ok(Tournament { outcomes, win_rate })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::decoding::fixtures::tiny_model;
    use crate::decoding::{trajectory_log_likelihood, Algorithm};

    fn outcome(v: Verdict) -> MatchOutcome {
        MatchOutcome {
            prompt_id: 0,
            candidate_score: Some(0.0),
            baseline_score: Some(0.0),
            verdict: v,
            candidate_response: Vec::new(),
            baseline_response: Vec::new(),
            diagnostic: None,
        }
    }

    fn rate(w: usize, t: usize, l: usize) -> f64 {
        let mut v = vec![outcome(Verdict::Win); w];
        v.extend(vec![outcome(Verdict::Tie); t]);
        v.extend(vec![outcome(Verdict::Loss); l]);
        win_rate(&v).unwrap()
    }

    #[test]
    fn win_rate_examples() {
        assert_eq!(rate(5, 0, 0), 100.0);
        assert_eq!(rate(1, 1, 2), 37.5);
        assert!((rate(750, 19, 231) - 75.95).abs() < 1e-9);
        assert!(win_rate(&[]).is_err());
    }

    #[test]
    fn verdicts_use_exact_comparison() {
        assert_eq!(Verdict::compare(0.5, 0.5), Verdict::Tie);
        assert_eq!(Verdict::compare(0.5 + 1e-15, 0.5), Verdict::Win);
        assert_eq!(Verdict::compare(0.1, 0.2), Verdict::Loss);
    }

    #[test]
    fn self_play_is_all_ties() {
        let m = tiny_model(3);
        let prompts = vec![vec![0, 5, 4, 2], vec![0, 9, 2], vec![0, 3, 3, 8, 2]];
        let g = DecodeParams {
            max_new_tokens: 8,
            ..DecodeParams::default()
        };
        let t = run_tournament(&m, &prompts, &g, &g, &|_, r| r.len() as f64).unwrap();
        assert_eq!(t.win_rate, 50.0);
        assert_eq!(t.counts(), (0, 3, 0));
    }

    #[test]
    fn beam_beats_or_ties_greedy_on_likelihood() {
        let m = tiny_model(5);
        let mut rng = crate::rng::stream(0, "beam-prompts");
        let task = crate::tasks::TaskSpec::sortedness();
        let prompts: Vec<Vec<u32>> = (0..12).map(|_| task.sample_prompt(&mut rng)).collect();
        let greedy = DecodeParams {
            max_new_tokens: 6,
            ..DecodeParams::default()
        };
        let beam = DecodeParams {
            algorithm: Algorithm::Beam,
            beam_width: 4,
            ..greedy.clone()
        };
        let oracle = |p: &[u32], r: &[u32]| trajectory_log_likelihood(&m, p, r).unwrap();
        let t = run_tournament(&m, &prompts, &beam, &greedy, &oracle).unwrap();
        assert!(t.win_rate >= 50.0, "{}", t.win_rate);
        for o in &t.outcomes {
            let (c, b) = (o.candidate_score.unwrap(), o.baseline_score.unwrap());
            assert!(c >= b - 1e-12, "prompt {}: {c} < {b}", o.prompt_id);
        }
    }

    #[test]
    fn failures_lose_their_prompt() {
        let m = tiny_model(1);
        let g = DecodeParams::default();
        let long = vec![3u32; 40];
        let t = run_tournament(&m, &[long], &g, &g, &|_, _| 0.0).unwrap();
        assert_eq!(t.outcomes[0].verdict, Verdict::Tie);
        assert!(t.outcomes[0].diagnostic.as_ref().unwrap().contains("capacity"));
    }

    proptest! {
        #[test]
        fn win_rates_of_inverse_tournaments_sum_to_100(v in prop::collection::vec(0u8..3, 1..200)) {
            let outcomes: Vec<MatchOutcome> = v
                .iter()
                .map(|&x| outcome([Verdict::Win, Verdict::Tie, Verdict::Loss][x as usize]))
                .collect();
            let inverted: Vec<MatchOutcome> = outcomes.iter().map(MatchOutcome::inverted).collect();
            prop_assert_eq!(win_rate(&outcomes).unwrap() + win_rate(&inverted).unwrap(), 100.0);
        }
    }
}
