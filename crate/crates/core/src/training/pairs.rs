use serde::{Deserialize, Serialize};

use crate::decoding::{sample_decode, LanguageModel, SampleConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::trajectory::PreferencePair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub samples_per_prompt: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 5,
            temperature: 0.8,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_prompt < 2 {
            return Err(Error::parameter("need at least two samples per prompt"));
        }
        if !(self.temperature > 0.0) || self.max_new_tokens == 0 {
            return Err(Error::parameter("temperature and max_new_tokens must be positive"));
        }
        Ok(())
    }
}

/// Samples responses for every prompt and pairs the best against the worst
/// under `oracle(prompt, response)`. The first sample wins score ties within
/// a prompt; prompts whose samples all score the same yield no pair.
pub fn collect_pairs<M: LanguageModel>(
    policy: &M,
    prompts: &[Vec<u32>],
    oracle: &dyn Fn(&[u32], &[u32]) -> f64,
    cfg: &CollectConfig,
) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    let sampling = SampleConfig::temperature(cfg.temperature);
    let mut pairs = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let mut g = rng::stream(cfg.seed, &format!("collect/{i}"));
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut worst: Option<(Vec<u32>, f64)> = None;
        for _ in 0..cfg.samples_per_prompt {
            let response = sample_decode(policy, prompt, cfg.max_new_tokens, &sampling, &mut g)?.response;
            let score = oracle(prompt, &response);
            if !score.is_finite() {
                return Err(Error::contract(format!("oracle returned {score} for prompt {i}")));
            }
            if best.as_ref().is_none_or(|(_, s)| score > *s) {
                best = Some((response.clone(), score));
            }
            if worst.as_ref().is_none_or(|(_, s)| score < *s) {
                worst = Some((response, score));
            }
        }
        let ((chosen, cs), (rejected, rs)) = (best.expect("samples"), worst.expect("samples"));
        if cs > rs {
            pairs.push(PreferencePair {
                prompt: prompt.clone(),
                chosen,
                rejected,
                chosen_oracle: cs,
                rejected_oracle: rs,
            });
        }
    }
    Ok(pairs)
}
