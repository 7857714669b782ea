use rand::Rng;

use super::{budget, Decoded, LanguageModel};
use crate::error::{Error, Result};
use crate::tasks::EOS;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    crate::tensor::log_softmax_in_place(&mut out);
    out
}

/// The `k` highest-scoring ids, best first; ties go to the lower id.
pub fn top_tokens(logits: &[f64], k: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..logits.len() as u32).collect();
    ids.sort_by(|&a, &b| logits[b as usize].total_cmp(&logits[a as usize]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub temperature: f64,
    /// `None` keeps the whole vocabulary.
    pub top_k: Option<usize>,
    pub top_p: f64,
}

impl SampleConfig {
    pub fn temperature(temperature: f64) -> Self {
        Self {
            temperature,
            top_k: None,
            top_p: 1.0,
        }
    }
}

/// Sampling distribution after temperature scaling, then top-k, then
/// nucleus truncation, renormalized. A `top_k` above the vocabulary keeps
/// every token.
pub fn filtered_distribution(logits: &[f64], cfg: &SampleConfig) -> Result<Vec<f64>> {
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::parameter(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    if cfg.top_k == Some(0) {
        return Err(Error::parameter("top_k must be at least 1"));
    }
    if !(cfg.top_p > 0.0 && cfg.top_p <= 1.0) {
        return Err(Error::parameter(format!("top_p must lie in (0, 1], got {}", cfg.top_p)));
    }
    let mut probs: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    crate::tensor::softmax_in_place(&mut probs);
    let order = top_tokens(&probs, cfg.top_k.unwrap_or(probs.len()));
    let mut keep = Vec::with_capacity(order.len());
    let mut mass = 0.0;
    for &id in &order {
        keep.push(id);
        mass += probs[id as usize];
        if mass >= cfg.top_p {
            break;
        }
    }
    let total: f64 = keep.iter().map(|&id| probs[id as usize]).sum();
    let mut out = vec![0.0; probs.len()];
    for &id in &keep {
        out[id as usize] = probs[id as usize] / total;
    }
    Ok(out)
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_from(probs: &[f64], rng: &mut impl Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i as u32;
        }
    }
    last as u32
}

/// Ancestral sampling under `cfg`.
pub fn sample_decode<M: LanguageModel>(
    model: &M,
    prompt: &[u32],
    max_new_tokens: usize,
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<Decoded> {
    let budget = budget(model, prompt, max_new_tokens)?;
    let mut out = model.extend_one(None, prompt)?;
    let mut decoded = Decoded::default();
    loop {
        let logits = out.last_logits();
        let probs = filtered_distribution(logits, cfg)?;
        let tok = sample_from(&probs, rng);
        decoded.log_probs.push(log_softmax(logits)[tok as usize]);
        decoded.response.push(tok);
        if tok == EOS || decoded.response.len() == budget {
            return Ok(decoded);
        }
        out = model.extend_one(Some(&out.state), &[tok])?;
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::tiny_model;
    use super::super::{greedy_decode, DecodeParams};
    use super::*;
    use crate::rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn logs(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(top_tokens(&[0.2, 0.5, 0.5, 0.1], 3), vec![1, 2, 0]);
    }

    #[test]
    fn nucleus_rule() {
        let cfg = SampleConfig {
            temperature: 1.0,
            top_k: None,
            top_p: 0.7,
        };
        let d = filtered_distribution(&logs(&[0.5, 0.3, 0.2]), &cfg).unwrap();
        assert!((d[0] - 0.625).abs() < 1e-12);
        assert!((d[1] - 0.375).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn top_k_clamps_and_rejects_zero() {
        let mut cfg = SampleConfig {
            temperature: 1.0,
            top_k: Some(50),
            top_p: 1.0,
        };
        let d = filtered_distribution(&logs(&[0.5, 0.3, 0.2]), &cfg).unwrap();
        assert!((d[2] - 0.2).abs() < 1e-12);
        cfg.top_k = Some(0);
        assert!(filtered_distribution(&[0.0], &cfg).is_err());
        cfg.top_k = None;
        cfg.temperature = 0.0;
        assert!(filtered_distribution(&[0.0], &cfg).is_err());
    }

    #[test]
    fn temperature_sharpens() {
        let base = logs(&[0.6, 0.4]);
        let d = filtered_distribution(&base, &SampleConfig::temperature(0.5)).unwrap();
        let expected = 0.36 / (0.36 + 0.16);
        assert!((d[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn identity_configuration_matches_model_distribution() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let cfg = SampleConfig {
            temperature: 1.0,
            top_k: Some(4),
            top_p: 1.0,
        };
        let d = filtered_distribution(&logs(&p), &cfg).unwrap();
        let mut g = rng::stream(0, "chi2");
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_from(&d, &mut g) as usize] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(p)
            .map(|(&c, q)| {
                let e = q * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        let critical = ChiSquared::new(3.0).unwrap().inverse_cdf(0.99);
        assert!(stat < critical, "{stat} >= {critical}");
    }

    #[test]
    fn top_one_equals_greedy() {
        let m = tiny_model(9);
        let params = DecodeParams::default();
        let g = greedy_decode(&m, &[0, 6, 3, 2], &params).unwrap();
        for seed in 0..5 {
            let cfg = SampleConfig {
                temperature: 1.0,
                top_k: Some(1),
                top_p: 1.0,
            };
            let mut r = rng::stream(seed, "top1");
            let s = sample_decode(&m, &[0, 6, 3, 2], params.max_new_tokens, &cfg, &mut r).unwrap();
            assert_eq!(s.response, g.response);
        }
    }
}
