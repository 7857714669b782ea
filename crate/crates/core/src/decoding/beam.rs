use super::{budget, log_softmax, DecodeParams, Decoded, LanguageModel};
use crate::error::Result;
use crate::tasks::EOS;

struct Beam<S> {
    response: Vec<u32>,
    log_probs: Vec<f64>,
    score: f64,
    state: S,
    logits: Vec<f64>,
}

/// Keeps the `beam_width` most likely partial responses. Responses that end
/// or hit the length budget are retired; the search stops once no live beam
/// can overtake the best retired one. Scores are raw joint log-likelihoods.
pub fn beam_search<M: LanguageModel>(model: &M, prompt: &[u32], params: &DecodeParams) -> Result<Decoded> {
    let budget = budget(model, prompt, params.max_new_tokens)?;
    let width = params.beam_width.max(1);
    let out = model.extend_one(None, prompt)?;
    let mut live = vec![Beam {
        response: Vec::new(),
        log_probs: Vec::new(),
        score: 0.0,
        logits: out.last_logits().to_vec(),
        state: out.state,
    }];
    let mut finished: Vec<Decoded> = Vec::new();
    let mut finished_scores: Vec<f64> = Vec::new();

    loop {
        let mut candidates = Vec::new();
        for (bi, beam) in live.iter().enumerate() {
            for (t, lp) in log_softmax(&beam.logits).into_iter().enumerate() {
                candidates.push((beam.score + lp, lp, bi, t as u32));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        candidates.truncate(width);

        let mut extend = Vec::new();
        for (score, lp, bi, t) in candidates {
            let mut response = live[bi].response.clone();
            response.push(t);
            let mut log_probs = live[bi].log_probs.clone();
            log_probs.push(lp);
            if t == EOS || response.len() == budget {
                finished.push(Decoded {
                    response,
                    log_probs,
                    chosen_q: Vec::new(),
                });
                finished_scores.push(score);
            } else {
                extend.push((score, bi, response, log_probs));
            }
        }
        if extend.is_empty() {
            break;
        }
        let items: Vec<_> = extend
            .iter()
            .map(|(_, bi, response, _)| (Some(&live[*bi].state), &response[response.len() - 1..]))
            .collect();
        let outs = model.extend(&items)?;
        live = extend
            .into_iter()
            .zip(outs)
            .map(|((score, _, response, log_probs), o)| Beam {
                response,
                log_probs,
                score,
                logits: o.last_logits().to_vec(),
                state: o.state,
            })
            .collect();
        let best_live = live.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !finished.is_empty() && best_done >= best_live {
            break;
        }
    }

    let mut best = 0;
    for i in 1..finished.len() {
        if finished_scores[i] > finished_scores[best] {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::tiny_model;
    use super::super::{greedy_decode, trajectory_log_likelihood, ClosureModel};
    use super::*;
    use crate::tasks::brute_force_argmax;

    #[test]
    fn width_one_is_greedy() {
        let m = tiny_model(21);
        let params = DecodeParams {
            beam_width: 1,
            ..DecodeParams::default()
        };
        for prompt in [vec![0, 3, 2], vec![0, 9, 9, 4, 2], vec![0]] {
            let g = greedy_decode(&m, &prompt, &params).unwrap();
            let b = beam_search(&m, &prompt, &params).unwrap();
            assert_eq!(g.response, b.response);
        }
    }

    #[test]
    fn full_width_finds_exhaustive_maximum() {
        for seed in 0..10u64 {
            let table: Vec<f64> = (0..200).map(|i| (((i * 7919 + seed as usize * 104729) % 1000) as f64) / 250.0).collect();
            let logits = move |p: &[u32]| -> Vec<f64> {
                let h = p.iter().fold(seed as usize, |acc, &t| acc * 31 + t as usize + 1);
                (0..3).map(|j| table[(h * 3 + j) % 200]).collect()
            };
            let m = ClosureModel::new(3, 8, logits, |_| 0.0);
            let params = DecodeParams {
                beam_width: 81,
                max_new_tokens: 4,
                ..DecodeParams::default()
            };
            let b = beam_search(&m, &[0], &params).unwrap();
            let (best, best_ll) = brute_force_argmax(3, 4, |r| trajectory_log_likelihood(&m, &[0], r)).unwrap();
            let b_ll = trajectory_log_likelihood(&m, &[0], &b.response).unwrap();
            assert!((b_ll - best_ll).abs() < 1e-12, "seed {seed}");
            assert_eq!(b.response, best, "seed {seed}");
        }
    }
}
