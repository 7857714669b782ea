use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoding::{decode, mcts_decode, sla_decode, Algorithm, CountingModel, DecodeParams, LanguageModel};
use crate::error::{Error, Result};

/// Per-configuration timing and work counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub config: String,
    pub tokens: usize,
    pub seconds: f64,
    pub tokens_per_sec: f64,
    /// Per-token wall clock relative to the greedy row.
    pub ratio: f64,
    /// Batched model calls per emitted token, prompt prefill included.
    pub forwards_per_token: f64,
    /// Extended prefixes per emitted token.
    pub items_per_token: f64,
    pub steps: usize,
    pub seconds_per_step: f64,
}

struct Run {
    tokens: usize,
    steps: usize,
}

fn run_all<M: LanguageModel>(model: &M, prompts: &[Vec<u32>], params: &DecodeParams) -> Result<Run> {
    let mut run = Run { tokens: 0, steps: 0 };
    for p in prompts {
        let (tokens, steps) = match params.algorithm {
            Algorithm::Sla => {
                let (d, s) = sla_decode(model, p, params, &mut |_| {})?;
                (d.response.len(), s.steps)
            }
            Algorithm::Mcts => {
                let (d, s) = mcts_decode(model, p, params, &mut |_| {})?;
                (d.response.len(), s.steps)
            }
            _ => {
                let d = decode(model, p, params, &mut |_| {})?;
                (d.response.len(), d.response.len())
            }
        };
        run.tokens += tokens;
        run.steps += steps;
    }
    Ok(run)
}

/// Times every configuration after `warmup` untimed passes over the prompts.
/// The first row is always a greedy baseline with the first configuration's
/// token budget.
pub fn benchmark_latency<M: LanguageModel>(
    model: &M,
    prompts: &[Vec<u32>],
    configs: &[(String, DecodeParams)],
    warmup: usize,
) -> Result<Vec<LatencyRow>> {
    if prompts.is_empty() {
        return Err(Error::contract("no prompts to benchmark"));
    }
    let mut greedy = configs.first().map(|(_, p)| p.clone()).unwrap_or_default();
    greedy.algorithm = Algorithm::Greedy;
    let mut all = vec![("greedy".to_string(), greedy)];
    all.extend(configs.iter().cloned());

    let mut rows: Vec<LatencyRow> = Vec::with_capacity(all.len());
    for (name, params) in &all {
        params.validate()?;
        for _ in 0..warmup {
            run_all(model, prompts, params)?;
        }
        let counted = CountingModel::new(model);
        let start = Instant::now();
        let run = run_all(&counted, prompts, params)?;
        let seconds = start.elapsed().as_secs_f64();
        let c = counted.counts();
        let tokens = run.tokens.max(1) as f64;
        let per_token = seconds / tokens;
        let ratio = match rows.first() {
            Some(g) => per_token / (g.seconds / g.tokens.max(1) as f64),
            None => 1.0,
        };
        rows.push(LatencyRow {
            config: name.clone(),
            tokens: run.tokens,
            seconds,
            tokens_per_sec: tokens / seconds,
            ratio,
            forwards_per_token: c.calls as f64 / tokens,
            items_per_token: c.items as f64 / tokens,
            steps: run.steps,
            seconds_per_step: seconds / run.steps.max(1) as f64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::fixtures::tiny_model;

    #[test]
    fn greedy_row_first_and_counts_bounded() {
        let m = tiny_model(4);
        let prompts = vec![vec![0, 5, 9, 2], vec![0, 4, 4, 7, 2]];
        let mut sla = DecodeParams::with_algorithm(Algorithm::Sla);
        sla.max_new_tokens = 20;
        sla.sla.step = 3;
        let rows = benchmark_latency(&m, &prompts, &[("sla".into(), sla.clone())], 1).unwrap();
        assert_eq!(rows[0].config, "greedy");
        assert_eq!(rows[0].ratio, 1.0);
        assert_eq!(rows[0].forwards_per_token, 1.0);
        let bound = (sla.sla.depth * sla.sla.width) as f64;
        assert!(rows[1].forwards_per_token <= bound, "{}", rows[1].forwards_per_token);
        assert!(rows[1].tokens > 0 && rows[1].tokens_per_sec > 0.0);
    }
}
