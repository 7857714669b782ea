use rand::Rng;

use super::tree::{ChildPolicy, SearchTree, TopKGreedy};
use super::{argmax, budget, filtered_distribution, sample_from, DecodeParams, Decoded, LanguageModel, SampleConfig};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SlaStats {
    pub steps: usize,
    /// Batched model invocations, including the prompt prefill.
    pub calls: usize,
    /// Child blocks created.
    pub blocks: usize,
    /// `(frontier size, blocks created)` for every expansion round.
    pub rounds: Vec<(usize, usize)>,
    /// Largest frontier after depth restoration.
    pub max_frontier: usize,
    pub emitted: usize,
}

/// Grows the tree to depth `d` below the root, sets Q by max backup and
/// returns the index of the best root child (lowest first token on ties).
pub fn sla_step<M: LanguageModel>(
    model: &M,
    tree: &mut SearchTree<M::State>,
    params: &DecodeParams,
    stats: &mut SlaStats,
    rng: &mut impl Rng,
) -> Result<usize> {
    let root = tree.root();
    if tree.node(root).terminal {
        return Err(Error::contract("search step from a terminal root"));
    }
    let sla = &params.sla;
    let k = sla.width.min(model.vocab_size());
    let mut sampled = Sampled {
        k,
        cfg: SampleConfig::temperature(params.temperature),
        rng,
    };
    let mut top = TopKGreedy(k);
    loop {
        let frontier: Vec<usize> = tree
            .leaves()
            .into_iter()
            .filter(|&(i, depth)| depth < sla.depth && !tree.node(i).terminal)
            .map(|(i, _)| i)
            .collect();
        if frontier.is_empty() {
            break;
        }
        let e = if sla.sampled_children {
            tree.expand(model, &frontier, sla.step, &mut sampled)?
        } else {
            tree.expand(model, &frontier, sla.step, &mut top)?
        };
        stats.calls += e.calls;
        stats.blocks += e.created;
        stats.rounds.push((frontier.len(), e.created));
    }
    let frontier = tree.leaves().iter().filter(|&&(i, _)| !tree.node(i).terminal).count();
    stats.max_frontier = stats.max_frontier.max(frontier);
    tree.update_q(root);
    let children = &tree.node(root).children;
    let mut best = children[0];
    for &c in &children[1..] {
        if tree.node(c).q > tree.node(best).q {
            best = c;
        }
    }
    stats.steps += 1;
    Ok(best)
}

/// The first child is the greedy block; the others are sampled at the
/// decode temperature, first token and continuation alike.
struct Sampled<'a, R> {
    k: usize,
    cfg: SampleConfig,
    rng: &'a mut R,
}

impl<R: Rng> ChildPolicy for Sampled<'_, R> {
    fn first_tokens(&mut self, logits: &[f64]) -> Vec<u32> {
        (0..self.k).map(|slot| self.next_token(slot, logits)).collect()
    }

    fn next_token(&mut self, slot: usize, logits: &[f64]) -> u32 {
        if slot == 0 {
            return argmax(logits);
        }
        let probs = filtered_distribution(logits, &self.cfg).expect("validated parameters");
        sample_from(&probs, self.rng)
    }
}

/// Streaming lookahead decoding. Each committed block goes to `emit` before
/// the next step; the chosen subtree and its caches carry over so only the
/// frontier is expanded again.
pub fn sla_decode<M: LanguageModel>(
    model: &M,
    prompt: &[u32],
    params: &DecodeParams,
    emit: &mut dyn FnMut(&[u32]),
) -> Result<(Decoded, SlaStats)> {
    params.validate()?;
    let budget = budget(model, prompt, params.max_new_tokens)?;
    let mut stats = SlaStats::default();
    let out = model.extend_one(None, prompt)?;
    stats.calls += 1;
    let mut tree = SearchTree::new(out.state.clone(), out.last_logits().to_vec(), out.last_reward(), budget);
    let mut g = rng::stream(params.seed, "sla");
    let mut decoded = Decoded::default();
    loop {
        let chosen = sla_step(model, &mut tree, params, &mut stats, &mut g)?;
        let node = tree.node(chosen);
        emit(&node.block);
        stats.emitted += node.block.len();
        decoded.response.extend_from_slice(&node.block);
        decoded.chosen_q.push(node.q);
        let done = node.terminal;
        tree.reroot(chosen);
        if done {
            return Ok((decoded, stats));
        }
    }
}
