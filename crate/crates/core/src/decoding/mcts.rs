use super::tree::{SearchTree, TopKGreedy};
use super::{argmax, budget, DecodeParams, Decoded, LanguageModel};
use crate::error::{Error, Result};
use crate::tasks::EOS;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MctsStats {
    pub steps: usize,
    pub calls: usize,
    pub rollouts: usize,
}

fn select_child<S: Clone>(tree: &SearchTree<S>, node: usize, c: f64) -> usize {
    let parent = tree.node(node);
    if let Some(&unvisited) = parent.children.iter().find(|&&ch| tree.node(ch).visits == 0) {
        return unvisited;
    }
    let ln_n = (parent.visits as f64).ln();
    let ucb = |ch: usize| {
        let n = tree.node(ch);
        n.mean_value() + c * (ln_n / n.visits as f64).sqrt()
    };
    let mut best = parent.children[0];
    for &ch in &parent.children[1..] {
        if ucb(ch) > ucb(best) {
            best = ch;
        }
    }
    best
}

/// Greedy continuation from a node to the end token or the length budget,
/// scored by the reward estimate at the last token.
fn rollout<M: LanguageModel>(model: &M, tree: &SearchTree<M::State>, node: usize, stats: &mut MctsStats) -> Result<f64> {
    let n = tree.node(node);
    if n.terminal {
        return Ok(n.reward);
    }
    let mut len = n.len;
    let mut tok = argmax(&n.logits);
    let mut out = model.extend_one(Some(&n.state), &[tok])?;
    stats.calls += 1;
    len += 1;
    while tok != EOS && len < tree.budget() {
        tok = argmax(out.last_logits());
        out = model.extend_one(Some(&out.state), &[tok])?;
        stats.calls += 1;
        len += 1;
    }
    Ok(out.last_reward())
}

/// Runs `rollouts` select/expand/simulate/backup iterations from the root
/// and returns the visited root child with the highest mean value.
pub fn mcts_step<M: LanguageModel>(
    model: &M,
    tree: &mut SearchTree<M::State>,
    params: &DecodeParams,
    stats: &mut MctsStats,
) -> Result<usize> {
    let root = tree.root();
    if tree.node(root).terminal {
        return Err(Error::contract("search step from a terminal root"));
    }
    let mp = &params.mcts;
    let width = mp.width.min(model.vocab_size());
    for _ in 0..mp.rollouts {
        let mut path = vec![root];
        let mut node = root;
        while !tree.node(node).children.is_empty() {
            node = select_child(tree, node, mp.ucb_c);
            path.push(node);
        }
        if !tree.node(node).terminal {
            let e = tree.expand(model, &[node], mp.step, &mut TopKGreedy(width))?;
            stats.calls += e.calls;
            node = select_child(tree, node, mp.ucb_c);
            path.push(node);
        }
        let r = rollout(model, tree, node, stats)?;
        stats.rollouts += 1;
        for &i in &path {
            let n = tree.node_mut(i);
            n.visits += 1;
            n.value_sum += r;
            n.q = n.mean_value();
        }
    }
    let children = &tree.node(root).children;
    let mut best: Option<usize> = None;
    for &c in children {
        let n = tree.node(c);
        if n.visits > 0 && best.is_none_or(|b| n.mean_value() > tree.node(b).mean_value()) {
            best = Some(c);
        }
    }
    stats.steps += 1;
    Ok(best.expect("at least one rollout visits a root child"))
}

/// Decodes by repeated MCTS steps, keeping the chosen subtree.
pub fn mcts_decode<M: LanguageModel>(
    model: &M,
    prompt: &[u32],
    params: &DecodeParams,
    emit: &mut dyn FnMut(&[u32]),
) -> Result<(Decoded, MctsStats)> {
    params.validate()?;
    let budget = budget(model, prompt, params.max_new_tokens)?;
    let out = model.extend_one(None, prompt)?;
    let mut stats = MctsStats {
        calls: 1,
        ..MctsStats::default()
    };
    let mut tree = SearchTree::new(out.state.clone(), out.last_logits().to_vec(), out.last_reward(), budget);
    let mut decoded = Decoded::default();
    loop {
        let chosen = mcts_step(model, &mut tree, params, &mut stats)?;
        let node = tree.node(chosen);
        emit(&node.block);
        decoded.response.extend_from_slice(&node.block);
        decoded.chosen_q.push(node.mean_value());
        let done = node.terminal;
        tree.reroot(chosen);
        if done {
            return Ok((decoded, stats));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::tiny_model;
    use super::super::ClosureModel;
    use super::*;

    fn root_tree<M: LanguageModel>(m: &M, prompt: &[u32], budget: usize) -> SearchTree<M::State> {
        let out = m.extend_one(None, prompt).unwrap();
        SearchTree::new(out.state.clone(), out.last_logits().to_vec(), out.last_reward(), budget)
    }

    #[test]
    fn single_rollout_returns_the_expanded_child() {
        let m = tiny_model(3);
        let mut p = DecodeParams::default();
        p.mcts.rollouts = 1;
        p.mcts.step = 3;
        let mut tree = root_tree(&m, &[0, 4, 2], 20);
        let mut stats = MctsStats::default();
        let c = mcts_step(&m, &mut tree, &p, &mut stats).unwrap();
        let visited: Vec<_> = tree.node(0).children.iter().filter(|&&ch| tree.node(ch).visits > 0).collect();
        assert_eq!(visited, vec![&c]);
    }

    #[test]
    fn bandit_prefers_rewarding_child() {
        let logits = |_: &[u32]| vec![-9.0, 0.0, 1.0, 0.9];
        let reward = |p: &[u32]| if p.get(1) == Some(&3) { 1.0 } else { 0.0 };
        let m = ClosureModel::new(4, 8, logits, reward);
        let mut p = DecodeParams::default();
        p.mcts.rollouts = 20;
        p.mcts.step = 1;
        p.mcts.width = 2;
        let mut tree = root_tree(&m, &[0], 3);
        let mut stats = MctsStats::default();
        let c = mcts_step(&m, &mut tree, &p, &mut stats).unwrap();
        assert_eq!(tree.node(c).block, vec![3]);
        let total: u64 = tree.node(0).children.iter().map(|&ch| tree.node(ch).visits).sum();
        assert_eq!(total, 20);
    }

    #[test]
    fn decode_terminates_within_budget() {
        let m = tiny_model(5);
        let mut p = DecodeParams::default();
        p.max_new_tokens = 12;
        p.mcts.rollouts = 4;
        p.mcts.step = 4;
        let mut emitted = Vec::new();
        let (d, _) = mcts_decode(&m, &[0, 6, 2], &p, &mut |b| emitted.extend_from_slice(b)).unwrap();
        assert_eq!(emitted, d.response);
        assert!(d.response.len() <= 12);
    }
}
