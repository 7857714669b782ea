use super::{argmax, LanguageModel};
use crate::error::Result;
use crate::tasks::EOS;

/// One action block in a lookahead tree.
#[derive(Clone, Debug)]
pub struct SearchNode<S> {
    pub block: Vec<u32>,
    pub parent: Option<usize>,
    /// Ordered by first token id.
    pub children: Vec<usize>,
    pub q: f64,
    /// Reward estimate at the block's last token.
    pub reward: f64,
    pub visits: u64,
    pub value_sum: f64,
    pub terminal: bool,
    /// Response length up to the end of this block.
    pub len: usize,
    pub(crate) state: S,
    pub(crate) logits: Vec<f64>,
}

impl<S> SearchNode<S> {
    pub fn first_token(&self) -> u32 {
        self.block[0]
    }

    pub fn mean_value(&self) -> f64 {
        self.value_sum / self.visits as f64
    }
}

/// Arena-allocated search tree rooted at the committed prefix.
#[derive(Clone, Debug)]
pub struct SearchTree<S> {
    nodes: Vec<SearchNode<S>>,
    root: usize,
    budget: usize,
}

/// Work done by one expansion round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Expansion {
    pub calls: usize,
    pub created: usize,
}

/// How an expansion proposes children: the first token of each child, then
/// each following token of child `slot` inside the block.
pub trait ChildPolicy {
    fn first_tokens(&mut self, logits: &[f64]) -> Vec<u32>;
    fn next_token(&mut self, slot: usize, logits: &[f64]) -> u32;
}

/// The `k` most likely distinct first tokens, then greedy continuation.
pub struct TopKGreedy(pub usize);

impl ChildPolicy for TopKGreedy {
    fn first_tokens(&mut self, logits: &[f64]) -> Vec<u32> {
        super::top_tokens(logits, self.0)
    }

    fn next_token(&mut self, _slot: usize, logits: &[f64]) -> u32 {
        argmax(logits)
    }
}

struct Pending<S> {
    parent: usize,
    slot: usize,
    block: Vec<u32>,
    out: Option<(S, Vec<f64>, f64)>,
    active: bool,
    terminal: bool,
}

impl<S: Clone> SearchTree<S> {
    pub(crate) fn new(state: S, logits: Vec<f64>, reward: f64, budget: usize) -> Self {
        let root = SearchNode {
            block: Vec::new(),
            parent: None,
            children: Vec::new(),
            q: reward,
            reward,
            visits: 0,
            value_sum: 0.0,
            terminal: false,
            len: 0,
            state,
            logits,
        };
        Self {
            nodes: vec![root],
            root: 0,
            budget,
        }
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, i: usize) -> &SearchNode<S> {
        &self.nodes[i]
    }

    pub(crate) fn node_mut(&mut self, i: usize) -> &mut SearchNode<S> {
        &mut self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Leaves under the root with their depth below it.
    pub fn leaves(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut stack = vec![(self.root, 0)];
        while let Some((i, depth)) = stack.pop() {
            let node = &self.nodes[i];
            if node.children.is_empty() {
                out.push((i, depth));
            } else {
                stack.extend(node.children.iter().rev().map(|&c| (c, depth + 1)));
            }
        }
        out
    }

    /// Expands every listed leaf into children proposed by `policy`; each
    /// child grows until `step` tokens, the end token or the length budget.
    pub(crate) fn expand<M>(
        &mut self,
        model: &M,
        leaves: &[usize],
        step: usize,
        policy: &mut impl ChildPolicy,
    ) -> Result<Expansion>
    where
        M: LanguageModel<State = S>,
    {
        let mut pending: Vec<Pending<S>> = Vec::new();
        for &leaf in leaves {
            debug_assert!(self.nodes[leaf].children.is_empty() && !self.nodes[leaf].terminal);
            for (slot, t) in policy.first_tokens(&self.nodes[leaf].logits).into_iter().enumerate() {
                pending.push(Pending {
                    parent: leaf,
                    slot,
                    block: vec![t],
                    out: None,
                    active: true,
                    terminal: false,
                });
            }
        }
        let mut stats = Expansion {
            calls: 0,
            created: pending.len(),
        };
        loop {
            let active: Vec<usize> = (0..pending.len()).filter(|&i| pending[i].active).collect();
            if active.is_empty() {
                break;
            }
            let items: Vec<(Option<&S>, &[u32])> = active
                .iter()
                .map(|&i| {
                    let p = &pending[i];
                    let state = match &p.out {
                        Some((s, _, _)) => s,
                        None => &self.nodes[p.parent].state,
                    };
                    (Some(state), &p.block[p.block.len() - 1..])
                })
                .collect();
            let outs = model.extend(&items)?;
            drop(items);
            stats.calls += 1;
            for (&i, o) in active.iter().zip(outs) {
                let p = &mut pending[i];
                let reward = o.last_reward();
                let logits = o.last_logits().to_vec();
                p.out = Some((o.state, logits, reward));
                let len = self.nodes[p.parent].len + p.block.len();
                let last = *p.block.last().unwrap();
                p.terminal = last == EOS || len >= self.budget;
                if p.terminal || p.block.len() == step {
                    p.active = false;
                } else {
                    let next = policy.next_token(p.slot, &p.out.as_ref().unwrap().1);
                    p.block.push(next);
                }
            }
        }
        for p in pending {
            let (state, logits, reward) = p.out.expect("forwarded");
            let len = self.nodes[p.parent].len + p.block.len();
            self.nodes.push(SearchNode {
                block: p.block,
                parent: Some(p.parent),
                children: Vec::new(),
                q: reward,
                reward,
                visits: 0,
                value_sum: 0.0,
                terminal: p.terminal,
                len,
                state,
                logits,
            });
            let id = self.nodes.len() - 1;
            self.nodes[p.parent].children.push(id);
        }
        for &leaf in leaves {
            let mut children = std::mem::take(&mut self.nodes[leaf].children);
            children.sort_by_key(|&c| self.nodes[c].block[0]);
            self.nodes[leaf].children = children;
        }
        Ok(stats)
    }

    /// Sets leaf Q to its reward and internal Q to the max over children.
    pub(crate) fn update_q(&mut self, i: usize) -> f64 {
        let children = self.nodes[i].children.clone();
        let q = if children.is_empty() {
            self.nodes[i].reward
        } else {
            children.into_iter().map(|c| self.update_q(c)).fold(f64::NEG_INFINITY, f64::max)
        };
        self.nodes[i].q = q;
        q
    }

    /// Whether every node under the root satisfies the max-Q rule.
    pub fn q_consistent(&self) -> bool {
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i];
            let expected = if n.children.is_empty() {
                n.reward
            } else {
                n.children.iter().map(|&c| self.nodes[c].q).fold(f64::NEG_INFINITY, f64::max)
            };
            if n.q != expected {
                return false;
            }
            stack.extend(&n.children);
        }
        true
    }

    /// Makes `child` the root, dropping every node outside its subtree.
    pub(crate) fn reroot(&mut self, child: usize) {
        let mut old: Vec<Option<SearchNode<S>>> = std::mem::take(&mut self.nodes).into_iter().map(Some).collect();
        let mut map = vec![usize::MAX; old.len()];
        let mut order = vec![child];
        let mut k = 0;
        while k < order.len() {
            let i = order[k];
            map[i] = k;
            order.extend(old[i].as_ref().unwrap().children.iter().copied());
            k += 1;
        }
        self.nodes = order
            .iter()
            .map(|&i| {
                let mut n = old[i].take().unwrap();
                n.parent = n.parent.filter(|_| i != child).map(|p| map[p]);
                n.children = n.children.iter().map(|&c| map[c]).collect();
                n
            })
            .collect();
        self.root = 0;
    }
}
