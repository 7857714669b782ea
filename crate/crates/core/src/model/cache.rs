use std::sync::Arc;

/// An immutable span of cached attention keys and values.
///
/// Segments form a tree through their parent links: siblings share the
/// prefix they extend, and walking the parents of any segment yields the full
/// prefix it continues.
#[derive(Debug)]
pub struct KvSegment {
    parent: Option<Arc<KvSegment>>,
    start: usize,
    tokens: Vec<u32>,
    d_model: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    reward_state: Vec<Vec<f64>>,
}

impl KvSegment {
    pub(crate) fn new(
        parent: Option<Arc<KvSegment>>,
        tokens: Vec<u32>,
        d_model: usize,
        keys: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
        reward_state: Vec<Vec<f64>>,
    ) -> Self {
        let start = parent.as_ref().map_or(0, |p| p.total_len());
        Self {
            parent,
            start,
            tokens,
            d_model,
            keys,
            values,
            reward_state,
        }
    }

    pub fn parent(&self) -> Option<&Arc<KvSegment>> {
        self.parent.as_ref()
    }

    /// Absolute position of the first token in this span.
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn span_len(&self) -> usize {
        self.tokens.len()
    }

    /// Length of the whole prefix ending with this span.
    pub fn total_len(&self) -> usize {
        self.start + self.tokens.len()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// All tokens from the root of the chain up to the end of this span.
    pub fn prefix_tokens(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.total_len());
        for seg in self.chain() {
            out.extend_from_slice(&seg.tokens);
        }
        out
    }

    /// Reward-channel state at this span's last position, for layer inputs
    /// `0..n_layers` followed by the final state.
    pub fn reward_state(&self, layer: usize) -> &[f64] {
        &self.reward_state[layer]
    }

    pub fn layer_keys(&self, layer: usize) -> &[f64] {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Segments from the root to `self`, in position order.
    pub(crate) fn chain(&self) -> Vec<&KvSegment> {
        let mut chain = vec![self];
        let mut cur = self;
        while let Some(p) = cur.parent.as_deref() {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(parent: Option<Arc<KvSegment>>, tokens: Vec<u32>) -> Arc<KvSegment> {
        let n = tokens.len();
        Arc::new(KvSegment::new(
            parent,
            tokens,
            2,
            vec![vec![0.0; 2 * n]],
            vec![vec![0.0; 2 * n]],
            vec![vec![0.0]; 2],
        ))
    }

    #[test]
    fn chain_walks_back_to_root() {
        let a = seg(None, vec![1, 2]);
        let b = seg(Some(a.clone()), vec![3]);
        let c = seg(Some(b.clone()), vec![4, 5]);
        assert_eq!(c.start(), 3);
        assert_eq!(c.total_len(), 5);
        assert_eq!(c.prefix_tokens(), vec![1, 2, 3, 4, 5]);
        assert_eq!(c.chain().len(), 3);
        let sibling = seg(Some(b), vec![9]);
        assert_eq!(sibling.prefix_tokens(), vec![1, 2, 3, 9]);
        assert_eq!(c.prefix_tokens(), vec![1, 2, 3, 4, 5]);
    }
}
