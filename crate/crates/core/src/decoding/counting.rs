use std::collections::HashMap;
use std::sync::Mutex;

use super::{LanguageModel, StepOutput};
use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    /// Batched model invocations.
    pub calls: usize,
    /// Prefixes extended, summed over calls.
    pub items: usize,
    /// New tokens forwarded.
    pub tokens: usize,
    /// Extended prefixes that had already been forwarded before.
    pub repeated: usize,
}

/// Wraps a model and counts its work.
pub struct CountingModel<'a, M> {
    inner: &'a M,
    track_prefixes: bool,
    counts: Mutex<(CallCounts, HashMap<Vec<u32>, usize>)>,
}

impl<'a, M: LanguageModel> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            track_prefixes: false,
            counts: Mutex::default(),
        }
    }

    /// Also remembers every forwarded prefix to detect recomputation.
    pub fn tracking_prefixes(inner: &'a M) -> Self {
        Self {
            track_prefixes: true,
            ..Self::new(inner)
        }
    }

    pub fn counts(&self) -> CallCounts {
        self.counts.lock().unwrap().0.clone()
    }

    pub fn reset(&self) {
        *self.counts.lock().unwrap() = Default::default();
    }
}

impl<M: LanguageModel> LanguageModel for CountingModel<'_, M> {
    type State = M::State;

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn max_seq_len(&self) -> usize {
        self.inner.max_seq_len()
    }

    fn extend(&self, items: &[(Option<&Self::State>, &[u32])]) -> Result<Vec<StepOutput<Self::State>>> {
        let out = self.inner.extend(items)?;
        let mut guard = self.counts.lock().unwrap();
        let (counts, seen) = &mut *guard;
        counts.calls += 1;
        counts.items += items.len();
        for (state, tokens) in items {
            counts.tokens += tokens.len();
            if self.track_prefixes {
                let mut prefix = state.map_or_else(Vec::new, |s| self.inner.state_tokens(s));
                for &t in tokens.iter() {
                    prefix.push(t);
                    let n = seen.entry(prefix.clone()).or_insert(0);
                    if *n > 0 {
                        counts.repeated += 1;
                    }
                    *n += 1;
                }
            }
        }
        Ok(out)
    }

    fn state_tokens(&self, state: &Self::State) -> Vec<u32> {
        self.inner.state_tokens(state)
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::tiny_model;
    use super::super::{greedy_decode, DecodeParams};
    use super::*;

    #[test]
    fn greedy_calls_once_per_token() {
        let m = tiny_model(1);
        let c = CountingModel::tracking_prefixes(&m);
        let d = greedy_decode(&c, &[0, 5, 2], &DecodeParams::default()).unwrap();
        let counts = c.counts();
        assert_eq!(counts.calls, d.response.len());
        assert_eq!(counts.repeated, 0);
        c.extend_one(None, &[0, 5]).unwrap();
        assert_eq!(c.counts().repeated, 2);
    }
}
