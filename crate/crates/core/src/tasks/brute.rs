use super::EOS;
use crate::error::{Error, Result};

/// Largest `vocab^max_len` the exhaustive search accepts.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Scores every complete response of at most `max_len` tokens and returns the
/// best one with its score. A response is complete when it ends with the end
/// token or reaches `max_len`; the end token never appears earlier.
///
/// Ties keep the lexicographically smallest response.
pub fn brute_force_argmax(
    vocab_size: usize,
    max_len: usize,
    mut scorer: impl FnMut(&[u32]) -> Result<f64>,
) -> Result<(Vec<u32>, f64)> {
    if max_len == 0 || vocab_size == 0 {
        return Err(Error::contract("brute force needs max_len >= 1 and a nonempty vocabulary"));
    }
    let bound = (vocab_size as u128).checked_pow(max_len as u32).unwrap_or(u128::MAX);
    if bound > BRUTE_FORCE_LIMIT {
        return Err(Error::Budget {
            bound,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut prefix = Vec::with_capacity(max_len);
    visit(vocab_size as u32, max_len, &mut prefix, &mut scorer, &mut best)?;
    Ok(best.expect("at least one trajectory"))
}

fn visit(
    vocab: u32,
    max_len: usize,
    prefix: &mut Vec<u32>,
    scorer: &mut impl FnMut(&[u32]) -> Result<f64>,
    best: &mut Option<(Vec<u32>, f64)>,
) -> Result<()> {
    for t in 0..vocab {
        prefix.push(t);
        if t == EOS || prefix.len() == max_len {
            let s = scorer(prefix)?;
            if best.as_ref().is_none_or(|(_, b)| s > *b) {
                *best = Some((prefix.clone(), s));
            }
        } else {
            visit(vocab, max_len, prefix, scorer, best)?;
        }
        prefix.pop();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{digit, TaskSpec, BOS, SEP, VOCAB_SIZE};
    use super::*;

    #[test]
    fn single_token_argmax() {
        let (best, s) = brute_force_argmax(5, 1, |r| Ok([0.1, 0.3, 0.9, 0.2, 0.9][r[0] as usize])).unwrap();
        assert_eq!(best, vec![2]);
        assert_eq!(s, 0.9);
    }

    #[test]
    fn sortedness_unique_optimum() {
        let task = TaskSpec::sortedness();
        let prompt = vec![BOS, digit(2), digit(1), SEP];
        let (best, s) = brute_force_argmax(VOCAB_SIZE, 3, |r| Ok(task.oracle(&prompt, r))).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(&best[..2], &[digit(1), digit(2)]);
    }

    #[test]
    fn counts_complete_trajectories() {
        let mut n = 0;
        brute_force_argmax(4, 3, |_| {
            n += 1;
            Ok(0.0)
        })
        .unwrap();
        // [EOS], 3 x [_, EOS], 9 x 4 of length three
        assert_eq!(n, 1 + 3 + 36);
    }

    #[test]
    fn budget_enforced() {
        let err = brute_force_argmax(16, 5, |_| Ok(0.0)).unwrap_err();
        assert!(matches!(err, Error::Budget { bound: 1_048_576, .. }));
    }
}
