//! Synthetic tasks with exactly computable rewards.
//!
//! Every task shares one 16-token vocabulary:
//!
//! | id    | meaning           |
//! |-------|-------------------|
//! | 0     | begin of sequence |
//! | 1     | end of sequence   |
//! | 2     | prompt separator  |
//! | 3..13 | digits 0 to 9     |
//! | 13    | answer: even      |
//! | 14    | answer: odd       |
//! | 15    | unused            |

mod brute;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub use brute::{brute_force_argmax, BRUTE_FORCE_LIMIT};

pub const VOCAB_SIZE: usize = 16;
pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const DIGIT_BASE: u32 = 3;
pub const EVEN: u32 = 13;
pub const ODD: u32 = 14;

pub fn digit(d: u32) -> u32 {
    DIGIT_BASE + d
}

fn as_digit(token: u32) -> Option<u32> {
    (DIGIT_BASE..DIGIT_BASE + 10).contains(&token).then(|| token - DIGIT_BASE)
}

/// The digits between the opening marker and the separator of a prompt.
fn prompt_digits(prompt: &[u32]) -> Vec<u32> {
    prompt.iter().filter_map(|&t| as_digit(t)).collect()
}

fn strip_eos(response: &[u32]) -> &[u32] {
    match response.split_last() {
        Some((&EOS, rest)) => rest,
        _ => response,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Reorder a list of digits into non-decreasing order.
    Sortedness { min_len: usize, max_len: usize, max_digit: u32 },
    /// Copy a bit string and then state its parity.
    Parity { min_len: usize, max_len: usize },
}

impl TaskSpec {
    pub fn sortedness() -> Self {
        TaskSpec::Sortedness {
            min_len: 4,
            max_len: 10,
            max_digit: 9,
        }
    }

    pub fn parity() -> Self {
        TaskSpec::Parity { min_len: 3, max_len: 10 }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "sortedness" => Ok(Self::sortedness()),
            "parity" => Ok(Self::parity()),
            other => Err(Error::parameter(format!("unknown task {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Sortedness { .. } => "sortedness",
            TaskSpec::Parity { .. } => "parity",
        }
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = match *self {
            TaskSpec::Sortedness {
                min_len,
                max_len,
                max_digit,
            } => {
                if max_digit > 9 {
                    return Err(Error::parameter("max_digit must be at most 9"));
                }
                (min_len, max_len)
            }
            TaskSpec::Parity { min_len, max_len } => (min_len, max_len),
        };
        if lo == 0 || lo > hi {
            return Err(Error::parameter(format!("bad prompt length range {lo}..={hi}")));
        }
        Ok(())
    }

    /// Longest prompt plus its reference response.
    pub fn max_sequence_len(&self) -> usize {
        match *self {
            TaskSpec::Sortedness { max_len, .. } => 2 + max_len + max_len + 1,
            TaskSpec::Parity { max_len, .. } => 2 + max_len + max_len + 2,
        }
    }

    pub fn sample_prompt(&self, rng: &mut impl Rng) -> Vec<u32> {
        let mut prompt = vec![BOS];
        match *self {
            TaskSpec::Sortedness {
                min_len,
                max_len,
                max_digit,
            } => {
                let len = rng.gen_range(min_len..=max_len);
                prompt.extend((0..len).map(|_| digit(rng.gen_range(0..=max_digit))));
            }
            TaskSpec::Parity { min_len, max_len } => {
                let len = rng.gen_range(min_len..=max_len);
                prompt.extend((0..len).map(|_| digit(rng.gen_range(0..=1))));
            }
        }
        prompt.push(SEP);
        prompt
    }

    /// The correct response, terminated by the end-of-sequence token.
    pub fn reference_response(&self, prompt: &[u32]) -> Vec<u32> {
        let mut digits = prompt_digits(prompt);
        let mut out: Vec<u32> = match self {
            TaskSpec::Sortedness { .. } => {
                digits.sort_unstable();
                digits.into_iter().map(digit).collect()
            }
            TaskSpec::Parity { .. } => {
                let ones = digits.iter().filter(|&&d| d == 1).count();
                let mut r: Vec<u32> = digits.into_iter().map(digit).collect();
                r.push(if ones % 2 == 0 { EVEN } else { ODD });
                r
            }
        };
        out.push(EOS);
        out
    }

    /// Ground-truth score in `[0, 1]`.
    pub fn oracle(&self, prompt: &[u32], response: &[u32]) -> f64 {
        match self {
            TaskSpec::Sortedness { .. } => sortedness_score(prompt, response),
            TaskSpec::Parity { .. } => parity_score(prompt, response),
        }
    }

    pub fn score(&self, trajectory: &Trajectory) -> f64 {
        self.oracle(&trajectory.prompt, &trajectory.response)
    }

    pub fn corpus(&self, count: usize, rng: &mut impl Rng) -> Vec<Trajectory> {
        (0..count)
            .map(|_| {
                let prompt = self.sample_prompt(rng);
                let response = self.reference_response(&prompt);
                let score = self.oracle(&prompt, &response);
                Trajectory {
                    prompt,
                    response,
                    oracle_reward: Some(score),
                }
            })
            .collect()
    }
}

/// Fraction of ordered adjacent pairs, or 0 unless the response is a
/// permutation of the prompt digits. A trailing end token is allowed.
fn sortedness_score(prompt: &[u32], response: &[u32]) -> f64 {
    let body = strip_eos(response);
    let Some(mut got) = body.iter().map(|&t| as_digit(t)).collect::<Option<Vec<u32>>>() else {
        return 0.0;
    };
    if got.is_empty() {
        return 0.0;
    }
    let mut want = prompt_digits(prompt);
    let ordered = got.windows(2).filter(|w| w[0] <= w[1]).count();
    let pairs = got.len() - 1;
    got.sort_unstable();
    want.sort_unstable();
    if got != want {
        return 0.0;
    }
    if pairs == 0 {
        1.0
    } else {
        ordered as f64 / pairs as f64
    }
}

fn parity_score(prompt: &[u32], response: &[u32]) -> f64 {
    let bits: Vec<u32> = prompt.iter().copied().filter(|&t| as_digit(t).is_some()).collect();
    let body = strip_eos(response);
    let Some((&answer, restated)) = body.split_last() else {
        return 0.0;
    };
    if restated != bits.as_slice() || !(answer == EVEN || answer == ODD) {
        return 0.0;
    }
    let ones = bits.iter().filter(|&&t| t == digit(1)).count();
    let correct = if ones % 2 == 0 { EVEN } else { ODD };
    if answer == correct {
        1.0
    } else {
        0.25
    }
}
