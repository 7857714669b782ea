use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timing quintuple plus search sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub t_p: f64,
    pub t_d: f64,
    pub t_c: f64,
    pub t_r: f64,
    pub t_max: usize,
    /// Rollouts (MCTS) or leaves (SLA).
    pub n: usize,
    /// Action block size.
    pub step: usize,
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MctsCost {
    pub per_action: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlaCost {
    pub serial: f64,
    pub parallel: f64,
    pub slowdown_vs_greedy: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let times = [self.t_p, self.t_d, self.t_c, self.t_r];
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::parameter("time costs must be finite and nonnegative"));
        }
        if self.t_max == 0 || self.n == 0 || self.step == 0 || self.k == 0 {
            return Err(Error::parameter("t_max, n, step and k must be positive"));
        }
        if self.step > self.t_max {
            return Err(Error::parameter(format!("step {} exceeds t_max {}", self.step, self.t_max)));
        }
        Ok(())
    }
}

/// `log_k(n)`, exact when `n` is an integer power of `k`.
pub fn log_base(k: usize, n: usize) -> f64 {
    let mut p = 1usize;
    let mut e = 0u32;
    while p < n {
        match p.checked_mul(k) {
            Some(next) => p = next,
            None => break,
        }
        e += 1;
    }
    if p == n {
        e as f64
    } else {
        (n as f64).ln() / (k as f64).ln()
    }
}

pub fn cost_mcts(c: &CostParams) -> Result<MctsCost> {
    c.validate()?;
    let per_action = c.n as f64 * (c.step as f64 * c.t_d + 2.0 * c.t_c + c.t_r);
    let total = c.t_p + (c.t_max as f64 / c.step as f64) * per_action;
    Ok(MctsCost { per_action, total })
}

pub fn cost_sla(c: &CostParams) -> Result<SlaCost> {
    c.validate()?;
    if c.k < 2 || c.n < c.k {
        return Err(Error::parameter(format!("need k >= 2 and n >= k, got k={} n={}", c.k, c.n)));
    }
    let depth = log_base(c.k, c.n);
    let leaves = if depth.fract() == 0.0 { c.n as f64 } else { (c.k as f64).powf(depth) };
    let serial = c.t_p + (c.t_max as f64 / c.step as f64) * leaves * c.step as f64 * c.t_d;
    let parallel = c.t_p + c.t_max as f64 * depth * c.t_d;
    Ok(SlaCost {
        serial,
        parallel,
        slowdown_vs_greedy: depth,
    })
}
