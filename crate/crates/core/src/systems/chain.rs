//! Integer chain `s' = s + a` with a density that rewards greedy planners
//! for walking off a cliff.
//!
//! Data covers two arms of length `H` from the origin. Walking right reaches
//! `s = H`, where the actions `0..K` are spread so thinly that every one of
//! them has density below `epsilon`. Walking left reaches `s = -H`, where the
//! action `0` keeps the agent in data forever.

use serde::{Deserialize, Serialize};

use super::Dynamics;
use crate::error::{LdmError, Result};
use crate::grid::{Axis, StateActionGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSystem {
    pub h: i64,
    pub k: i64,
    pub epsilon: f64,
}

impl ChainSystem {
    pub fn new(h: i64, k: i64, epsilon: f64) -> Result<Self> {
        if h < 1 {
            return Err(LdmError::InvalidParameter(format!("H must be at least 1, got {h}")));
        }
        if k < 1 {
            return Err(LdmError::InvalidParameter(format!("K must be at least 1, got {k}")));
        }
        if !(epsilon > 0.0) {
            return Err(LdmError::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        // 1/K <= 2(H+1) eps, with a relative slack for exactly representable ties.
        if (k as f64) * 2.0 * (h + 1) as f64 * epsilon < 1.0 - 1e-12 {
            return Err(LdmError::InvalidParameter(format!(
                "K = {k} is too small: need 1/K <= 2(H+1)*epsilon = {}",
                2.0 * (h + 1) as f64 * epsilon
            )));
        }
        Ok(Self { h, k, epsilon })
    }

    /// Density of every on-arm pair, `1 / (2(H+1))`.
    pub fn p_star(&self) -> f64 {
        1.0 / (2.0 * (self.h + 1) as f64)
    }

    pub fn density(&self, s: i64, a: i64) -> f64 {
        let (h, k) = (self.h, self.k);
        let arm = (a == -1 && (-(h - 1)..=0).contains(&s))
            || (a == 1 && (0..h).contains(&s))
            || (a == 0 && s == -h);
        if arm {
            self.p_star()
        } else if s == h && (0..k).contains(&a) {
            self.p_star() / k as f64
        } else {
            0.0
        }
    }

    pub fn state_range(&self) -> (i64, i64) {
        (-self.h, self.h + self.k - 1)
    }

    pub fn action_range(&self) -> (i64, i64) {
        (-1, (self.k - 1).max(1))
    }

    /// Unit-spaced grid over every reachable state and every action.
    pub fn grid(&self) -> StateActionGrid {
        let (s0, s1) = self.state_range();
        let (a0, a1) = self.action_range();
        StateActionGrid::from_axes(
            vec![Axis::new(s0 as f64, s1 as f64, (s1 - s0 + 1) as usize)],
            vec![Axis::new(a0 as f64, a1 as f64, (a1 - a0 + 1) as usize)],
            false,
        )
        .expect("chain grid is well formed")
    }

    /// All `(s, a, P)` with positive density.
    pub fn support(&self) -> Vec<(i64, i64, f64)> {
        let (s0, s1) = self.state_range();
        let (a0, a1) = self.action_range();
        let mut out = Vec::new();
        for s in s0..=s1 {
            for a in a0..=a1 {
                let p = self.density(s, a);
                if p > 0.0 {
                    out.push((s, a, p));
                }
            }
        }
        out
    }

    pub fn reward(&self, _state: &[f64], action: &[f64]) -> f64 {
        action[0]
    }
}

impl Dynamics for ChainSystem {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn step(&self, state: &[f64], action: &[f64], next: &mut [f64]) {
        next[0] = state[0] + action[0];
    }
}
