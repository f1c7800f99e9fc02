//! One receding-horizon planning step by random shooting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{greedy_policy, ConstraintKind, ConstraintSpec};
use crate::error::{LdmError, Result};
use crate::grid::StateActionGrid;
use crate::systems::Dynamics;

/// Largest `|A|^H` for which a discrete action set is enumerated exactly.
pub const DEFAULT_ENUMERATION_LIMIT: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Reward {
    /// `-|s' - goal|` at the state `s'` each action leads to.
    GoalDistance { goal: Vec<f64> },
    /// Sum of the action's components.
    Action,
}

impl Reward {
    pub fn eval(&self, _state: &[f64], action: &[f64], next: &[f64]) -> f64 {
        match self {
            Reward::GoalDistance { goal } => {
                -next.iter().zip(goal).map(|(x, g)| (x - g).powi(2)).sum::<f64>().sqrt()
            }
            Reward::Action => action.iter().sum(),
        }
    }

    fn validate(&self, state_dim: usize) -> Result<()> {
        match self {
            Reward::GoalDistance { goal } if goal.len() != state_dim => {
                Err(LdmError::DimensionMismatch { expected: state_dim, got: goal.len() })
            }
            _ => Ok(()),
        }
    }
}

/// Actions available to the planner. Candidates are drawn uniformly from
/// `nodes` when `discrete`, otherwise uniformly from the box `[lo, hi]`.
/// The backup policy always minimizes over `nodes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<Vec<f64>>,
    pub discrete: bool,
}

impl ActionSet {
    pub fn from_grid(grid: &StateActionGrid, discrete: bool) -> Self {
        Self {
            lo: grid.action_axes().iter().map(|a| a.lo).collect(),
            hi: grid.action_axes().iter().map(|a| a.hi).collect(),
            nodes: (0..grid.n_actions()).map(|a| grid.action_coords(a)).collect(),
            discrete,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(LdmError::Empty("action set has no nodes".into()));
        }
        let d = self.dim();
        if self.hi.len() != d || self.nodes.iter().any(|n| n.len() != d) {
            return Err(LdmError::DimensionMismatch { expected: d, got: self.hi.len() });
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l <= h)) {
            return Err(LdmError::InvalidParameter("action bounds need lo <= hi".into()));
        }
        Ok(())
    }

    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        if self.discrete {
            out.extend_from_slice(&self.nodes[rng.random_range(0..self.nodes.len())]);
        } else {
            for (l, h) in self.lo.iter().zip(&self.hi) {
                out.push(if l == h { *l } else { rng.random_range(*l..=*h) });
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
    pub reward: Reward,
    #[serde(default = "default_enumeration_limit")]
    pub enumeration_limit: usize,
}

fn default_horizon() -> usize {
    1
}
fn default_candidates() -> usize {
    1024
}
fn default_enumeration_limit() -> usize {
    DEFAULT_ENUMERATION_LIMIT
}

impl MpcConfig {
    pub fn new(horizon: usize, n_candidates: usize, reward: Reward) -> Self {
        Self { horizon, n_candidates, reward, enumeration_limit: DEFAULT_ENUMERATION_LIMIT }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(LdmError::InvalidParameter("MPC horizon must be at least 1".into()));
        }
        if self.n_candidates == 0 {
            return Err(LdmError::InvalidParameter("MPC needs at least one candidate".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcDecision {
    pub action: Vec<f64>,
    /// No candidate satisfied the constraint; `action` is the backup policy's.
    pub fallback: bool,
    pub candidates: usize,
    pub feasible: usize,
    /// Every action sequence was evaluated instead of a random batch.
    pub enumerated: bool,
    /// Planned return of the chosen sequence; `None` on fallback.
    pub planned_return: Option<f64>,
}

/// Plans from `state` with `model` and returns the first action of the
/// feasible candidate with the largest planned return (ties: lowest
/// candidate index). The constraint is checked at every planned step,
/// starting with the current state and the first action. Without a
/// feasible candidate the backup is the greedy action on the constraint's
/// own field. Random draws come from `rng` in a fixed order, so the result
/// does not depend on the thread count.
pub fn mpc_step(
    state: &[f64],
    constraint: &ConstraintSpec,
    config: &MpcConfig,
    actions: &ActionSet,
    model: &dyn Dynamics,
    rng: &mut ChaCha8Rng,
) -> Result<MpcDecision> {
    config.validate()?;
    actions.validate()?;
    config.reward.validate(model.state_dim())?;
    if state.len() != model.state_dim() || actions.dim() != model.action_dim() {
        return Err(LdmError::DimensionMismatch {
            expected: model.state_dim() + model.action_dim(),
            got: state.len() + actions.dim(),
        });
    }
    let (h, da) = (config.horizon, actions.dim());
    let n_nodes = actions.nodes.len();
    let enumerated = actions.discrete
        && u32::try_from(h)
            .ok()
            .and_then(|e| n_nodes.checked_pow(e))
            .is_some_and(|total| total <= config.enumeration_limit);
    let (n, batch) = if enumerated {
        let total = n_nodes.pow(h as u32);
        let mut batch = Vec::with_capacity(total * h * da);
        for code in 0..total {
            // First action is the most significant digit, so index order is
            // lexicographic in (a_1, ..., a_H).
            let mut digits = vec![0; h];
            let mut c = code;
            for d in digits.iter_mut().rev() {
                *d = c % n_nodes;
                c /= n_nodes;
            }
            for d in digits {
                batch.extend_from_slice(&actions.nodes[d]);
            }
        }
        (total, batch)
    } else {
        let mut batch = Vec::with_capacity(config.n_candidates * h * da);
        for _ in 0..config.n_candidates * h {
            actions.sample_into(rng, &mut batch);
        }
        (config.n_candidates, batch)
    };

    let returns: Vec<Option<f64>> = batch
        .par_chunks(h * da)
        .with_min_len(64)
        .map(|seq| {
            let mut s = state.to_vec();
            let mut next = vec![0.0; s.len()];
            let mut total = 0.0;
            for a in seq.chunks(da) {
                if !constraint.admits(&s, a) {
                    return None;
                }
                model.step(&s, a, &mut next);
                total += config.reward.eval(&s, a, &next);
                std::mem::swap(&mut s, &mut next);
            }
            Some(total)
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    let mut feasible = 0;
    for (i, r) in returns.iter().enumerate() {
        if let Some(r) = *r {
            feasible += 1;
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((i, r));
            }
        }
    }
    Ok(match best {
        Some((i, r)) => MpcDecision {
            action: batch[i * h * da..i * h * da + da].to_vec(),
            fallback: false,
            candidates: n,
            feasible,
            enumerated,
            planned_return: Some(r),
        },
        None => {
            let action = match (&constraint.kind, &constraint.field) {
                (ConstraintKind::None, _) | (_, None) => actions.nodes[0].clone(),
                (_, Some(f)) => actions.nodes[greedy_policy(f.as_ref(), state, &actions.nodes)].clone(),
            };
            MpcDecision { action, fallback: true, candidates: n, feasible, enumerated, planned_return: None }
        }
    })
}
