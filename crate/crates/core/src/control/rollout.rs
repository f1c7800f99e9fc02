//! Closed-loop simulation on the true system.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mpc::{mpc_step, ActionSet, MpcConfig, Reward};
use super::{greedy_policy, ConstraintSpec};
use crate::dataset::Bounds;
use crate::error::{LdmError, Result};
use crate::field::StateActionFunction;
use crate::rng::substream;
use crate::systems::Dynamics;

pub enum Policy<'a> {
    /// Replans every step with `model`; draws come from the `"mpc"`
    /// substream of `seed`.
    Mpc {
        constraint: &'a ConstraintSpec,
        config: &'a MpcConfig,
        actions: &'a ActionSet,
        model: &'a dyn Dynamics,
        seed: u64,
    },
    /// `argmin_a field(s, a)` over `actions`.
    Greedy {
        field: &'a dyn StateActionFunction,
        actions: &'a [Vec<f64>],
    },
}

/// When a rollout counts as failed, besides leaving the domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FailureRule {
    Never,
    /// Reaching a state where every one of `actions` has density zero.
    ZeroDensity { actions: Vec<Vec<f64>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    MaxSteps,
    Failure,
    DomainExit,
}

impl Termination {
    pub fn failed(self) -> bool {
        self != Termination::MaxSteps
    }
}

/// One entry per executed step `t`: the state `s_t`, the action `a_t`, the
/// realized reward `r(s_t, a_t, s_{t+1})`, `P(s_t, a_t)` under the reference
/// density, the constraint value and whether the backup policy acted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Reward of the same step at the planning model's predicted next state.
    pub predicted_rewards: Vec<f64>,
    pub densities: Vec<f64>,
    /// NaN for unconstrained and greedy steps.
    pub constraint_values: Vec<f64>,
    pub fallback: Vec<bool>,
    /// Feasible candidates in each step's batch (0 for greedy steps).
    pub feasible: Vec<usize>,
    pub final_state: Vec<f64>,
    pub termination: Termination,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn min_density(&self) -> f64 {
        self.densities.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `step, s0.., a0.., reward, density, constraint, fallback`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        let ds = self.final_state.len();
        let da = self.actions.first().map_or(0, Vec::len);
        let mut header = vec!["step".to_string()];
        header.extend((0..ds).map(|k| format!("s{k}")));
        header.extend((0..da).map(|k| format!("a{k}")));
        header.extend(["reward", "density", "constraint", "fallback"].map(String::from));
        w.write_record(&header).map_err(csv_error)?;
        for t in 0..self.len() {
            let mut row = vec![t.to_string()];
            row.extend(self.states[t].iter().chain(&self.actions[t]).map(|v| v.to_string()));
            row.push(self.rewards[t].to_string());
            row.push(self.densities[t].to_string());
            row.push(self.constraint_values[t].to_string());
            row.push(self.fallback[t].to_string());
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> LdmError {
    LdmError::Parse(e.to_string())
}

/// Runs `policy` on the true `system` from `start` for up to `n_steps`
/// steps. A step that leaves the state box of `domain` ends the rollout
/// with `DomainExit`; a step into a state matched by `failure` ends it with
/// `Failure`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    system: &dyn Dynamics,
    policy: &Policy<'_>,
    start: &[f64],
    n_steps: usize,
    density: &dyn StateActionFunction,
    domain: &Bounds,
    failure: &FailureRule,
    reward: &Reward,
) -> Result<RolloutRecord> {
    if start.len() != system.state_dim() {
        return Err(LdmError::DimensionMismatch { expected: system.state_dim(), got: start.len() });
    }
    let mut rng = match policy {
        Policy::Mpc { seed, .. } => Some(substream(*seed, "mpc")),
        Policy::Greedy { .. } => None,
    };
    let mut rec = RolloutRecord {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        predicted_rewards: Vec::new(),
        densities: Vec::new(),
        constraint_values: Vec::new(),
        fallback: Vec::new(),
        feasible: Vec::new(),
        final_state: start.to_vec(),
        termination: Termination::MaxSteps,
    };
    let in_domain = |s: &[f64]| s.iter().zip(domain.state_lo.iter().zip(&domain.state_hi)).all(|(x, (l, h))| l <= x && x <= h);
    let mut s = start.to_vec();
    for _ in 0..n_steps {
        let (a, constraint_value, fallback, feasible, predicted) = match policy {
            Policy::Mpc { constraint, config, actions, model, .. } => {
                let rng = rng.as_mut().expect("MPC rollouts own a stream");
                let d = mpc_step(&s, constraint, config, actions, *model, rng)?;
                let cv = constraint.value(&s, &d.action);
                let predicted = model.next_state(&s, &d.action);
                (d.action, cv, d.fallback, d.feasible, Some(predicted))
            }
            Policy::Greedy { field, actions } => {
                let a = actions[greedy_policy(*field, &s, actions)].clone();
                (a, f64::NAN, false, 0, None)
            }
        };
        let next = system.next_state(&s, &a);
        let r = reward.eval(&s, &a, &next);
        rec.predicted_rewards.push(predicted.map_or(r, |p| reward.eval(&s, &a, &p)));
        rec.densities.push(density.eval(&s, &a));
        rec.rewards.push(r);
        rec.constraint_values.push(constraint_value);
        rec.fallback.push(fallback);
        rec.feasible.push(feasible);
        rec.states.push(std::mem::replace(&mut s, next));
        rec.actions.push(a);
        rec.final_state = s.clone();
        if !in_domain(&s) {
            rec.termination = Termination::DomainExit;
            break;
        }
        if let FailureRule::ZeroDensity { actions } = failure {
            if actions.iter().all(|a| density.eval(&s, a) <= 0.0) {
                rec.termination = Termination::Failure;
                break;
            }
        }
    }
    Ok(rec)
}
