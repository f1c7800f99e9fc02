//! Model-predictive control by random shooting under LDM or density
//! constraints, with a greedy backup policy, a rollout harness and
//! threshold sweeps.

mod mpc;
mod rollout;
mod sweep;

pub use mpc::{mpc_step, ActionSet, MpcConfig, MpcDecision, Reward, DEFAULT_ENUMERATION_LIMIT};
pub use rollout::{rollout, FailureRule, Policy, RolloutRecord, Termination};
pub use sweep::{threshold_sweep, StartRule, SweepAggregate, SweepRow, SweepTable, SweepTask};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};
use crate::field::StateActionFunction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    /// `G(s, a) <= threshold` on an LDM.
    Ldm,
    /// `E(s, a) <= threshold` on the energy of the density.
    Density,
    None,
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintKind::Ldm => "ldm",
            ConstraintKind::Density => "density",
            ConstraintKind::None => "none",
        })
    }
}

/// A constraint `field(s, a) <= threshold` applied at every planned step.
#[derive(Clone)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    /// The LDM for `Ldm`, the energy for `Density`; ignored for `None`.
    pub field: Option<Arc<dyn StateActionFunction>>,
    /// `-log c`.
    pub threshold: f64,
    /// Percentile of dataset constraint values that produced `threshold`.
    pub percentile: Option<f64>,
}

impl fmt::Debug for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSpec")
            .field("kind", &self.kind)
            .field("threshold", &self.threshold)
            .field("percentile", &self.percentile)
            .finish_non_exhaustive()
    }
}

impl ConstraintSpec {
    pub fn new(kind: ConstraintKind, field: Option<Arc<dyn StateActionFunction>>, threshold: f64) -> Result<Self> {
        if kind != ConstraintKind::None && field.is_none() {
            return Err(LdmError::InvalidParameter(format!("{kind} constraint needs a field")));
        }
        if kind != ConstraintKind::None && threshold.is_nan() {
            return Err(LdmError::InvalidParameter("constraint threshold is NaN".into()));
        }
        Ok(Self { kind, field, threshold, percentile: None })
    }

    pub fn unconstrained() -> Self {
        Self { kind: ConstraintKind::None, field: None, threshold: f64::INFINITY, percentile: None }
    }

    /// Threshold set to the `pct` percentile of `values`.
    pub fn at_percentile(kind: ConstraintKind, field: Option<Arc<dyn StateActionFunction>>, values: &[f64], pct: f64) -> Result<Self> {
        let threshold = percentile_threshold(values, pct)?;
        let mut spec = Self::new(kind, field, threshold)?;
        spec.percentile = Some(pct);
        Ok(spec)
    }

    /// The constraint function's value, or NaN for `None`.
    pub fn value(&self, state: &[f64], action: &[f64]) -> f64 {
        match (&self.kind, &self.field) {
            (ConstraintKind::None, _) | (_, None) => f64::NAN,
            (_, Some(f)) => f.eval(state, action),
        }
    }

    pub fn admits(&self, state: &[f64], action: &[f64]) -> bool {
        match self.kind {
            ConstraintKind::None => true,
            _ => self.value(state, action) <= self.threshold,
        }
    }
}

/// Index of `argmin_a G(state, a)` over `actions`; ties go to the lowest index.
pub fn greedy_policy(g: &dyn StateActionFunction, state: &[f64], actions: &[Vec<f64>]) -> usize {
    g.min_over(state, actions).1
}

/// Linear-interpolation percentile: the value at rank `pct/100 * (n - 1)`
/// of the sorted values.
pub fn percentile_threshold(values: &[f64], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(LdmError::Empty("no constraint values for the percentile".into()));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(LdmError::InvalidParameter(format!("percentile must lie in [0, 100], got {pct}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(LdmError::InvalidParameter("constraint values contain NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(if lo == hi { sorted[lo] } else { sorted[lo] + frac * (sorted[hi] - sorted[lo]) })
}
