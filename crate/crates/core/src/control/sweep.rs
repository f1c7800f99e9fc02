//! Reward and failure rate of constrained MPC across constraint thresholds.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mpc::{ActionSet, MpcConfig};
use super::rollout::{rollout, FailureRule, Policy};
use super::{percentile_threshold, ConstraintKind, ConstraintSpec};
use crate::dataset::Bounds;
use crate::error::{LdmError, Result};
use crate::field::StateActionFunction;
use crate::rng::substream;
use crate::systems::Dynamics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StartRule {
    Fixed { state: Vec<f64> },
    /// Uniform in a box, drawn from the `"sweep"` substream of each seed.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl StartRule {
    fn draw(&self, seed: u64) -> Vec<f64> {
        match self {
            StartRule::Fixed { state } => state.clone(),
            StartRule::UniformBox { lo, hi } => {
                let mut rng = substream(seed, "sweep");
                lo.iter().zip(hi).map(|(l, h)| if l == h { *l } else { rng.random_range(*l..=*h) }).collect()
            }
        }
    }
}

pub struct SweepTask<'a> {
    pub system: &'a dyn Dynamics,
    /// Dynamics used for planning; the true system or a fitted model.
    pub model: &'a dyn Dynamics,
    /// Reference density recorded along rollouts.
    pub density: &'a dyn StateActionFunction,
    pub ldm: Arc<dyn StateActionFunction>,
    pub energy: Arc<dyn StateActionFunction>,
    /// Constraint values of the dataset under the LDM and the energy.
    pub ldm_values: &'a [f64],
    pub energy_values: &'a [f64],
    pub actions: &'a ActionSet,
    pub mpc: &'a MpcConfig,
    pub domain: &'a Bounds,
    pub failure: &'a FailureRule,
    pub start: &'a StartRule,
    pub n_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: ConstraintKind,
    pub percentile: f64,
    pub threshold: f64,
    pub seed: u64,
    /// Realized reward per executed step.
    pub mean_reward: f64,
    pub failed: bool,
    pub steps: usize,
    pub fallback_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub kind: ConstraintKind,
    pub percentile: f64,
    pub threshold: f64,
    pub seeds: usize,
    pub reward_median: f64,
    pub reward_q25: f64,
    pub reward_q75: f64,
    pub failure_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAggregate>,
}

impl SweepTable {
    pub fn write_rows_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }

    pub fn write_aggregates_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.aggregates)
    }
}

fn write_csv<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LdmError::Parse(e.to_string()))?;
    for item in items {
        w.serialize(item).map_err(|e| LdmError::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// One rollout per kind, percentile and seed. Rows are ordered by kind,
/// then percentile, then seed, whatever the thread count. For `None` the
/// threshold is ignored, so its rows repeat across percentiles.
pub fn threshold_sweep(task: &SweepTask<'_>, kinds: &[ConstraintKind], percentiles: &[f64], seeds: &[u64]) -> Result<SweepTable> {
    if seeds.is_empty() {
        return Err(LdmError::Empty("sweep needs at least one seed".into()));
    }
    let mut jobs = Vec::new();
    for &kind in kinds {
        for &pct in percentiles {
            let spec = match kind {
                ConstraintKind::Ldm => ConstraintSpec::at_percentile(kind, Some(task.ldm.clone()), task.ldm_values, pct)?,
                ConstraintKind::Density => {
                    ConstraintSpec::at_percentile(kind, Some(task.energy.clone()), task.energy_values, pct)?
                }
                ConstraintKind::None => {
                    if !(0.0..=100.0).contains(&pct) {
                        return Err(LdmError::InvalidParameter(format!("percentile must lie in [0, 100], got {pct}")));
                    }
                    ConstraintSpec { percentile: Some(pct), ..ConstraintSpec::unconstrained() }
                }
            };
            for &seed in seeds {
                jobs.push((spec.clone(), seed));
            }
        }
    }
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|(spec, seed)| {
            let policy = Policy::Mpc { constraint: spec, config: task.mpc, actions: task.actions, model: task.model, seed: *seed };
            let start = task.start.draw(*seed);
            let rec = rollout(task.system, &policy, &start, task.n_steps, task.density, task.domain, task.failure, &task.mpc.reward)?;
            Ok(SweepRow {
                kind: spec.kind,
                percentile: spec.percentile.unwrap_or(f64::NAN),
                threshold: spec.threshold,
                seed: *seed,
                mean_reward: if rec.is_empty() { 0.0 } else { rec.total_reward() / rec.len() as f64 },
                failed: rec.termination.failed(),
                steps: rec.len(),
                fallback_steps: rec.fallback.iter().filter(|f| **f).count(),
            })
        })
        .collect::<Result<_>>()?;
    let aggregates = rows
        .chunks(seeds.len())
        .map(|group| {
            let rewards: Vec<f64> = group.iter().map(|r| r.mean_reward).collect();
            Ok(SweepAggregate {
                kind: group[0].kind,
                percentile: group[0].percentile,
                threshold: group[0].threshold,
                seeds: group.len(),
                reward_median: percentile_threshold(&rewards, 50.0)?,
                reward_q25: percentile_threshold(&rewards, 25.0)?,
                reward_q75: percentile_threshold(&rewards, 75.0)?,
                failure_rate: group.iter().filter(|r| r.failed).count() as f64 / group.len() as f64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable { rows, aggregates })
}
