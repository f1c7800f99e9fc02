//! Forward invariance of LDM sublevel sets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};
use crate::field::SublevelSet;
use crate::grid::{MAX_ACTION_DIMS, MAX_STATE_DIMS};
use crate::solver::continuation_min;
use crate::systems::Dynamics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub threshold: f64,
    pub slack: f64,
    pub members: usize,
    /// Member cells from which no grid action keeps the successor in the set.
    pub violations: Vec<usize>,
    /// Largest `min_a' G(f(s, a), a') - threshold` over members; `None` for
    /// an empty set.
    pub worst_deficit: Option<f64>,
}

impl InvarianceReport {
    pub fn invariant(&self) -> bool {
        self.violations.is_empty()
    }
}

/// For each member `(s, a)` of the set, checks that some grid action `a'`
/// has the successor `(f(s, a), a')` in the set, reading the field at the
/// off-grid successor by its interpolation rule. Leaving the domain counts
/// as a violation. A member is a violation when its deficit exceeds `slack`.
pub fn verify_invariance(set: &SublevelSet<'_>, system: &dyn Dynamics, slack: f64) -> Result<InvarianceReport> {
    if !(slack >= 0.0) {
        return Err(LdmError::InvalidParameter(format!("slack must be nonnegative, got {slack}")));
    }
    let field = set.field();
    let grid = field.grid();
    if system.state_dim() != grid.state_dim() || system.action_dim() != grid.action_dim() {
        return Err(LdmError::DimensionMismatch {
            expected: grid.state_dim() + grid.action_dim(),
            got: system.state_dim() + system.action_dim(),
        });
    }
    let (ds, da, na) = (grid.state_dim(), grid.action_dim(), grid.n_actions());
    let threshold = set.threshold();
    let deficits: Vec<f64> = set
        .members()
        .par_iter()
        .with_min_len(256)
        .map_init(
            || vec![0.0; na],
            |scratch, &cell| {
                let (si, ai) = grid.split_index(cell);
                let mut s = [0.0; MAX_STATE_DIMS];
                let mut a = [0.0; MAX_ACTION_DIMS];
                let mut sp = [0.0; MAX_STATE_DIMS];
                grid.state_coords_into(si, &mut s[..ds]);
                grid.action_coords_into(ai, &mut a[..da]);
                system.step(&s[..ds], &a[..da], &mut sp[..ds]);
                match continuation_min(grid, field.values(), &sp[..ds], field.interpolation(), scratch) {
                    Some((best, _)) => best - threshold,
                    None => f64::INFINITY,
                }
            },
        )
        .collect();
    let violations = set
        .members()
        .iter()
        .zip(&deficits)
        .filter(|(_, d)| **d > slack)
        .map(|(c, _)| *c)
        .collect();
    let worst_deficit = deficits.iter().copied().reduce(f64::max);
    Ok(InvarianceReport { threshold, slack, members: set.len(), violations, worst_deficit })
}
