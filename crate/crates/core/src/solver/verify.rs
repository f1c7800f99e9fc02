//! Pointwise check of the two LDM conditions on a grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::continuation_min;
use crate::error::{LdmError, Result};
use crate::field::{FieldRole, ScalarField};
use crate::grid::{MAX_ACTION_DIMS, MAX_STATE_DIMS};
use crate::systems::Dynamics;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LdmConditionReport {
    pub slack: f64,
    /// Cells with `G(s, a) < min_a' G(f(s, a), a') - slack`.
    pub condition1_violations: Vec<usize>,
    /// Largest `min_a' G(f(s, a), a') - G(s, a)` over all cells.
    pub condition1_worst: f64,
    /// Cells with `G(s, a) < E(s, a) - slack`.
    pub condition2_violations: Vec<usize>,
    /// Largest `E(s, a) - G(s, a)` over all cells.
    pub condition2_worst: f64,
}

impl LdmConditionReport {
    pub fn passed(&self) -> bool {
        self.condition1_violations.is_empty() && self.condition2_violations.is_empty()
    }
}

pub fn verify_ldm_conditions(
    g: &ScalarField,
    e: &ScalarField,
    system: &dyn Dynamics,
    slack: f64,
) -> Result<LdmConditionReport> {
    e.require_role(&[FieldRole::Energy])?;
    g.check_same_grid(e)?;
    let grid = g.grid();
    if system.state_dim() != grid.state_dim() || system.action_dim() != grid.action_dim() {
        return Err(LdmError::DimensionMismatch {
            expected: grid.state_dim() + grid.action_dim(),
            got: system.state_dim() + system.action_dim(),
        });
    }
    let (ds, da, na) = (grid.state_dim(), grid.action_dim(), grid.n_actions());
    let interp = g.interpolation();
    let off = g.off_domain_value();
    let per_cell: Vec<(f64, f64)> = (0..grid.n_states())
        .into_par_iter()
        .with_min_len(64)
        .map_init(
            || vec![0.0; na],
            |scratch, si| {
                let mut s = [0.0; MAX_STATE_DIMS];
                let mut a = [0.0; MAX_ACTION_DIMS];
                let mut sp = [0.0; MAX_STATE_DIMS];
                grid.state_coords_into(si, &mut s[..ds]);
                (0..na)
                    .map(|ai| {
                        grid.action_coords_into(ai, &mut a[..da]);
                        system.step(&s[..ds], &a[..da], &mut sp[..ds]);
                        let cont = continuation_min(grid, g.values(), &sp[..ds], interp, scratch).map_or(off, |c| c.0);
                        let idx = si * na + ai;
                        (cont - g.get(idx), e.get(idx) - g.get(idx))
                    })
                    .collect::<Vec<_>>()
            },
        )
        .flatten()
        .collect();
    let mut report = LdmConditionReport {
        slack,
        condition1_worst: f64::NEG_INFINITY,
        condition2_worst: f64::NEG_INFINITY,
        ..Default::default()
    };
    for (i, (d1, d2)) in per_cell.into_iter().enumerate() {
        report.condition1_worst = report.condition1_worst.max(d1);
        report.condition2_worst = report.condition2_worst.max(d2);
        if d1 > slack {
            report.condition1_violations.push(i);
        }
        if d2 > slack {
            report.condition2_violations.push(i);
        }
    }
    Ok(report)
}
