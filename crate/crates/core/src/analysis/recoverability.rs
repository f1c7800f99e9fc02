//! Recoverability ratios of a density under the dynamics.
//!
//! `M(s, a)` is the largest density reachable from `(s, a)`:
//! `M(s, a) = max{ P(s, a), max_a' M(f(s, a), a') }`. For successors that
//! fall between nodes the inner maximum runs over every positive-weight
//! corner of the successor's stencil, which over-approximates reachability
//! and is exact when successors land on nodes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};
use crate::field::{FieldRole, ScalarField};
use crate::grid::{Stencil, MAX_ACTION_DIMS, MAX_STATE_DIMS};
use crate::systems::Dynamics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoverabilityReport {
    /// `R = max over P > 0 of M(s, a) / P(s, a)`.
    pub ratio: f64,
    /// `r`, the same ratio over one step.
    pub one_step_ratio: f64,
    /// Cell attaining `R`.
    pub witness_start: usize,
    /// Cells from `witness_start` to a cell whose density equals `M` there.
    pub witness_path: Vec<usize>,
    pub iterations: usize,
    /// `M` per cell.
    #[serde(skip)]
    pub reachable_max: Vec<f64>,
}

pub fn compute_recoverability(density: &ScalarField, system: &dyn Dynamics) -> Result<RecoverabilityReport> {
    density.require_role(&[FieldRole::Density])?;
    let grid = density.grid();
    if system.state_dim() != grid.state_dim() || system.action_dim() != grid.action_dim() {
        return Err(LdmError::DimensionMismatch {
            expected: grid.state_dim() + grid.action_dim(),
            got: system.state_dim() + system.action_dim(),
        });
    }
    let p = density.values();
    if !p.iter().any(|v| *v > 0.0) {
        return Err(LdmError::Empty("density has no positive cell".into()));
    }
    let (ds, da, na) = (grid.state_dim(), grid.action_dim(), grid.n_actions());
    let interp = density.interpolation();
    let stencils: Vec<Option<Stencil>> = (0..grid.len())
        .into_par_iter()
        .with_min_len(256)
        .map(|cell| {
            let (si, ai) = grid.split_index(cell);
            let mut s = [0.0; MAX_STATE_DIMS];
            let mut a = [0.0; MAX_ACTION_DIMS];
            let mut sp = [0.0; MAX_STATE_DIMS];
            grid.state_coords_into(si, &mut s[..ds]);
            grid.action_coords_into(ai, &mut a[..da]);
            system.step(&s[..ds], &a[..da], &mut sp[..ds]);
            grid.state_stencil(&sp[..ds], interp)
        })
        .collect();
    let corners = |cell: usize| -> Vec<usize> {
        stencils[cell]
            .as_ref()
            .map(|st| st.iter().filter(|(_, w)| *w > 0.0).map(|(s, _)| s).collect())
            .unwrap_or_default()
    };
    let row_max = |m: &[f64]| -> Vec<f64> {
        m.par_chunks(na).map(|row| row.iter().copied().fold(0.0, f64::max)).collect()
    };

    // Values only move between existing densities, so the iteration stops
    // after at most one pass per distinct value.
    let mut m = p.to_vec();
    let mut iterations = 0;
    loop {
        let rows = row_max(&m);
        let next: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .with_min_len(256)
            .map(|cell| corners(cell).into_iter().map(|s| rows[s]).fold(m[cell], f64::max))
            .collect();
        iterations += 1;
        let changed = next != m;
        m = next;
        if !changed {
            break;
        }
    }

    let p_rows = row_max(p);
    let mut ratio = 0.0;
    let mut one_step_ratio = 0.0;
    let mut witness_start = 0;
    for cell in 0..grid.len() {
        if p[cell] > 0.0 {
            let q = m[cell] / p[cell];
            if q > ratio {
                ratio = q;
                witness_start = cell;
            }
            let step = corners(cell).into_iter().map(|s| p_rows[s]).fold(p[cell], f64::max);
            one_step_ratio = f64::max(one_step_ratio, step / p[cell]);
        }
    }

    // Shortest corner path from the witness to a cell whose density is M.
    let target = m[witness_start];
    let mut parent = vec![usize::MAX; grid.len()];
    parent[witness_start] = witness_start;
    let mut queue = std::collections::VecDeque::from([witness_start]);
    let mut end = witness_start;
    while let Some(cell) = queue.pop_front() {
        if p[cell] == target {
            end = cell;
            break;
        }
        for s in corners(cell) {
            for c in s * na..(s + 1) * na {
                if parent[c] == usize::MAX && m[c] == target {
                    parent[c] = cell;
                    queue.push_back(c);
                }
            }
        }
    }
    let mut witness_path = vec![end];
    while *witness_path.last().unwrap() != witness_start {
        witness_path.push(parent[*witness_path.last().unwrap()]);
    }
    witness_path.reverse();

    Ok(RecoverabilityReport { ratio, one_step_ratio, witness_start, witness_path, iterations, reachable_max: m })
}
