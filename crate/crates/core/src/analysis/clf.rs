//! Control Lyapunov functions read off a maximal LDM:
//! `W(s) = min_a G(s, a) - G(s_e, a_e)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};
use crate::field::{FieldRole, ScalarField};
use crate::grid::{Interpolation, StateActionGrid};
use crate::systems::Dynamics;

#[derive(Clone, Debug)]
pub struct ClfField {
    grid: Arc<StateActionGrid>,
    interpolation: Interpolation,
    /// `W` per grid state.
    values: Vec<f64>,
    equilibrium_state: usize,
    /// `W` outside the domain: the LDM sentinel minus `G(s_e, a_e)`.
    off_domain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClfReport {
    pub slack: f64,
    /// States where no grid action gives `W(f(s, a)) <= W(s) + slack`.
    pub decrease_violations: Vec<usize>,
    /// Largest `min_a W(f(s, a)) - W(s)` over states.
    pub decrease_worst: f64,
    /// States other than the equilibrium with `W(s) <= 0`.
    pub positivity_violations: Vec<usize>,
    pub value_at_equilibrium: f64,
}

impl ClfReport {
    pub fn passed(&self) -> bool {
        self.decrease_violations.is_empty() && self.positivity_violations.is_empty() && self.value_at_equilibrium == 0.0
    }
}

/// Fails with [`LdmError::NotMinimizer`] unless the equilibrium node
/// attains the minimum of `g`.
pub fn extract_clf(g: &ScalarField, equilibrium_state: &[f64], equilibrium_action: &[f64]) -> Result<ClfField> {
    g.require_role(&[FieldRole::Ldm])?;
    let grid = g.grid();
    let eq = grid.coords_to_cell(equilibrium_state, equilibrium_action)?;
    let g_eq = g.get(eq);
    let actual = g.argmin();
    if g.get(actual) < g_eq {
        return Err(LdmError::NotMinimizer { declared: eq, actual });
    }
    let na = grid.n_actions();
    let values = g
        .values()
        .chunks(na)
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min) - g_eq)
        .collect();
    Ok(ClfField {
        grid: g.grid_arc().clone(),
        interpolation: g.interpolation(),
        values,
        equilibrium_state: eq / na,
        off_domain: g.off_domain_value() - g_eq,
    })
}

impl ClfField {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn equilibrium_state(&self) -> usize {
        self.equilibrium_state
    }

    /// `W` at an arbitrary state, interpolated over states.
    pub fn lookup(&self, state: &[f64]) -> f64 {
        match self.grid.state_stencil(state, self.interpolation) {
            Some(st) => st.iter().map(|(s, w)| w * self.values[s]).sum(),
            None => self.off_domain,
        }
    }

    /// Checks the decrease condition at every grid state, positivity away
    /// from the equilibrium and `W(s_e) = 0`.
    pub fn check(&self, system: &dyn Dynamics, slack: f64) -> Result<ClfReport> {
        let grid = &self.grid;
        if system.state_dim() != grid.state_dim() || system.action_dim() != grid.action_dim() {
            return Err(LdmError::DimensionMismatch {
                expected: grid.state_dim() + grid.action_dim(),
                got: system.state_dim() + system.action_dim(),
            });
        }
        let mut report = ClfReport {
            slack,
            decrease_violations: Vec::new(),
            decrease_worst: f64::NEG_INFINITY,
            positivity_violations: Vec::new(),
            value_at_equilibrium: self.values[self.equilibrium_state],
        };
        let mut next = vec![0.0; grid.state_dim()];
        for si in 0..grid.n_states() {
            let s = grid.state_coords(si);
            let mut best = f64::INFINITY;
            for ai in 0..grid.n_actions() {
                system.step(&s, &grid.action_coords(ai), &mut next);
                best = best.min(self.lookup(&next));
            }
            let deficit = best - self.values[si];
            report.decrease_worst = report.decrease_worst.max(deficit);
            if deficit > slack {
                report.decrease_violations.push(si);
            }
            if si != self.equilibrium_state && self.values[si] <= 0.0 {
                report.positivity_violations.push(si);
            }
        }
        Ok(report)
    }

    /// One row per grid state: coordinates then `W`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (0..self.grid.state_dim()).map(|k| format!("s{k}")).chain(["w".into()]).collect();
        writeln!(out, "{}", header.join(","))?;
        for (si, w) in self.values.iter().enumerate() {
            let row: Vec<String> = self.grid.state_coords(si).iter().chain([w]).map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}
