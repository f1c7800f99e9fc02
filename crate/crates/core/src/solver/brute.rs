//! Finite-horizon LDM by exhaustive search over action sequences.

use std::collections::HashMap;

use crate::error::{LdmError, Result};
use crate::systems::FiniteSystem;

/// Largest `states * actions * (horizon + 1)` accepted by default.
pub const DEFAULT_BRUTE_CAP: usize = 50_000_000;

/// `G'_T(s, a) = min over a_1..a_T of max_t gamma^t E(s_t, a_t)` with
/// `(s_0, a_0) = (s, a)`. Leaving the system is absorbing at energy
/// `sentinel`. Sub-results are memoized on `(state, remaining depth)`.
pub fn brute_force_ldm(
    system: &dyn FiniteSystem,
    energy: &[f64],
    sentinel: f64,
    horizon: usize,
    gamma: f64,
    cap: usize,
) -> Result<Vec<f64>> {
    let (ns, na) = (system.n_states(), system.n_actions());
    if energy.len() != ns * na {
        return Err(LdmError::DimensionMismatch { expected: ns * na, got: energy.len() });
    }
    super::validate_gamma(gamma)?;
    let work = (ns * na).saturating_mul(horizon.saturating_add(1));
    if work > cap {
        return Err(LdmError::TooLarge(format!(
            "{ns} states x {na} actions x horizon {horizon} exceeds the cap {cap}"
        )));
    }
    let mut search = Search { system, energy, sentinel, gamma, na, memo: HashMap::new() };
    Ok((0..ns * na)
        .map(|cell| search.value(cell / na, cell % na, horizon))
        .collect())
}

struct Search<'a> {
    system: &'a dyn FiniteSystem,
    energy: &'a [f64],
    sentinel: f64,
    gamma: f64,
    na: usize,
    /// `min_a' G'_depth(s, a')` keyed by `(s, depth)`.
    memo: HashMap<(usize, usize), f64>,
}

impl Search<'_> {
    fn value(&mut self, s: usize, a: usize, depth: usize) -> f64 {
        let e = self.energy[s * self.na + a];
        if depth == 0 {
            return e;
        }
        let tail = match self.system.successor(s, a) {
            Some(next) => self.best(next, depth - 1),
            None => self.sentinel,
        };
        e.max(self.gamma * tail)
    }

    fn best(&mut self, s: usize, depth: usize) -> f64 {
        if let Some(&v) = self.memo.get(&(s, depth)) {
            return v;
        }
        let v = (0..self.na).map(|a| self.value(s, a, depth)).fold(f64::INFINITY, f64::min);
        self.memo.insert((s, depth), v);
        v
    }
}
