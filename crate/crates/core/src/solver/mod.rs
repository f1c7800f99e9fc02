//! Maximal LDMs by value iteration with the backup
//! `T G(s, a) = max{ E(s, a), gamma * min_a' G(f(s, a), a') }`.

mod brute;
mod fitted;
mod verify;

pub use brute::{brute_force_ldm, DEFAULT_BRUTE_CAP};
pub use fitted::{
    fitted_ldm_iteration, sampled_expected_backup, FeatureBasis, FittedConfig, FittedLdm, LinearModel,
};
pub use verify::{verify_ldm_conditions, LdmConditionReport};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};
use crate::field::{FieldRole, ScalarField};
use crate::grid::{Interpolation, StateActionGrid, StateLocation, Stencil, MAX_ACTION_DIMS, MAX_STATE_DIMS};
use crate::systems::Dynamics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
    /// Keep every iterate in the report (memory heavy on large grids).
    #[serde(default)]
    pub record_history: bool,
}

fn default_gamma() -> f64 {
    1.0
}
fn default_tolerance() -> f64 {
    1e-9
}
fn default_max_sweeps() -> usize {
    500
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            tolerance: default_tolerance(),
            max_sweeps: default_max_sweeps(),
            interpolation: Interpolation::default(),
            record_history: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        validate_gamma(self.gamma)?;
        if !(self.tolerance > 0.0) {
            return Err(LdmError::InvalidParameter(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_sweeps == 0 {
            return Err(LdmError::InvalidParameter("max_sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn validate_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(LdmError::InvalidParameter(format!("gamma must lie in (0, 1], got {gamma}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub sweeps: usize,
    pub final_residual: f64,
    pub residuals: Vec<f64>,
    /// Every sweep was pointwise at least the previous iterate.
    pub monotone: bool,
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<Vec<f64>>,
}

/// Successor-stencil evaluation of `min_a' G(s', a')` into `scratch`.
/// Returns the minimum and its lowest action index, or `None` off-domain.
#[inline]
pub(crate) fn continuation_min(
    grid: &StateActionGrid,
    g: &[f64],
    next_state: &[f64],
    interp: Interpolation,
    scratch: &mut [f64],
) -> Option<(f64, usize)> {
    grid.state_stencil(next_state, interp).map(|st| stencil_min(&st, g, scratch))
}

#[inline]
fn stencil_min(st: &Stencil, g: &[f64], scratch: &mut [f64]) -> (f64, usize) {
    let na = scratch.len();
    let mut corners = st.iter();
    let (s0, w0) = corners.next().expect("stencil has at least one corner");
    let row = &g[s0 * na..(s0 + 1) * na];
    if w0 == 1.0 && st.len() == 1 {
        scratch.copy_from_slice(row);
    } else {
        for (o, v) in scratch.iter_mut().zip(row) {
            *o = w0 * v;
        }
        for (s, w) in corners {
            let row = &g[s * na..(s + 1) * na];
            for (o, v) in scratch.iter_mut().zip(row) {
                *o += w * v;
            }
        }
    }
    let mut best = (scratch[0], 0);
    for (i, &v) in scratch.iter().enumerate().skip(1) {
        if v < best.0 {
            best = (v, i);
        }
    }
    best
}

/// Value of `min_a' sum_k w_k G(s_k, a')` without materialising the sum.
/// Adds the corners in stencil order, so it agrees bitwise with
/// [`continuation_min`].
#[inline]
fn stencil_min_value(st: &Stencil, g: &[f64], na: usize) -> f64 {
    let mut rows = [&g[..0]; 16];
    let mut w = [0.0; 16];
    for (k, (s, wk)) in st.iter().enumerate() {
        rows[k] = &g[s * na..(s + 1) * na];
        w[k] = wk;
    }
    match st.len() {
        1 => rows[0].iter().copied().fold(f64::INFINITY, |m, v| if v < m { v } else { m }),
        2 => fused_min([rows[0], rows[1]], [w[0], w[1]]),
        4 => fused_min([rows[0], rows[1], rows[2], rows[3]], [w[0], w[1], w[2], w[3]]),
        8 => fused_min(
            [rows[0], rows[1], rows[2], rows[3], rows[4], rows[5], rows[6], rows[7]],
            [w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7]],
        ),
        _ => stencil_min(st, g, &mut vec![0.0; na]).0,
    }
}

#[inline]
#[allow(clippy::needless_range_loop)] // lane-indexed on purpose, so it vectorizes
fn fused_min<const K: usize>(rows: [&[f64]; K], w: [f64; K]) -> f64 {
    const LANES: usize = 8;
    let na = rows[0].len();
    let body = na - na % LANES;
    let mut m = [f64::INFINITY; LANES];
    for i in (0..body).step_by(LANES) {
        let first: &[f64; LANES] = rows[0][i..i + LANES].try_into().expect("chunk");
        let mut v = [0.0; LANES];
        for l in 0..LANES {
            v[l] = w[0] * first[l];
        }
        for k in 1..K {
            let r: &[f64; LANES] = rows[k][i..i + LANES].try_into().expect("chunk");
            for l in 0..LANES {
                v[l] += w[k] * r[l];
            }
        }
        for l in 0..LANES {
            m[l] = if v[l] < m[l] { v[l] } else { m[l] };
        }
    }
    let mut best = m.into_iter().fold(f64::INFINITY, |a, b| if b < a { b } else { a });
    for i in body..na {
        let mut v = w[0] * rows[0][i];
        for k in 1..K {
            v += w[k] * rows[k][i];
        }
        best = if v < best { v } else { best };
    }
    best
}

struct SweepStats {
    residual: f64,
    monotone: bool,
}

/// Successor locations of every cell, fixed for a whole solve, plus for each
/// state row the sorted rows its successors read.
struct Successors {
    ds: usize,
    /// Lower stencil corner per cell, `OFF_DOMAIN` when the successor leaves.
    base: Vec<u32>,
    frac: Vec<f64>,
    dep_start: Vec<usize>,
    deps: Vec<u32>,
}

const OFF_DOMAIN: u32 = u32::MAX;

impl Successors {
    fn build(grid: &StateActionGrid, system: &dyn Dynamics, interp: Interpolation) -> Result<Self> {
        if grid.n_states() >= OFF_DOMAIN as usize {
            return Err(LdmError::TooLarge(format!("{} states exceed the solver's index range", grid.n_states())));
        }
        let (ds, da, na) = (grid.state_dim(), grid.action_dim(), grid.n_actions());
        let rows: Vec<(Vec<u32>, Vec<f64>, Vec<u32>)> = (0..grid.n_states())
            .into_par_iter()
            .with_min_len(64)
            .map(|si| {
                let mut s = [0.0; MAX_STATE_DIMS];
                let mut a = [0.0; MAX_ACTION_DIMS];
                let mut sp = [0.0; MAX_STATE_DIMS];
                grid.state_coords_into(si, &mut s[..ds]);
                let mut base = Vec::with_capacity(na);
                let mut frac = Vec::with_capacity(na * ds);
                let mut deps = Vec::new();
                for ai in 0..na {
                    grid.action_coords_into(ai, &mut a[..da]);
                    system.step(&s[..ds], &a[..da], &mut sp[..ds]);
                    match grid.locate_state(&sp[..ds], interp) {
                        Some(loc) => {
                            base.push(loc.base as u32);
                            frac.extend_from_slice(&loc.frac[..ds]);
                            deps.extend(grid.stencil_at(&loc).iter().map(|(c, _)| c as u32));
                        }
                        None => {
                            base.push(OFF_DOMAIN);
                            frac.extend(std::iter::repeat_n(0.0, ds));
                        }
                    }
                }
                deps.sort_unstable();
                deps.dedup();
                (base, frac, deps)
            })
            .collect();
        let mut out = Successors {
            ds,
            base: Vec::with_capacity(grid.len()),
            frac: Vec::with_capacity(grid.len() * ds),
            dep_start: Vec::with_capacity(grid.n_states() + 1),
            deps: Vec::new(),
        };
        out.dep_start.push(0);
        for (base, frac, deps) in rows {
            out.base.extend(base);
            out.frac.extend(frac);
            out.deps.extend(deps);
            out.dep_start.push(out.deps.len());
        }
        Ok(out)
    }

    #[inline]
    fn location(&self, cell: usize) -> Option<StateLocation> {
        let base = self.base[cell];
        (base != OFF_DOMAIN).then(|| {
            let mut loc = StateLocation { base: base as usize, frac: [0.0; MAX_STATE_DIMS] };
            loc.frac[..self.ds].copy_from_slice(&self.frac[cell * self.ds..(cell + 1) * self.ds]);
            loc
        })
    }

    fn deps(&self, row: usize) -> &[u32] {
        &self.deps[self.dep_start[row]..self.dep_start[row + 1]]
    }
}

/// One Jacobi sweep `out = T g`. Every cell reads only `g`, so the result is
/// independent of how rows are split across threads.
///
/// With `dirty`, `g` must itself be `T prev` and `dirty[s]` must flag the
/// state rows where `g` differs from `prev`. A cell whose successor stencil
/// touches no dirty row then has `(T g)(c) = (T prev)(c) = g(c)` and is
/// copied instead of recomputed. `changed` receives the rows of `out` that
/// differ from `g`.
#[allow(clippy::too_many_arguments)]
fn sweep(
    grid: &StateActionGrid,
    succ: &Successors,
    g: &[f64],
    e: &[f64],
    sentinel: f64,
    gamma: f64,
    dirty: Option<&[bool]>,
    out: &mut [f64],
    changed: &mut [bool],
) -> SweepStats {
    let na = grid.n_actions();
    out.par_chunks_mut(na)
        .zip(changed.par_iter_mut())
        .enumerate()
        .with_min_len(64)
        .map(|(si, (row, row_changed))| {
            let base = si * na;
            let mut stats = SweepStats { residual: 0.0, monotone: true };
            *row_changed = false;
            if let Some(dirty) = dirty {
                if succ.deps(si).iter().all(|&r| !dirty[r as usize]) {
                    row.copy_from_slice(&g[base..base + na]);
                    return stats;
                }
            }
            for (ai, o) in row.iter_mut().enumerate() {
                let prev = g[base + ai];
                let cont = match succ.location(base + ai) {
                    Some(loc) => {
                        let st = grid.stencil_at(&loc);
                        if let Some(dirty) = dirty {
                            if st.iter().all(|(c, _)| !dirty[c]) {
                                *o = prev;
                                continue;
                            }
                        }
                        stencil_min_value(&st, g, na)
                    }
                    None => sentinel,
                };
                let v = e[base + ai].max(gamma * cont).min(sentinel);
                stats.residual = stats.residual.max((v - prev).abs());
                stats.monotone &= v >= prev;
                *row_changed |= v != prev;
                *o = v;
            }
            stats
        })
        .reduce(
            || SweepStats { residual: 0.0, monotone: true },
            |x, y| SweepStats { residual: x.residual.max(y.residual), monotone: x.monotone && y.monotone },
        )
}

fn check_inputs(g: &ScalarField, e: &ScalarField, system: &dyn Dynamics) -> Result<()> {
    e.require_role(&[FieldRole::Energy])?;
    g.check_same_grid(e)?;
    let grid = e.grid();
    if system.state_dim() != grid.state_dim() {
        return Err(LdmError::DimensionMismatch { expected: grid.state_dim(), got: system.state_dim() });
    }
    if system.action_dim() != grid.action_dim() {
        return Err(LdmError::DimensionMismatch { expected: grid.action_dim(), got: system.action_dim() });
    }
    Ok(())
}

/// A single application of the backup operator.
pub fn ldm_backup(
    g: &ScalarField,
    e: &ScalarField,
    system: &dyn Dynamics,
    gamma: f64,
    interp: Interpolation,
) -> Result<ScalarField> {
    check_inputs(g, e, system)?;
    validate_gamma(gamma)?;
    let mut out = vec![0.0; e.len()];
    let mut changed = vec![false; e.grid().n_states()];
    let sentinel = e.sentinel().max(g.sentinel());
    let succ = Successors::build(e.grid(), system, interp)?;
    sweep(e.grid(), &succ, g.values(), e.values(), sentinel, gamma, None, &mut out, &mut changed);
    Ok(ScalarField::new(e.grid_arc().clone(), out, FieldRole::Ldm, sentinel)?
        .with_interpolation(interp))
}

/// Value iteration from `G_0 = E` until the sup-norm change falls below the
/// tolerance.
pub fn solve_maximal_ldm(
    e: &ScalarField,
    system: &dyn Dynamics,
    config: &SolverConfig,
) -> Result<(ScalarField, SolveReport)> {
    config.validate()?;
    check_inputs(e, e, system)?;
    let start = Instant::now();
    let mut g = e.values().to_vec();
    let mut next = vec![0.0; g.len()];
    let succ = Successors::build(e.grid(), system, config.interpolation)?;
    let mut dirty = vec![false; e.grid().n_states()];
    let mut changed = dirty.clone();
    let mut report = SolveReport { monotone: true, ..Default::default() };
    if config.record_history {
        report.history.push(g.clone());
    }
    loop {
        // The first sweep has no predecessor to compare against.
        let known = (report.sweeps > 0).then_some(dirty.as_slice());
        let stats = sweep(e.grid(), &succ, &g, e.values(), e.sentinel(), config.gamma, known, &mut next, &mut changed);
        std::mem::swap(&mut g, &mut next);
        std::mem::swap(&mut dirty, &mut changed);
        report.sweeps += 1;
        report.residuals.push(stats.residual);
        report.final_residual = stats.residual;
        report.monotone &= stats.monotone;
        if config.record_history {
            report.history.push(g.clone());
        }
        if stats.residual < config.tolerance {
            break;
        }
        if report.sweeps >= config.max_sweeps {
            return Err(LdmError::NotConverged {
                sweeps: report.sweeps,
                final_residual: stats.residual,
                residuals: report.residuals,
            });
        }
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    let field = ScalarField::new(e.grid_arc().clone(), g, FieldRole::Ldm, e.sentinel())?
        .with_interpolation(config.interpolation);
    Ok((field, report))
}

/// The first `k` iterates `G_1..G_k` of value iteration from `G_0 = E`,
/// without a convergence test.
pub fn value_iterates(
    e: &ScalarField,
    system: &dyn Dynamics,
    gamma: f64,
    interp: Interpolation,
    k: usize,
) -> Result<Vec<ScalarField>> {
    check_inputs(e, e, system)?;
    validate_gamma(gamma)?;
    let mut out = Vec::with_capacity(k);
    let mut g = e.values().to_vec();
    let succ = Successors::build(e.grid(), system, interp)?;
    for _ in 0..k {
        let mut next = vec![0.0; g.len()];
        let mut changed = vec![false; e.grid().n_states()];
        sweep(e.grid(), &succ, &g, e.values(), e.sentinel(), gamma, None, &mut next, &mut changed);
        out.push(
            ScalarField::new(e.grid_arc().clone(), next.clone(), FieldRole::Ldm, e.sentinel())?.with_interpolation(interp),
        );
        g = next;
    }
    Ok(out)
}

/// Sup-norm distance between `T G` and `G`.
pub fn fixed_point_residual(g: &ScalarField, e: &ScalarField, system: &dyn Dynamics, gamma: f64) -> Result<f64> {
    let tg = ldm_backup(g, e, system, gamma, g.interpolation())?;
    Ok(tg.values().iter().zip(g.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::StaticSystem;
    use std::sync::Arc;

    fn line_grid() -> Arc<StateActionGrid> {
        Arc::new(StateActionGrid::new(&[0.0], &[2.0], &[3], &[0.0], &[1.0], &[2]).unwrap())
    }

    /// `s' = s + a` on the integer line, leaving the grid from the top.
    struct Shift;
    impl Dynamics for Shift {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn step(&self, s: &[f64], a: &[f64], n: &mut [f64]) {
            n[0] = s[0] + a[0];
        }
    }

    fn energy(values: Vec<f64>) -> ScalarField {
        ScalarField::new(line_grid(), values, FieldRole::Energy, 50.0).unwrap()
    }

    #[test]
    fn backup_arithmetic() {
        // Cell (s=0, a=1) moves to s=1, whose best continuation is 3.
        let e = energy(vec![0.0, 5.0, 9.0, 9.0, 9.0, 9.0]);
        let g = ScalarField::new(line_grid(), vec![0.0, 0.0, 3.0, 4.0, 0.0, 0.0], FieldRole::Ldm, 50.0).unwrap();
        let out = ldm_backup(&g, &e, &Shift, 1.0, Interpolation::Multilinear).unwrap();
        assert_eq!(out.get(1), 5.0);
        let e2 = energy(vec![0.0, 2.0, 9.0, 9.0, 9.0, 9.0]);
        let g2 = ScalarField::new(line_grid(), vec![0.0, 0.0, 10.0, 11.0, 0.0, 0.0], FieldRole::Ldm, 50.0).unwrap();
        let out = ldm_backup(&g2, &e2, &Shift, 0.9, Interpolation::Multilinear).unwrap();
        assert_eq!(out.get(1), 9.0);
        // Leaving the grid costs the sentinel.
        assert_eq!(out.get(5), 0.9 * 50.0);
    }

    #[test]
    fn static_system_keeps_energy() {
        let e = energy(vec![1.0, 4.0, 2.0, 0.5, 7.0, 3.0]);
        let sys = StaticSystem { state_dim: 1, action_dim: 1 };
        let out = ldm_backup(&e, &e, &sys, 1.0, Interpolation::Multilinear).unwrap();
        assert_eq!(out.values(), e.values());
    }

    #[test]
    fn constant_energy_converges_in_one_sweep() {
        let e = energy(vec![2.0; 6]);
        let sys = StaticSystem { state_dim: 1, action_dim: 1 };
        let (g, rep) = solve_maximal_ldm(&e, &sys, &SolverConfig::default()).unwrap();
        assert_eq!(rep.sweeps, 1);
        assert_eq!(g.values(), e.values());
        assert!(rep.monotone);
    }

    #[test]
    fn grid_mismatch_and_role() {
        let e = energy(vec![0.0; 6]);
        let other = Arc::new(StateActionGrid::new(&[0.0], &[3.0], &[4], &[0.0], &[1.0], &[2]).unwrap());
        let g = ScalarField::constant(other, 0.0, FieldRole::Ldm, 50.0).unwrap();
        assert!(matches!(ldm_backup(&g, &e, &Shift, 1.0, Interpolation::Multilinear), Err(LdmError::GridMismatch)));
        let p = ScalarField::constant(line_grid(), 0.1, FieldRole::Density, 50.0).unwrap();
        assert!(matches!(ldm_backup(&e, &p, &Shift, 1.0, Interpolation::Multilinear), Err(LdmError::WrongRole { .. })));
    }

    #[test]
    fn non_convergence_carries_history() {
        let e = energy(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let cfg = SolverConfig { max_sweeps: 1, ..Default::default() };
        match solve_maximal_ldm(&e, &Shift, &cfg) {
            Err(LdmError::NotConverged { sweeps, residuals, .. }) => {
                assert_eq!(sweeps, 1);
                assert_eq!(residuals.len(), 1);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn skipped_rows_match_full_sweeps() {
        // Energies in a band around s = 0 on a drifting 2-D system, so that
        // parts of the grid settle while others keep changing.
        struct Rotate;
        impl Dynamics for Rotate {
            fn state_dim(&self) -> usize {
                2
            }
            fn action_dim(&self) -> usize {
                1
            }
            fn step(&self, s: &[f64], a: &[f64], n: &mut [f64]) {
                n[0] = 1.02 * (0.95 * s[0] + 0.3 * s[1]);
                n[1] = 1.02 * (-0.3 * s[0] + 0.95 * s[1]) + 0.2 * a[0];
            }
        }
        let grid = Arc::new(StateActionGrid::new(&[-2.0, -2.0], &[2.0, 2.0], &[17, 17], &[-1.0], &[1.0], &[5]).unwrap());
        let e = ScalarField::from_fn(grid, FieldRole::Energy, 60.0, |s, a| s[0].abs() * 3.0 + a[0] * a[0]).unwrap();
        let cfg = SolverConfig { max_sweeps: 5000, record_history: true, ..Default::default() };
        let (g, rep) = solve_maximal_ldm(&e, &Rotate, &cfg).unwrap();
        let plain = value_iterates(&e, &Rotate, 1.0, Interpolation::Multilinear, rep.sweeps).unwrap();
        for (k, it) in plain.iter().enumerate() {
            assert_eq!(it.values(), rep.history[k + 1].as_slice(), "sweep {}", k + 1);
        }
        assert_eq!(plain.last().unwrap().values(), g.values());
    }

    #[test]
    fn rejects_bad_gamma() {
        let cfg = SolverConfig { gamma: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(SolverConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
    }
}
