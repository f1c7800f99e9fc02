//! Audits of the approximation guarantees for fitted LDMs: the iteration
//! error bound, the per-step density guarantee of a constrained rollout and
//! the planned-versus-realized reward bound.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::density::PreparedLaw;
use crate::error::{LdmError, Result};
use crate::field::{FieldRole, ScalarField, StateActionFunction};
use crate::grid::StateActionGrid;
use crate::systems::{Dynamics, FiniteSystem};

/// `satisfied` means `lhs <= rhs + AUDIT_SLACK`.
pub const AUDIT_SLACK: f64 = 1e-9;

/// Lower end of the range where `1/sqrt(x) <= 1 - log x` holds.
const SQRT_LOG_LOWER: f64 = 0.08104;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundAudit {
    pub name: String,
    pub applicable: bool,
    pub lhs: f64,
    /// NaN when the audit is not applicable.
    pub rhs: f64,
    pub margin: f64,
    pub satisfied: bool,
    pub inputs: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl BoundAudit {
    fn checked(name: &str, lhs: f64, rhs: f64, inputs: BTreeMap<String, f64>) -> Self {
        Self {
            name: name.into(),
            applicable: true,
            lhs,
            rhs,
            margin: rhs - lhs,
            satisfied: lhs <= rhs + AUDIT_SLACK,
            inputs,
            note: None,
        }
    }

    fn not_applicable(name: &str, lhs: f64, inputs: BTreeMap<String, f64>, note: String) -> Self {
        Self {
            name: name.into(),
            applicable: false,
            lhs,
            rhs: f64::NAN,
            margin: f64::NAN,
            satisfied: false,
            inputs,
            note: Some(note),
        }
    }
}

fn inputs(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// `E_P |g| = sum_i P_i |g_i| / sum_i P_i`.
pub fn p_norm(values: &[f64], mass: &[f64]) -> Result<f64> {
    if values.len() != mass.len() {
        return Err(LdmError::DimensionMismatch { expected: mass.len(), got: values.len() });
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(LdmError::Empty("P-norm weights have no mass".into()));
    }
    Ok(values.iter().zip(mass).map(|(g, p)| p * g.abs()).sum::<f64>() / total)
}

pub fn sup_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `||G_{t+1} - T G_t||_P` for consecutive iterates, where `T` is the exact
/// backup on the grid: `G_t` is read at the true successor of every node and
/// minimized over grid actions. `iterates[0]` is normally `E` itself.
pub fn fitted_residuals(
    iterates: &[&dyn StateActionFunction],
    energy: &ScalarField,
    density: &ScalarField,
    system: &dyn Dynamics,
    gamma: f64,
) -> Result<Vec<f64>> {
    energy.require_role(&[FieldRole::Energy])?;
    density.require_role(&[FieldRole::Density])?;
    energy.check_same_grid(density)?;
    let grid = energy.grid();
    let actions: Vec<Vec<f64>> = (0..grid.n_actions()).map(|a| grid.action_coords(a)).collect();
    let nodes: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..grid.len())
        .map(|cell| {
            let (s, a) = grid.cell_to_coords(cell).expect("cell in range");
            let next = system.next_state(&s, &a);
            (s, a, next)
        })
        .collect();
    iterates
        .windows(2)
        .map(|pair| {
            let (prev, next) = (pair[0], pair[1]);
            let diff: Vec<f64> = nodes
                .par_iter()
                .enumerate()
                .map(|(cell, (s, a, sp))| {
                    let backup = energy.get(cell).max(gamma * prev.min_over(sp, &actions).0);
                    next.eval(s, a) - backup
                })
                .collect();
            p_norm(&diff, density.values())
        })
        .collect()
}

/// `sup |log p(s, a) + E(s, a)|` over cell centers of the grid (the
/// midpoints between nodes on every axis), skipping points where the law's
/// density is below `floor`. At most about `max_points` centers are used,
/// thinned by a common stride per axis.
pub fn measure_eps_p(energy: &ScalarField, law: &PreparedLaw, floor: f64, max_points: usize) -> Result<f64> {
    energy.require_role(&[FieldRole::Energy])?;
    let grid = energy.grid();
    let axes: Vec<_> = grid.state_axes().iter().chain(grid.action_axes()).collect();
    if axes.iter().any(|ax| ax.count < 2) {
        return Err(LdmError::InvalidParameter("held-out lattice needs two nodes on every axis".into()));
    }
    let cells: f64 = axes.iter().map(|ax| (ax.count - 1) as f64).product();
    let stride = ((cells / max_points.max(1) as f64).powf(1.0 / axes.len() as f64).ceil() as usize).max(1);
    let per_axis: Vec<Vec<f64>> = axes
        .iter()
        .map(|ax| (0..ax.count - 1).step_by(stride).map(|i| ax.node(i) + 0.5 * ax.spacing()).collect())
        .collect();
    let total: usize = per_axis.iter().map(Vec::len).product();
    let ds = grid.state_dim();
    let worst = (0..total)
        .into_par_iter()
        .map(|mut flat| {
            let mut x = vec![0.0; per_axis.len()];
            for k in (0..per_axis.len()).rev() {
                x[k] = per_axis[k][flat % per_axis[k].len()];
                flat /= per_axis[k].len();
            }
            let p = law.pdf(&x[..ds], &x[ds..]);
            if p >= floor {
                (p.ln() + energy.lookup(&x[..ds], &x[ds..])).abs()
            } else {
                0.0
            }
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

/// `sup over cells with P > 0 of sqrt(P) * max_a' |r(f(s, a), a') - r(f_hat(s, a), a')|`.
pub fn measure_eps_r(
    density: &ScalarField,
    system: &dyn Dynamics,
    model: &dyn Dynamics,
    reward: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
) -> Result<f64> {
    density.require_role(&[FieldRole::Density])?;
    let grid = density.grid();
    let actions: Vec<Vec<f64>> = (0..grid.n_actions()).map(|a| grid.action_coords(a)).collect();
    let worst = (0..grid.len())
        .into_par_iter()
        .filter(|&cell| density.get(cell) > 0.0)
        .map(|cell| {
            let (s, a) = grid.cell_to_coords(cell).expect("cell in range");
            let truth = system.next_state(&s, &a);
            let predicted = model.next_state(&s, &a);
            let gap = actions
                .iter()
                .map(|ap| (reward(&truth, ap) - reward(&predicted, ap)).abs())
                .fold(0.0, f64::max);
            density.get(cell).sqrt() * gap
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FqiBoundForm {
    /// `R eps_ls / (1 - gamma) + gamma^K ||E - G*||_inf`, for `gamma < 1`.
    Discounted,
    /// `eps_ls / (1 - r gamma) + (r gamma)^K ||E - G*||_P`, for `gamma < 1/r`.
    OneStep,
    /// `R K_fin eps_ls + eps_fin`, for `gamma = 1`.
    Undiscounted { k_fin: f64, eps_fin: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct FqiBoundInput<'a> {
    /// `G_K` at every cell.
    pub fitted: &'a [f64],
    /// The exact LDM `G*` at every cell.
    pub optimal: &'a [f64],
    pub energy: &'a [f64],
    /// Density weights of the P-norm.
    pub density: &'a [f64],
    pub gamma: f64,
    pub iterations: usize,
    pub recoverability: f64,
    pub one_step_recoverability: f64,
    pub eps_ls: f64,
}

/// Checks `||G_K - G*||_P` against the chosen right-hand side. The
/// discounted form is an error at `gamma = 1`; the other forms are reported
/// as not applicable outside their preconditions.
pub fn audit_fqi_bound(input: &FqiBoundInput<'_>, form: FqiBoundForm) -> Result<BoundAudit> {
    let n = input.density.len();
    for len in [input.fitted.len(), input.optimal.len(), input.energy.len()] {
        if len != n {
            return Err(LdmError::DimensionMismatch { expected: n, got: len });
        }
    }
    let gap: Vec<f64> = input.fitted.iter().zip(input.optimal).map(|(a, b)| a - b).collect();
    let lhs = p_norm(&gap, input.density)?;
    let e_gap: Vec<f64> = input.energy.iter().zip(input.optimal).map(|(a, b)| a - b).collect();
    let (gamma, k) = (input.gamma, input.iterations as f64);
    let (big_r, small_r, eps) = (input.recoverability, input.one_step_recoverability, input.eps_ls);
    let mut vals = inputs(&[("gamma", gamma), ("K", k), ("R", big_r), ("r", small_r), ("eps_ls", eps)]);
    match form {
        FqiBoundForm::Discounted => {
            if gamma >= 1.0 {
                return Err(LdmError::BoundNotApplicable(
                    "the discounted form needs gamma < 1; use the undiscounted form with K_fin and eps_fin".into(),
                ));
            }
            let e_inf = sup_norm(&e_gap);
            vals.insert("E_minus_Gstar_sup".into(), e_inf);
            let rhs = big_r * eps / (1.0 - gamma) + gamma.powf(k) * e_inf;
            Ok(BoundAudit::checked("fqi_discounted", lhs, rhs, vals))
        }
        FqiBoundForm::OneStep => {
            let e_p = p_norm(&e_gap, input.density)?;
            vals.insert("E_minus_Gstar_P".into(), e_p);
            let rg = small_r * gamma;
            if rg >= 1.0 {
                return Ok(BoundAudit::not_applicable(
                    "fqi_one_step",
                    lhs,
                    vals,
                    format!("needs gamma < 1/r, but r * gamma = {rg}"),
                ));
            }
            let rhs = eps / (1.0 - rg) + rg.powf(k) * e_p;
            Ok(BoundAudit::checked("fqi_one_step", lhs, rhs, vals))
        }
        FqiBoundForm::Undiscounted { k_fin, eps_fin } => {
            vals.insert("K_fin".into(), k_fin);
            vals.insert("eps_fin".into(), eps_fin);
            if gamma != 1.0 {
                return Ok(BoundAudit::not_applicable(
                    "fqi_undiscounted",
                    lhs,
                    vals,
                    format!("needs gamma = 1, got {gamma}"),
                ));
            }
            let rhs = big_r * k_fin * eps + eps_fin;
            Ok(BoundAudit::checked("fqi_undiscounted", lhs, rhs, vals))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RolloutBoundInput {
    /// Density level of the constraint `G <= -log c`.
    pub c: f64,
    pub gamma: f64,
    pub recoverability: f64,
    pub eps_ls: f64,
    pub eps_p: f64,
    /// Used at `gamma = 1`; zero for an exact LDM.
    pub k_fin: f64,
    pub eps_fin: f64,
}

/// The guaranteed lower bound on `log P(s_t, a_t)` at step `t`.
pub fn rollout_lower_bound(input: &RolloutBoundInput, t: usize) -> f64 {
    let RolloutBoundInput { c, gamma, recoverability: r, eps_ls, eps_p, k_fin, eps_fin } = *input;
    if gamma >= 1.0 {
        c.ln() - (r * k_fin * eps_ls + eps_fin) * eps_p.exp() / c - eps_p
    } else {
        let g = gamma.powi(-(t as i32));
        let fitted = if eps_ls == 0.0 { 0.0 } else { g * r * eps_ls * eps_p.exp() / (c * (1.0 - gamma)) };
        g * c.ln() - fitted - eps_p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutAudit {
    pub constants: RolloutBoundInput,
    /// One audit per step: `lhs = -log best P`, `rhs = -bound`.
    pub steps: Vec<BoundAudit>,
    pub satisfied: bool,
    /// Step with the smallest margin.
    pub worst_step: usize,
}

/// Compares the best achievable density at each step (see
/// [`best_reachable_density`] and [`greedy_density_trace`]) with the
/// guaranteed lower bound.
pub fn audit_rollout_guarantee(best_density: &[f64], input: &RolloutBoundInput) -> Result<RolloutAudit> {
    if !(input.c > 0.0 && input.c.is_finite()) {
        return Err(LdmError::InvalidParameter(format!("c must be positive, got {}", input.c)));
    }
    let steps: Vec<BoundAudit> = best_density
        .iter()
        .enumerate()
        .map(|(t, &p)| {
            let bound = rollout_lower_bound(input, t);
            let vals = inputs(&[("t", t as f64), ("best_density", p), ("log_bound", bound)]);
            BoundAudit::checked("rollout_guarantee", -p.ln(), -bound, vals)
        })
        .collect();
    let worst_step = steps
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.margin.total_cmp(&b.1.margin))
        .map_or(0, |(t, _)| t);
    let satisfied = steps.iter().all(|s| s.satisfied);
    Ok(RolloutAudit { constants: *input, steps, satisfied, worst_step })
}

/// `max` of `P(s_t, a_t)` over all action sequences from `(state, action)`,
/// for `t = 0..=horizon`, by forward search over the reachable states.
/// Leaving the system ends a sequence.
pub fn best_reachable_density(
    system: &dyn FiniteSystem,
    density: &[f64],
    state: usize,
    action: usize,
    horizon: usize,
) -> Result<Vec<f64>> {
    let (ns, na) = (system.n_states(), system.n_actions());
    if density.len() != ns * na {
        return Err(LdmError::DimensionMismatch { expected: ns * na, got: density.len() });
    }
    if state >= ns || action >= na {
        return Err(LdmError::IndexOutOfRange { index: state * na + action, total: ns * na });
    }
    let row_max = |s: usize| density[s * na..(s + 1) * na].iter().copied().fold(0.0, f64::max);
    let mut out = vec![density[state * na + action]];
    let mut frontier = vec![false; ns];
    if let Some(next) = system.successor(state, action) {
        frontier[next] = true;
    }
    for _ in 0..horizon {
        out.push((0..ns).filter(|&s| frontier[s]).map(row_max).fold(0.0, f64::max));
        let mut next = vec![false; ns];
        for s in (0..ns).filter(|&s| frontier[s]) {
            for a in 0..na {
                if let Some(sp) = system.successor(s, a) {
                    next[sp] = true;
                }
            }
        }
        frontier = next;
    }
    Ok(out)
}

/// Density along the trajectory that picks `argmin_a' G(s', a')` at every
/// step from `(state, action)`, for `t = 0..=horizon`. Leaving the grid
/// gives density zero from then on.
pub fn greedy_density_trace(
    grid: &StateActionGrid,
    system: &dyn Dynamics,
    ldm: &dyn StateActionFunction,
    density: &dyn StateActionFunction,
    state: &[f64],
    action: &[f64],
    horizon: usize,
) -> Vec<f64> {
    let actions: Vec<Vec<f64>> = (0..grid.n_actions()).map(|a| grid.action_coords(a)).collect();
    let (mut s, mut a) = (state.to_vec(), action.to_vec());
    let mut out = vec![density.eval(&s, &a)];
    for _ in 0..horizon {
        s = system.next_state(&s, &a);
        if !grid.contains_state(&s) {
            out.resize(horizon + 1, 0.0);
            break;
        }
        a = actions[ldm.min_over(&s, &actions).1].clone();
        out.push(density.eval(&s, &a));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RewardBoundInput {
    pub c: f64,
    pub gamma: f64,
    pub recoverability: f64,
    pub eps_ls: f64,
    pub eps_p: f64,
    pub eps_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardAudit {
    pub audit: BoundAudit,
    /// Smallest `c` for which the bound is claimed.
    pub c_min: f64,
    /// Whether every step has `eps_r^-2 P(s_t, a_t)` inside the range where
    /// `1/sqrt(x) <= 1 - log x` holds, which the bound's derivation relies
    /// on. `None` when densities were not supplied.
    pub derivation_valid: Option<bool>,
}

/// Planned-versus-realized discounted reward. `planned[t]` and
/// `realized[t]` are the rewards at step `t`; `density[t]` is
/// `P(s_t, a_t)` when available.
pub fn audit_reward_bound(
    planned: &[f64],
    realized: &[f64],
    density: Option<&[f64]>,
    input: &RewardBoundInput,
) -> Result<RewardAudit> {
    if planned.len() != realized.len() {
        return Err(LdmError::DimensionMismatch { expected: planned.len(), got: realized.len() });
    }
    if let Some(d) = density {
        if d.len() != planned.len() {
            return Err(LdmError::DimensionMismatch { expected: planned.len(), got: d.len() });
        }
    }
    let RewardBoundInput { c, gamma, recoverability: r, eps_ls, eps_p, eps_r } = *input;
    let horizon = planned.len();
    let mut discount = 1.0;
    let mut sum = 0.0;
    for (p, q) in planned.iter().zip(realized) {
        sum += discount * (p - q);
        discount *= gamma;
    }
    let lhs = sum.abs();
    let derivation_valid =
        density.map(|d| d.iter().all(|p| (SQRT_LOG_LOWER..=1.0).contains(&(p / (eps_r * eps_r)))));
    let vals = inputs(&[
        ("c", c),
        ("gamma", gamma),
        ("T", horizon as f64),
        ("R", r),
        ("eps_ls", eps_ls),
        ("eps_p", eps_p),
        ("eps_r", eps_r),
    ]);
    if gamma >= 1.0 {
        let audit = BoundAudit::not_applicable("reward_bound", lhs, vals, "needs gamma < 1".into());
        return Ok(RewardAudit { audit, c_min: f64::NAN, derivation_valid });
    }
    let log_er = 2.0 * eps_r.ln();
    let fitted = r * eps_ls * eps_p.exp();
    let denom = (1.0 - gamma.powi(horizon as i32 - 1) * (eps_p + log_er)) * (1.0 - gamma);
    let c_min = ((1.0 - gamma) + fitted) / denom;
    if !(denom > 0.0) || c < c_min {
        let note = format!("precondition fails: c = {c} is below the required {c_min}");
        let audit = BoundAudit::not_applicable("reward_bound", lhs, vals, note);
        return Ok(RewardAudit { audit, c_min, derivation_valid });
    }
    let t = horizon as f64;
    let fitted_term = if fitted == 0.0 { 0.0 } else { fitted / (c * (1.0 - gamma)) };
    let rhs = (1.0 + eps_p + log_er) * (1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma) + t * ((1.0 / c).ln() + fitted_term);
    Ok(RewardAudit { audit: BoundAudit::checked("reward_bound", lhs, rhs, vals), c_min, derivation_valid })
}
