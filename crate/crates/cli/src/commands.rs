//! The subcommands. Each writes `config.resolved.json` before doing any
//! work, so a failed run can be reproduced from its echo.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use ldm_core::analysis::{
    audit_fqi_bound, compute_recoverability, extract_clf, fitted_residuals, verify_invariance, BoundAudit,
    FqiBoundForm, FqiBoundInput, InvarianceReport,
};
use ldm_core::control::{
    rollout, threshold_sweep, ActionSet, ConstraintKind, ConstraintSpec, Policy, StartRule, SweepTask,
};
use ldm_core::field::StateActionFunction;
use ldm_core::solver::{fitted_ldm_iteration, verify_ldm_conditions, FeatureBasis, FittedConfig, LdmConditionReport};
use ldm_core::{LdmError, ScalarField, TransitionDataset};
use serde::Serialize;
use serde_json::json;

use crate::config::{
    resolve_control, BasisSpec, ConfigError, ControlSpec, RunConfig, SystemSpec, ThresholdSpec,
};
use crate::pipeline::{read_field, Pipeline, System};

/// A verification or audit that did not pass under `--strict`. Exits with code 4.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

pub struct Run {
    pub out: std::path::PathBuf,
    pub strict: bool,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn echo(run: &Run, config: &RunConfig) -> anyhow::Result<()> {
    write_json(&run.out.join("config.resolved.json"), config)
}

fn check(run: &Run, passed: bool, what: &str) -> anyhow::Result<()> {
    if run.strict && !passed {
        Err(VerificationFailed(format!("{what} failed; see {}", run.out.display())).into())
    } else {
        Ok(())
    }
}

/// Values below the sentinel, with a margin: interpolation between
/// sentinel cells can land an ulp below it.
fn finite_values(field: &ScalarField) -> impl Iterator<Item = f64> + '_ {
    let cut = field.sentinel() - 1e-6;
    field.values().iter().copied().filter(move |v| *v < cut)
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    converged: bool,
    sweeps: usize,
    final_residual: f64,
    /// `null` when the solve did not converge.
    monotone: Option<bool>,
    residuals: &'a [f64],
    cells: usize,
    ldm_min: Option<f64>,
    finite_cells: Option<usize>,
}

pub fn solve(run: &Run, config: RunConfig) -> anyhow::Result<()> {
    let mut config = config;
    config.artifacts = None;
    echo(run, &config)?;
    let p = Pipeline::build(config)?;
    p.write_field(&run.out, "density.csv", &p.density)?;
    p.write_field(&run.out, "energy.csv", &p.energy)?;
    if let Some(d) = &p.dataset {
        d.write_csv(&run.out.join("dataset.csv"))?;
    }
    match p.solve_with(&p.config.solver) {
        Ok((g, report)) => {
            p.write_field(&run.out, "ldm.csv", &g)?;
            let summary = SolveSummary {
                converged: true,
                sweeps: report.sweeps,
                final_residual: report.final_residual,
                monotone: Some(report.monotone),
                residuals: &report.residuals,
                cells: g.len(),
                ldm_min: Some(g.min()),
                finite_cells: Some(finite_values(&g).count()),
            };
            write_json(&run.out.join("solve_report.json"), &summary)?;
            write_json(&run.out.join("timing.json"), &json!({ "solve_wall_time_secs": report.wall_time_secs }))?;
            println!(
                "solved {} cells in {} sweeps (residual {:.3e}, monotone {})",
                g.len(),
                report.sweeps,
                report.final_residual,
                report.monotone
            );
            check(run, report.monotone, "monotonicity check")
        }
        Err(LdmError::NotConverged { sweeps, final_residual, residuals }) => {
            let summary = SolveSummary {
                converged: false,
                sweeps,
                final_residual,
                monotone: None,
                residuals: &residuals,
                cells: p.grid.len(),
                ldm_min: None,
                finite_cells: None,
            };
            write_json(&run.out.join("solve_report.json"), &summary)?;
            Err(LdmError::NotConverged { sweeps, final_residual, residuals }.into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct VerifyReport {
    passed: bool,
    slack: f64,
    conditions: LdmConditionReport,
    invariance: Vec<InvarianceReport>,
}

pub fn verify(run: &Run, config: RunConfig) -> anyhow::Result<()> {
    let mut config = config;
    let spec = config.verify.get_or_insert_with(Default::default).clone();
    if !(spec.slack >= 0.0) {
        return Err(ConfigError(format!("verify.slack must be nonnegative, got {}", spec.slack)).into());
    }
    echo(run, &config)?;
    let p = Pipeline::build(config)?;
    let energy = match &spec.energy {
        Some(path) => read_field(path)?,
        None => p.energy.clone(),
    };
    let ldm = match &spec.ldm {
        Some(path) => read_field(path)?,
        None => p.ldm()?,
    };
    let conditions = verify_ldm_conditions(&ldm, &energy, p.dynamics(), spec.slack)?;
    let invariance = spec
        .thresholds
        .iter()
        .map(|&t| verify_invariance(&ldm.sublevel_set(t)?, p.dynamics(), spec.slack))
        .collect::<ldm_core::Result<Vec<_>>>()?;
    let passed = conditions.passed() && invariance.iter().all(InvarianceReport::invariant);
    println!(
        "conditions: {} + {} violations; {} of {} sublevel sets invariant",
        conditions.condition1_violations.len(),
        conditions.condition2_violations.len(),
        invariance.iter().filter(|r| r.invariant()).count(),
        invariance.len()
    );
    write_json(&run.out.join("verify.json"), &VerifyReport { passed, slack: spec.slack, conditions, invariance })?;
    check(run, passed, "verification")
}

/// Everything `mpc` and `sweep` share.
struct Control {
    spec: ControlSpec,
    model: System,
    actions: ActionSet,
}

fn control(config: &mut RunConfig, p_grid: &ldm_core::StateActionGrid) -> anyhow::Result<Control> {
    let nodes: Vec<Vec<f64>> = (0..p_grid.n_actions()).map(|a| p_grid.action_coords(a)).collect();
    let spec = config.control.get_or_insert_with(Default::default);
    resolve_control(spec, &config.system, p_grid.state_dim(), &nodes)?;
    let spec = spec.clone();
    let model = System::build(spec.model.as_ref().expect("resolved"))?;
    if model.dynamics().state_dim() != p_grid.state_dim() || model.dynamics().action_dim() != p_grid.action_dim() {
        return Err(ConfigError("control.model has different dimensions from the system".into()).into());
    }
    let actions = ActionSet::from_grid(p_grid, spec.discrete_actions.expect("resolved"));
    Ok(Control { spec, model, actions })
}

/// Grid of the configured system without building any field.
fn config_grid(config: &RunConfig) -> anyhow::Result<ldm_core::StateActionGrid> {
    System::build(&config.system)?.grid(config.grid.as_ref())
}

fn constraint_values(field: &dyn StateActionFunction, data: &TransitionDataset) -> Vec<f64> {
    data.iter().map(|(s, a, _)| field.eval(s, a)).collect()
}

#[derive(Serialize)]
struct RolloutSummary {
    file: String,
    kind: ConstraintKind,
    threshold: f64,
    percentile: Option<f64>,
    seed: u64,
    steps: usize,
    termination: ldm_core::control::Termination,
    total_reward: f64,
    min_density: f64,
    fallback_steps: usize,
    final_state: Vec<f64>,
}

pub fn mpc(run: &Run, config: RunConfig) -> anyhow::Result<()> {
    let mut config = config;
    let grid = config_grid(&config)?;
    let ctl = control(&mut config, &grid)?;
    let seed = config.seed;
    let spec = config.mpc.get_or_insert_with(Default::default);
    if spec.constraints.is_empty() {
        return Err(ConfigError("mpc.constraints is empty".into()).into());
    }
    for entry in spec.constraints.iter_mut() {
        entry.threshold = match entry.kind {
            ConstraintKind::None => None,
            _ => Some(entry.threshold.unwrap_or(ThresholdSpec::Percentile(50.0))),
        };
    }
    spec.start.get_or_insert_with(|| vec![0.0; grid.state_dim()]);
    spec.seeds.get_or_insert_with(|| vec![seed]);
    let spec = spec.clone();
    echo(run, &config)?;

    let p = Pipeline::build(config)?;
    let ldm: Arc<dyn StateActionFunction> = Arc::new(p.ldm()?);
    let energy: Arc<dyn StateActionFunction> = Arc::new(p.energy.clone());
    let needs_data = spec.constraints.iter().any(|c| matches!(c.threshold, Some(ThresholdSpec::Percentile(_))));
    let data = if needs_data { Some(p.reference_dataset(ctl.spec.threshold_samples)?) } else { None };
    let planner = ctl.spec.planner.as_ref().expect("resolved");
    let failure = ctl.spec.failure.as_ref().expect("resolved");
    let start = spec.start.as_ref().expect("resolved");
    let domain = p.bounds();
    let mut summaries = Vec::new();
    for (i, entry) in spec.constraints.iter().enumerate() {
        let field = match entry.kind {
            ConstraintKind::Ldm => Some(ldm.clone()),
            ConstraintKind::Density => Some(energy.clone()),
            ConstraintKind::None => None,
        };
        let constraint = match (entry.threshold, &field) {
            (None, _) | (_, None) => ConstraintSpec::unconstrained(),
            (Some(ThresholdSpec::Value(t)), Some(f)) => ConstraintSpec::new(entry.kind, Some(f.clone()), t)?,
            (Some(ThresholdSpec::Percentile(pct)), Some(f)) => {
                let values = constraint_values(&**f, data.as_ref().expect("sampled above"));
                ConstraintSpec::at_percentile(entry.kind, Some(f.clone()), &values, pct)
                    .map_err(|e| ConfigError(format!("mpc.constraints[{i}]: {e}")))?
            }
        };
        for &s in spec.seeds.as_ref().expect("resolved") {
            let policy = Policy::Mpc {
                constraint: &constraint,
                config: planner,
                actions: &ctl.actions,
                model: ctl.model.dynamics(),
                seed: s,
            };
            let rec =
                rollout(p.dynamics(), &policy, start, ctl.spec.steps, &p.density, &domain, failure, &planner.reward)?;
            let file = format!("rollout_{i}_{}_seed{s}.csv", entry.kind);
            rec.write_csv(&run.out.join(&file))?;
            println!(
                "{file}: {} steps, {:?}, reward {}, min density {}",
                rec.len(),
                rec.termination,
                rec.total_reward(),
                rec.min_density()
            );
            summaries.push(RolloutSummary {
                file,
                kind: entry.kind,
                threshold: constraint.threshold,
                percentile: constraint.percentile,
                seed: s,
                steps: rec.len(),
                termination: rec.termination,
                total_reward: rec.total_reward(),
                min_density: rec.min_density(),
                fallback_steps: rec.fallback.iter().filter(|f| **f).count(),
                final_state: rec.final_state.clone(),
            });
        }
    }
    write_json(&run.out.join("rollouts.json"), &summaries)
}

pub fn sweep(run: &Run, config: RunConfig) -> anyhow::Result<()> {
    let mut config = config;
    let grid = config_grid(&config)?;
    let ctl = control(&mut config, &grid)?;
    let chain = matches!(config.system, SystemSpec::Chain { .. });
    let spec = config.sweep.get_or_insert_with(Default::default);
    if spec.kinds.is_empty() || spec.percentiles.is_empty() || spec.seeds.is_empty() {
        return Err(ConfigError("sweep needs at least one kind, percentile and seed".into()).into());
    }
    spec.start.get_or_insert_with(|| {
        if chain {
            StartRule::Fixed { state: vec![0.0] }
        } else {
            let half = |ax: &ldm_core::Axis| 0.25 * (ax.hi - ax.lo);
            let mid = |ax: &ldm_core::Axis| 0.5 * (ax.hi + ax.lo);
            StartRule::UniformBox {
                lo: grid.state_axes().iter().map(|ax| mid(ax) - half(ax)).collect(),
                hi: grid.state_axes().iter().map(|ax| mid(ax) + half(ax)).collect(),
            }
        }
    });
    let spec = spec.clone();
    echo(run, &config)?;

    let p = Pipeline::build(config)?;
    let ldm = Arc::new(p.ldm()?);
    let data = p.reference_dataset(ctl.spec.threshold_samples)?;
    let ldm_values = constraint_values(&*ldm, &data);
    let energy_values = constraint_values(&p.energy, &data);
    let planner = ctl.spec.planner.as_ref().expect("resolved");
    let task = SweepTask {
        system: p.dynamics(),
        model: ctl.model.dynamics(),
        density: &p.density,
        ldm: ldm.clone(),
        energy: Arc::new(p.energy.clone()),
        ldm_values: &ldm_values,
        energy_values: &energy_values,
        actions: &ctl.actions,
        mpc: planner,
        domain: &p.bounds(),
        failure: ctl.spec.failure.as_ref().expect("resolved"),
        start: spec.start.as_ref().expect("resolved"),
        n_steps: ctl.spec.steps,
    };
    let table = threshold_sweep(&task, &spec.kinds, &spec.percentiles, &spec.seeds)?;
    table.write_rows_csv(&run.out.join("sweep_rows.csv"))?;
    table.write_aggregates_csv(&run.out.join("sweep_aggregates.csv"))?;
    for a in &table.aggregates {
        println!(
            "{:>7} p{:<5} threshold {:.4}: median reward {:.4}, failure rate {:.2}",
            a.kind.to_string(),
            a.percentile,
            a.threshold,
            a.reward_median,
            a.failure_rate
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct RecoverabilitySummary {
    ratio: f64,
    one_step_ratio: f64,
    witness_start: usize,
    witness_path: Vec<usize>,
    iterations: usize,
}

#[derive(Serialize)]
struct GammaAudit {
    gamma: f64,
    iterations: usize,
    /// Exact solve audited against itself, or a fitted iteration.
    fitted: bool,
    eps_ls: f64,
    audits: Vec<BoundAudit>,
}

#[derive(Serialize)]
struct AuditReport {
    satisfied: bool,
    recoverability: RecoverabilitySummary,
    runs: Vec<GammaAudit>,
}

pub fn audit(run: &Run, config: RunConfig) -> anyhow::Result<()> {
    let mut config = config;
    let sentinel = ldm_core::field::sentinel_for_floor(config.density.floor);
    let spec = config.audit.get_or_insert_with(Default::default);
    if spec.gammas.is_empty() {
        return Err(ConfigError("audit.gammas is empty".into()).into());
    }
    for &g in &spec.gammas {
        if !(g > 0.0 && g <= 1.0) {
            return Err(ConfigError(format!("audit.gammas: gamma must lie in (0, 1], got {g}")).into());
        }
    }
    if let Some(f) = spec.fitted.as_mut() {
        f.prior.get_or_insert(match f.basis {
            BasisSpec::OneHot => sentinel,
            BasisSpec::Rbf => 0.0,
        });
    }
    let spec = spec.clone();
    echo(run, &config)?;

    let p = Pipeline::build(config)?;
    let rec = compute_recoverability(&p.density, p.dynamics())?;
    let data = match &spec.fitted {
        Some(f) => Some(p.reference_dataset(f.n_samples)?),
        None => None,
    };
    let mut runs = Vec::new();
    for &gamma in &spec.gammas {
        let solver = ldm_core::solver::SolverConfig { gamma, ..p.config.solver.clone() };
        let (g_star, _) = p.solve_with(&solver)?;
        let (fitted_values, eps_ls) = match (&spec.fitted, &data) {
            (Some(f), Some(data)) => {
                let basis = match f.basis {
                    BasisSpec::OneHot => FeatureBasis::OneHot { grid: (*p.grid).clone() },
                    BasisSpec::Rbf => FeatureBasis::default_for(&p.bounds())?,
                };
                let cfg = FittedConfig {
                    basis,
                    ridge: f.ridge,
                    iterations: spec.iterations,
                    gamma,
                    prior: f.prior.expect("resolved"),
                };
                let nodes = p.action_nodes();
                let fitted = fitted_ldm_iteration(data, &p.energy, &nodes, &cfg, Some(p.bounds()), sentinel)?;
                let mut iterates: Vec<&dyn StateActionFunction> = vec![&p.energy];
                iterates.extend(fitted.models.iter().map(|m| m as &dyn StateActionFunction));
                let eps_ls = fitted_residuals(&iterates, &p.energy, &p.density, p.dynamics(), gamma)?
                    .into_iter()
                    .fold(0.0, f64::max);
                let last = fitted.final_model();
                let values = (0..p.grid.len())
                    .map(|cell| {
                        let (s, a) = p.grid.cell_to_coords(cell).expect("cell in range");
                        last.eval(&s, &a)
                    })
                    .collect::<Vec<f64>>();
                (values, eps_ls)
            }
            _ => (g_star.values().to_vec(), 0.0),
        };
        let input = FqiBoundInput {
            fitted: &fitted_values,
            optimal: g_star.values(),
            energy: p.energy.values(),
            density: p.density.values(),
            gamma,
            iterations: spec.iterations,
            recoverability: rec.ratio,
            one_step_recoverability: rec.one_step_ratio,
            eps_ls,
        };
        let forms = if gamma < 1.0 {
            vec![FqiBoundForm::Discounted, FqiBoundForm::OneStep]
        } else if spec.fitted.is_none() {
            // An exact solve terminates, so K_fin and eps_fin are both zero.
            vec![FqiBoundForm::Undiscounted { k_fin: 0.0, eps_fin: 0.0 }]
        } else {
            Vec::new()
        };
        let audits = forms.into_iter().map(|f| audit_fqi_bound(&input, f)).collect::<ldm_core::Result<Vec<_>>>()?;
        for a in &audits {
            println!(
                "gamma {gamma} {}: lhs {:.3e} rhs {:.3e} {}",
                a.name,
                a.lhs,
                a.rhs,
                if !a.applicable {
                    "not applicable"
                } else if a.satisfied {
                    "satisfied"
                } else {
                    "VIOLATED"
                }
            );
        }
        runs.push(GammaAudit { gamma, iterations: spec.iterations, fitted: spec.fitted.is_some(), eps_ls, audits });
    }
    let satisfied = runs.iter().flat_map(|r| &r.audits).all(|a| a.satisfied || !a.applicable);
    let report = AuditReport {
        satisfied,
        recoverability: RecoverabilitySummary {
            ratio: rec.ratio,
            one_step_ratio: rec.one_step_ratio,
            witness_start: rec.witness_start,
            witness_path: rec.witness_path.clone(),
            iterations: rec.iterations,
        },
        runs,
    };
    write_json(&run.out.join("audit.json"), &report)?;
    check(run, satisfied, "bound audit")
}

pub fn export(run: &Run, config: RunConfig) -> anyhow::Result<()> {
    let mut config = config;
    let spec = config.export.get_or_insert_with(Default::default).clone();
    echo(run, &config)?;
    let p = Pipeline::build(config)?;
    let ldm = p.ldm()?;
    p.write_field(&run.out, "density.csv", &p.density)?;
    p.write_field(&run.out, "energy.csv", &p.energy)?;
    p.write_field(&run.out, "ldm.csv", &ldm)?;

    let thresholds = if spec.thresholds.is_empty() {
        let (lo, hi) = finite_values(&ldm).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if lo.is_finite() {
            (0..10).map(|i| lo + (hi - lo) * i as f64 / 9.0).collect()
        } else {
            Vec::new()
        }
    } else {
        spec.thresholds.clone()
    };
    let mut w = csv::Writer::from_path(run.out.join("level_sets.csv"))?;
    w.write_record(["threshold", "ldm_cells", "ldm_fraction", "energy_cells", "energy_fraction"])?;
    for t in &thresholds {
        let g = ldm.sublevel_set(*t)?;
        let e = p.energy.sublevel_set(*t)?;
        w.write_record([
            t.to_string(),
            g.len().to_string(),
            g.volume_fraction().to_string(),
            e.len().to_string(),
            e.volume_fraction().to_string(),
        ])?;
    }
    w.flush()?;

    // Per-state minima over actions, and the greedy LDM action, for level-set
    // panels and phase portraits.
    let mut w = csv::Writer::from_path(run.out.join("state_values.csv"))?;
    let ds = p.grid.state_dim();
    let da = p.grid.action_dim();
    let mut header: Vec<String> = (0..ds).map(|k| format!("s{k}")).collect();
    header.extend(["energy_min".into(), "ldm_min".into()]);
    header.extend((0..da).map(|k| format!("greedy_a{k}")));
    w.write_record(&header)?;
    for si in 0..p.grid.n_states() {
        let s = p.grid.state_coords(si);
        let (emin, _) = p.energy.min_over_actions(&s);
        let (gmin, ai) = ldm.min_over_actions(&s);
        let mut row: Vec<String> = s.iter().map(f64::to_string).collect();
        row.push(emin.to_string());
        row.push(gmin.to_string());
        row.extend(p.grid.action_coords(ai).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut passed = true;
    if let Some(clf) = &spec.clf {
        let w = extract_clf(&ldm, &clf.state, &clf.action)?;
        w.write_csv(&run.out.join("clf.csv"))?;
        let report = w.check(p.dynamics(), 1e-9)?;
        passed = report.passed();
        println!(
            "CLF: {} decrease and {} positivity violations",
            report.decrease_violations.len(),
            report.positivity_violations.len()
        );
        write_json(&run.out.join("clf_report.json"), &report)?;
    }
    println!("exported {} level sets over {} cells", thresholds.len(), ldm.len());
    check(run, passed, "CLF check")
}
