//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false` so the lines are printed by a plain
//! `cargo test`. Criteria listed in `KNOWN_FAILURES` are reported as FAIL
//! without failing the run; any other FAIL exits nonzero.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use ldm_core::analysis::{
    audit_fqi_bound, audit_reward_bound, audit_rollout_guarantee, best_reachable_density, compute_recoverability,
    extract_clf, fitted_residuals, greedy_density_trace, measure_eps_r, verify_invariance, FqiBoundForm, FqiBoundInput,
    RewardBoundInput, RolloutBoundInput,
};
use ldm_core::control::{
    percentile_threshold, rollout, ActionSet, ConstraintKind, ConstraintSpec, FailureRule, MpcConfig, Policy, Reward,
    RolloutRecord,
};
use ldm_core::density::{analytic_density, to_energy, AnalyticDensity};
use ldm_core::field::{sentinel_for_floor, DEFAULT_FLOOR};
use ldm_core::solver::{
    brute_force_ldm, fitted_ldm_iteration, fixed_point_residual, solve_maximal_ldm, value_iterates, FeatureBasis,
    FittedConfig, SolveReport, SolverConfig, DEFAULT_BRUTE_CAP,
};
use ldm_core::systems::{
    collect_dataset, collect_from_table, solve_lqr, DataPolicy, Dynamics, LinearSpiralSystem, TabularSystem,
};
use ldm_core::{Bounds, FieldRole, Interpolation, ScalarField, StateActionFunction, StateActionGrid};
use nalgebra::DMatrix;

/// Criteria that cannot pass as stated; the analysis is kept with the
/// project's decision notes. They still run and print their measurements.
const KNOWN_FAILURES: &[&str] = &["bound-audits"];

/// Slack for invariance and CLF checks on solved fields, which meet their
/// fixed-point equation only to the solver tolerance.
const SOLVED_SLACK: f64 = 1e-8;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("oracle-equivalence", oracle_equivalence),
        ("convergence-suite", convergence_suite),
        ("invariance-suite", invariance_suite),
        ("chain-cliff", chain_cliff),
        ("reference-grid", reference_grid),
        ("level-set-volume", level_set_volume),
        ("bound-audits", bound_audits),
        ("clf-extraction", clf_extraction),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = Vec::new();
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        let known = !outcome.pass && KNOWN_FAILURES.contains(&name);
        let note = if known { " [known]" } else { "" };
        println!("{verdict} {name}{note} ({secs:.1}s): {}", outcome.detail);
        if !outcome.pass && !known {
            unexpected.push(name);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {}", unexpected.join(", "));
        ExitCode::FAILURE
    }
}

fn sentinel() -> f64 {
    sentinel_for_floor(DEFAULT_FLOOR)
}

// Spiral fixtures -------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Case {
    /// Zero-mean Gaussian actions.
    A,
    /// Actions centred on the LQR controller.
    B,
    /// Case B with Gaussian states, so the density peaks at the origin.
    BPeaked,
    Toric,
}

fn spiral_law(case: Case) -> AnalyticDensity {
    let sys = LinearSpiralSystem::default().to_linear();
    let lqr = solve_lqr(sys.f(), sys.g(), &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
    let gain = vec![lqr.gain.row(0).iter().copied().collect()];
    match case {
        Case::A => AnalyticDensity::ZeroMeanGaussian { sigma: 1.0 },
        Case::B => AnalyticDensity::LqrMeanGaussian { sigma: 1.0, gain, state_sigma: None },
        Case::BPeaked => AnalyticDensity::LqrMeanGaussian { sigma: 1.0, gain, state_sigma: Some(3.0) },
        Case::Toric => AnalyticDensity::Toric { rho: 5.0, sigma_r: 1.0, sigma_a: 1.0 },
    }
}

fn spiral_policy(case: Case) -> DataPolicy {
    match spiral_law(case) {
        AnalyticDensity::ZeroMeanGaussian { sigma } => DataPolicy::ZeroMeanGaussian { sigma },
        AnalyticDensity::LqrMeanGaussian { sigma, gain, state_sigma } => {
            DataPolicy::LqrMeanGaussian { sigma, gain, state_sigma }
        }
        AnalyticDensity::Toric { rho, sigma_r, sigma_a } => DataPolicy::Toric { rho, sigma_r, sigma_a },
        AnalyticDensity::ChainTable { .. } => unreachable!("spiral laws only"),
    }
}

fn spiral_grid(n: usize, m: usize) -> Arc<StateActionGrid> {
    Arc::new(StateActionGrid::new(&[-10.0, -10.0], &[10.0, 10.0], &[n, n], &[-5.0], &[5.0], &[m]).unwrap())
}

struct Spiral {
    system: LinearSpiralSystem,
    density: ScalarField,
    energy: ScalarField,
}

/// The toric LDM keeps creeping up under multilinear interpolation (the
/// residual decays roughly like 1/sweeps along the circulating orbits), so
/// that case is read with nearest-node interpolation, where value iteration
/// terminates exactly.
fn spiral(case: Case, n: usize, m: usize) -> Spiral {
    let mut density = analytic_density(&spiral_law(case), spiral_grid(n, m), sentinel()).unwrap();
    if let Case::Toric = case {
        density = density.with_interpolation(Interpolation::Nearest);
    }
    let energy = to_energy(&density, DEFAULT_FLOOR).unwrap();
    Spiral { system: LinearSpiralSystem::default(), density, energy }
}

/// Discounted solves converge geometrically and case A needs well over the
/// default 500 sweeps at gamma = 1, so suites allow a larger cap.
fn solve(e: &ScalarField, system: &dyn Dynamics, gamma: f64) -> (ScalarField, SolveReport) {
    let cfg = SolverConfig { gamma, max_sweeps: 20_000, interpolation: e.interpolation(), ..SolverConfig::default() };
    solve_maximal_ldm(e, system, &cfg).unwrap()
}

fn chain_table(chain: &ldm_core::systems::ChainSystem) -> Vec<(Vec<f64>, Vec<f64>, f64)> {
    chain.support().into_iter().map(|(s, a, p)| (vec![s as f64], vec![a as f64], p)).collect()
}

/// Range of the values below the sentinel. Interpolating between sentinel
/// cells can land an ulp under it, so those count as sentinel too.
fn finite_range(g: &ScalarField) -> (f64, f64) {
    let cut = g.sentinel() - 1e-6;
    let finite = g.values().iter().copied().filter(|v| *v < cut);
    finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn thresholds(g: &ScalarField, n: usize) -> Vec<f64> {
    let (lo, hi) = finite_range(g);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

// Criteria ---------------------------------------------------------------------

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = Vec::new();
    let mut check = |label: String, e: &ScalarField, system: &TabularSystem, dynamics: &dyn Dynamics| {
        let (g, report) = solve(e, dynamics, 1.0);
        // Value iteration on a finite system stops changing after at most
        // as many sweeps as there are cells; search a little further.
        let horizon = report.sweeps + e.len();
        let oracle = brute_force_ldm(system, e.values(), e.sentinel(), horizon, 1.0, DEFAULT_BRUTE_CAP).unwrap();
        let gap = g.values().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(gap);
        cases.push(format!("{label}:{gap:.0e}"));
    };
    for h in 1..=3 {
        for k in [2, 4] {
            // The smallest epsilon the construction allows for this (H, K).
            let eps = 1.0 / (2.0 * (h + 1) as f64 * k as f64);
            let chain = common::chain(h, k, eps);
            let table = TabularSystem::from_grid(&chain.grid, &chain.system).unwrap();
            check(format!("chain(H={h},K={k})"), &chain.energy, &table, &chain.system);
        }
    }
    let random = TabularSystem::random(6, 3, 7);
    let grid = Arc::new(random.index_grid().unwrap());
    let values: Vec<f64> = (0..18).map(|i| ((i * 37 + 11) % 17) as f64 * 0.5).collect();
    let e = ScalarField::new(grid, values, FieldRole::Energy, sentinel()).unwrap();
    check("random(6x3)".into(), &e, &random, &random);
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-12 && secs < 10.0,
        detail: format!("max |solver - oracle| = {worst:.1e} over {} systems in {secs:.2}s ({})", cases.len(), cases.join(" ")),
    }
}

fn convergence_check(label: &str, e: &ScalarField, system: &dyn Dynamics, notes: &mut Vec<String>) -> bool {
    let (g, report) = solve(e, system, 1.0);
    let residual = fixed_point_residual(&g, e, system, 1.0).unwrap();
    let dominates = g.values().iter().zip(e.values()).all(|(a, b)| a >= b);
    // Independent pass over the first sweeps, away from the solver's
    // skipped-row bookkeeping.
    let early = value_iterates(e, system, 1.0, e.interpolation(), report.sweeps.min(40)).unwrap();
    let mut prev = e.values();
    let mut rising = true;
    for it in &early {
        rising &= it.values().iter().zip(prev).all(|(a, b)| a >= b);
        prev = it.values();
    }
    let ok = report.monotone && rising && dominates && residual < 1e-8;
    notes.push(format!("{label}: {} sweeps, residual {residual:.1e}{}", report.sweeps, if ok { "" } else { " FAILED" }));
    ok
}

fn convergence_suite() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let chain = common::chain(3, 32, 1.0 / 16.0);
    ok &= convergence_check("chain", &chain.energy, &chain.system, &mut notes);
    let random = TabularSystem::random(6, 3, 7);
    let grid = Arc::new(random.index_grid().unwrap());
    let values: Vec<f64> = (0..18).map(|i| ((i * 37 + 11) % 17) as f64 * 0.5).collect();
    let e = ScalarField::new(grid, values, FieldRole::Energy, sentinel()).unwrap();
    ok &= convergence_check("tabular", &e, &random, &mut notes);
    for (label, case) in [("spiral-a", Case::A), ("spiral-b", Case::B), ("toric (nearest)", Case::Toric)] {
        let s = spiral(case, 41, 21);
        ok &= convergence_check(label, &s.energy, &s.system, &mut notes);
    }
    Outcome { pass: ok, detail: notes.join("; ") }
}

fn invariance_suite() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |label: &str, g: &ScalarField, system: &dyn Dynamics| {
        let mut bad = 0;
        for t in thresholds(g, 10) {
            let r = verify_invariance(&g.sublevel_set(t).unwrap(), system, SOLVED_SLACK).unwrap();
            bad += r.violations.len();
        }
        ok &= bad == 0;
        notes.push(format!("{label}: {bad} violations at 10 levels"));
    };
    let chain = common::chain(3, 32, 1.0 / 16.0);
    check("chain", &chain.ldm, &chain.system);
    let mut raw_a = 0;
    for (label, case) in [("spiral-a", Case::A), ("spiral-b", Case::B), ("toric (nearest)", Case::Toric)] {
        let s = spiral(case, 41, 21);
        let (g, _) = solve(&s.energy, &s.system, 1.0);
        check(label, &g, &s.system);
        if let Case::A = case {
            let p: Vec<f64> = s.density.values().to_vec();
            let c = percentile_threshold(&p, 90.0).unwrap();
            let set = s.energy.sublevel_set(-c.ln()).unwrap();
            raw_a = verify_invariance(&set, &s.system, 0.0).unwrap().violations.len();
        }
    }
    notes.push(format!("raw E on spiral-a at the 90th-percentile density: {raw_a} violations"));
    Outcome { pass: ok && raw_a > 0, detail: notes.join("; ") }
}

fn chain_run(chain: &common::Chain, kind: ConstraintKind, steps: usize) -> RolloutRecord {
    let threshold = (2.0 * (chain.system.h + 1) as f64).ln();
    let field: Arc<dyn StateActionFunction> = match kind {
        ConstraintKind::Ldm => Arc::new(chain.ldm.clone()),
        _ => Arc::new(chain.energy.clone()),
    };
    let spec = ConstraintSpec::new(kind, Some(field), threshold).unwrap();
    let actions = ActionSet::from_grid(&chain.grid, true);
    let config = MpcConfig::new(chain.system.h as usize, 1024, Reward::Action);
    let policy = Policy::Mpc { constraint: &spec, config: &config, actions: &actions, model: &chain.system, seed: 0 };
    let failure = FailureRule::ZeroDensity { actions: actions.nodes.clone() };
    let domain = Bounds::from_grid(&chain.grid);
    rollout(&chain.system, &policy, &[0.0], steps, &chain.density, &domain, &failure, &Reward::Action).unwrap()
}

fn chain_cliff() -> Outcome {
    let start = Instant::now();
    let (h, eps) = (3, 1.0 / 16.0);
    let chain = common::chain(h, 32, eps);
    let nodes = ActionSet::from_grid(&chain.grid, true).nodes;
    let dens = chain_run(&chain, ConstraintKind::Density, (h + 1) as usize);
    let s_end = dens.states[h as usize][0];
    let cliff = nodes.iter().map(|a| chain.density.lookup(&[s_end], a)).fold(0.0, f64::max);
    let ldm = chain_run(&chain, ConstraintKind::Ldm, 100);
    let min_p = ldm.min_density();
    let secs = start.elapsed().as_secs_f64();
    let pass = s_end == h as f64 && cliff <= eps && ldm.len() == 100 && min_p == 0.125 && secs < 5.0;
    Outcome {
        pass,
        detail: format!(
            "density MPC reaches s_{} = {s_end} with max_a P = {cliff}; LDM MPC min P = {min_p} over {} steps; {secs:.2}s",
            h + 1,
            ldm.len()
        ),
    }
}

fn reference_grid() -> Outcome {
    let s = spiral(Case::B, 201, 101);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let start = Instant::now();
        let out = pool.install(|| solve_maximal_ldm(&s.energy, &s.system, &SolverConfig::default()));
        (out, start.elapsed().as_secs_f64())
    };
    let (single, t1) = run(1);
    let (multi, t4) = run(4);
    match (single, multi) {
        (Ok((g1, r1)), Ok((g4, _))) => {
            let identical = g1.values().iter().zip(g4.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            Outcome {
                pass: t1 < 300.0 && identical,
                detail: format!(
                    "{} cells, {} sweeps, {t1:.1}s on 1 thread, {t4:.1}s on 4; bitwise identical: {identical}",
                    g1.len(),
                    r1.sweeps
                ),
            }
        }
        (a, b) => Outcome { pass: false, detail: format!("solve failed: {:?} / {:?}", a.err(), b.err()) },
    }
}

fn volume_ratio(case: Case) -> (f64, usize, usize) {
    let s = spiral(case, 81, 41);
    let (g, _) = solve(&s.energy, &s.system, 1.0);
    let c = percentile_threshold(s.density.values(), 90.0).unwrap();
    let d_c = s.energy.sublevel_set(-c.ln()).unwrap().len();
    let g_c = g.sublevel_set(-c.ln()).unwrap().len();
    (g_c as f64 / d_c as f64, g_c, d_c)
}

fn level_set_volume() -> Outcome {
    let (ra, ga, da) = volume_ratio(Case::A);
    let (rb, gb, db) = volume_ratio(Case::B);
    Outcome {
        pass: rb >= 3.0 * ra,
        detail: format!(
            "81x81x41 grid, 90th-percentile level: case a |G_c|/|D_c| = {ga}/{da} = {ra:.4}, case b = {gb}/{db} = {rb:.4}, factor {:.1}",
            rb / ra
        ),
    }
}

// Bound audits -------------------------------------------------------------------

#[derive(Default)]
struct Tally {
    runs: usize,
    satisfied: usize,
    applicable: usize,
    notes: Vec<String>,
    seen: std::collections::HashSet<String>,
}

impl Tally {
    fn record(&mut self, ok: bool, applicable: bool) {
        self.runs += 1;
        self.applicable += applicable as usize;
        self.satisfied += ok as usize;
    }

    /// Keeps one note per source, plus every failure up to a cap.
    fn note(&mut self, source: &str, failed: bool, text: String) {
        if self.seen.insert(source.to_string()) || (failed && self.notes.len() < 8) {
            self.notes.push(text);
        }
    }

    fn all(&self) -> bool {
        self.satisfied == self.applicable
    }
}

/// Fitted iteration against the exact discounted LDM on the same grid.
#[allow(clippy::too_many_arguments)]
fn fqi_run(
    label: &str,
    e: &ScalarField,
    density: &ScalarField,
    system: &dyn Dynamics,
    data: &ldm_core::TransitionDataset,
    basis: FeatureBasis,
    prior: f64,
    gamma: f64,
    k: usize,
    tally: &mut Tally,
) {
    let grid = e.grid();
    let actions: Vec<Vec<f64>> = (0..grid.n_actions()).map(|a| grid.action_coords(a)).collect();
    let cfg = FittedConfig { basis, ridge: 1e-8, iterations: k, gamma, prior };
    let fitted = fitted_ldm_iteration(data, e, &actions, &cfg, Some(Bounds::from_grid(grid)), e.sentinel()).unwrap();
    let mut iterates: Vec<&dyn StateActionFunction> = vec![e];
    iterates.extend(fitted.models.iter().map(|m| m as &dyn StateActionFunction));
    let eps_ls = fitted_residuals(&iterates, e, density, system, gamma).unwrap().into_iter().fold(0.0, f64::max);
    let last = fitted.final_model();
    let g_k: Vec<f64> = (0..grid.len())
        .map(|cell| {
            let (s, a) = grid.cell_to_coords(cell).unwrap();
            last.eval(&s, &a)
        })
        .collect();
    let (g_star, _) = solve(e, system, gamma);
    let rec = compute_recoverability(density, system).unwrap();
    let input = FqiBoundInput {
        fitted: &g_k,
        optimal: g_star.values(),
        energy: e.values(),
        density: density.values(),
        gamma,
        iterations: k,
        recoverability: rec.ratio,
        one_step_recoverability: rec.one_step_ratio,
        eps_ls,
    };
    let audit = audit_fqi_bound(&input, FqiBoundForm::Discounted).unwrap();
    tally.record(audit.satisfied, true);
    tally.note(label, !audit.satisfied, format!(
            "{label} gamma={gamma} K={k}: lhs {:.3e} rhs {:.3e} (R {:.3e}, eps_ls {:.2e})",
            audit.lhs, audit.rhs, rec.ratio, eps_ls
    ));
}

fn fitted_bound_runs() -> Tally {
    let mut tally = Tally::default();
    for (h, k_chain, eps) in [(3, 32, 1.0 / 16.0), (2, 4, 1.0 / 8.0), (1, 4, 1.0 / 16.0)] {
        let chain = common::chain(h, k_chain, eps);
        let data = collect_from_table(&chain.system, &chain_table(&chain.system), 2000, 11, serde_json::Value::Null).unwrap();
        let basis = FeatureBasis::OneHot { grid: (*chain.grid).clone() };
        for gamma in [0.9, 0.99] {
            for k in [5, 20] {
                let label = format!("chain(H={h},K={k_chain})");
                fqi_run(&label, &chain.energy, &chain.density, &chain.system, &data, basis.clone(), sentinel(), gamma, k, &mut tally);
            }
        }
    }
    for (label, case) in [("spiral-a", Case::A), ("spiral-b", Case::B)] {
        let s = spiral(case, 21, 11);
        let bounds = Bounds::from_grid(s.energy.grid());
        let data = collect_dataset(&s.system, &spiral_policy(case), &bounds, 4000, 5).unwrap();
        let basis = FeatureBasis::default_for(&bounds).unwrap();
        for gamma in [0.9, 0.99] {
            for k in [5, 20] {
                fqi_run(label, &s.energy, &s.density, &s.system, &data, basis.clone(), 0.0, gamma, k, &mut tally);
            }
        }
    }
    tally
}

/// Exact solves: the fitted and optimal fields coincide.
fn tabular_runs() -> (usize, bool) {
    let mut runs = 0;
    let mut zero = true;
    let chain = common::chain(3, 32, 1.0 / 16.0);
    let random = TabularSystem::random(6, 3, 7);
    let rgrid = Arc::new(random.index_grid().unwrap());
    let p: Vec<f64> = (0..18).map(|i| ((i * 5 + 3) % 7) as f64 / 7.0).collect();
    let rdens = ScalarField::new(rgrid, p, FieldRole::Density, sentinel()).unwrap();
    let re = to_energy(&rdens, DEFAULT_FLOOR).unwrap();
    let cases: [(&ScalarField, &ScalarField, &dyn Dynamics); 2] =
        [(&chain.energy, &chain.density, &chain.system), (&re, &rdens, &random)];
    for (e, d, system) in cases {
        let rec = compute_recoverability(d, system).unwrap();
        for gamma in [0.9, 0.99, 1.0] {
            let (g, _) = solve(e, system, gamma);
            let input = FqiBoundInput {
                fitted: g.values(),
                optimal: g.values(),
                energy: e.values(),
                density: d.values(),
                gamma,
                iterations: 20,
                recoverability: rec.ratio,
                one_step_recoverability: rec.one_step_ratio,
                eps_ls: 0.0,
            };
            let forms = if gamma < 1.0 {
                vec![FqiBoundForm::Discounted, FqiBoundForm::OneStep]
            } else {
                vec![FqiBoundForm::Undiscounted { k_fin: 0.0, eps_fin: 0.0 }]
            };
            for form in forms {
                let a = audit_fqi_bound(&input, form).unwrap();
                runs += 1;
                zero &= a.lhs == 0.0 && (a.satisfied || a.rhs.is_nan());
            }
        }
    }
    (runs, zero)
}

/// LDM-constrained rollouts on the chain and the spiral, each audited
/// against the exact rollout guarantee.
fn rollout_runs(tally: &mut Tally, rewards: &mut Tally) {
    let chain = common::chain(3, 32, 1.0 / 16.0);
    let table = TabularSystem::from_grid(&chain.grid, &chain.system).unwrap();
    let actions = ActionSet::from_grid(&chain.grid, true);
    let mut ldm_values: Vec<f64> = chain.ldm.values().iter().copied().filter(|v| *v < chain.ldm.sentinel()).collect();
    ldm_values.sort_by(f64::total_cmp);
    for pct in [10.0, 30.0, 50.0, 70.0, 90.0, 100.0] {
        let threshold = percentile_threshold(&ldm_values, pct).unwrap();
        let spec = ConstraintSpec::new(ConstraintKind::Ldm, Some(Arc::new(chain.ldm.clone())), threshold).unwrap();
        let config = MpcConfig::new(3, 1024, Reward::Action);
        for seed in 0..3 {
            let policy = Policy::Mpc { constraint: &spec, config: &config, actions: &actions, model: &chain.system, seed };
            let rec = rollout(
                &chain.system,
                &policy,
                &[0.0],
                50,
                &chain.density,
                &Bounds::from_grid(&chain.grid),
                &FailureRule::ZeroDensity { actions: actions.nodes.clone() },
                &Reward::Action,
            )
            .unwrap();
            let si = chain.grid.nearest_state(&rec.states[0]).unwrap();
            let ai = chain.grid.nearest_action(&rec.actions[0]).unwrap();
            let best = best_reachable_density(&table, chain.density.values(), si, ai, rec.len() - 1).unwrap();
            let c = (-threshold).exp();
            let input = RolloutBoundInput { c, gamma: 1.0, recoverability: 1.0, eps_ls: 0.0, eps_p: 0.0, k_fin: 0.0, eps_fin: 0.0 };
            let audit = audit_rollout_guarantee(&best, &input).unwrap();
            tally.record(audit.satisfied, true);
            if !audit.satisfied {
                tally.notes.push(format!("chain pct {pct} seed {seed}: worst step {:?}", audit.worst_step));
            }
            // The planner's model is exact here, so the reward gap is zero.
            let rin = RewardBoundInput { c, gamma: 0.99, recoverability: 1.0, eps_ls: 0.0, eps_p: 0.0, eps_r: 0.0 };
            let ra = audit_reward_bound(&rec.predicted_rewards, &rec.rewards, Some(&rec.densities), &rin).unwrap();
            let applicable = !ra.audit.rhs.is_nan();
            rewards.record(ra.audit.satisfied, applicable);
            if applicable {
                rewards.note("chain", !ra.audit.satisfied, format!(
                    "chain pct {pct}: lhs {:.2e} rhs {:.3e} c_min {:.2e} derivation valid {:?}",
                    ra.audit.lhs, ra.audit.rhs, ra.c_min, ra.derivation_valid
                ));
            }
        }
    }

    // Spiral case b, goal at the origin, planning with the true dynamics and
    // with a model whose rotation is 5% off.
    let s = spiral(Case::B, 41, 21);
    let (g, _) = solve(&s.energy, &s.system, 1.0);
    let goal = vec![0.0, 0.0];
    let reward = Reward::GoalDistance { goal: goal.clone() };
    let actions = ActionSet::from_grid(s.energy.grid(), false);
    let model_off = LinearSpiralSystem::new(0.1, 1.05, 0.1).unwrap();
    let reward_fn = |st: &[f64], _a: &[f64]| -st.iter().zip(&goal).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut data_values: Vec<f64> = Vec::new();
    let bounds = Bounds::from_grid(s.energy.grid());
    let data = collect_dataset(&s.system, &spiral_policy(Case::B), &bounds, 2000, 3).unwrap();
    for (st, a, _) in data.iter() {
        data_values.push(g.lookup(st, a));
    }
    let models: [(&str, &dyn Dynamics); 2] = [("true model", &s.system), ("rotation-off model", &model_off)];
    for (mlabel, model) in models {
        let eps_r = measure_eps_r(&s.density, &s.system, model, &reward_fn).unwrap();
        for pct in [50.0, 90.0] {
            let threshold = percentile_threshold(&data_values, pct).unwrap();
            let c = (-threshold).exp();
            let spec = ConstraintSpec::new(ConstraintKind::Ldm, Some(Arc::new(g.clone())), threshold).unwrap();
            let config = MpcConfig::new(1, 256, reward.clone());
            for seed in 0..3u64 {
                let start = data.state(seed as usize * 97).to_vec();
                let policy = Policy::Mpc { constraint: &spec, config: &config, actions: &actions, model, seed };
                let rec = rollout(&s.system, &policy, &start, 40, &s.density, &bounds, &FailureRule::Never, &reward).unwrap();
                if rec.fallback[0] {
                    // The guarantee only speaks about starts inside the set.
                    continue;
                }
                let trace = greedy_density_trace(s.energy.grid(), &s.system, &g, &s.density, &rec.states[0], &rec.actions[0], rec.len() - 1);
                let best: Vec<f64> = trace.iter().zip(&rec.densities).map(|(a, b)| a.max(*b)).collect();
                let input = RolloutBoundInput { c, gamma: 1.0, recoverability: 1.0, eps_ls: 0.0, eps_p: 0.0, k_fin: 0.0, eps_fin: 0.0 };
                let audit = audit_rollout_guarantee(&best, &input).unwrap();
                tally.record(audit.satisfied, true);
                if !audit.satisfied {
                    tally.notes.push(format!("spiral {mlabel} pct {pct} seed {seed}: worst step {:?}", audit.worst_step));
                }
                let rec_r = compute_recoverability(&s.density, &s.system).unwrap();
                let rin = RewardBoundInput { c, gamma: 0.99, recoverability: rec_r.ratio, eps_ls: 0.0, eps_p: 0.0, eps_r };
                let ra = audit_reward_bound(&rec.predicted_rewards, &rec.rewards, Some(&rec.densities), &rin).unwrap();
                let applicable = !ra.audit.rhs.is_nan();
                rewards.record(ra.audit.satisfied, applicable);
                if applicable {
                    rewards.note(mlabel, !ra.audit.satisfied, format!(
                        "spiral {mlabel} pct {pct}: lhs {:.2e} rhs {:.3e} c {c:.2e} c_min {:.2e} eps_r {eps_r:.2e} derivation valid {:?}",
                        ra.audit.lhs, ra.audit.rhs, ra.c_min, ra.derivation_valid
                    ));
                } else {
                    rewards.note(&format!("{mlabel} n/a"), false, format!(
                        "spiral {mlabel} pct {pct}: precondition fails, c {c:.2e} < c_min {:.2e}", ra.c_min
                    ));
                }
            }
        }
    }
}

fn bound_audits() -> Outcome {
    let fitted = fitted_bound_runs();
    let (tabular, tabular_zero) = tabular_runs();
    let mut rollouts = Tally::default();
    let mut rewards = Tally::default();
    rollout_runs(&mut rollouts, &mut rewards);
    let fitted_ok = fitted.runs >= 20 && fitted.all();
    let pass = fitted_ok && rollouts.all() && rollouts.runs > 0 && rewards.all() && tabular_zero;
    let mut detail = vec![
        format!("fitted-iteration bound {}/{} runs", fitted.satisfied, fitted.runs),
        format!("rollout guarantee {}/{} rollouts", rollouts.satisfied, rollouts.runs),
        format!(
            "reward bound {}/{} where the precondition holds ({} rollouts)",
            rewards.satisfied, rewards.applicable, rewards.runs
        ),
        format!("{tabular} tabular audits with lhs = 0: {tabular_zero}"),
    ];
    detail.extend(fitted.notes.iter().chain(&rollouts.notes).chain(&rewards.notes).cloned());
    Outcome { pass, detail: detail.join("; ") }
}

fn clf_extraction() -> Outcome {
    let s = spiral(Case::BPeaked, 41, 21);
    let (g, _) = solve(&s.energy, &s.system, 1.0);
    let clf = match extract_clf(&g, &[0.0, 0.0], &[0.0]) {
        Ok(c) => c,
        Err(e) => return Outcome { pass: false, detail: format!("extraction failed: {e}") },
    };
    let r = clf.check(&s.system, SOLVED_SLACK).unwrap();
    Outcome {
        pass: r.passed() && r.value_at_equilibrium == 0.0,
        detail: format!(
            "W(s_e) = {}, {} positivity and {} decrease violations over {} states (worst decrease gap {:.1e})",
            r.value_at_equilibrium,
            r.positivity_violations.len(),
            r.decrease_violations.len(),
            g.grid().n_states(),
            r.decrease_worst
        ),
    }
}
