//! Run configuration: parsing with field-level diagnostics and resolution
//! of every default into an explicit value.

use std::fmt;
use std::path::{Path, PathBuf};

use ldm_core::control::{ConstraintKind, FailureRule, MpcConfig, Reward, StartRule};
use ldm_core::density::Bandwidth;
use ldm_core::solver::SolverConfig;
use ldm_core::systems::{solve_lqr, ChainSystem, LinearSpiralSystem, TabularSystem};
use ldm_core::field::DEFAULT_FLOOR;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// A problem with the configuration itself. Exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    /// Required for the spiral; chain and tabular systems bring their own grid.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    pub density: DensitySpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Directory of a previous `solve` whose fields are reused.
    #[serde(default)]
    pub artifacts: Option<PathBuf>,
    #[serde(default)]
    pub control: Option<ControlSpec>,
    #[serde(default)]
    pub verify: Option<VerifySpec>,
    #[serde(default)]
    pub mpc: Option<MpcSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub audit: Option<AuditSpec>,
    #[serde(default)]
    pub export: Option<ExportSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    Spiral {
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_omega")]
        omega: f64,
        #[serde(default = "default_dt")]
        dt: f64,
    },
    Chain {
        h: i64,
        k: i64,
        epsilon: f64,
    },
    /// Successor table `next[state * n_actions + action]`, `null` leaving
    /// the domain. Drawn uniformly from the run seed when absent.
    Tabular {
        n_states: usize,
        n_actions: usize,
        #[serde(default)]
        next: Option<Vec<Option<usize>>>,
    },
}

fn default_beta() -> f64 {
    ldm_core::systems::DEFAULT_BETA
}
fn default_omega() -> f64 {
    ldm_core::systems::DEFAULT_OMEGA
}
fn default_dt() -> f64 {
    ldm_core::systems::DEFAULT_DT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub state_counts: Vec<usize>,
    pub action_lo: Vec<f64>,
    pub action_hi: Vec<f64>,
    pub action_counts: Vec<usize>,
}

impl GridSpec {
    fn spiral_default() -> Self {
        Self {
            state_lo: vec![-10.0, -10.0],
            state_hi: vec![10.0, 10.0],
            state_counts: vec![41, 41],
            action_lo: vec![-5.0],
            action_hi: vec![5.0],
            action_counts: vec![21],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    pub source: DensitySource,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySource {
    /// The same density on every cell.
    Uniform,
    Analytic { law: LawSpec },
    Histogram { data: DataSpec },
    GaussianKde {
        #[serde(default)]
        bandwidth: Bandwidth,
        data: DataSpec,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LawSpec {
    ZeroMeanGaussian {
        sigma: f64,
    },
    /// Without `gain`, the LQR gain of the system for `Q = I`, `R = 1`.
    LqrMeanGaussian {
        sigma: f64,
        #[serde(default)]
        gain: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        state_sigma: Option<f64>,
    },
    Toric {
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "one")]
        sigma_r: f64,
        #[serde(default = "one")]
        sigma_a: f64,
    },
    /// The chain's own construction; only valid for the chain system.
    ChainTable,
}

fn default_rho() -> f64 {
    5.0
}
fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    Sample { law: LawSpec, n_samples: usize },
    /// A dataset CSV; relative paths are taken from the config's directory.
    File { path: PathBuf },
}

/// Settings shared by `mpc` and `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    #[serde(default)]
    pub planner: Option<MpcConfig>,
    /// Planning dynamics; the true system when absent.
    #[serde(default)]
    pub model: Option<SystemSpec>,
    #[serde(default)]
    pub failure: Option<FailureRule>,
    /// Candidates drawn from the action grid nodes instead of the action box.
    #[serde(default)]
    pub discrete_actions: Option<bool>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Dataset size for percentile thresholds when the density has no dataset.
    #[serde(default = "default_threshold_samples")]
    pub threshold_samples: usize,
}

fn default_steps() -> usize {
    100
}
fn default_threshold_samples() -> usize {
    2000
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self {
            planner: None,
            model: None,
            failure: None,
            discrete_actions: None,
            steps: default_steps(),
            threshold_samples: default_threshold_samples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    /// Field checked as the LDM; the solved or loaded LDM when absent.
    #[serde(default)]
    pub ldm: Option<PathBuf>,
    #[serde(default)]
    pub energy: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_slack")]
    pub slack: f64,
}

fn default_slack() -> f64 {
    1e-8
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self { ldm: None, energy: None, thresholds: Vec::new(), slack: default_slack() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSpec {
    /// `-log c` directly.
    Value(f64),
    /// Percentile of the constraint values on the reference dataset.
    Percentile(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintEntry {
    pub kind: ConstraintKind,
    #[serde(default)]
    pub threshold: Option<ThresholdSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSpec {
    #[serde(default = "default_constraints")]
    pub constraints: Vec<ConstraintEntry>,
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

fn default_constraints() -> Vec<ConstraintEntry> {
    [ConstraintKind::Ldm, ConstraintKind::Density, ConstraintKind::None]
        .into_iter()
        .map(|kind| ConstraintEntry { kind, threshold: None })
        .collect()
}

impl Default for MpcSpec {
    fn default() -> Self {
        Self { constraints: default_constraints(), start: None, seeds: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<ConstraintKind>,
    #[serde(default = "default_percentiles")]
    pub percentiles: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub start: Option<StartRule>,
}

fn default_kinds() -> Vec<ConstraintKind> {
    vec![ConstraintKind::Ldm, ConstraintKind::Density, ConstraintKind::None]
}
fn default_percentiles() -> Vec<f64> {
    vec![10.0, 30.0, 50.0, 70.0, 90.0]
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { kinds: default_kinds(), percentiles: default_percentiles(), seeds: default_seeds(), start: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// `K`, the number of fitted iterations the bound is stated for.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Fitted iteration to audit; without it the exact solve is audited
    /// against itself.
    #[serde(default)]
    pub fitted: Option<FittedSpec>,
}

fn default_gammas() -> Vec<f64> {
    vec![0.9, 0.99]
}
fn default_iterations() -> usize {
    20
}

impl Default for AuditSpec {
    fn default() -> Self {
        Self { gammas: default_gammas(), iterations: default_iterations(), fitted: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedSpec {
    #[serde(default)]
    pub basis: BasisSpec,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Ridge prior. Defaults to the energy sentinel for the one-hot basis,
    /// so cells without data read as out of distribution, and to 0 for RBFs.
    #[serde(default)]
    pub prior: Option<f64>,
    /// Training transitions, from the density's dataset or its law.
    #[serde(default = "default_threshold_samples")]
    pub n_samples: usize,
}

fn default_ridge() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisSpec {
    /// Indicator of the nearest grid node.
    #[default]
    OneHot,
    /// Gaussian bumps on a lattice of about 400 centers.
    Rbf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSpec {
    /// Thresholds for the level-set table; ten values spanning the finite
    /// LDM range when empty.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    /// Equilibrium `(state, action)` for CLF extraction.
    #[serde(default)]
    pub clf: Option<ClfSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfSpec {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

/// Reads and parses a config, naming the offending field and position on
/// failure.
pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        // The inner message already ends with the line and column.
        bad(format!("{}: invalid config at `{}`: {}", path.display(), e.path(), e.inner()))
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    absolutize_paths(&mut cfg, &base)?;
    Ok(cfg)
}

fn absolutize(p: &mut PathBuf, base: &Path) -> anyhow::Result<()> {
    if p.is_relative() {
        *p = base.join(&*p);
    }
    *p = std::path::absolute(&*p).map_err(|e| bad(format!("{}: {e}", p.display())))?;
    Ok(())
}

fn absolutize_paths(cfg: &mut RunConfig, base: &Path) -> anyhow::Result<()> {
    for p in [cfg.artifacts.as_mut(), cfg.out.as_mut()].into_iter().flatten() {
        absolutize(p, base)?;
    }
    match &mut cfg.density.source {
        DensitySource::Histogram { data: DataSpec::File { path } }
        | DensitySource::GaussianKde { data: DataSpec::File { path }, .. } => absolutize(path, base)?,
        _ => {}
    }
    if let Some(v) = cfg.verify.as_mut() {
        for p in [v.ldm.as_mut(), v.energy.as_mut()].into_iter().flatten() {
            absolutize(p, base)?;
        }
    }
    Ok(())
}

/// Fills every default that depends on the system so that the resolved
/// config reproduces the run without consulting any default.
pub fn resolve(cfg: &mut RunConfig) -> anyhow::Result<()> {
    resolve_system(&mut cfg.system, cfg.seed)?;
    match &cfg.system {
        SystemSpec::Spiral { .. } => {
            if cfg.grid.is_none() {
                cfg.grid = Some(GridSpec::spiral_default());
            }
        }
        _ => {
            if cfg.grid.is_some() {
                return Err(bad("`grid` is only used by the spiral; chain and tabular systems define their own"));
            }
        }
    }
    cfg.solver.validate().map_err(|e| bad(format!("solver: {e}")))?;
    if !(cfg.density.floor > 0.0 && cfg.density.floor < 1.0) {
        return Err(bad(format!("density.floor must lie in (0, 1), got {}", cfg.density.floor)));
    }
    let system = cfg.system.clone();
    match &mut cfg.density.source {
        DensitySource::Uniform => {}
        DensitySource::Analytic { law } => resolve_law(law, &system)?,
        DensitySource::Histogram { data } | DensitySource::GaussianKde { data, .. } => {
            if let DataSpec::Sample { law, n_samples } = data {
                resolve_law(law, &system)?;
                if *n_samples == 0 {
                    return Err(bad("density.source.data.n_samples must be at least 1"));
                }
            }
        }
    }
    Ok(())
}

fn resolve_system(spec: &mut SystemSpec, seed: u64) -> anyhow::Result<()> {
    match spec {
        SystemSpec::Spiral { beta, omega, dt } => {
            LinearSpiralSystem::new(*beta, *omega, *dt).map_err(|e| bad(format!("system: {e}")))?;
        }
        SystemSpec::Chain { h, k, epsilon } => {
            ChainSystem::new(*h, *k, *epsilon).map_err(|e| bad(format!("system: {e}")))?;
        }
        SystemSpec::Tabular { n_states, n_actions, next } => {
            if *n_states == 0 || *n_actions == 0 {
                return Err(bad("system: tabular systems need at least one state and one action"));
            }
            let table = match next.take() {
                Some(t) => t,
                None => {
                    let random = TabularSystem::random(*n_states, *n_actions, seed);
                    use ldm_core::systems::FiniteSystem;
                    (0..n_states.saturating_mul(*n_actions))
                        .map(|i| random.successor(i / *n_actions, i % *n_actions))
                        .collect()
                }
            };
            TabularSystem::new(*n_states, *n_actions, table.clone()).map_err(|e| bad(format!("system: {e}")))?;
            *next = Some(table);
        }
    }
    Ok(())
}

fn resolve_law(law: &mut LawSpec, system: &SystemSpec) -> anyhow::Result<()> {
    match (law, system) {
        (LawSpec::LqrMeanGaussian { gain: gain @ None, .. }, SystemSpec::Spiral { beta, omega, dt }) => {
            let sys = LinearSpiralSystem::new(*beta, *omega, *dt)?.to_linear();
            let lqr = solve_lqr(sys.f(), sys.g(), &DMatrix::identity(2, 2), &DMatrix::identity(1, 1))
                .map_err(|e| bad(format!("LQR gain: {e}")))?;
            *gain = Some((0..lqr.gain.nrows()).map(|r| lqr.gain.row(r).iter().copied().collect()).collect());
            Ok(())
        }
        (LawSpec::LqrMeanGaussian { gain: None, .. }, _) => {
            Err(bad("lqr-mean-gaussian needs an explicit `gain` unless the system is the spiral"))
        }
        (LawSpec::ChainTable, SystemSpec::Chain { .. }) => Ok(()),
        (LawSpec::ChainTable, _) => Err(bad("chain-table laws need the chain system")),
        _ => Ok(()),
    }
}

/// Defaults of the control section for `system`.
pub fn resolve_control(
    spec: &mut ControlSpec,
    system: &SystemSpec,
    state_dim: usize,
    action_nodes: &[Vec<f64>],
) -> anyhow::Result<()> {
    if spec.planner.is_none() {
        spec.planner = Some(match system {
            SystemSpec::Chain { h, .. } => MpcConfig::new(*h as usize, 1024, Reward::Action),
            SystemSpec::Spiral { .. } => MpcConfig::new(1, 1024, Reward::GoalDistance { goal: vec![0.0; state_dim] }),
            SystemSpec::Tabular { .. } => MpcConfig::new(1, 1024, Reward::Action),
        });
    }
    if let Some(p) = &spec.planner {
        p.validate().map_err(|e| bad(format!("control.planner: {e}")))?;
    }
    if spec.model.is_none() {
        spec.model = Some(system.clone());
    }
    if let Some(model) = spec.model.as_mut() {
        resolve_system(model, 0)?;
    }
    if spec.failure.is_none() {
        spec.failure = Some(match system {
            SystemSpec::Chain { .. } => FailureRule::ZeroDensity { actions: action_nodes.to_vec() },
            _ => FailureRule::Never,
        });
    }
    if spec.discrete_actions.is_none() {
        spec.discrete_actions = Some(!matches!(system, SystemSpec::Spiral { .. }));
    }
    Ok(())
}
