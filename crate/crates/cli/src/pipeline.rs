//! Turns a resolved config into systems, grids and fields.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use ldm_core::density::{build_density, to_energy, AnalyticDensity, DensityConfig, Estimator};
use ldm_core::field::sentinel_for_floor;
use ldm_core::solver::{solve_maximal_ldm, SolveReport, SolverConfig};
use ldm_core::systems::{collect_dataset, collect_from_table, ChainSystem, DataPolicy, Dynamics, LinearSpiralSystem, TabularSystem};
use ldm_core::{Bounds, FieldRole, LdmError, ScalarField, StateActionGrid, TransitionDataset};
use serde_json::{json, Value};

use crate::config::{ConfigError, DataSpec, DensitySource, GridSpec, LawSpec, RunConfig, SystemSpec};

pub enum System {
    Spiral(LinearSpiralSystem),
    Chain(ChainSystem),
    Tabular(TabularSystem),
}

impl System {
    /// Builds a resolved descriptor; tabular tables must be explicit.
    pub fn build(spec: &SystemSpec) -> anyhow::Result<Self> {
        Ok(match spec {
            SystemSpec::Spiral { beta, omega, dt } => System::Spiral(LinearSpiralSystem::new(*beta, *omega, *dt)?),
            SystemSpec::Chain { h, k, epsilon } => System::Chain(ChainSystem::new(*h, *k, *epsilon)?),
            SystemSpec::Tabular { n_states, n_actions, next } => {
                let next = next.clone().ok_or_else(|| ConfigError("tabular system has no successor table".into()))?;
                System::Tabular(TabularSystem::new(*n_states, *n_actions, next)?)
            }
        })
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        match self {
            System::Spiral(s) => s,
            System::Chain(c) => c,
            System::Tabular(t) => t,
        }
    }

    pub fn grid(&self, spec: Option<&GridSpec>) -> anyhow::Result<StateActionGrid> {
        match (self, spec) {
            (System::Chain(c), _) => Ok(c.grid()),
            (System::Tabular(t), _) => Ok(t.index_grid()?),
            (System::Spiral(_), Some(g)) => StateActionGrid::new(
                &g.state_lo,
                &g.state_hi,
                &g.state_counts,
                &g.action_lo,
                &g.action_hi,
                &g.action_counts,
            )
            .map_err(|e| ConfigError(format!("grid: {e}")).into()),
            (System::Spiral(_), None) => Err(ConfigError("the spiral needs a grid".into()).into()),
        }
    }
}

/// A resolved law as the core's analytic density.
fn analytic(law: &LawSpec, system: &SystemSpec) -> anyhow::Result<AnalyticDensity> {
    Ok(match law.clone() {
        LawSpec::ZeroMeanGaussian { sigma } => AnalyticDensity::ZeroMeanGaussian { sigma },
        LawSpec::LqrMeanGaussian { sigma, gain, state_sigma } => AnalyticDensity::LqrMeanGaussian {
            sigma,
            gain: gain.ok_or_else(|| ConfigError("unresolved LQR gain".into()))?,
            state_sigma,
        },
        LawSpec::Toric { rho, sigma_r, sigma_a } => AnalyticDensity::Toric { rho, sigma_r, sigma_a },
        LawSpec::ChainTable => match system {
            SystemSpec::Chain { h, k, epsilon } => AnalyticDensity::ChainTable { h: *h, k: *k, epsilon: *epsilon },
            _ => return Err(ConfigError("chain-table laws need the chain system".into()).into()),
        },
    })
}

fn data_policy(law: &AnalyticDensity) -> Option<DataPolicy> {
    Some(match law.clone() {
        AnalyticDensity::ZeroMeanGaussian { sigma } => DataPolicy::ZeroMeanGaussian { sigma },
        AnalyticDensity::LqrMeanGaussian { sigma, gain, state_sigma } => {
            DataPolicy::LqrMeanGaussian { sigma, gain, state_sigma }
        }
        AnalyticDensity::Toric { rho, sigma_r, sigma_a } => DataPolicy::Toric { rho, sigma_r, sigma_a },
        AnalyticDensity::ChainTable { .. } => return None,
    })
}

/// Fails with a config error naming `path` when it does not exist.
pub fn require_file(path: &Path) -> anyhow::Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(ConfigError(format!("missing artifact: {}", path.display())).into())
    }
}

pub fn read_field(path: &Path) -> anyhow::Result<ScalarField> {
    ScalarField::read(require_file(path)?).with_context(|| format!("reading {}", path.display()))
}

pub struct Pipeline {
    pub config: RunConfig,
    pub system: System,
    pub grid: Arc<StateActionGrid>,
    /// The dataset the density was estimated from, if any.
    pub dataset: Option<TransitionDataset>,
    pub density: ScalarField,
    pub energy: ScalarField,
}

impl Pipeline {
    /// Builds the density and energy, or loads them from `artifacts`.
    pub fn build(config: RunConfig) -> anyhow::Result<Self> {
        let system = System::build(&config.system)?;
        let grid = Arc::new(system.grid(config.grid.as_ref())?);
        let interp = config.solver.interpolation;
        let floor = config.density.floor;
        let dataset = match &config.density.source {
            DensitySource::Histogram { data } | DensitySource::GaussianKde { data, .. } => {
                Some(load_data(data, &config, &system, &grid)?)
            }
            _ => None,
        };
        let (density, energy) = match &config.artifacts {
            Some(dir) => {
                let density = read_field(&dir.join("density.csv"))?;
                let energy = read_field(&dir.join("energy.csv"))?;
                for f in [&density, &energy] {
                    if f.grid() != &*grid {
                        return Err(LdmError::GridMismatch)
                            .with_context(|| format!("artifacts in {} do not match the configured grid", dir.display()));
                    }
                }
                density.require_role(&[FieldRole::Density])?;
                energy.require_role(&[FieldRole::Energy])?;
                (density, energy)
            }
            None => {
                let density = match &config.density.source {
                    DensitySource::Uniform => {
                        let sentinel = sentinel_for_floor(floor);
                        ScalarField::constant(grid.clone(), 1.0 / grid.len() as f64, FieldRole::Density, sentinel)?
                    }
                    DensitySource::Analytic { law } => {
                        let law = analytic(law, &config.system)?;
                        let cfg = DensityConfig { estimator: Estimator::Analytic { law }, floor };
                        build_density(&cfg, None, grid.clone())?
                    }
                    DensitySource::Histogram { .. } => {
                        let cfg = DensityConfig { estimator: Estimator::Histogram, floor };
                        build_density(&cfg, dataset.as_ref(), grid.clone())?
                    }
                    DensitySource::GaussianKde { bandwidth, .. } => {
                        let cfg = DensityConfig { estimator: Estimator::GaussianKde { bandwidth: *bandwidth }, floor };
                        build_density(&cfg, dataset.as_ref(), grid.clone())?
                    }
                };
                let energy = to_energy(&density, floor)?;
                (density, energy)
            }
        };
        Ok(Self {
            system,
            grid,
            dataset,
            density: density.with_interpolation(interp),
            energy: energy.with_interpolation(interp),
            config,
        })
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.system.dynamics()
    }

    pub fn solve_with(&self, solver: &SolverConfig) -> ldm_core::Result<(ScalarField, SolveReport)> {
        solve_maximal_ldm(&self.energy, self.dynamics(), solver)
    }

    /// The LDM from `artifacts`, or a fresh solve.
    pub fn ldm(&self) -> anyhow::Result<ScalarField> {
        match &self.config.artifacts {
            Some(dir) => {
                let g = read_field(&dir.join("ldm.csv"))?;
                g.check_same_grid(&self.energy)
                    .with_context(|| format!("{} does not match the energy grid", dir.join("ldm.csv").display()))?;
                Ok(g)
            }
            None => Ok(self.solve_with(&self.config.solver)?.0),
        }
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::from_grid(&self.grid)
    }

    pub fn action_nodes(&self) -> Vec<Vec<f64>> {
        (0..self.grid.n_actions()).map(|a| self.grid.action_coords(a)).collect()
    }

    /// Samples distributed like the density: the estimator's own data, or
    /// `n` draws from the analytic law, the chain table or the uniform cell
    /// law, all from the run seed.
    pub fn reference_dataset(&self, n: usize) -> anyhow::Result<TransitionDataset> {
        if let Some(d) = &self.dataset {
            return Ok(d.clone());
        }
        let seed = self.config.seed;
        match &self.config.density.source {
            DensitySource::Analytic { law } => sample_law(law, n, &self.config, &self.system, &self.grid),
            _ => {
                let table: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..self.grid.len())
                    .map(|cell| {
                        let (s, a) = self.grid.cell_to_coords(cell).expect("cell in range");
                        (s, a, 1.0)
                    })
                    .collect();
                Ok(collect_from_table(self.dynamics(), &table, n, seed, json!({"kind": "uniform-cells"}))?)
            }
        }
    }

    /// Sidecar metadata: the run config without output locations, plus
    /// notes on parameter values chosen here rather than taken from a
    /// published source.
    pub fn metadata(&self) -> Value {
        let mut cfg = serde_json::to_value(&self.config).expect("config serializes");
        if let Some(obj) = cfg.as_object_mut() {
            obj.remove("out");
        }
        let mut notes = Vec::new();
        if let SystemSpec::Spiral { beta, omega, dt } = self.config.system {
            if (beta, omega, dt)
                == (ldm_core::systems::DEFAULT_BETA, ldm_core::systems::DEFAULT_OMEGA, ldm_core::systems::DEFAULT_DT)
            {
                notes.push("spiral beta, omega and dt are this implementation's defaults, not published values");
            }
        }
        if serde_json::to_string(&self.config.density).is_ok_and(|s| s.contains("\"toric\"")) {
            notes.push("the toric density's functional form is this implementation's choice");
        }
        json!({ "config": cfg, "notes": notes })
    }

    pub fn write_field(&self, dir: &Path, name: &str, field: &ScalarField) -> anyhow::Result<PathBuf> {
        let path = dir.join(name);
        field.write(&path, self.metadata()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn sample_law(
    law: &LawSpec,
    n: usize,
    config: &RunConfig,
    system: &System,
    grid: &StateActionGrid,
) -> anyhow::Result<TransitionDataset> {
    let law = analytic(law, &config.system)?;
    let descriptor = serde_json::to_value(&law)?;
    match (&law, system) {
        (AnalyticDensity::ChainTable { .. }, System::Chain(c)) => {
            let table: Vec<_> = c.support().into_iter().map(|(s, a, p)| (vec![s as f64], vec![a as f64], p)).collect();
            Ok(collect_from_table(c, &table, n, config.seed, descriptor)?)
        }
        _ => {
            let policy = data_policy(&law).ok_or_else(|| ConfigError("chain-table laws need the chain system".into()))?;
            Ok(collect_dataset(system.dynamics(), &policy, &Bounds::from_grid(grid), n, config.seed)?)
        }
    }
}

fn load_data(data: &DataSpec, config: &RunConfig, system: &System, grid: &StateActionGrid) -> anyhow::Result<TransitionDataset> {
    match data {
        DataSpec::Sample { law, n_samples } => sample_law(law, *n_samples, config, system, grid),
        DataSpec::File { path } => {
            let bounds = Bounds::from_grid(grid);
            TransitionDataset::read_csv(require_file(path)?, Some(&bounds))
                .with_context(|| format!("reading dataset {}", path.display()))
        }
    }
}
