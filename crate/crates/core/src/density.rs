//! Densities on the grid: histogram and kernel estimates, closed-form laws,
//! and conversion to energy `E = -log P`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::dataset::{Bounds, TransitionDataset};
use crate::error::{LdmError, Result};
use crate::field::{sentinel_for_floor, FieldRole, ScalarField, DEFAULT_FLOOR};
use crate::grid::StateActionGrid;
use crate::systems::{ChainSystem, DataPolicy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// `h_d = n^{-1/(d+4)} * std_d`.
    #[default]
    Scott,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Estimator {
    Histogram,
    GaussianKde {
        #[serde(default)]
        bandwidth: Bandwidth,
    },
    Analytic {
        law: AnalyticDensity,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub estimator: Estimator,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(LdmError::InvalidParameter(format!("density floor must be in (0, 1), got {}", self.floor)));
        }
        if let Estimator::GaussianKde { bandwidth: Bandwidth::Fixed(h) } = self.estimator {
            if !(h > 0.0 && h.is_finite()) {
                return Err(LdmError::InvalidParameter(format!("bandwidth must be positive, got {h}")));
            }
        }
        Ok(())
    }

    pub fn sentinel(&self) -> f64 {
        sentinel_for_floor(self.floor)
    }
}

/// Builds the density field the config describes. Estimators need a dataset;
/// analytic laws ignore it.
pub fn build_density(
    config: &DensityConfig,
    dataset: Option<&TransitionDataset>,
    grid: Arc<StateActionGrid>,
) -> Result<ScalarField> {
    config.validate()?;
    match &config.estimator {
        Estimator::Analytic { law } => analytic_density(law, grid, config.sentinel()),
        _ => {
            let data = dataset.ok_or_else(|| LdmError::Empty("estimator needs a dataset".into()))?;
            estimate_density(data, grid, config)
        }
    }
}

pub fn estimate_density(
    data: &TransitionDataset,
    grid: Arc<StateActionGrid>,
    config: &DensityConfig,
) -> Result<ScalarField> {
    config.validate()?;
    if data.is_empty() {
        return Err(LdmError::Empty("dataset has no records".into()));
    }
    if data.state_dim() != grid.state_dim() || data.action_dim() != grid.action_dim() {
        return Err(LdmError::DimensionMismatch {
            expected: grid.state_dim() + grid.action_dim(),
            got: data.state_dim() + data.action_dim(),
        });
    }
    let values = match config.estimator {
        Estimator::Histogram => histogram(data, &grid)?,
        Estimator::GaussianKde { bandwidth } => kde(data, &grid, bandwidth)?,
        Estimator::Analytic { .. } => {
            return Err(LdmError::InvalidParameter("analytic laws are evaluated, not estimated".into()))
        }
    };
    ScalarField::new(grid, values, FieldRole::Density, config.sentinel())
}

fn axes(grid: &StateActionGrid) -> Vec<crate::grid::Axis> {
    grid.state_axes().iter().chain(grid.action_axes()).cloned().collect()
}

fn point(data: &TransitionDataset, i: usize) -> Vec<f64> {
    data.state(i).iter().chain(data.action(i)).copied().collect()
}

/// Node `j` of an axis owns the `j`-th of `count` equal-width bins.
fn histogram(data: &TransitionDataset, grid: &StateActionGrid) -> Result<Vec<f64>> {
    let axes = axes(grid);
    let mut counts = vec![0u64; grid.len()];
    for i in 0..data.len() {
        let x = point(data, i);
        let mut flat = 0usize;
        for (ax, v) in axes.iter().zip(&x) {
            let bin = if ax.count == 1 {
                ax.locate(*v).map(|_| 0)
            } else if *v >= ax.lo && *v <= ax.hi {
                let w = (ax.hi - ax.lo) / ax.count as f64;
                Some((((v - ax.lo) / w).floor() as usize).min(ax.count - 1))
            } else {
                None
            };
            let bin = bin.ok_or(LdmError::RecordOutOfBounds { row: i })?;
            flat = flat * ax.count + bin;
        }
        counts[flat] += 1;
    }
    let n = data.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

fn kde(data: &TransitionDataset, grid: &StateActionGrid, bandwidth: Bandwidth) -> Result<Vec<f64>> {
    let axes = axes(grid);
    let d = axes.len();
    let n = data.len();
    let h: Vec<f64> = match bandwidth {
        Bandwidth::Fixed(h) => vec![h; d],
        Bandwidth::Scott => {
            let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
            (0..d)
                .map(|k| {
                    let col: Vec<f64> = (0..n).map(|i| point(data, i)[k]).collect();
                    let mean = col.iter().sum::<f64>() / n as f64;
                    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
                    factor * var.sqrt()
                })
                .collect()
        }
    };
    if let Some(k) = h.iter().position(|v| !(*v > 0.0)) {
        return Err(LdmError::InvalidParameter(format!(
            "zero bandwidth on dimension {k}: the data do not vary along it"
        )));
    }
    // Kernels are truncated at 6 bandwidths; the neglected mass is below 2e-9.
    const CUTOFF: f64 = 6.0;
    let std = Normal::standard();
    let mut out = vec![0.0; grid.len()];
    let mut ranges = vec![(0usize, 0usize); d];
    let mut weights: Vec<Vec<f64>> = vec![Vec::new(); d];
    for i in 0..n {
        let x = point(data, i);
        let mut empty = false;
        for k in 0..d {
            let ax = &axes[k];
            let sp = ax.spacing();
            let (lo_i, hi_i) = if ax.count == 1 {
                (0, 0)
            } else {
                let lo = ((x[k] - CUTOFF * h[k] - ax.lo) / sp).ceil().max(0.0);
                let hi = ((x[k] + CUTOFF * h[k] - ax.lo) / sp).floor().min((ax.count - 1) as f64);
                if lo > hi {
                    empty = true;
                    break;
                }
                (lo as usize, hi as usize)
            };
            ranges[k] = (lo_i, hi_i);
            weights[k] = (lo_i..=hi_i).map(|j| std.pdf((ax.node(j) - x[k]) / h[k]) / h[k]).collect();
        }
        if empty {
            continue;
        }
        scatter(&axes, &ranges, &weights, 0, 0, 1.0, &mut out);
    }
    for v in &mut out {
        *v /= n as f64;
    }
    Ok(out)
}

fn scatter(
    axes: &[crate::grid::Axis],
    ranges: &[(usize, usize)],
    weights: &[Vec<f64>],
    k: usize,
    flat: usize,
    w: f64,
    out: &mut [f64],
) {
    if k == axes.len() {
        out[flat] += w;
        return;
    }
    let (lo, hi) = ranges[k];
    for j in lo..=hi {
        scatter(axes, ranges, weights, k + 1, flat * axes[k].count + j, w * weights[k][j - lo], out);
    }
}

/// Closed-form densities of the built-in data laws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalyticDensity {
    ZeroMeanGaussian {
        sigma: f64,
    },
    LqrMeanGaussian {
        sigma: f64,
        gain: Vec<Vec<f64>>,
        #[serde(default)]
        state_sigma: Option<f64>,
    },
    Toric {
        rho: f64,
        sigma_r: f64,
        sigma_a: f64,
    },
    ChainTable {
        h: i64,
        k: i64,
        epsilon: f64,
    },
}

impl From<&DataPolicy> for AnalyticDensity {
    fn from(p: &DataPolicy) -> Self {
        match p.clone() {
            DataPolicy::ZeroMeanGaussian { sigma } => AnalyticDensity::ZeroMeanGaussian { sigma },
            DataPolicy::LqrMeanGaussian { sigma, gain, state_sigma } => {
                AnalyticDensity::LqrMeanGaussian { sigma, gain, state_sigma }
            }
            DataPolicy::Toric { rho, sigma_r, sigma_a } => AnalyticDensity::Toric { rho, sigma_r, sigma_a },
        }
    }
}

impl From<&ChainSystem> for AnalyticDensity {
    fn from(c: &ChainSystem) -> Self {
        AnalyticDensity::ChainTable { h: c.h, k: c.k, epsilon: c.epsilon }
    }
}

impl AnalyticDensity {
    /// Parses `{"kind": ..., params...}`, reporting unknown kinds by name.
    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let kind = value.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
        const KNOWN: [&str; 4] = ["zero-mean-gaussian", "lqr-mean-gaussian", "toric", "chain-table"];
        if !KNOWN.contains(&kind.as_str()) {
            return Err(LdmError::UnknownKind(kind));
        }
        Ok(serde_json::from_value(value)?)
    }

    fn policy(&self) -> Option<DataPolicy> {
        Some(match self.clone() {
            AnalyticDensity::ZeroMeanGaussian { sigma } => DataPolicy::ZeroMeanGaussian { sigma },
            AnalyticDensity::LqrMeanGaussian { sigma, gain, state_sigma } => {
                DataPolicy::LqrMeanGaussian { sigma, gain, state_sigma }
            }
            AnalyticDensity::Toric { rho, sigma_r, sigma_a } => DataPolicy::Toric { rho, sigma_r, sigma_a },
            AnalyticDensity::ChainTable { .. } => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AnalyticDensity::ChainTable { h, k, epsilon } => ChainSystem::new(*h, *k, *epsilon).map(|_| ()),
            _ => self.policy().expect("non-chain law").validate(),
        }
    }

    /// Resolves the normalizing constant of the law over `bounds`.
    pub fn prepare(&self, bounds: &Bounds) -> Result<PreparedLaw> {
        self.validate()?;
        let policy = self.policy();
        let normalizer = match &policy {
            None => 1.0,
            Some(p) => {
                if let DataPolicy::Toric { .. } = p {
                    if bounds.state_lo.len() != 2 {
                        return Err(LdmError::InvalidParameter("toric density is defined on 2-D states".into()));
                    }
                }
                if let DataPolicy::LqrMeanGaussian { gain, .. } = p {
                    if gain.len() != bounds.action_lo.len() || gain[0].len() != bounds.state_lo.len() {
                        return Err(LdmError::DimensionMismatch {
                            expected: bounds.action_lo.len() * bounds.state_lo.len(),
                            got: gain.len() * gain[0].len(),
                        });
                    }
                }
                normalizer(p, bounds)
            }
        };
        if !(normalizer > 0.0 && normalizer.is_finite()) {
            return Err(LdmError::InvalidParameter("data law puts no mass inside the bounds".into()));
        }
        Ok(PreparedLaw { law: self.clone(), policy, bounds: bounds.clone(), normalizer })
    }

    /// Density at `(state, action)`; zero outside `bounds`. Prefer
    /// [`AnalyticDensity::prepare`] when evaluating many points.
    pub fn pdf(&self, state: &[f64], action: &[f64], bounds: &Bounds) -> Result<f64> {
        Ok(self.prepare(bounds)?.pdf(state, action))
    }
}

/// An analytic law bound to a box, with its normalizing constant.
#[derive(Clone, Debug)]
pub struct PreparedLaw {
    law: AnalyticDensity,
    policy: Option<DataPolicy>,
    bounds: Bounds,
    normalizer: f64,
}

impl PreparedLaw {
    pub fn law(&self) -> &AnalyticDensity {
        &self.law
    }

    /// Mass of the untruncated law inside the bounds, i.e. the acceptance
    /// rate of the sampler. Always 1 for the chain table.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn pdf(&self, state: &[f64], action: &[f64]) -> f64 {
        let Some(policy) = &self.policy else {
            let AnalyticDensity::ChainTable { h, k, epsilon } = self.law else { unreachable!() };
            let chain = ChainSystem { h, k, epsilon };
            let (s, a) = (state[0].round(), action[0].round());
            if s != state[0] || a != action[0] {
                return 0.0;
            }
            return chain.density(s as i64, a as i64);
        };
        if !self.bounds.contains(state, action) {
            return 0.0;
        }
        let mean = policy.mean_action(state, action.len());
        let sigma = policy.action_sigma();
        let std = Normal::standard();
        let action_part: f64 = (0..action.len()).map(|d| std.pdf((action[d] - mean[d]) / sigma) / sigma).product();
        policy.state_weight(state) * action_part / self.normalizer
    }
}

/// `P(a <= Z <= b)` for a standard normal, accurate deep in either tail.
fn normal_mass(a: f64, b: f64) -> f64 {
    let std = Normal::standard();
    if a > 0.0 {
        std.cdf(-a) - std.cdf(-b)
    } else {
        std.cdf(b) - std.cdf(a)
    }
}

/// Probability that the action of the policy at `state` lands in the bounds.
fn action_acceptance(policy: &DataPolicy, state: &[f64], bounds: &Bounds) -> f64 {
    let mean = policy.mean_action(state, bounds.action_lo.len());
    let sigma = policy.action_sigma();
    (0..mean.len())
        .map(|d| normal_mass((bounds.action_lo[d] - mean[d]) / sigma, (bounds.action_hi[d] - mean[d]) / sigma))
        .product()
}

/// Total evaluations spent on the state integral.
const QUADRATURE_POINTS: f64 = 4.0e6;

/// `Z = int_S w(s) m(s) ds` with `w` the state weight and `m` the action
/// acceptance. Exact when both are constant, midpoint rule otherwise.
fn normalizer(policy: &DataPolicy, bounds: &Bounds) -> f64 {
    let ds = bounds.state_lo.len();
    let widths: Vec<f64> = bounds.state_lo.iter().zip(&bounds.state_hi).map(|(l, h)| h - l).collect();
    let vol: f64 = widths.iter().product();
    if let DataPolicy::ZeroMeanGaussian { .. } = policy {
        return vol * action_acceptance(policy, &bounds.state_lo, bounds);
    }
    let per_axis = (QUADRATURE_POINTS.powf(1.0 / ds as f64).floor() as usize).clamp(8, 2000);
    let total = per_axis.pow(ds as u32);
    let cell = vol / total as f64;
    let mut s = vec![0.0; ds];
    let mut sum = 0.0;
    for flat in 0..total {
        let mut rest = flat;
        for d in (0..ds).rev() {
            let j = rest % per_axis;
            rest /= per_axis;
            s[d] = bounds.state_lo[d] + (j as f64 + 0.5) * widths[d] / per_axis as f64;
        }
        sum += policy.state_weight(&s) * action_acceptance(policy, &s, bounds);
    }
    sum * cell
}

/// Evaluates a closed-form law at every grid node.
pub fn analytic_density(law: &AnalyticDensity, grid: Arc<StateActionGrid>, sentinel: f64) -> Result<ScalarField> {
    let prepared = law.prepare(&Bounds::from_grid(&grid))?;
    ScalarField::from_fn(grid, FieldRole::Density, sentinel, |s, a| prepared.pdf(s, a))
}

/// `E = -log P`, with cells below `floor` mapped to the sentinel
/// `-log(floor) + 100`.
pub fn to_energy(density: &ScalarField, floor: f64) -> Result<ScalarField> {
    density.require_role(&[FieldRole::Density])?;
    if !(floor > 0.0 && floor < 1.0) {
        return Err(LdmError::InvalidParameter(format!("density floor must be in (0, 1), got {floor}")));
    }
    let sentinel = sentinel_for_floor(floor);
    let values = density.values().iter().map(|&p| if p < floor { sentinel } else { -p.ln() }).collect();
    Ok(ScalarField::new(density.grid_arc().clone(), values, FieldRole::Energy, sentinel)?
        .with_interpolation(density.interpolation()))
}
