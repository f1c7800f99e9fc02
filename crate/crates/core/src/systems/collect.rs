//! Data-collection laws and dataset generation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dynamics;
use crate::dataset::{Bounds, DatasetMeta, TransitionDataset};
use crate::error::{LdmError, Result};
use crate::rng::substream;

/// Average redraws per sample tolerated before giving up.
const MAX_REJECTIONS_PER_SAMPLE: u64 = 10_000;

/// Joint law of the `(s, a)` pairs in a dataset. States are uniform over
/// the bounds unless stated otherwise and actions are Gaussian. A pair that
/// lands outside the bounds is redrawn as a whole, so the law is the
/// untruncated one conditioned on the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataPolicy {
    ZeroMeanGaussian {
        sigma: f64,
    },
    /// Actions centred on `-gain * s`. With `state_sigma` the states follow
    /// a centred Gaussian instead of a uniform law.
    LqrMeanGaussian {
        sigma: f64,
        gain: Vec<Vec<f64>>,
        #[serde(default)]
        state_sigma: Option<f64>,
    },
    /// States concentrated on the ring `|s| = rho`.
    Toric {
        rho: f64,
        sigma_r: f64,
        sigma_a: f64,
    },
}

impl DataPolicy {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LdmError::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            DataPolicy::ZeroMeanGaussian { sigma } => positive("sigma", *sigma),
            DataPolicy::LqrMeanGaussian { sigma, gain, state_sigma } => {
                positive("sigma", *sigma)?;
                if let Some(ss) = state_sigma {
                    positive("state_sigma", *ss)?;
                }
                if gain.is_empty() || gain.iter().any(|r| r.len() != gain[0].len()) {
                    return Err(LdmError::InvalidParameter("gain must be a nonempty rectangular matrix".into()));
                }
                Ok(())
            }
            DataPolicy::Toric { rho, sigma_r, sigma_a } => {
                if !(*rho >= 0.0) {
                    return Err(LdmError::InvalidParameter(format!("rho must be nonnegative, got {rho}")));
                }
                positive("sigma_r", *sigma_r)?;
                positive("sigma_a", *sigma_a)
            }
        }
    }

    pub fn action_sigma(&self) -> f64 {
        match self {
            DataPolicy::ZeroMeanGaussian { sigma } | DataPolicy::LqrMeanGaussian { sigma, .. } => *sigma,
            DataPolicy::Toric { sigma_a, .. } => *sigma_a,
        }
    }

    /// Untruncated mean of the action at `state`.
    pub fn mean_action(&self, state: &[f64], action_dim: usize) -> Vec<f64> {
        match self {
            DataPolicy::LqrMeanGaussian { gain, .. } => gain
                .iter()
                .map(|row| -row.iter().zip(state).map(|(k, s)| k * s).sum::<f64>())
                .collect(),
            _ => vec![0.0; action_dim],
        }
    }

    /// Draws a state from the proposal law, before the joint bounds check.
    fn propose_state<R: Rng>(&self, rng: &mut R, bounds: &Bounds, out: &mut [f64]) {
        match self {
            DataPolicy::LqrMeanGaussian { state_sigma: Some(ss), .. } => {
                for x in out.iter_mut() {
                    *x = ss * rng.sample::<f64, _>(StandardNormal);
                }
            }
            DataPolicy::Toric { rho, sigma_r, .. } => loop {
                uniform_box(rng, &bounds.state_lo, &bounds.state_hi, out);
                if rng.random::<f64>() < ring_weight(out, *rho, *sigma_r) {
                    break;
                }
            },
            _ => uniform_box(rng, &bounds.state_lo, &bounds.state_hi, out),
        }
    }

    /// Unnormalized state weight of the law inside the bounds.
    pub fn state_weight(&self, state: &[f64]) -> f64 {
        match self {
            DataPolicy::LqrMeanGaussian { state_sigma: Some(ss), .. } => {
                (-state.iter().map(|x| x * x).sum::<f64>() / (2.0 * ss * ss)).exp()
            }
            DataPolicy::Toric { rho, sigma_r, .. } => ring_weight(state, *rho, *sigma_r),
            _ => 1.0,
        }
    }

    /// True when the state weight is constant over the box.
    pub fn uniform_states(&self) -> bool {
        matches!(
            self,
            DataPolicy::ZeroMeanGaussian { .. } | DataPolicy::LqrMeanGaussian { state_sigma: None, .. }
        )
    }
}

fn ring_weight(state: &[f64], rho: f64, sigma_r: f64) -> f64 {
    let r = state.iter().map(|x| x * x).sum::<f64>().sqrt();
    (-(r - rho).powi(2) / (2.0 * sigma_r * sigma_r)).exp()
}

fn uniform_box<R: Rng>(rng: &mut R, lo: &[f64], hi: &[f64], out: &mut [f64]) {
    for (d, x) in out.iter_mut().enumerate() {
        *x = lo[d] + (hi[d] - lo[d]) * rng.random::<f64>();
    }
}

/// Samples `n` transitions from `policy` and the true `system`.
pub fn collect_dataset(
    system: &dyn Dynamics,
    policy: &DataPolicy,
    bounds: &Bounds,
    n_samples: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    policy.validate()?;
    if n_samples == 0 {
        return Err(LdmError::InvalidParameter("n_samples must be at least 1".into()));
    }
    let (ds, da) = (system.state_dim(), system.action_dim());
    if bounds.state_lo.len() != ds || bounds.action_lo.len() != da {
        return Err(LdmError::DimensionMismatch { expected: ds, got: bounds.state_lo.len() });
    }
    let meta = DatasetMeta {
        policy: serde_json::to_value(policy)?,
        seed: Some(seed),
        bounds: Some(bounds.clone()),
    };
    let mut data = TransitionDataset::new(ds, da, meta);
    let mut rng = substream(seed, "dataset");
    let sigma = policy.action_sigma();
    let (mut s, mut a, mut sp) = (vec![0.0; ds], vec![0.0; da], vec![0.0; ds]);
    let budget = MAX_REJECTIONS_PER_SAMPLE.saturating_mul(n_samples as u64 + 1);
    let mut rejected = 0u64;
    for _ in 0..n_samples {
        loop {
            policy.propose_state(&mut rng, bounds, &mut s);
            let mean = policy.mean_action(&s, da);
            for d in 0..da {
                a[d] = mean[d] + sigma * rng.sample::<f64, _>(StandardNormal);
            }
            if bounds.contains(&s, &a) {
                break;
            }
            rejected += 1;
            if rejected > budget {
                return Err(LdmError::InvalidParameter(
                    "data law puts almost no mass inside the bounds".into(),
                ));
            }
        }
        system.step(&s, &a, &mut sp);
        data.push(&s, &a, &sp)?;
    }
    Ok(data)
}

/// Samples `(s, a)` pairs from a finite weighted table and steps `system`.
pub fn collect_from_table(
    system: &dyn Dynamics,
    table: &[(Vec<f64>, Vec<f64>, f64)],
    n_samples: usize,
    seed: u64,
    policy: serde_json::Value,
) -> Result<TransitionDataset> {
    if table.is_empty() {
        return Err(LdmError::Empty("sampling table".into()));
    }
    let weights = WeightedIndex::new(table.iter().map(|t| t.2))
        .map_err(|e| LdmError::InvalidParameter(format!("table weights: {e}")))?;
    let meta = DatasetMeta { policy, seed: Some(seed), bounds: None };
    let mut data = TransitionDataset::new(system.state_dim(), system.action_dim(), meta);
    let mut rng = substream(seed, "dataset");
    for _ in 0..n_samples {
        let (s, a, _) = &table[weights.sample(&mut rng)];
        data.push(s, a, &system.next_state(s, a))?;
    }
    Ok(data)
}
