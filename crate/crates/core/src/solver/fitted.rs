//! Fitted LDM iteration: each backup is projected onto a linear feature
//! space by ridge-regularized least squares over dataset transitions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Bounds, TransitionDataset};
use crate::error::{LdmError, Result};
use crate::field::StateActionFunction;
use crate::grid::StateActionGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureBasis {
    /// Indicator of the nearest node of `grid`.
    OneHot { grid: StateActionGrid },
    /// Gaussian bumps `exp(-|(x - c) / w|^2 / 2)` plus linear and constant terms.
    Rbf {
        state_dim: usize,
        centers: Vec<Vec<f64>>,
        widths: Vec<f64>,
    },
}

impl FeatureBasis {
    /// A lattice of about `n_centers` bumps over the box `[lo, hi]` of joint
    /// `(s, a)` space, `round(n_centers^(1/d))` per axis, widths equal to the
    /// lattice spacing.
    pub fn rbf_lattice(state_dim: usize, lo: &[f64], hi: &[f64], n_centers: usize) -> Result<Self> {
        let d = lo.len();
        if d == 0 || hi.len() != d || state_dim == 0 || state_dim >= d {
            return Err(LdmError::InvalidParameter("RBF lattice needs state and action dimensions".into()));
        }
        let per_axis = ((n_centers as f64).powf(1.0 / d as f64).round() as usize).max(2);
        let widths: Vec<f64> = (0..d).map(|k| (hi[k] - lo[k]) / (per_axis - 1) as f64).collect();
        if widths.iter().any(|w| !(*w > 0.0)) {
            return Err(LdmError::InvalidParameter("RBF lattice box must have positive extent".into()));
        }
        let total = per_axis.pow(d as u32);
        let centers = (0..total)
            .map(|mut flat| {
                let mut c = vec![0.0; d];
                for k in (0..d).rev() {
                    c[k] = lo[k] + (flat % per_axis) as f64 * widths[k];
                    flat /= per_axis;
                }
                c
            })
            .collect();
        Ok(FeatureBasis::Rbf { state_dim, centers, widths })
    }

    pub fn default_for(bounds: &Bounds) -> Result<Self> {
        let lo: Vec<f64> = bounds.state_lo.iter().chain(&bounds.action_lo).copied().collect();
        let hi: Vec<f64> = bounds.state_hi.iter().chain(&bounds.action_hi).copied().collect();
        Self::rbf_lattice(bounds.state_lo.len(), &lo, &hi, 400)
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureBasis::OneHot { grid } => grid.len(),
            FeatureBasis::Rbf { centers, widths, .. } => centers.len() + widths.len() + 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features_into(&self, state: &[f64], action: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match self {
            FeatureBasis::OneHot { grid } => {
                if let Ok(i) = grid.coords_to_cell(state, action) {
                    out[i] = 1.0;
                }
            }
            FeatureBasis::Rbf { centers, widths, .. } => {
                let x = || state.iter().chain(action);
                for (j, c) in centers.iter().enumerate() {
                    let q: f64 = x().zip(c).zip(widths).map(|((v, c), w)| ((v - c) / w).powi(2)).sum();
                    out[j] = (-0.5 * q).exp();
                }
                let m = centers.len();
                for (k, v) in x().enumerate() {
                    out[m + k] = *v;
                }
                out[m + widths.len()] = 1.0;
            }
        }
    }

    /// Weights of the model that predicts `value` everywhere.
    pub fn constant_weights(&self, value: f64) -> Vec<f64> {
        match self {
            FeatureBasis::OneHot { grid } => vec![value; grid.len()],
            FeatureBasis::Rbf { centers, widths, .. } => {
                let mut w = vec![0.0; centers.len() + widths.len() + 1];
                w[centers.len() + widths.len()] = value;
                w
            }
        }
    }

    pub fn features(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.features_into(state, action, &mut out);
        out
    }
}

/// `G(s, a) = w . phi(s, a)`, or the sentinel for states outside `bounds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub basis: FeatureBasis,
    pub weights: Vec<f64>,
    pub bounds: Option<Bounds>,
    pub sentinel: f64,
}

impl LinearModel {
    fn in_domain(&self, state: &[f64]) -> bool {
        match &self.bounds {
            None => true,
            Some(b) => state
                .iter()
                .zip(b.state_lo.iter().zip(&b.state_hi))
                .all(|(x, (lo, hi))| *lo <= *x && *x <= *hi),
        }
    }
}

impl StateActionFunction for LinearModel {
    fn eval(&self, state: &[f64], action: &[f64]) -> f64 {
        if !self.in_domain(state) {
            return self.sentinel;
        }
        match &self.basis {
            FeatureBasis::OneHot { grid } => match grid.coords_to_cell(state, action) {
                Ok(i) => self.weights[i],
                Err(_) => self.sentinel,
            },
            FeatureBasis::Rbf { .. } => {
                let phi = self.basis.features(state, action);
                phi.iter().zip(&self.weights).map(|(p, w)| p * w).sum()
            }
        }
    }

    fn min_over(&self, state: &[f64], actions: &[Vec<f64>]) -> (f64, usize) {
        let FeatureBasis::Rbf { state_dim, centers, widths } = &self.basis else {
            return default_min(self, state, actions);
        };
        if !self.in_domain(state) {
            return (self.sentinel, 0);
        }
        // The bump factorizes into a state part and an action part.
        let ds = *state_dim;
        let m = centers.len();
        let state_part: Vec<f64> = centers
            .iter()
            .map(|c| {
                let q: f64 = (0..ds).map(|k| ((state[k] - c[k]) / widths[k]).powi(2)).sum();
                (-0.5 * q).exp()
            })
            .collect();
        let state_linear: f64 = (0..ds).map(|k| self.weights[m + k] * state[k]).sum::<f64>() + self.weights[m + widths.len()];
        let mut best = (f64::INFINITY, 0);
        for (i, a) in actions.iter().enumerate() {
            let mut v = state_linear;
            for (k, x) in a.iter().enumerate() {
                v += self.weights[m + ds + k] * x;
            }
            for (j, c) in centers.iter().enumerate() {
                let q: f64 = a.iter().enumerate().map(|(k, x)| ((x - c[ds + k]) / widths[ds + k]).powi(2)).sum();
                v += self.weights[j] * state_part[j] * (-0.5 * q).exp();
            }
            if v < best.0 {
                best = (v, i);
            }
        }
        best
    }
}

fn default_min(f: &dyn StateActionFunction, state: &[f64], actions: &[Vec<f64>]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, a) in actions.iter().enumerate() {
        let v = f.eval(state, a);
        if v < best.0 {
            best = (v, i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedConfig {
    pub basis: FeatureBasis,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    pub iterations: usize,
    pub gamma: f64,
    /// The ridge penalty pulls weights toward the constant model with this
    /// value instead of toward zero. With a one-hot basis, cells without
    /// data keep this value.
    #[serde(default)]
    pub prior: f64,
}

fn default_ridge() -> f64 {
    1e-8
}

#[derive(Clone, Debug)]
pub struct FittedLdm {
    /// `G_1..G_K`; for `K = 0` the single entry is the fit of `E`.
    pub models: Vec<LinearModel>,
    /// Root-mean-square fit residual of each iteration on the dataset.
    pub fit_rmse: Vec<f64>,
    /// `max_k` of the fit residuals, a sample proxy for the projection error.
    pub eps_ls_proxy: f64,
}

impl FittedLdm {
    pub fn final_model(&self) -> &LinearModel {
        self.models.last().expect("at least one model is fitted")
    }
}

/// Runs `K` fitted backups from `G_0 = E`. Targets use the dataset's own
/// next states and minimize over `actions`.
pub fn fitted_ldm_iteration(
    data: &TransitionDataset,
    energy: &dyn StateActionFunction,
    actions: &[Vec<f64>],
    config: &FittedConfig,
    bounds: Option<Bounds>,
    sentinel: f64,
) -> Result<FittedLdm> {
    super::validate_gamma(config.gamma)?;
    if data.is_empty() {
        return Err(LdmError::Empty("dataset has no records".into()));
    }
    if actions.is_empty() {
        return Err(LdmError::Empty("action set".into()));
    }
    if !(config.ridge >= 0.0) {
        return Err(LdmError::InvalidParameter(format!("ridge must be nonnegative, got {}", config.ridge)));
    }
    let (n, p) = (data.len(), config.basis.len());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| config.basis.features(data.state(i), data.action(i)))
        .collect();
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    drop(rows);
    let mut normal = x.transpose() * &x;
    for j in 0..p {
        normal[(j, j)] += config.ridge;
    }
    let chol = normal.cholesky().ok_or(LdmError::SingularSystem)?;
    let energies: Vec<f64> = (0..n).map(|i| energy.eval(data.state(i), data.action(i))).collect();

    let w0 = DVector::from_vec(config.basis.constant_weights(config.prior));
    let offset = &x * &w0;
    let fit = |targets: &[f64]| -> (LinearModel, f64) {
        let y = DVector::from_column_slice(targets);
        let w = chol.solve(&(x.transpose() * (&y - &offset))) + &w0;
        let resid = &x * &w - &y;
        let rmse = (resid.norm_squared() / n as f64).sqrt();
        let model = LinearModel {
            basis: config.basis.clone(),
            weights: w.iter().copied().collect(),
            bounds: bounds.clone(),
            sentinel,
        };
        (model, rmse)
    };

    let mut out = FittedLdm { models: Vec::new(), fit_rmse: Vec::new(), eps_ls_proxy: 0.0 };
    if config.iterations == 0 {
        let (m, r) = fit(&energies);
        out.models.push(m);
        out.fit_rmse.push(r);
    }
    for _ in 0..config.iterations {
        let targets: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cont = match out.models.last() {
                    None => energy.min_over(data.next_state(i), actions).0,
                    Some(g) => g.min_over(data.next_state(i), actions).0,
                };
                energies[i].max(config.gamma * cont)
            })
            .collect();
        let (m, r) = fit(&targets);
        out.models.push(m);
        out.fit_rmse.push(r);
    }
    out.eps_ls_proxy = out.fit_rmse.iter().copied().fold(0.0, f64::max);
    Ok(out)
}

/// Backup targets averaged over all recorded next observations of each
/// distinct `(o, a)`; returned per record in dataset order.
pub fn sampled_expected_backup(
    g: &dyn StateActionFunction,
    e: &dyn StateActionFunction,
    data: &TransitionDataset,
    gamma: f64,
    actions: &[Vec<f64>],
) -> Result<Vec<f64>> {
    super::validate_gamma(gamma)?;
    let per_record: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let ev = e.eval(data.state(i), data.action(i));
            ev.max(gamma * g.min_over(data.next_state(i), actions).0)
        })
        .collect();
    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        let key = data.state(i).iter().chain(data.action(i)).map(|v| v.to_bits()).collect();
        groups.entry(key).or_default().push(i);
    }
    let mut out = vec![0.0; data.len()];
    for members in groups.values() {
        let mean = members.iter().map(|&i| per_record[i]).sum::<f64>() / members.len() as f64;
        for &i in members {
            out[i] = mean;
        }
    }
    Ok(out)
}
