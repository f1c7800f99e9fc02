//! Least-squares identification of `s' = F s + G a` from transitions.

use nalgebra::DMatrix;

use super::LinearSystem;
use crate::dataset::TransitionDataset;
use crate::error::{LdmError, Result};

#[derive(Clone, Debug)]
pub struct LinearFit {
    pub model: LinearSystem,
    /// Root-mean-square residual over all records and state components.
    pub rmse: f64,
    /// Per-record Euclidean residual norms, in dataset order.
    pub residuals: Vec<f64>,
}

pub fn fit_linear_dynamics(data: &TransitionDataset) -> Result<LinearFit> {
    let (ds, da, n) = (data.state_dim(), data.action_dim(), data.len());
    let p = ds + da;
    if n == 0 {
        return Err(LdmError::Empty("dataset has no records".into()));
    }
    let x = DMatrix::from_fn(n, p, |i, j| if j < ds { data.state(i)[j] } else { data.action(i)[j - ds] });
    let y = DMatrix::from_fn(n, ds, |i, j| data.next_state(i)[j]);
    let column_name = |j: usize| if j < ds { format!("s{j}") } else { format!("a{}", j - ds) };
    if n < p {
        return Err(LdmError::RankDeficient { column: column_name(n) });
    }

    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|j| x.column(j).norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for j in 0..p {
        if r[(j, j)].abs() <= 1e-10 * scale {
            return Err(LdmError::RankDeficient { column: column_name(j) });
        }
    }
    let qty = qr.q().transpose() * &y;
    let theta = r.solve_upper_triangular(&qty).ok_or(LdmError::SingularSystem)?;
    // theta is p x ds: rows 0..ds hold F^T, rows ds.. hold G^T.
    let f = theta.rows(0, ds).transpose();
    let g = theta.rows(ds, da).transpose();
    let fitted = &x * &theta;
    let diff = &y - fitted;
    let residuals: Vec<f64> = (0..n).map(|i| diff.row(i).norm()).collect();
    let rmse = (diff.norm_squared() / (n * ds) as f64).sqrt();
    Ok(LinearFit { model: LinearSystem::new(f, g)?, rmse, residuals })
}
