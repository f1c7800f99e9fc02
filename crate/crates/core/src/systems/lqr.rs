//! Infinite-horizon discrete-time LQR by Riccati iteration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};

const TOLERANCE: f64 = 1e-10;
const MAX_ITERATIONS: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrController {
    pub gain: DMatrix<f64>,
    pub riccati: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub iterations: usize,
}

impl LqrController {
    /// `u = -K s`.
    pub fn action(&self, state: &[f64]) -> Vec<f64> {
        (0..self.gain.nrows())
            .map(|i| -(0..state.len()).map(|j| self.gain[(i, j)] * state[j]).sum::<f64>())
            .collect()
    }

    pub fn closed_loop(&self, f: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
        f - g * &self.gain
    }
}

fn riccati_step(f: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let gtp = g.transpose() * p;
    let s = r + &gtp * g;
    let gain = s
        .clone()
        .cholesky()
        .ok_or(LdmError::SingularSystem)?
        .solve(&(&gtp * f));
    let next = q + f.transpose() * p * f - f.transpose() * p * g * &gain;
    // Keep the iterate exactly symmetric.
    let next = (&next + next.transpose()) * 0.5;
    Ok((next, gain))
}

/// Iterates the Riccati map from `P = Q` until the max-entry change drops
/// below `1e-10`.
pub fn solve_lqr(f: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrController> {
    let n = f.nrows();
    if !f.is_square() || g.nrows() != n || q.shape() != (n, n) {
        return Err(LdmError::InvalidParameter("LQR matrix shapes are inconsistent".into()));
    }
    let m = g.ncols();
    if r.shape() != (m, m) {
        return Err(LdmError::DimensionMismatch { expected: m, got: r.nrows() });
    }
    if r.clone().cholesky().is_none() {
        return Err(LdmError::InvalidParameter("Rcost must be positive definite".into()));
    }
    let q_eigs = q.clone().symmetric_eigenvalues();
    if q_eigs.iter().any(|&e| e < -1e-12) || (q - q.transpose()).abs().max() > 1e-12 {
        return Err(LdmError::InvalidParameter("Q must be symmetric positive semidefinite".into()));
    }
    let mut p = q.clone();
    let mut change = f64::INFINITY;
    for it in 1..=MAX_ITERATIONS {
        let (next, _) = riccati_step(f, g, q, r, &p)?;
        change = (&next - &p).abs().max();
        p = next;
        if !change.is_finite() {
            break;
        }
        if change < TOLERANCE {
            let (_, gain) = riccati_step(f, g, q, r, &p)?;
            return Ok(LqrController { gain, riccati: p, q: q.clone(), r: r.clone(), iterations: it });
        }
    }
    Err(LdmError::RiccatiDiverged { iterations: MAX_ITERATIONS, last_change: change })
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::LinearSpiralSystem;

    #[test]
    fn scalar_without_dynamics() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let c = solve_lqr(&DMatrix::zeros(1, 1), &one, &one, &one).unwrap();
        assert!((c.riccati[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(c.gain[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn spiral_closed_loop_is_stable() {
        let lin = LinearSpiralSystem::default().to_linear();
        let c = solve_lqr(lin.f(), lin.g(), &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
        assert!(spectral_radius(lin.f()) > 1.0);
        assert!(spectral_radius(&c.closed_loop(lin.f(), lin.g())) < 1.0);
        let (p2, _) = riccati_step(lin.f(), lin.g(), &c.q, &c.r, &c.riccati).unwrap();
        assert!((p2 - &c.riccati).abs().max() < 1e-9);
    }

    #[test]
    fn rejects_bad_costs() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(solve_lqr(&one, &one, &one, &DMatrix::zeros(1, 1)).is_err());
        assert!(solve_lqr(&one, &one, &DMatrix::from_element(1, 1, -1.0), &one).is_err());
    }
}
