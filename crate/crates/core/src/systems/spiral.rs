//! The exactly discretized 2-D linear spiral `ds/dt = A s + B a`.

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::{Dynamics, LinearSystem};
use crate::error::{LdmError, Result};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_OMEGA: f64 = 1.0;
pub const DEFAULT_DT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpiralParams", into = "SpiralParams")]
pub struct LinearSpiralSystem {
    beta: f64,
    omega: f64,
    dt: f64,
    f: Matrix2<f64>,
    g: Vector2<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct SpiralParams {
    beta: f64,
    omega: f64,
    dt: f64,
}

impl TryFrom<SpiralParams> for LinearSpiralSystem {
    type Error = LdmError;
    fn try_from(p: SpiralParams) -> Result<Self> {
        Self::new(p.beta, p.omega, p.dt)
    }
}

impl From<LinearSpiralSystem> for SpiralParams {
    fn from(s: LinearSpiralSystem) -> Self {
        Self { beta: s.beta, omega: s.omega, dt: s.dt }
    }
}

impl Default for LinearSpiralSystem {
    fn default() -> Self {
        Self::new(DEFAULT_BETA, DEFAULT_OMEGA, DEFAULT_DT).expect("default parameters are valid")
    }
}

impl LinearSpiralSystem {
    pub fn new(beta: f64, omega: f64, dt: f64) -> Result<Self> {
        for (name, v) in [("beta", beta), ("omega", omega), ("dt", dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LdmError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        let (sin, cos) = (omega * dt).sin_cos();
        let f = (beta * dt).exp() * Matrix2::new(cos, sin, -sin, cos);
        let a_inv = Matrix2::new(beta, -omega, omega, beta) / (beta * beta + omega * omega);
        let g = a_inv * (f - Matrix2::identity()) * Vector2::new(0.0, 1.0);
        Ok(Self { beta, omega, dt, f, g })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn f(&self) -> &Matrix2<f64> {
        &self.f
    }

    pub fn g(&self) -> &Vector2<f64> {
        &self.g
    }

    /// Continuous-time generator `A`.
    pub fn a(&self) -> Matrix2<f64> {
        Matrix2::new(self.beta, self.omega, -self.omega, self.beta)
    }

    /// Spectral radius of `F`, which is `e^{beta dt}`.
    pub fn open_loop_radius(&self) -> f64 {
        (self.beta * self.dt).exp()
    }

    pub fn to_linear(&self) -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_column_slice(2, 2, self.f.as_slice()),
            DMatrix::from_column_slice(2, 1, self.g.as_slice()),
        )
        .expect("2x2 and 2x1 are compatible")
    }
}

impl Dynamics for LinearSpiralSystem {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    #[inline]
    fn step(&self, s: &[f64], a: &[f64], next: &mut [f64]) {
        let f = &self.f;
        next[0] = f[(0, 0)] * s[0] + f[(0, 1)] * s[1] + self.g[0] * a[0];
        next[1] = f[(1, 0)] * s[0] + f[(1, 1)] * s[1] + self.g[1] * a[0];
    }
}
