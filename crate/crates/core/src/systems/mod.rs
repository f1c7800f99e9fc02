//! Deterministic dynamical systems, data collection and model fitting.

mod chain;
mod collect;
mod fit;
mod lqr;
mod spiral;

pub use chain::ChainSystem;
pub use collect::{collect_dataset, collect_from_table, DataPolicy};
pub use fit::{fit_linear_dynamics, LinearFit};
pub use lqr::{solve_lqr, spectral_radius, LqrController};
pub use spiral::{LinearSpiralSystem, DEFAULT_BETA, DEFAULT_DT, DEFAULT_OMEGA};

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{LdmError, Result};
use crate::grid::StateActionGrid;
use crate::rng::substream;

/// A deterministic transition map `s' = f(s, a)`.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn step(&self, state: &[f64], action: &[f64], next: &mut [f64]);

    fn next_state(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        self.step(state, action, &mut out);
        out
    }
}

/// `s' = F s + G a` for arbitrary dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    f: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        if !f.is_square() {
            return Err(LdmError::InvalidParameter("F must be square".into()));
        }
        if g.nrows() != f.nrows() {
            return Err(LdmError::DimensionMismatch { expected: f.nrows(), got: g.nrows() });
        }
        Ok(Self { f, g })
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
}

impl Dynamics for LinearSystem {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    fn action_dim(&self) -> usize {
        self.g.ncols()
    }

    fn step(&self, state: &[f64], action: &[f64], next: &mut [f64]) {
        for (i, out) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, s) in state.iter().enumerate() {
                acc += self.f[(i, j)] * s;
            }
            for (k, a) in action.iter().enumerate() {
                acc += self.g[(i, k)] * a;
            }
            *out = acc;
        }
    }
}

/// `s' = s`: the action has no effect on the state.
#[derive(Clone, Copy, Debug)]
pub struct StaticSystem {
    pub state_dim: usize,
    pub action_dim: usize,
}

impl Dynamics for StaticSystem {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn step(&self, state: &[f64], _action: &[f64], next: &mut [f64]) {
        next.copy_from_slice(state);
    }
}

/// A system with finitely many states and actions. `None` successors leave
/// the domain.
pub trait FiniteSystem: Sync {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn successor(&self, state: usize, action: usize) -> Option<usize>;
}

/// Explicit successor table. As a [`Dynamics`] it lives on the index grid:
/// one state axis `0..n_states`, one action axis `0..n_actions`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularSystem {
    n_states: usize,
    n_actions: usize,
    next: Vec<Option<usize>>,
}

impl TabularSystem {
    pub fn new(n_states: usize, n_actions: usize, next: Vec<Option<usize>>) -> Result<Self> {
        if next.len() != n_states * n_actions {
            return Err(LdmError::DimensionMismatch { expected: n_states * n_actions, got: next.len() });
        }
        if let Some(bad) = next.iter().flatten().find(|&&s| s >= n_states) {
            return Err(LdmError::InvalidParameter(format!("successor {bad} out of range")));
        }
        Ok(Self { n_states, n_actions, next })
    }

    /// Uniformly random successor table.
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "tabular");
        let next = (0..n_states * n_actions).map(|_| Some(rng.random_range(0..n_states))).collect();
        Self { n_states, n_actions, next }
    }

    /// Tabulates `dynamics` on a grid whose successors land on grid nodes.
    pub fn from_grid(grid: &StateActionGrid, dynamics: &dyn Dynamics) -> Result<Self> {
        let mut next = Vec::with_capacity(grid.len());
        let mut s = vec![0.0; grid.state_dim()];
        let mut a = vec![0.0; grid.action_dim()];
        let mut sp = vec![0.0; grid.state_dim()];
        let mut node = vec![0.0; grid.state_dim()];
        for si in 0..grid.n_states() {
            grid.state_coords_into(si, &mut s);
            for ai in 0..grid.n_actions() {
                grid.action_coords_into(ai, &mut a);
                dynamics.step(&s, &a, &mut sp);
                let succ = grid.nearest_state(&sp);
                if let Some(j) = succ {
                    grid.state_coords_into(j, &mut node);
                    let on_node = grid
                        .state_axes()
                        .iter()
                        .zip(sp.iter().zip(&node))
                        .all(|(ax, (x, n))| (x - n).abs() <= 1e-9 * ax.spacing().max(1.0));
                    if !on_node {
                        return Err(LdmError::InvalidParameter(format!(
                            "successor of cell {} is not a grid node",
                            grid.cell_index(si, ai)
                        )));
                    }
                }
                next.push(succ);
            }
        }
        Self::new(grid.n_states(), grid.n_actions(), next)
    }

    /// The index grid this system lives on as a [`Dynamics`].
    pub fn index_grid(&self) -> Result<StateActionGrid> {
        use crate::grid::Axis;
        let axis = |n: usize| Axis::new(0.0, n.saturating_sub(1) as f64, n);
        StateActionGrid::from_axes(vec![axis(self.n_states)], vec![axis(self.n_actions)], true)
    }

    fn index_of(x: f64, n: usize) -> Option<usize> {
        let r = x.round();
        (x.is_finite() && (x - r).abs() < 1e-9 && r >= 0.0 && (r as usize) < n).then_some(r as usize)
    }
}

impl FiniteSystem for TabularSystem {
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn successor(&self, state: usize, action: usize) -> Option<usize> {
        self.next[state * self.n_actions + action]
    }
}

impl Dynamics for TabularSystem {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn step(&self, state: &[f64], action: &[f64], next: &mut [f64]) {
        let succ = match (Self::index_of(state[0], self.n_states), Self::index_of(action[0], self.n_actions)) {
            (Some(s), Some(a)) => self.successor(s, a),
            _ => None,
        };
        next[0] = succ.map_or(-1.0, |s| s as f64);
    }
}
