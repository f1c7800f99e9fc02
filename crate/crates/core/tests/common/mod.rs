//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use ldm_core::density::{analytic_density, to_energy, AnalyticDensity};
use ldm_core::field::{sentinel_for_floor, DEFAULT_FLOOR};
use ldm_core::solver::{solve_maximal_ldm, SolverConfig};
use ldm_core::systems::ChainSystem;
use ldm_core::{ScalarField, StateActionGrid};

pub struct Chain {
    pub system: ChainSystem,
    pub grid: Arc<StateActionGrid>,
    pub density: ScalarField,
    pub energy: ScalarField,
    pub ldm: ScalarField,
}

pub fn chain(h: i64, k: i64, epsilon: f64) -> Chain {
    let system = ChainSystem::new(h, k, epsilon).unwrap();
    let grid = Arc::new(system.grid());
    let density = analytic_density(&AnalyticDensity::from(&system), grid.clone(), sentinel_for_floor(DEFAULT_FLOOR)).unwrap();
    let energy = to_energy(&density, DEFAULT_FLOOR).unwrap();
    let (ldm, report) = solve_maximal_ldm(&energy, &system, &SolverConfig::default()).unwrap();
    assert!(report.monotone);
    Chain { system, grid, density, energy, ldm }
}
