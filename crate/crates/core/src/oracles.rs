//! Brute-force reference integrals that are computed once and stored as
//! test fixtures.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::integrand::FnIntegrand;
use crate::losses::{residual_integrand, LossTerm};
use crate::nn::{init_glorot, MlpArch, MlpParams};
use crate::problems::{arctan_well, arctan_well_target};
use crate::quadrature::brute_force_integral;
use crate::sampling::RNG_ALGORITHM;

/// Seed of the fixed network whose squared misfit is tabulated.
pub const ORACLE_SEED: u64 = 2024;
pub const ORACLE_CELLS: usize = 1024;
pub const ORACLE_ORDER: usize = 10;
/// Cells per axis of the cheaper mesh used for test losses during training.
pub const TEST_MESH_CELLS: usize = 256;

pub fn oracle_arch() -> MlpArch {
    MlpArch::new(2, 1, 4, 25).expect("valid architecture")
}

pub fn oracle_net() -> MlpParams {
    init_glorot(oracle_arch(), ORACLE_SEED).expect("valid architecture")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub cells_per_axis: usize,
    pub order: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFixtures {
    pub rng: String,
    /// `[in_dim, out_dim, hidden_layers, width]`.
    pub net_arch: [usize; 4],
    pub net_seed: u64,
    /// Integral of the arctan-well target over the unit square.
    pub arctan_well: OracleValue,
    /// Squared misfit of the fixed network against the arctan-well target.
    pub fa_misfit: OracleValue,
    /// The same misfit on the test mesh.
    pub fa_misfit_test_mesh: OracleValue,
}

pub fn arctan_well_integral(cells: usize, order: usize, threads: usize) -> Result<f64> {
    let f = FnIntegrand::new(2, arctan_well_target);
    brute_force_integral(&f, &crate::Cell::unit(2), cells, order, threads)
}

pub fn fa_misfit_integral(net: &MlpParams, cells: usize, order: usize, threads: usize) -> Result<f64> {
    let p = arctan_well();
    let f = residual_integrand(&p, net, LossTerm::Domain)?;
    brute_force_integral(&f, &p.domain, cells, order, threads)
}

pub fn compute_oracles(cells: usize, test_cells: usize, order: usize, threads: usize) -> Result<OracleFixtures> {
    let net = oracle_net();
    let a = oracle_arch();
    let value = |v| OracleValue {
        cells_per_axis: cells,
        order,
        value: v,
    };
    Ok(OracleFixtures {
        rng: RNG_ALGORITHM.into(),
        net_arch: [a.in_dim, a.out_dim, a.hidden_layers, a.width],
        net_seed: ORACLE_SEED,
        arctan_well: value(arctan_well_integral(cells, order, threads)?),
        fa_misfit: value(fa_misfit_integral(&net, cells, order, threads)?),
        fa_misfit_test_mesh: OracleValue {
            cells_per_axis: test_cells,
            order,
            value: fa_misfit_integral(&net, test_cells, order, threads)?,
        },
    })
}
