//! Numerical checks of the a-priori estimates behind the solver.
//!
//! Each check samples random fields, evaluates both sides of an inequality,
//! and fits the constant `N_hat` as the largest sampled ratio. The fit is
//! repeated on a grid with twice the points; a check passes when the constant
//! is finite, grid-stable, and meets its check-specific sweep criterion.

mod coercivity;
mod growth;
mod kernels;
mod transport;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::derive_seed;
use crate::operators::{CoefficientSet, OperatorAssembly};
use crate::problem::{Problem, ProblemData};
use crate::spectral::{FieldSampler, SpectralField, TorusGrid};

pub use coercivity::{check_coercivity, check_special_coercivity, CoercivityVariant};
pub use growth::{check_growth, divergence_pairing};
pub use kernels::{check_kernel_identities, kernel_mass_slope, GaussianBump, KernelConfig, TrigSeries};
pub use transport::{check_fractional_transport, transport_lhs, transport_rhs};

/// Largest allowed relative change of `N_hat` under grid refinement.
pub const REFINEMENT_TOLERANCE: f64 = 0.2;
/// Constants below this are treated as zero in the stability test.
pub const ZERO_FLOOR: f64 = 1e-12;

/// Sampling parameters shared by the field-based checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckConfig {
    /// Base grid points per axis; the refinement pass uses twice as many.
    pub points: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            points: 128,
            samples: 12,
            seed: 7,
        }
    }
}

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub id: String,
    pub samples: usize,
    pub worst_ratio: f64,
    #[serde(rename = "N_hat")]
    pub n_hat: f64,
    #[serde(rename = "N_hat_refined")]
    pub n_hat_refined: f64,
    pub stable: bool,
    pub pass: bool,
    pub details: BTreeMap<String, f64>,
}

impl CheckReport {
    fn new(id: impl Into<String>, samples: usize, coarse: f64, fine: f64) -> Self {
        let stable = refinement_stable(coarse, fine);
        CheckReport {
            id: id.into(),
            samples,
            worst_ratio: coarse.max(fine),
            n_hat: coarse,
            n_hat_refined: fine,
            stable,
            pass: stable,
            details: BTreeMap::new(),
        }
    }

    fn detail(&mut self, key: impl Into<String>, value: f64) {
        self.details.insert(key.into(), value);
    }
}

/// `|b - a| <= 0.2 |a|`, with constants near zero treated as equal.
pub fn refinement_stable(coarse: f64, fine: f64) -> bool {
    if !(coarse.is_finite() && fine.is_finite()) {
        return false;
    }
    if coarse.abs().max(fine.abs()) <= ZERO_FLOOR {
        return true;
    }
    (fine - coarse).abs() <= REFINEMENT_TOLERANCE * coarse.abs().max(ZERO_FLOOR)
}

/// `lhs / rhs`, with `0/0 = 0`.
pub(crate) fn ratio(lhs: f64, rhs: f64) -> f64 {
    if rhs > 0.0 {
        lhs / rhs
    } else if lhs.abs() <= ZERO_FLOOR {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Coefficients, operators and data of one problem on one grid.
pub(crate) struct Level {
    pub cs: CoefficientSet,
    pub asm: OperatorAssembly,
    pub data: ProblemData,
}

impl Level {
    pub fn build(problem: &Problem, points: usize) -> Result<Self> {
        let grid = problem.coefficients.grid(points)?;
        let cs = problem.coefficients.build(&grid)?;
        let asm = OperatorAssembly::new(&cs)?;
        let data = problem.build_data(&grid, None)?;
        Ok(Level { cs, asm, data })
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        self.cs.grid()
    }

    pub fn system(&self) -> usize {
        self.cs.system()
    }
}

/// The base grid and its refinement.
pub(crate) fn levels(problem: &Problem, points: usize) -> Result<[Level; 2]> {
    Ok([Level::build(problem, points)?, Level::build(problem, 2 * points)?])
}

/// A reproducible random field: sampler plus seed, realizable on any grid that resolves the band.
#[derive(Clone, Debug)]
pub(crate) struct FieldDraw {
    pub sampler: FieldSampler,
    pub seed: u64,
}

impl FieldDraw {
    pub fn realize(&self, grid: &Arc<TorusGrid>, channels: usize) -> Result<SpectralField> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.sampler.sample(grid, channels, &mut rng)
    }
}

/// `count` draws cycling through `decays`, all with band `k_min..=k_max`.
pub(crate) fn draws(seed: u64, tag: u64, count: usize, decays: &[f64], k_min: usize, k_max: usize) -> Vec<FieldDraw> {
    let base = derive_seed(seed, tag);
    (0..count)
        .map(|i| FieldDraw {
            sampler: FieldSampler::band(decays[i % decays.len()], k_min, k_max),
            seed: derive_seed(base, i as u64),
        })
        .collect()
}

/// Grid-node quadrature of `sum_c a_c b_c`.
pub(crate) fn node_dot(grid: &TorusGrid, a: &[f64], b: &[f64]) -> f64 {
    let terms: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    crate::stats::pairwise_sum(&terms) * grid.cell_volume()
}

/// Runs every field-based check on `problem` plus the kernel suite.
pub fn run_suite(problem: &Problem, cfg: &CheckConfig, kernel: &KernelConfig) -> Result<Vec<CheckReport>> {
    let mut out = vec![check_growth(problem, cfg)?];
    for beta in [0.0, 1.0, 2.0] {
        for v in CoercivityVariant::ALL {
            out.push(check_coercivity(problem, cfg, v, beta)?);
        }
    }
    out.push(check_special_coercivity(problem, cfg)?);
    out.push(check_fractional_transport(problem, cfg)?);
    for &kappa in &kernel.orders {
        out.push(check_kernel_identities(kappa, kernel)?);
    }
    Ok(out)
}

/// Serializes reports as a JSON object keyed by check id.
pub fn reports_json(reports: &[CheckReport]) -> Result<serde_json::Value> {
    let mut map = serde_json::Map::new();
    for r in reports {
        let v = serde_json::to_value(r).map_err(|e| Error::param(e.to_string()))?;
        map.insert(r.id.clone(), v);
    }
    Ok(serde_json::Value::Object(map))
}

/// Whether every report passed.
pub fn all_pass(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

/// Reads a problem file, or a builtin when `name` has no path separator and no extension.
pub fn load_problem(name: &str) -> Result<Problem> {
    if Problem::builtin_names().contains(&name) {
        return Problem::builtin(name);
    }
    Problem::load(Path::new(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stability_rule() {
        assert!(refinement_stable(1.0, 1.19));
        assert!(!refinement_stable(1.0, 1.3));
        assert!(refinement_stable(0.0, 0.0));
        assert!(refinement_stable(1e-14, -1e-13));
        assert!(!refinement_stable(f64::NAN, 1.0));
        assert!(refinement_stable(-2.0, -2.3));
    }

    #[test]
    fn ratio_conventions() {
        assert_eq!(ratio(0.0, 0.0), 0.0);
        assert_eq!(ratio(1.0, 0.0), f64::INFINITY);
        assert_eq!(ratio(1.0, 4.0), 0.25);
    }

    #[test]
    fn draws_are_grid_independent() {
        let d = draws(3, 1, 2, &[1.5], 0, 10);
        let g1 = TorusGrid::new(1, 32, 1.0).unwrap();
        let g2 = TorusGrid::new(1, 64, 1.0).unwrap();
        let a = d[1].realize(&g1, 1).unwrap();
        let b = d[1].realize(&g2, 1).unwrap();
        let back = b.resample(&g1).unwrap();
        assert!(a.max_rel_diff(&back) < 1e-14);
    }
}
