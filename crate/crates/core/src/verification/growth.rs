//! Growth bounds of the drift, noise and jump operators in the `H^1 -> H^-1` scale.

use gauss_quad::legendre::GaussLegendre;

use super::{draws, levels, node_dot, ratio, refinement_stable, CheckConfig, CheckReport, Level};
use crate::error::{Error, Result};
use crate::operators::CoefficientSet;
use crate::problem::Problem;
use crate::spectral::SpectralField;

const TAG_FIELDS: u64 = 0x67_01;
const TAG_TESTS: u64 = 0x67_02;
const DECAYS: [f64; 3] = [1.0, 1.5, 2.0];
/// Relative tolerance of the pairing cross-check.
pub const PAIRING_TOLERANCE: f64 = 1e-8;
const THETA_NODES: usize = 24;
const COMPONENTS: [&str; 5] = ["L", "A", "J1", "N", "I"];

/// Largest sampled ratio per component on one level.
fn component_maxima(level: &Level, fields: &[SpectralField]) -> Result<[f64; 5]> {
    let asm = &level.asm;
    let mut best = [f64::NEG_INFINITY; 5];
    for v in fields {
        let h1 = v.sobolev_norm(1.0);
        let a = &asm.apply_a(1, v)? + &asm.apply_a(2, v)?;
        let mut jump_sum = 0.0;
        for idx in asm.kind_one_atoms() {
            jump_sum += asm.atom(idx).weight * asm.apply_i(v, idx)?.sobolev_norm_sq(0.0);
        }
        let r = [
            ratio(asm.apply_l(v, None)?.sobolev_norm(-1.0), h1),
            ratio(a.sobolev_norm(-1.0), h1),
            ratio(asm.apply_j1(v)?.sobolev_norm(-1.0), h1),
            ratio(asm.apply_n(v)?.sobolev_norm(0.0), h1),
            ratio(jump_sum, h1 * h1),
        ];
        for (b, x) in best.iter_mut().zip(r) {
            *b = b.max(x);
        }
    }
    Ok(best)
}

/// Growth of `L`, `A`, `J^1`, `N` and the `I_z` family, with the divergence-form pairing cross-check.
pub fn check_growth(problem: &Problem, cfg: &CheckConfig) -> Result<CheckReport> {
    let k_max = cfg.points / 4;
    let lv = levels(problem, cfg.points)?;
    let d2 = lv[0].system();
    let field_draws = draws(cfg.seed, TAG_FIELDS, cfg.samples, &DECAYS, 0, k_max);
    let test_draws = draws(cfg.seed, TAG_TESTS, cfg.samples, &DECAYS, 0, k_max);
    let mut maxima = Vec::with_capacity(2);
    let mut pairing: f64 = 0.0;
    for level in &lv {
        let g = level.grid();
        let fields = field_draws
            .iter()
            .map(|d| d.realize(g, d2))
            .collect::<Result<Vec<_>>>()?;
        maxima.push(component_maxima(level, &fields)?);
        for (phi, draw) in fields.iter().zip(&test_draws) {
            let psi = draw.realize(g, d2)?;
            let direct = psi.sobolev_inner(&level.asm.apply_l(phi, None)?, 0.0)?;
            let split = divergence_pairing(&level.cs, &psi, phi)?;
            let scale = psi.sobolev_norm(1.0) * phi.sobolev_norm(1.0);
            pairing = pairing.max(ratio((direct - split).abs(), scale));
        }
    }
    let coarse = maxima[0].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fine = maxima[1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut report = CheckReport::new("growth", cfg.samples, coarse, fine);
    let mut components_stable = true;
    for (i, name) in COMPONENTS.iter().enumerate() {
        report.detail(format!("{name}_N_hat"), maxima[0][i]);
        report.detail(format!("{name}_N_hat_refined"), maxima[1][i]);
        components_stable &= refinement_stable(maxima[0][i], maxima[1][i]);
    }
    report.detail("pairing_defect", pairing);
    report.stable &= components_stable;
    report.pass = report.stable && pairing <= PAIRING_TOLERANCE;
    Ok(report)
}

/// `(psi, L phi)_0` with the local part integrated by parts and the jump part in Taylor form.
///
/// Second-order terms become `-(d_i psi, a^ij d_j phi) - (psi, d_i a^ij d_j phi)`, evaluated
/// pointwise on the refined grid. Each jump term becomes
/// `(I + rho) int_0^1 zeta . grad phi(x + theta zeta) dtheta - zeta . grad phi`
/// at the grid nodes.
pub fn divergence_pairing(cs: &CoefficientSet, psi: &SpectralField, phi: &SpectralField) -> Result<f64> {
    let g = cs.grid();
    let (d, d2, r) = (cs.dim(), cs.system(), cs.drivers());
    if psi.channels() != d2 || phi.channels() != d2 {
        return Err(Error::shape("pairing fields must have one channel per equation"));
    }
    let fine = g.refined()?;
    let nf = fine.len();
    let on_fine = |f: &SpectralField| f.resample(&fine).map(|x| x.to_physical());
    let psi_v = on_fine(psi)?;
    let phi_v = on_fine(phi)?;
    let psi_g = (0..d).map(|a| on_fine(&psi.derivative(a))).collect::<Result<Vec<_>>>()?;
    let phi_g = (0..d).map(|a| on_fine(&phi.derivative(a))).collect::<Result<Vec<_>>>()?;
    let mut integrand = vec![0.0; nf];
    for k in 0..2 {
        let sig = on_fine(&cs.sigma[k])?;
        let dsig = (0..d).map(|a| on_fine(&cs.sigma[k].derivative(a))).collect::<Result<Vec<_>>>()?;
        let ups = on_fine(&cs.upsilon[k])?;
        for p in 0..nf {
            let s = |i: usize, rho: usize| sig[(i * r + rho) * nf + p];
            let ds = |a: usize, i: usize, rho: usize| dsig[a][(i * r + rho) * nf + p];
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let mut a_ij = 0.0;
                    let mut da_ij = 0.0;
                    for rho in 0..r {
                        a_ij += 0.5 * s(i, rho) * s(j, rho);
                        da_ij += 0.5 * (ds(i, i, rho) * s(j, rho) + s(i, rho) * ds(i, j, rho));
                    }
                    for l in 0..d2 {
                        let at = l * nf + p;
                        acc -= psi_g[i][at] * a_ij * phi_g[j][at] + psi_v[at] * da_ij * phi_g[j][at];
                    }
                }
            }
            for l in 0..d2 {
                for lb in 0..d2 {
                    for i in 0..d {
                        let mut c = 0.0;
                        for rho in 0..r {
                            c += s(i, rho) * ups[((l * d2 + lb) * r + rho) * nf + p];
                        }
                        acc += psi_v[l * nf + p] * c * phi_g[i][lb * nf + p];
                    }
                }
            }
            integrand[p] += acc;
        }
    }
    let b = on_fine(&cs.drift)?;
    let c = on_fine(&cs.zero_order)?;
    for p in 0..nf {
        let mut acc = 0.0;
        for l in 0..d2 {
            for i in 0..d {
                acc += psi_v[l * nf + p] * b[i * nf + p] * phi_g[i][l * nf + p];
            }
            for lb in 0..d2 {
                acc += psi_v[l * nf + p] * c[(l * d2 + lb) * nf + p] * phi_v[lb * nf + p];
            }
        }
        integrand[p] += acc;
    }
    let ones = vec![1.0; nf];
    let local = node_dot(&fine, &integrand, &ones);
    Ok(local + jump_pairing(cs, psi, phi)?)
}

fn jump_pairing(cs: &CoefficientSet, psi: &SpectralField, phi: &SpectralField) -> Result<f64> {
    if cs.jumps.is_empty() {
        return Ok(0.0);
    }
    let g = cs.grid();
    let (d, d2, n) = (cs.dim(), cs.system(), g.len());
    let rule = GaussLegendre::new(THETA_NODES).map_err(|e| Error::param(e.to_string()))?;
    let grad = SpectralField::concat(&(0..d).map(|a| phi.derivative(a)).collect::<Vec<_>>())?;
    let grad_v = grad.to_physical();
    let psi_v = psi.to_physical();
    let mut total = 0.0;
    for atom in &cs.jumps.atoms {
        if atom.weight == 0.0 {
            continue;
        }
        let disp = atom.displacement().to_physical();
        let rho = atom.zero_order().to_physical();
        // int_0^1 zeta . grad phi^l(x + theta zeta) dtheta at every node
        let mut taylor = vec![0.0; d2 * n];
        for &(x, w) in rule.as_node_weight_pairs() {
            let theta = 0.5 * (x + 1.0);
            let shifted = atom.composer(theta)?.sample(&grad)?;
            for l in 0..d2 {
                for p in 0..n {
                    let mut dot = 0.0;
                    for a in 0..d {
                        dot += disp[a * n + p] * shifted[(a * d2 + l) * n + p];
                    }
                    taylor[l * n + p] += 0.5 * w * dot;
                }
            }
        }
        let mut term = vec![0.0; d2 * n];
        for l in 0..d2 {
            for p in 0..n {
                let mut acc = 0.0;
                for lb in 0..d2 {
                    let delta = f64::from(l == lb);
                    acc += (delta + rho[(l * d2 + lb) * n + p]) * taylor[lb * n + p];
                }
                for a in 0..d {
                    acc -= disp[a * n + p] * grad_v[(a * d2 + l) * n + p];
                }
                term[l * n + p] = atom.weight * acc;
            }
        }
        total += node_dot(g, &psi_v, &term);
    }
    Ok(total)
}
