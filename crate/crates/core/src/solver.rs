//! Vanishing-viscosity time stepping, energy bookkeeping and ensemble studies.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{derive_seed, Clock, ClockKind, NoisePath};
use crate::operators::{CoefficientSet, OperatorAssembly};
use crate::problem::{Problem, ProblemData};
use crate::spectral::{SpectralField, TorusGrid};
use crate::stats;

fn default_save_every() -> usize {
    10
}

fn default_blowup() -> f64 {
    1e6
}

/// Numerical parameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Grid points per axis.
    pub points: usize,
    /// Viscosity index `n`; the added term is `-(1/n) Lambda^2`.
    pub viscosity: usize,
    /// Sobolev order tracked by the ledger.
    pub order: usize,
    pub horizon: f64,
    pub steps: usize,
    #[serde(default)]
    pub clock: ClockKind,
    #[serde(default = "default_save_every")]
    pub save_every: usize,
    /// Blow-up when `|u|_0` exceeds this multiple of the data scale.
    #[serde(default = "default_blowup")]
    pub blowup_factor: f64,
}

impl Default for SolverConfig {
    /// 128 points, `n = 16`, 500 steps to `T = 0.5`.
    fn default() -> Self {
        SolverConfig::new(128, 16, 0.5, 500)
    }
}

impl SolverConfig {
    pub fn new(points: usize, viscosity: usize, horizon: f64, steps: usize) -> Self {
        SolverConfig {
            points,
            viscosity,
            order: 1,
            horizon,
            steps,
            clock: ClockKind::Linear,
            save_every: default_save_every(),
            blowup_factor: default_blowup(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.viscosity == 0 {
            return Err(Error::param("viscosity index must be positive"));
        }
        if self.steps == 0 || self.save_every == 0 {
            return Err(Error::param("steps and save_every must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::param("horizon must be positive"));
        }
        if self.blowup_factor.is_nan() || self.blowup_factor <= 1.0 {
            return Err(Error::param("blowup_factor must exceed 1"));
        }
        Ok(())
    }

    pub fn time_step(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

/// One row of the energy ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub step: usize,
    pub time: f64,
    pub clock: f64,
    /// `|u|_j^2` for `j = 0..=order + 1`.
    pub norms_sq: Vec<f64>,
    /// `(1/n) sum |u|_{order+1}^2 dV` up to this step.
    pub dissipation: f64,
    /// Cumulative defect of the discrete energy identity for `|u|_0^2`.
    pub energy_residual: f64,
}

/// Per-step record of norms, viscous dissipation and the energy-identity defect.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub order: usize,
    pub rows: Vec<LedgerRow>,
}

impl EnergyLedger {
    pub fn residuals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.energy_residual).collect()
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.energy_residual.abs()).fold(0.0, f64::max)
    }

    /// `sup_t |u_t|_j^2`.
    pub fn sup_norm_sq(&self, j: usize) -> Result<f64> {
        if j > self.order + 1 {
            return Err(Error::param(format!("ledger tracks orders up to {}", self.order + 1)));
        }
        Ok(self.rows.iter().map(|r| r.norms_sq[j]).fold(0.0, f64::max))
    }

    pub fn final_dissipation(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.dissipation)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        self.write_header(w, false)?;
        self.write_rows(w, None)
    }

    /// Ledgers of several ensemble members in one table with a leading `member` column.
    pub fn write_ensemble_csv(ledgers: &[&EnergyLedger], w: &mut impl Write) -> std::io::Result<()> {
        let Some(first) = ledgers.first() else {
            return Ok(());
        };
        first.write_header(w, true)?;
        for (i, l) in ledgers.iter().enumerate() {
            l.write_rows(w, Some(i))?;
        }
        Ok(())
    }

    fn write_header(&self, w: &mut impl Write, member: bool) -> std::io::Result<()> {
        if member {
            write!(w, "member,")?;
        }
        write!(w, "step,t,V")?;
        for j in 0..=self.order + 1 {
            write!(w, ",norm{j}_sq")?;
        }
        writeln!(w, ",dissipation,energy_residual")
    }

    fn write_rows(&self, w: &mut impl Write, member: Option<usize>) -> std::io::Result<()> {
        for r in &self.rows {
            if let Some(m) = member {
                write!(w, "{m},")?;
            }
            write!(w, "{},{:e},{:e}", r.step, r.time, r.clock)?;
            for v in &r.norms_sq {
                write!(w, ",{v:e}")?;
            }
            writeln!(w, ",{:e},{:e}", r.dissipation, r.energy_residual)?;
        }
        Ok(())
    }
}

/// Saved states and the ledger of one path.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub seed: u64,
    /// Steps at which `states` were saved.
    pub saved_steps: Vec<usize>,
    pub states: Vec<SpectralField>,
    pub ledger: EnergyLedger,
}

impl Trajectory {
    pub fn final_state(&self) -> &SpectralField {
        self.states.last().expect("a trajectory saves its initial state")
    }
}

/// The defect series of the discrete energy identity.
pub fn energy_monitor(traj: &Trajectory) -> Vec<f64> {
    traj.ledger.residuals()
}

/// Result of one step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: SpectralField,
    /// `|u+|^2 - |u|^2` minus its Ito expansion with the realized increments.
    pub energy_defect: f64,
}

/// A validated problem ready to be stepped.
#[derive(Clone)]
pub struct Simulation {
    cfg: SolverConfig,
    assembly: Arc<OperatorAssembly>,
    data: Arc<ProblemData>,
    clock: Clock,
    weights: Vec<f64>,
    lambda2: Arc<Vec<f64>>,
    scale: f64,
}

impl Simulation {
    /// Builds the run for `problem` with `cfg`; relative data paths resolve against `base`.
    pub fn new(problem: &Problem, cfg: &SolverConfig, base: Option<&Path>) -> Result<Self> {
        let grid = problem.coefficients.grid(cfg.points)?;
        let cs = problem.coefficients.build(&grid)?;
        let data = problem.build_data(&grid, base)?;
        Simulation::from_parts(&cs, data, cfg)
    }

    pub fn from_parts(cs: &CoefficientSet, data: ProblemData, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        cs.check_shapes()?;
        let grid = cs.grid().clone();
        if cfg.points != grid.points() {
            return Err(Error::shape(format!(
                "config asks for {} points, coefficients live on {}",
                cfg.points,
                grid.points()
            )));
        }
        let assembly = OperatorAssembly::new(cs)?;
        let kind_one = assembly.kind_one_atoms();
        let weights: Vec<f64> = kind_one.iter().map(|&i| assembly.atom(i).weight).collect();
        check_data(cs, &data, kind_one.len())?;
        let lambda2 = (0..grid.len()).map(|i| grid.bessel_symbol(i, 2.0)).collect();
        let clock = Clock::new(cfg.horizon, cfg.steps, cfg.clock)?;
        let mut sim = Simulation {
            cfg: cfg.clone(),
            assembly: Arc::new(assembly),
            data: Arc::new(data),
            clock,
            weights,
            lambda2: Arc::new(lambda2),
            scale: 0.0,
        };
        sim.scale = sim.data_scale();
        Ok(sim)
    }

    fn data_scale(&self) -> f64 {
        let d = &self.data;
        let mut s = d.initial.sobolev_norm(0.0);
        let extra = [d.forcing.as_ref(), d.noise_forcing.as_ref()];
        for f in extra.into_iter().flatten() {
            s = s.max(f.sobolev_norm(0.0));
        }
        for h in d.jump_forcing.iter().flatten() {
            s = s.max(h.sobolev_norm(0.0));
        }
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        self.assembly.grid()
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn assembly(&self) -> &OperatorAssembly {
        &self.assembly
    }

    pub fn data(&self) -> &ProblemData {
        &self.data
    }

    /// Same operators and clock, different data.
    pub fn with_data(&self, data: ProblemData) -> Result<Self> {
        check_data(self.assembly.coefficients(), &data, self.weights.len())?;
        let mut sim = self.clone();
        sim.data = Arc::new(data);
        sim.scale = sim.data_scale();
        Ok(sim)
    }

    /// Same everything with viscosity index `n`.
    pub fn with_viscosity(&self, n: usize) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.viscosity = n;
        cfg.validate()?;
        let mut sim = self.clone();
        sim.cfg = cfg;
        Ok(sim)
    }

    /// Blow-up threshold for `|u|_0`.
    pub fn threshold(&self) -> f64 {
        self.cfg.blowup_factor * self.scale
    }

    /// Largest `dV * |L v|_0 / |v|_0` over the highest resolved mode per axis; an explicit-step
    /// stability indicator (values well below one are comfortable).
    pub fn stability_number(&self) -> Result<f64> {
        let g = self.grid();
        let top = (g.points() / 2 - 1) as f64;
        let dv = (0..self.clock.steps()).map(|k| self.clock.increment(k)).fold(0.0, f64::max);
        let d2 = self.assembly.coefficients().system();
        let mut worst: f64 = 0.0;
        for axis in 0..g.dim() {
            let v = SpectralField::from_fn(g, d2, |_, x| (2.0 * PI * top * x[axis] / g.period()).cos());
            let lv = self.assembly.apply_l(&v, None)?;
            worst = worst.max(lv.sobolev_norm(0.0) / v.sobolev_norm(0.0));
        }
        Ok(dv * worst)
    }

    /// Noise path for `seed`.
    pub fn path(&self, seed: u64) -> Result<NoisePath> {
        NoisePath::sample(&self.clock, &self.assembly.coefficients().jumps, self.assembly.coefficients().drivers(), seed)
    }

    fn check_path(&self, path: &NoisePath) -> Result<()> {
        if path.steps() != self.clock.steps()
            || path.drivers() != self.assembly.coefficients().drivers()
            || path.atoms() != self.weights.len()
        {
            return Err(Error::shape("noise path does not match the run"));
        }
        Ok(())
    }

    /// One semi-implicit step from `u` over clock interval `k`.
    pub fn step(&self, u: &SpectralField, path: &NoisePath, k: usize) -> Result<StepOutcome> {
        let grid = self.grid();
        let n = grid.len();
        let cs = self.assembly.coefficients();
        let (d2, r) = (cs.system(), cs.drivers());
        let dv = self.clock.increment(k);
        let nu = 1.0 / self.cfg.viscosity as f64;

        let ev = self.assembly.evaluate(u, true)?;
        let mut drift = ev.drift;
        if let Some(f) = &self.data.forcing {
            drift.axpy(1.0, f)?;
        }

        let mut mart = vec![Complex64::new(0.0, 0.0); d2 * n];
        let noise = ev.noise.expect("noise requested");
        let dw = path.wiener(k);
        for l in 0..d2 {
            let out = &mut mart[l * n..(l + 1) * n];
            for (rho, &w) in dw.iter().enumerate().take(r) {
                let ch = l * r + rho;
                for (o, c) in out.iter_mut().zip(noise.channel_coeffs(ch)) {
                    *o += c * w;
                }
                if let Some(g) = &self.data.noise_forcing {
                    for (o, c) in out.iter_mut().zip(g.channel_coeffs(ch)) {
                        *o += c * w;
                    }
                }
            }
        }
        for (a, iz) in ev.jumps.iter().enumerate() {
            let eta = path.compensated_increment(k, a);
            if eta == 0.0 {
                continue;
            }
            for (o, c) in mart.iter_mut().zip(iz.coeffs()) {
                *o += c * eta;
            }
            if let Some(h) = &self.data.jump_forcing[a] {
                for (o, c) in mart.iter_mut().zip(h.coeffs()) {
                    *o += c * eta;
                }
            }
        }
        let mart = SpectralField::from_coeffs(grid, d2, mart)?;

        let mut next = u.clone();
        next.axpy(dv, &drift)?;
        next.axpy(1.0, &mart)?;
        let a = dv * nu;
        for (i, c) in next.coeffs_mut().iter_mut().enumerate() {
            *c /= 1.0 + a * self.lambda2[i % n];
        }

        let norm = next.sobolev_norm(0.0);
        let threshold = self.threshold();
        if !norm.is_finite() || norm > threshold {
            return Err(Error::BlowUp { step: k + 1, norm, threshold });
        }

        let before = u.sobolev_norm_sq(0.0);
        let expansion = 2.0 * dv * u.sobolev_inner(&drift, 0.0)? - 2.0 * a * u.sobolev_norm_sq(1.0)
            + 2.0 * u.sobolev_inner(&mart, 0.0)?
            + mart.sobolev_norm_sq(0.0);
        let energy_defect = norm * norm - before - expansion;
        Ok(StepOutcome { state: next, energy_defect })
    }

    fn norms_sq(&self, u: &SpectralField) -> Vec<f64> {
        let n = self.grid().len();
        let top = self.cfg.order + 1;
        let mut acc = vec![0.0; top + 1];
        for (i, c) in u.coeffs().iter().enumerate() {
            let w = self.lambda2[i % n];
            let mut p = c.norm_sqr();
            for slot in acc.iter_mut() {
                *slot += p;
                p *= w;
            }
        }
        let vol = self.grid().volume();
        acc.iter().map(|s| s * vol).collect()
    }

    /// Runs the whole clock along `path`.
    pub fn solve(&self, path: &NoisePath) -> Result<Trajectory> {
        self.run(path, self.data.initial.clone())
    }

    fn run(&self, path: &NoisePath, initial: SpectralField) -> Result<Trajectory> {
        self.check_path(path)?;
        let steps = self.clock.steps();
        let nu = 1.0 / self.cfg.viscosity as f64;
        let top = self.cfg.order + 1;
        let mut u = initial;
        let mut states = vec![u.clone()];
        let mut saved_steps = vec![0];
        let mut rows = Vec::with_capacity(steps + 1);
        let mut dissipation = 0.0;
        let mut residual = 0.0;
        let mut norms = self.norms_sq(&u);
        rows.push(LedgerRow {
            step: 0,
            time: 0.0,
            clock: 0.0,
            norms_sq: norms.clone(),
            dissipation,
            energy_residual: residual,
        });
        for k in 0..steps {
            let out = self.step(&u, path, k)?;
            dissipation += nu * norms[top] * self.clock.increment(k);
            residual += out.energy_defect;
            u = out.state;
            norms = self.norms_sq(&u);
            rows.push(LedgerRow {
                step: k + 1,
                time: self.clock.time(k + 1),
                clock: self.clock.value(k + 1),
                norms_sq: norms.clone(),
                dissipation,
                energy_residual: residual,
            });
            if (k + 1) % self.cfg.save_every == 0 || k + 1 == steps {
                states.push(u.clone());
                saved_steps.push(k + 1);
            }
        }
        Ok(Trajectory {
            seed: path.seed(),
            saved_steps,
            states,
            ledger: EnergyLedger { order: self.cfg.order, rows },
        })
    }

    /// Samples the path for `seed` and solves along it.
    pub fn solve_trajectory(&self, seed: u64) -> Result<Trajectory> {
        self.solve(&self.path(seed)?)
    }

    /// Seed of ensemble member `index`.
    pub fn member_seed(base: u64, index: usize) -> u64 {
        derive_seed(base, index as u64)
    }

    /// `count` independent trajectories, member `i` driven by `member_seed(base, i)`.
    pub fn ensemble(&self, base: u64, count: usize) -> Result<Vec<Trajectory>> {
        (0..count)
            .into_par_iter()
            .map(|i| self.solve_trajectory(Self::member_seed(base, i)))
            .collect()
    }

    /// Coupled-path study of `sup_t E|u^n_t - u^m_t|_0^2` over all pairs from `n_list`.
    pub fn cauchy_study(&self, n_list: &[usize], ensemble: usize, base: u64) -> Result<CauchyTable> {
        if n_list.len() < 2 || n_list.windows(2).any(|w| w[0] > w[1]) || n_list[0] == 0 {
            return Err(Error::param("n_list needs at least two positive, sorted entries"));
        }
        if ensemble == 0 {
            return Err(Error::param("ensemble must be positive"));
        }
        let sims = n_list
            .iter()
            .map(|&n| self.with_viscosity(n))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(usize, usize)> = (0..n_list.len())
            .flat_map(|i| (i + 1..n_list.len()).map(move |j| (i, j)))
            .collect();
        let per_path: Vec<PathSample> = (0..ensemble)
            .into_par_iter()
            .map(|e| {
                let path = self.path(Self::member_seed(base, e))?;
                let trajs = sims.iter().map(|s| s.solve(&path)).collect::<Result<Vec<_>>>()?;
                let diffs = pairs
                    .iter()
                    .map(|&(i, j)| {
                        trajs[i]
                            .states
                            .iter()
                            .zip(&trajs[j].states)
                            .map(|(a, b)| (a - b).sobolev_norm_sq(0.0))
                            .collect()
                    })
                    .collect();
                let dissipation = trajs.iter().map(|t| t.ledger.final_dissipation()).collect();
                Ok(PathSample { diffs, dissipation })
            })
            .collect::<Result<Vec<_>>>()?;

        let saves = per_path[0].diffs.first().map_or(0, |d: &Vec<f64>| d.len());
        let mut rows = Vec::with_capacity(pairs.len());
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let mut best = (0.0, 0.0, 0);
            for s in 0..saves {
                let xs: Vec<f64> = per_path.iter().map(|q| q.diffs[p][s]).collect();
                let m = stats::mean(&xs);
                if m > best.0 {
                    best = (m, stats::std_error(&xs), s);
                }
            }
            let (n, m) = (n_list[i], n_list[j]);
            rows.push(CauchyRow {
                n,
                m,
                inv_sum: 1.0 / n as f64 + 1.0 / m as f64,
                sup_mean_sq_diff: best.0,
                std_error: best.1,
                sup_step: sims[0].saved_step(best.2),
                consecutive: j == i + 1,
            });
        }
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.consecutive && r.sup_mean_sq_diff > 0.0)
            .map(|r| (r.inv_sum.ln(), r.sup_mean_sq_diff.ln()))
            .collect();
        let slope = if pts.len() >= 2 { Some(stats::fit_slope(&pts)) } else { None };
        let dissipation = (0..n_list.len())
            .map(|i| stats::mean(&per_path.iter().map(|q| q.dissipation[i]).collect::<Vec<_>>()))
            .collect();
        Ok(CauchyTable {
            ensemble,
            viscosities: n_list.to_vec(),
            rows,
            slope,
            dissipation,
        })
    }

    fn saved_step(&self, index: usize) -> usize {
        (index * self.cfg.save_every).min(self.clock.steps())
    }

    /// Right-hand side of the moment bound at order `m`:
    /// `|phi|_m^2 + V_T (|f|_m^2 + |g|_{m+1}^2 + sum_z w |h_z|_{m+beta/2}^2)`.
    pub fn moment_rhs(&self, m: usize) -> f64 {
        let d = &self.data;
        let mf = m as f64;
        let beta = self.assembly.coefficients().regularity.beta;
        let mut flux = 0.0;
        if let Some(f) = &d.forcing {
            flux += f.sobolev_norm_sq(mf);
        }
        if let Some(g) = &d.noise_forcing {
            flux += g.sobolev_norm_sq(mf + 1.0);
        }
        for (h, w) in d.jump_forcing.iter().zip(&self.weights) {
            if let Some(h) = h {
                flux += w * h.sobolev_norm_sq(mf + beta / 2.0);
            }
        }
        d.initial.sobolev_norm_sq(mf) + self.clock.bound() * flux
    }

    /// `E sup_t |u_t|_m^2` over `ensemble` against [`Self::moment_rhs`].
    pub fn moment_estimates(&self, ensemble: &[Trajectory], m: usize) -> Result<MomentReport> {
        if ensemble.is_empty() {
            return Err(Error::param("moment estimates need at least one trajectory"));
        }
        let sups = ensemble
            .iter()
            .map(|t| t.ledger.sup_norm_sq(m))
            .collect::<Result<Vec<_>>>()?;
        let lhs = stats::mean(&sups);
        let rhs = self.moment_rhs(m);
        let degenerate = rhs <= f64::MIN_POSITIVE;
        Ok(MomentReport {
            order: m,
            ensemble: ensemble.len(),
            lhs,
            lhs_std_error: stats::std_error(&sups),
            rhs,
            ratio: if degenerate { None } else { Some(lhs / rhs) },
            degenerate,
        })
    }
}

fn check_data(cs: &CoefficientSet, data: &ProblemData, kind_one: usize) -> Result<()> {
    let (d2, r) = (cs.system(), cs.drivers());
    let grid = cs.grid();
    let same = |f: &SpectralField, ch: usize| **f.grid() == **grid && f.channels() == ch;
    let ok = same(&data.initial, d2)
        && data.forcing.as_ref().is_none_or(|f| same(f, d2))
        && data.noise_forcing.as_ref().is_none_or(|g| same(g, d2 * r))
        && data.jump_forcing.len() == kind_one
        && data.jump_forcing.iter().flatten().all(|h| same(h, d2));
    if ok {
        Ok(())
    } else {
        Err(Error::shape("data fields do not match the coefficient set"))
    }
}

struct PathSample {
    /// `[pair][save]`
    diffs: Vec<Vec<f64>>,
    dissipation: Vec<f64>,
}

/// One pair of the Cauchy study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CauchyRow {
    pub n: usize,
    pub m: usize,
    pub inv_sum: f64,
    pub sup_mean_sq_diff: f64,
    pub std_error: f64,
    pub sup_step: usize,
    pub consecutive: bool,
}

/// All pairs plus the log-log slope fitted on consecutive pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CauchyTable {
    pub ensemble: usize,
    pub viscosities: Vec<usize>,
    pub rows: Vec<CauchyRow>,
    pub slope: Option<f64>,
    /// Mean accumulated viscous dissipation per viscosity index.
    pub dissipation: Vec<f64>,
}

impl CauchyTable {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "n,m,inv_sum,sup_mean_sq_diff,std_error,sup_step,consecutive")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{},{}",
                r.n, r.m, r.inv_sum, r.sup_mean_sq_diff, r.std_error, r.sup_step, r.consecutive
            )?;
        }
        match self.slope {
            Some(s) => writeln!(w, "slope,{s:e}"),
            None => writeln!(w, "slope,nan"),
        }
    }
}

/// Ratio of the moment functional to its data bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub order: usize,
    pub ensemble: usize,
    pub lhs: f64,
    pub lhs_std_error: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
    pub degenerate: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_set(points: usize, period: f64) -> CoefficientSet {
        let g = TorusGrid::new(1, points, period).unwrap();
        CoefficientSet::zero(&g, 1, 1).unwrap()
    }

    fn mode(grid: &Arc<TorusGrid>, k: f64) -> SpectralField {
        SpectralField::from_fn(grid, 1, |_, x| (2.0 * PI * k * x[0] / grid.period()).cos())
    }

    #[test]
    fn zero_problem_stays_zero() {
        let p = Problem::builtin("zero").unwrap();
        let sim = Simulation::new(&p, &SolverConfig::new(16, 4, 0.1, 20), None).unwrap();
        let t = sim.solve_trajectory(1).unwrap();
        assert!(t.states.iter().all(|s| s.sobolev_norm(0.0) == 0.0));
        assert!(energy_monitor(&t).iter().all(|&r| r == 0.0));
        assert_eq!(t.states.len(), t.saved_steps.len());
        assert_eq!(t.saved_steps, vec![0, 10, 20]);
    }

    #[test]
    fn heat_mode_decays_by_implicit_factor() {
        let cs = zero_set(32, 1.0);
        let g = cs.grid().clone();
        let mut data = ProblemData::zero(&g, 1, 0);
        data.initial = mode(&g, 3.0);
        let cfg = SolverConfig::new(32, 5, 0.1, 10);
        let sim = Simulation::from_parts(&cs, data, &cfg).unwrap();
        let t = sim.solve_trajectory(0).unwrap();
        let a = 0.01 / 5.0 * (1.0 + 4.0 * PI * PI * 9.0);
        let want = (1.0 + a).powi(-10);
        let got = t.final_state().sobolev_norm(0.0) / t.states[0].sobolev_norm(0.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        // per-step energy defect of the implicit solve
        let e0 = t.states[0].sobolev_norm_sq(0.0);
        let mut acc = 0.0;
        let mut e = e0;
        for _ in 0..10 {
            acc += e * (1.0 / (1.0 + a).powi(2) - 1.0 + 2.0 * a);
            e /= (1.0 + a).powi(2);
        }
        let res = t.ledger.rows.last().unwrap().energy_residual;
        assert!((res - acc).abs() < 1e-12 * e0, "{res} vs {acc}");
    }

    #[test]
    fn heat_factor_tends_to_exponential_at_first_order() {
        let err = |steps: usize| {
            let cs = zero_set(16, 1.0);
            let g = cs.grid().clone();
            let mut data = ProblemData::zero(&g, 1, 0);
            data.initial = mode(&g, 1.0);
            let sim = Simulation::from_parts(&cs, data, &SolverConfig::new(16, 2, 0.2, steps)).unwrap();
            let t = sim.solve_trajectory(0).unwrap();
            let exact = (-0.2 / 2.0 * (1.0 + 4.0 * PI * PI)).exp();
            (t.final_state().sobolev_norm(0.0) / t.states[0].sobolev_norm(0.0) - exact).abs()
        };
        let ratio = err(50) / err(100);
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn constant_transport_advances_phase() {
        let mut cs = zero_set(32, 2.0);
        let g = cs.grid().clone();
        cs.drift = SpectralField::from_fn(&g, 1, |_, _| 0.7);
        let mut data = ProblemData::zero(&g, 1, 0);
        data.initial = mode(&g, 2.0);
        let steps = 1;
        let dv = 1e-3;
        let sim = Simulation::from_parts(&cs, data, &SolverConfig::new(32, 1_000_000, dv, steps)).unwrap();
        let t = sim.solve_trajectory(0).unwrap();
        let idx = g.mode_index(&[2]).unwrap();
        let before = t.states[0].coeffs()[idx];
        let after = t.final_state().coeffs()[idx];
        let xi = 2.0 / 2.0;
        let want = before * Complex64::new(0.0, 2.0 * PI * xi * 0.7 * dv).exp();
        assert!((after - want).norm() < 1e-5 * before.norm(), "{after} vs {want}");
    }

    #[test]
    fn constant_forcing_integrates_clock() {
        let cs = zero_set(16, 1.0);
        let g = cs.grid().clone();
        let mut data = ProblemData::zero(&g, 1, 0);
        data.forcing = Some(SpectralField::from_fn(&g, 1, |_, _| 1.5));
        let sim = Simulation::from_parts(&cs, data, &SolverConfig::new(16, 1_000_000, 0.4, 40)).unwrap();
        let t = sim.solve_trajectory(0).unwrap();
        let u = t.final_state().to_physical();
        assert!(u.iter().all(|v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let p = Problem::builtin("reference").unwrap();
        let sim = Simulation::new(&p, &SolverConfig::new(64, 8, 0.05, 50), None);
        // reference data need 128 points
        assert!(sim.is_err());
        let sim = Simulation::new(&p, &SolverConfig::new(128, 8, 0.05, 50), None).unwrap();
        let a = sim.solve_trajectory(9).unwrap();
        let b = sim.solve_trajectory(9).unwrap();
        assert_eq!(a.ledger, b.ledger);
        let mut wa = Vec::new();
        let mut wb = Vec::new();
        a.ledger.write_csv(&mut wa).unwrap();
        b.ledger.write_csv(&mut wb).unwrap();
        assert_eq!(wa, wb);
        let c = sim.solve_trajectory(10).unwrap();
        assert_ne!(a.ledger, c.ledger);
    }

    #[test]
    fn flow_is_linear_in_initial_data() {
        let mut p = Problem::builtin("reference").unwrap();
        p.data.forcing.clear();
        p.data.noise_forcing.clear();
        p.data.jump_forcing.clear();
        let sim = Simulation::new(&p, &SolverConfig::new(128, 16, 0.05, 50), None).unwrap();
        let path = sim.path(3).unwrap();
        let a = sim.solve(&path).unwrap();
        let scaled = sim.with_data(sim.data().scaled(-2.5)).unwrap();
        let b = scaled.solve(&path).unwrap();
        let ua = a.final_state().scale(-2.5);
        let diff = (&ua - b.final_state()).sobolev_norm(0.0) / ua.sobolev_norm(0.0);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn blow_up_is_reported_with_step() {
        let mut cs = zero_set(64, 1.0);
        let g = cs.grid().clone();
        cs.drift = SpectralField::from_fn(&g, 1, |_, _| 2.0);
        let mut data = ProblemData::zero(&g, 1, 0);
        data.initial = mode(&g, 30.0);
        let sim = Simulation::from_parts(&cs, data, &SolverConfig::new(64, 1_000_000, 20.0, 400)).unwrap();
        assert!(sim.stability_number().unwrap() > 1.0);
        match sim.solve_trajectory(0) {
            Err(Error::BlowUp { step, .. }) => assert!(step > 1 && step < 400),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn identical_viscosities_give_zero_difference() {
        let p = Problem::builtin("zero").unwrap();
        let sim = Simulation::new(&p, &SolverConfig::new(16, 4, 0.1, 20), None).unwrap();
        let t = sim.cauchy_study(&[4, 4, 8], 3, 1).unwrap();
        assert!(t.rows.iter().all(|r| r.sup_mean_sq_diff == 0.0));
        assert_eq!(t.slope, None);
        assert!(sim.cauchy_study(&[8, 4], 3, 1).is_err());

        let p = Problem::builtin("smooth").unwrap();
        let sim = Simulation::new(&p, &SolverConfig::new(32, 4, 0.05, 20), None).unwrap();
        let t = sim.cauchy_study(&[4, 4], 2, 1).unwrap();
        assert_eq!(t.rows[0].sup_mean_sq_diff, 0.0);
    }

    #[test]
    fn moment_report_guards_zero_data_and_scales() {
        let p = Problem::builtin("zero").unwrap();
        let sim = Simulation::new(&p, &SolverConfig::new(16, 4, 0.1, 20), None).unwrap();
        let ens = sim.ensemble(5, 4).unwrap();
        let rep = sim.moment_estimates(&ens, 1).unwrap();
        assert!(rep.degenerate && rep.ratio.is_none());

        let p = Problem::builtin("smooth").unwrap();
        let mut cfg = SolverConfig::new(32, 8, 0.05, 25);
        cfg.order = 2;
        let sim = Simulation::new(&p, &cfg, None).unwrap();
        let ens = sim.ensemble(5, 4).unwrap();
        let r1 = sim.moment_estimates(&ens, 2).unwrap();
        let big = sim.with_data(sim.data().scaled(3.0)).unwrap();
        let ens3 = big.ensemble(5, 4).unwrap();
        let r3 = big.moment_estimates(&ens3, 2).unwrap();
        assert!((r3.lhs / r1.lhs - 9.0).abs() < 1e-9);
        assert!((r3.rhs / r1.rhs - 9.0).abs() < 1e-9);
        assert!((r3.ratio.unwrap() / r1.ratio.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dissipation_is_nondecreasing() {
        let p = Problem::builtin("smooth").unwrap();
        let sim = Simulation::new(&p, &SolverConfig::new(32, 4, 0.05, 25), None).unwrap();
        let t = sim.solve_trajectory(2).unwrap();
        let d: Vec<f64> = t.ledger.rows.iter().map(|r| r.dissipation).collect();
        assert!(d.windows(2).all(|w| w[1] >= w[0]));
        assert!(t.ledger.rows.iter().all(|r| r.norms_sq.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn conjugated_update_agrees_with_direct() {
        // stepping v = Lambda^m u with the conjugated operators reproduces Lambda^m of the direct path
        let p = Problem::builtin("smooth").unwrap();
        let sim = Simulation::new(&p, &SolverConfig::new(32, 8, 0.02, 10), None).unwrap();
        let path = sim.path(4).unwrap();
        let direct = sim.solve(&path).unwrap();
        for m in [0.0, 1.0] {
            let mut v = sim.data().initial.apply_lambda(m).unwrap();
            for k in 0..10 {
                let u = v.apply_lambda(-m).unwrap();
                let out = sim.step(&u, &path, k).unwrap();
                v = out.state.apply_lambda(m).unwrap();
            }
            let back = v.apply_lambda(-m).unwrap();
            let diff = (&back - direct.final_state()).sobolev_norm(0.0) / direct.final_state().sobolev_norm(0.0);
            assert!(diff < 1e-12, "m = {m}: {diff}");
        }
    }
}
