//! Coefficient sets and the drift, noise and jump operators of the system.
//!
//! Index conventions (all row-major):
//! * `sigma[k]`: channel `i * R + rho` holds `sigma^{k; i rho}`.
//! * `upsilon[k]`: channel `(l * d2 + lb) * R + rho`.
//! * `drift`: channel `i`; `zero_order`: channel `l * d2 + lb`.
//! * The noise operator returns channel `l * R + rho`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::jump::{JumpAtom, JumpCatalog};
use crate::spectral::{SpectralField, TorusGrid};

/// Catalog and smoothness constants attached to a coefficient set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Regularity {
    pub n0: f64,
    pub eta: f64,
    /// Sobolev order `m`.
    pub order: usize,
    pub beta: f64,
}

impl Default for Regularity {
    fn default() -> Self {
        Regularity {
            n0: 100.0,
            eta: 0.5,
            order: 2,
            beta: 1.0,
        }
    }
}

/// All coefficients of the system sampled on one grid.
#[derive(Clone, Debug)]
pub struct CoefficientSet {
    grid: Arc<TorusGrid>,
    system: usize,
    drivers: usize,
    pub sigma: [SpectralField; 2],
    pub upsilon: [SpectralField; 2],
    pub drift: SpectralField,
    pub zero_order: SpectralField,
    pub jumps: JumpCatalog,
    pub regularity: Regularity,
}

impl CoefficientSet {
    /// All coefficients zero, no atoms.
    pub fn zero(grid: &Arc<TorusGrid>, system: usize, drivers: usize) -> Result<Self> {
        if system == 0 || drivers == 0 {
            return Err(Error::param("system size and driver count must be >= 1"));
        }
        let d = grid.dim();
        let sig = SpectralField::zeros(grid, d * drivers);
        let ups = SpectralField::zeros(grid, system * system * drivers);
        Ok(CoefficientSet {
            grid: grid.clone(),
            system,
            drivers,
            sigma: [sig.clone(), sig],
            upsilon: [ups.clone(), ups],
            drift: SpectralField::zeros(grid, d),
            zero_order: SpectralField::zeros(grid, system * system),
            jumps: JumpCatalog::empty(),
            regularity: Regularity::default(),
        })
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// `d2`, the number of unknown components.
    pub fn system(&self) -> usize {
        self.system
    }

    /// `R`, the number of Wiener drivers.
    pub fn drivers(&self) -> usize {
        self.drivers
    }

    /// Checks channel counts of every field and atom.
    pub fn check_shapes(&self) -> Result<()> {
        let (d, d2, r) = (self.dim(), self.system, self.drivers);
        let want = [
            ("sigma1", &self.sigma[0], d * r),
            ("sigma2", &self.sigma[1], d * r),
            ("upsilon1", &self.upsilon[0], d2 * d2 * r),
            ("upsilon2", &self.upsilon[1], d2 * d2 * r),
            ("drift", &self.drift, d),
            ("zero_order", &self.zero_order, d2 * d2),
        ];
        for (name, f, ch) in want {
            if f.channels() != ch || **f.grid() != *self.grid {
                return Err(Error::shape(format!(
                    "{name}: expected {ch} channels on {:?}, got {} on {:?}",
                    self.grid,
                    f.channels(),
                    f.grid()
                )));
            }
        }
        for a in &self.jumps.atoms {
            if a.system_size() != d2 || **a.grid() != *self.grid {
                return Err(Error::shape(format!("atom `{}` does not match the system", a.label)));
            }
        }
        Ok(())
    }

    pub fn atoms_of_kind(&self, kind: u8) -> impl Iterator<Item = &JumpAtom> {
        self.jumps.of_kind(kind)
    }

    /// Sup bounds of derivatives, the jump budget, and invertibility, against `n0`.
    pub fn bound_report(&self) -> Result<BoundReport> {
        let m = self.regularity.order;
        let n0 = self.regularity.n0;
        let mut items = Vec::new();
        let mut push = |name: &str, value: f64, limit: f64| {
            items.push(BoundItem {
                item: name.to_string(),
                value,
                limit,
                ok: value.is_finite() && value <= limit,
            });
        };
        push("sigma1 C^(m+1)", sup_derivatives(&self.sigma[0], m + 1)?, n0);
        push("sigma2 C^(m+1)", sup_derivatives(&self.sigma[1], m + 1)?, n0);
        push("upsilon1 C^(m+1)", sup_derivatives(&self.upsilon[0], m + 1)?, n0);
        push("upsilon2 C^(m+1)", sup_derivatives(&self.upsilon[1], m + 1)?, n0);
        push("drift C^m", sup_derivatives(&self.drift, m)?, n0);
        push("zero_order C^m", sup_derivatives(&self.zero_order, m)?, n0);
        push("jump budget", self.jumps.budget(), n0);
        let reports = self.jumps.hadamard_reports(n0);
        let worst = reports.iter().map(|r| r.max_inverse_norm).fold(0.0, f64::max);
        let all_pass = reports.iter().all(|r| r.passed);
        push("inverse jacobian", if all_pass { worst } else { f64::INFINITY }, n0);
        let passed = items.iter().all(|i| i.ok);
        Ok(BoundReport { items, passed })
    }
}

/// Largest sup norm over all derivatives of order <= `order`.
fn sup_derivatives(f: &SpectralField, order: usize) -> Result<f64> {
    let mut best = f.to_physical().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if order > 0 {
        let st = f.derivative_stack(order)?;
        best = best.max(st.to_physical().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    Ok(best)
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundItem {
    pub item: String,
    pub value: f64,
    pub limit: f64,
    pub ok: bool,
}

/// Machine-readable validation result of a coefficient set.
#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub items: Vec<BoundItem>,
    pub passed: bool,
}

/// Per-atom grid tables used in the jump terms.
#[derive(Clone, Debug)]
struct AtomTables {
    kind: u8,
    weight: f64,
    // d channels, M grid
    disp: Vec<f64>,
    // d2*d2 channels, M grid
    rho: Vec<f64>,
    atom: JumpAtom,
}

/// Precomputed products for fast operator application.
#[derive(Clone, Debug)]
pub struct OperatorAssembly {
    cs: CoefficientSet,
    // [k][i*d + j] on the padded grid, 1/2 sum_rho sigma^i sigma^j
    diffusion: [Vec<Vec<f64>>; 2],
    // [k][(i*d2 + l)*d2 + lb], sum_rho sigma^{i rho} upsilon^{l lb rho}
    first_order: [Vec<Vec<f64>>; 2],
    drift: Vec<Vec<f64>>,
    zero_order: Vec<Vec<f64>>,
    sigma1: Vec<Vec<f64>>,
    upsilon1: Vec<Vec<f64>>,
    atoms: Vec<AtomTables>,
}

fn padded_all(f: &SpectralField) -> Vec<Vec<f64>> {
    (0..f.channels()).map(|c| f.padded_channel(c, None)).collect()
}

/// Selection of terms for [`OperatorAssembly::local_part`].
#[derive(Clone, Copy, Debug)]
struct Terms {
    kinds: [bool; 2],
    lower: bool,
}

impl OperatorAssembly {
    pub fn new(cs: &CoefficientSet) -> Result<Self> {
        cs.check_shapes()?;
        let d = cs.dim();
        let d2 = cs.system;
        let r = cs.drivers;
        let np = cs.grid.padded_len();
        let mut diffusion: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        let mut first_order: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for k in 0..2 {
            let sig = padded_all(&cs.sigma[k]);
            let ups = padded_all(&cs.upsilon[k]);
            let mut diff = vec![vec![0.0; np]; d * d];
            for i in 0..d {
                for j in 0..d {
                    for rho in 0..r {
                        let (a, b) = (&sig[i * r + rho], &sig[j * r + rho]);
                        for p in 0..np {
                            diff[i * d + j][p] += 0.5 * a[p] * b[p];
                        }
                    }
                }
            }
            let mut first = vec![vec![0.0; np]; d * d2 * d2];
            for i in 0..d {
                for l in 0..d2 {
                    for lb in 0..d2 {
                        let out = &mut first[(i * d2 + l) * d2 + lb];
                        for rho in 0..r {
                            let (a, b) = (&sig[i * r + rho], &ups[(l * d2 + lb) * r + rho]);
                            for p in 0..np {
                                out[p] += a[p] * b[p];
                            }
                        }
                    }
                }
            }
            diffusion[k] = diff;
            first_order[k] = first;
        }
        let atoms = cs
            .jumps
            .atoms
            .iter()
            .map(|a| {
                // build the composer eagerly so application is allocation-light
                a.unit_composer();
                AtomTables {
                    kind: a.kind,
                    weight: a.weight,
                    disp: a.displacement().to_physical(),
                    rho: a.zero_order().to_physical(),
                    atom: a.clone(),
                }
            })
            .collect();
        Ok(OperatorAssembly {
            diffusion,
            first_order,
            drift: padded_all(&cs.drift),
            zero_order: padded_all(&cs.zero_order),
            sigma1: padded_all(&cs.sigma[0]),
            upsilon1: padded_all(&cs.upsilon[0]),
            atoms,
            cs: cs.clone(),
        })
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        &self.cs
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.cs.grid
    }

    fn check_input(&self, v: &SpectralField) -> Result<()> {
        if v.channels() != self.cs.system {
            return Err(Error::shape(format!(
                "operator expects {} channels, got {}",
                self.cs.system,
                v.channels()
            )));
        }
        if **v.grid() != *self.cs.grid {
            return Err(Error::shape("field grid differs from coefficient grid"));
        }
        Ok(())
    }

    /// Second- and first-order local terms (and optionally `b.grad + c`) on the padded grid.
    fn local_part(&self, v: &SpectralField, terms: Terms) -> SpectralField {
        let g = &self.cs.grid;
        let d = g.dim();
        let d2 = self.cs.system;
        let np = g.padded_len();
        let any_k = terms.kinds[0] || terms.kinds[1];
        let grad_sym = |a: usize| {
            let g = g.clone();
            move |i: usize| {
                if g.is_nyquist(i) {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, 2.0 * PI * g.xi(a, i))
                }
            }
        };
        let hess_sym = |a: usize, b: usize| {
            let g = g.clone();
            move |i: usize| {
                if g.is_nyquist(i) {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(-4.0 * PI * PI * g.xi(a, i) * g.xi(b, i), 0.0)
                }
            }
        };
        let vals: Vec<Vec<f64>> = (0..d2).map(|l| v.padded_channel(l, None)).collect();
        let grads: Vec<Vec<Vec<f64>>> = (0..d2)
            .map(|l| (0..d).map(|a| v.padded_channel(l, Some(&grad_sym(a)))).collect())
            .collect();
        let mut out = vec![vec![0.0; np]; d2];
        if any_k {
            for l in 0..d2 {
                for a in 0..d {
                    for b in a..d {
                        let h = v.padded_channel(l, Some(&hess_sym(a, b)));
                        let mult = if a == b { 1.0 } else { 2.0 };
                        for k in 0..2 {
                            if !terms.kinds[k] {
                                continue;
                            }
                            let coef = &self.diffusion[k][a * d + b];
                            for p in 0..np {
                                out[l][p] += mult * coef[p] * h[p];
                            }
                        }
                    }
                }
            }
            for k in 0..2 {
                if !terms.kinds[k] {
                    continue;
                }
                for i in 0..d {
                    for l in 0..d2 {
                        for lb in 0..d2 {
                            let coef = &self.first_order[k][(i * d2 + l) * d2 + lb];
                            let gv = &grads[lb][i];
                            for p in 0..np {
                                out[l][p] += coef[p] * gv[p];
                            }
                        }
                    }
                }
            }
        }
        if terms.lower {
            for l in 0..d2 {
                for i in 0..d {
                    let (b, gv) = (&self.drift[i], &grads[l][i]);
                    for p in 0..np {
                        out[l][p] += b[p] * gv[p];
                    }
                }
                for lb in 0..d2 {
                    let (c, vv) = (&self.zero_order[l * d2 + lb], &vals[lb]);
                    for p in 0..np {
                        out[l][p] += c[p] * vv[p];
                    }
                }
            }
        }
        SpectralField::from_padded(g, &out)
    }

    /// Grid values of `v`, its gradient, and its composition with each atom.
    fn jump_inputs(&self, v: &SpectralField, kind: Option<u8>) -> Result<JumpInputs> {
        let d = self.cs.dim();
        let vals = v.to_physical();
        let grads: Vec<Vec<f64>> = (0..d).map(|a| v.derivative(a).to_physical()).collect();
        let composed = self
            .atoms
            .iter()
            .map(|t| match kind {
                Some(k) if t.kind != k => Ok(None),
                _ => t.atom.unit_composer().sample(v).map(Some),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(JumpInputs { vals, grads, composed })
    }

    /// Adds `weight * [(I + rho)(v(x+zeta) - v) - zeta.grad v]` for atoms of `kind` into `out`.
    fn accumulate_jumps(&self, inp: &JumpInputs, kind: u8, out: &mut [f64]) {
        let n = self.cs.grid.len();
        let d = self.cs.dim();
        let d2 = self.cs.system;
        for (t, comp) in self.atoms.iter().zip(&inp.composed) {
            if t.kind != kind || t.weight == 0.0 {
                continue;
            }
            let comp = comp.as_ref().expect("composition computed for this kind");
            for l in 0..d2 {
                for p in 0..n {
                    let mut acc = 0.0;
                    for lb in 0..d2 {
                        let delta = f64::from(l == lb);
                        let diff = comp[lb * n + p] - inp.vals[lb * n + p];
                        acc += (delta + t.rho[(l * d2 + lb) * n + p]) * diff;
                    }
                    for a in 0..d {
                        acc -= t.disp[a * n + p] * inp.grads[a][l * n + p];
                    }
                    out[l * n + p] += t.weight * acc;
                }
            }
        }
    }

    fn jump_part(&self, v: &SpectralField, kind: u8) -> Result<SpectralField> {
        let inp = self.jump_inputs(v, Some(kind))?;
        let mut out = vec![0.0; self.cs.system * self.cs.grid.len()];
        self.accumulate_jumps(&inp, kind, &mut out);
        SpectralField::from_physical(&self.cs.grid, self.cs.system, &out)
    }

    fn only(k: usize) -> Terms {
        let mut kinds = [false; 2];
        kinds[k] = true;
        Terms { kinds, lower: false }
    }

    /// Diffusion and first-order part of `L^k` (`k` in {1, 2}).
    pub fn apply_a(&self, k: u8, v: &SpectralField) -> Result<SpectralField> {
        self.check_input(v)?;
        let k = kind_index(k)?;
        Ok(self.local_part(v, Self::only(k)))
    }

    /// Integro part of `L^k`.
    pub fn apply_j(&self, k: u8, v: &SpectralField) -> Result<SpectralField> {
        self.check_input(v)?;
        kind_index(k)?;
        self.jump_part(v, k)
    }

    /// `L^k = A^k + J^k`.
    pub fn apply_lk(&self, k: u8, v: &SpectralField) -> Result<SpectralField> {
        let a = self.apply_a(k, v)?;
        let j = self.apply_j(k, v)?;
        Ok(&a + &j)
    }

    pub fn apply_a1(&self, v: &SpectralField) -> Result<SpectralField> {
        self.apply_a(1, v)
    }

    pub fn apply_j1(&self, v: &SpectralField) -> Result<SpectralField> {
        self.apply_j(1, v)
    }

    pub fn apply_l2(&self, v: &SpectralField) -> Result<SpectralField> {
        self.apply_lk(2, v)
    }

    /// `b.grad v + c v`.
    pub fn apply_drift(&self, v: &SpectralField) -> Result<SpectralField> {
        self.check_input(v)?;
        Ok(self.local_part(
            v,
            Terms {
                kinds: [false, false],
                lower: true,
            },
        ))
    }

    /// `L v (+ f)`, evaluated in one fused pass.
    pub fn apply_l(&self, v: &SpectralField, f: Option<&SpectralField>) -> Result<SpectralField> {
        self.check_input(v)?;
        self.evaluate(v, false)?.drift_with(f)
    }

    /// Noise operator: channel `l * R + rho`.
    pub fn apply_n(&self, v: &SpectralField) -> Result<SpectralField> {
        self.check_input(v)?;
        Ok(self.noise_part(v))
    }

    fn noise_part(&self, v: &SpectralField) -> SpectralField {
        let g = &self.cs.grid;
        let (d, d2, r) = (g.dim(), self.cs.system, self.cs.drivers);
        let np = g.padded_len();
        let vals: Vec<Vec<f64>> = (0..d2).map(|l| v.padded_channel(l, None)).collect();
        let grads: Vec<Vec<Vec<f64>>> = (0..d2)
            .map(|l| {
                (0..d)
                    .map(|a| {
                        let gg = g.clone();
                        let sym = move |i: usize| {
                            if gg.is_nyquist(i) {
                                Complex64::new(0.0, 0.0)
                            } else {
                                Complex64::new(0.0, 2.0 * PI * gg.xi(a, i))
                            }
                        };
                        v.padded_channel(l, Some(&sym))
                    })
                    .collect()
            })
            .collect();
        let mut out = vec![vec![0.0; np]; d2 * r];
        for l in 0..d2 {
            for rho in 0..r {
                let o = &mut out[l * r + rho];
                for i in 0..d {
                    let (s, gv) = (&self.sigma1[i * r + rho], &grads[l][i]);
                    for p in 0..np {
                        o[p] += s[p] * gv[p];
                    }
                }
                for lb in 0..d2 {
                    let (u, vv) = (&self.upsilon1[(l * d2 + lb) * r + rho], &vals[lb]);
                    for p in 0..np {
                        o[p] += u[p] * vv[p];
                    }
                }
            }
        }
        SpectralField::from_padded(g, &out)
    }

    fn atom_index(&self, label: &str) -> Option<usize> {
        self.atoms.iter().position(|t| t.atom.label == label)
    }

    /// `I_z v = (I + rho) v(x + zeta) - v` for the catalog-1 atom at `index`.
    pub fn apply_i(&self, v: &SpectralField, index: usize) -> Result<SpectralField> {
        self.check_input(v)?;
        let t = self
            .atoms
            .get(index)
            .ok_or_else(|| Error::param(format!("no atom with index {index}")))?;
        if t.kind != 1 {
            return Err(Error::param(format!("atom `{}` is not of kind 1", t.atom.label)));
        }
        let comp = t.atom.unit_composer().sample(v)?;
        let vals = v.to_physical();
        Ok(self.i_from_samples(t, &comp, &vals))
    }

    /// [`Self::apply_i`] by label.
    pub fn apply_i_named(&self, v: &SpectralField, label: &str) -> Result<SpectralField> {
        let idx = self
            .atom_index(label)
            .ok_or_else(|| Error::param(format!("no atom labelled `{label}`")))?;
        self.apply_i(v, idx)
    }

    fn i_from_samples(&self, t: &AtomTables, comp: &[f64], vals: &[f64]) -> SpectralField {
        let n = self.cs.grid.len();
        let d2 = self.cs.system;
        let mut out = vec![0.0; d2 * n];
        for l in 0..d2 {
            for p in 0..n {
                let mut acc = -vals[l * n + p];
                for lb in 0..d2 {
                    let delta = f64::from(l == lb);
                    acc += (delta + t.rho[(l * d2 + lb) * n + p]) * comp[lb * n + p];
                }
                out[l * n + p] = acc;
            }
        }
        SpectralField::from_physical(&self.cs.grid, d2, &out).expect("consistent shape")
    }

    /// Indices of the catalog-1 atoms, in catalog order.
    pub fn kind_one_atoms(&self) -> Vec<usize> {
        (0..self.atoms.len()).filter(|&i| self.atoms[i].kind == 1).collect()
    }

    pub fn atom(&self, index: usize) -> &JumpAtom {
        &self.atoms[index].atom
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Everything one time step needs, sharing compositions between `L`, `J` and `I`.
    pub fn evaluate(&self, v: &SpectralField, with_noise: bool) -> Result<Evaluation> {
        self.check_input(v)?;
        let local = self.local_part(
            v,
            Terms {
                kinds: [true, true],
                lower: true,
            },
        );
        let inp = self.jump_inputs(v, None)?;
        let n = self.cs.grid.len();
        let d2 = self.cs.system;
        let mut jumps = vec![0.0; d2 * n];
        self.accumulate_jumps(&inp, 1, &mut jumps);
        self.accumulate_jumps(&inp, 2, &mut jumps);
        let jf = SpectralField::from_physical(&self.cs.grid, d2, &jumps)?;
        let drift = &local + &jf;
        let (noise, compensated) = if with_noise {
            let noise = self.noise_part(v);
            let comp = self
                .atoms
                .iter()
                .zip(&inp.composed)
                .filter(|(t, _)| t.kind == 1)
                .map(|(t, c)| self.i_from_samples(t, c.as_ref().expect("all atoms composed"), &inp.vals))
                .collect();
            (Some(noise), comp)
        } else {
            (None, Vec::new())
        };
        Ok(Evaluation {
            drift,
            noise,
            jumps: compensated,
        })
    }
}

struct JumpInputs {
    vals: Vec<f64>,
    grads: Vec<Vec<f64>>,
    composed: Vec<Option<Vec<f64>>>,
}

/// Operator values at one state.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// `L v`.
    pub drift: SpectralField,
    /// `N v`, channel `l * R + rho`.
    pub noise: Option<SpectralField>,
    /// `I_z v` for each catalog-1 atom, in catalog order.
    pub jumps: Vec<SpectralField>,
}

impl Evaluation {
    fn drift_with(self, f: Option<&SpectralField>) -> Result<SpectralField> {
        let mut d = self.drift;
        if let Some(f) = f {
            d.axpy(1.0, f)?;
        }
        Ok(d)
    }
}

fn kind_index(k: u8) -> Result<usize> {
    match k {
        1 => Ok(0),
        2 => Ok(1),
        _ => Err(Error::param(format!("operator kind must be 1 or 2, got {k}"))),
    }
}

/// One application of the coefficient-extension rules (system size `d2 -> d2 (d+1)`).
pub fn extend_once(cs: &CoefficientSet) -> Result<CoefficientSet> {
    cs.check_shapes()?;
    let g = cs.grid.clone();
    let d = g.dim();
    let d2 = cs.system;
    let r = cs.drivers;
    let e = d + 1;
    let d2x = d2 * e;
    let np = g.padded_len();
    let idx = |l: usize, j: usize| l * e + j;

    // padded values of f and of d_j f for every channel
    let with_grads = |f: &SpectralField| -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let vals = padded_all(f);
        let grads = (0..d).map(|a| padded_all(&f.derivative(a))).collect();
        (vals, grads)
    };
    let (sig, dsig): (Vec<_>, Vec<_>) = cs.sigma.iter().map(with_grads).unzip();
    let (ups, dups): (Vec<_>, Vec<_>) = cs.upsilon.iter().map(with_grads).unzip();
    let (_, db) = with_grads(&cs.drift);
    let (cv, dc) = with_grads(&cs.zero_order);
    let _ = sig;

    let mut upsilon_ext = Vec::with_capacity(2);
    for k in 0..2 {
        let mut out = vec![vec![0.0; np]; d2x * d2x * r];
        for l in 0..d2 {
            for j in 0..e {
                for lb in 0..d2 {
                    for jb in 0..e {
                        for rho in 0..r {
                            let o = &mut out[(idx(l, j) * d2x + idx(lb, jb)) * r + rho];
                            if j == jb {
                                add(o, &ups[k][(l * d2 + lb) * r + rho]);
                            }
                            if j >= 1 {
                                if jb >= 1 && l == lb {
                                    add(o, &dsig[k][j - 1][(jb - 1) * r + rho]);
                                }
                                if jb == 0 {
                                    add(o, &dups[k][j - 1][(l * d2 + lb) * r + rho]);
                                }
                            }
                        }
                    }
                }
            }
        }
        upsilon_ext.push(SpectralField::from_padded(&g, &out));
    }

    // atoms: padded zeta gradients and rho values
    let mut atoms_ext = Vec::with_capacity(cs.jumps.atoms.len());
    let mut jump_c = vec![vec![0.0; np]; d2x * d2x];
    for atom in &cs.jumps.atoms {
        let (rho, drho) = with_grads(atom.zero_order());
        let (_, dzeta) = with_grads(atom.displacement());
        let mut out = vec![vec![0.0; np]; d2x * d2x];
        for l in 0..d2 {
            for j in 0..e {
                for lb in 0..d2 {
                    for jb in 0..e {
                        let o = &mut out[idx(l, j) * d2x + idx(lb, jb)];
                        if j == jb {
                            add(o, &rho[l * d2 + lb]);
                        }
                        if j >= 1 {
                            if jb == 0 {
                                add(o, &drho[j - 1][l * d2 + lb]);
                            } else {
                                let dz = &dzeta[j - 1][jb - 1];
                                let rl = &rho[l * d2 + lb];
                                let delta = f64::from(l == lb);
                                for p in 0..np {
                                    o[p] += (delta + rl[p]) * dz[p];
                                }
                                let cc = &mut jump_c[idx(l, j) * d2x + idx(lb, jb)];
                                for p in 0..np {
                                    cc[p] += atom.weight * rl[p] * dz[p];
                                }
                            }
                        }
                    }
                }
            }
        }
        atoms_ext.push(atom.with_zero_order(SpectralField::from_padded(&g, &out))?);
    }

    let mut c_out = jump_c;
    for l in 0..d2 {
        for j in 0..e {
            for lb in 0..d2 {
                for jb in 0..e {
                    let o = &mut c_out[idx(l, j) * d2x + idx(lb, jb)];
                    if j == jb {
                        add(o, &cv[l * d2 + lb]);
                    }
                    if j == 0 {
                        continue;
                    }
                    if jb == 0 {
                        add(o, &dc[j - 1][l * d2 + lb]);
                        continue;
                    }
                    if l == lb {
                        add(o, &db[j - 1][jb - 1]);
                    }
                    for k in 0..2 {
                        for rho in 0..r {
                            let u = &ups[k][(l * d2 + lb) * r + rho];
                            let s = &dsig[k][j - 1][(jb - 1) * r + rho];
                            for p in 0..np {
                                o[p] += u[p] * s[p];
                            }
                        }
                    }
                }
            }
        }
    }

    let [u1, u2]: [SpectralField; 2] = upsilon_ext.try_into().expect("two kinds");
    Ok(CoefficientSet {
        grid: g.clone(),
        system: d2x,
        drivers: r,
        sigma: cs.sigma.clone(),
        upsilon: [u1, u2],
        drift: cs.drift.clone(),
        zero_order: SpectralField::from_padded(&g, &c_out),
        jumps: JumpCatalog {
            atoms: atoms_ext,
            eta: cs.jumps.eta,
            beta: cs.jumps.beta,
        },
        regularity: cs.regularity,
    })
}

fn add(out: &mut [f64], x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

/// `E^n` applied to a coefficient set.
pub fn extend_coefficients(cs: &CoefficientSet, n: usize) -> Result<CoefficientSet> {
    let mut out = cs.clone();
    for _ in 0..n {
        out = extend_once(&out)?;
    }
    Ok(out)
}

/// Worst relative residual of `D^n[Op v] = E^n(Op) D^n v` over `L`, `N` and every `I_z`.
pub fn extension_identity_check(cs: &CoefficientSet, v: &SpectralField, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::param("extension order must be >= 1"));
    }
    let base = OperatorAssembly::new(cs)?;
    let ext = OperatorAssembly::new(&extend_coefficients(cs, n)?)?;
    let dv = v.derivative_stack(n)?;
    let scale = v.sobolev_norm(n as f64 + 1.0).max(1e-300);
    let mut worst: f64 = 0.0;

    let lhs = base.apply_l(v, None)?.derivative_stack(n)?;
    let rhs = ext.apply_l(&dv, None)?;
    worst = worst.max((&lhs - &rhs).sobolev_norm(0.0) / scale);

    // D^n(N v) has channel (l R + rho) E + J; E^n(N) D^n v has (l E + J) R + rho
    let r = cs.drivers;
    let blocks = (cs.dim() + 1).pow(n as u32);
    let lhs = base.apply_n(v)?.derivative_stack(n)?;
    let rhs = ext.apply_n(&dv)?;
    let mut diff_sq = 0.0;
    for l in 0..cs.system {
        for rho in 0..r {
            for jj in 0..blocks {
                let a = lhs.channel((l * r + rho) * blocks + jj);
                let b = rhs.channel((l * blocks + jj) * r + rho);
                diff_sq += (&a - &b).sobolev_norm_sq(0.0);
            }
        }
    }
    worst = worst.max(diff_sq.sqrt() / scale);

    for idx in base.kind_one_atoms() {
        let lhs = base.apply_i(v, idx)?.derivative_stack(n)?;
        let rhs = ext.apply_i(&dv, idx)?;
        worst = worst.max((&lhs - &rhs).sobolev_norm(0.0) / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::spectral::FieldSampler;

    fn grid() -> Arc<TorusGrid> {
        TorusGrid::new(1, 64, 1.0).unwrap()
    }

    fn mode(g: &Arc<TorusGrid>, k: f64) -> SpectralField {
        SpectralField::from_fn(g, 1, |_, x| (2.0 * PI * k * x[0] / g.period()).cos())
    }

    fn smooth(g: &Arc<TorusGrid>, channels: usize, seed: u64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FieldSampler::new(1.0, g.points() / 8).sample(g, channels, &mut rng).unwrap()
    }

    fn field(g: &Arc<TorusGrid>, ch: usize, f: impl Fn(usize, f64) -> f64) -> SpectralField {
        SpectralField::from_fn(g, ch, |c, x| f(c, x[0]))
    }

    /// Smooth set with every term active, d1 = 1, d2 = 2, R = 2.
    fn rich_set(g: &Arc<TorusGrid>) -> CoefficientSet {
        let mut cs = CoefficientSet::zero(g, 2, 2).unwrap();
        let t = |x: f64| 2.0 * PI * x;
        cs.sigma[0] = field(g, 2, |c, x| if c == 0 { 0.3 * t(x).sin() } else { 0.2 + 0.1 * t(x).cos() });
        cs.sigma[1] = field(g, 2, |c, x| if c == 0 { 0.25 } else { 0.1 * (2.0 * t(x)).sin() });
        cs.upsilon[0] = field(g, 8, |c, x| 0.1 * (c as f64 + 1.0) * (t(x) + c as f64).cos());
        cs.upsilon[1] = field(g, 8, |c, x| 0.05 * (t(x) * (1 + c % 2) as f64).sin());
        cs.drift = field(g, 1, |_, x| 0.4 + 0.3 * t(x).sin());
        cs.zero_order = field(g, 4, |c, x| -0.2 * (c as f64 - 1.5) * t(x).cos());
        let disp1 = field(g, 1, |_, x| 0.05 + 0.03 * t(x).sin());
        let rho1 = field(g, 4, |c, x| 0.1 * (t(x) + c as f64).sin());
        let disp2 = field(g, 1, |_, x| -0.04 * t(x).cos());
        let rho2 = field(g, 4, |c, _| if c == 0 || c == 3 { 0.05 } else { 0.0 });
        cs.jumps = JumpCatalog::new(
            vec![
                JumpAtom::new("a", 1, 1.5, disp1, rho1).unwrap(),
                JumpAtom::new("b", 2, 0.7, disp2, rho2).unwrap(),
            ],
            0.5,
            1.0,
        )
        .unwrap();
        cs
    }

    #[test]
    fn zero_set_gives_zero() {
        let g = grid();
        let cs = CoefficientSet::zero(&g, 1, 1).unwrap();
        let op = OperatorAssembly::new(&cs).unwrap();
        let v = smooth(&g, 1, 1);
        assert_eq!(op.apply_a1(&v).unwrap().sobolev_norm(0.0), 0.0);
        assert_eq!(op.apply_n(&v).unwrap().sobolev_norm(0.0), 0.0);
        assert_eq!(op.apply_j1(&v).unwrap().sobolev_norm(0.0), 0.0);
        assert_eq!(op.apply_l2(&v).unwrap().sobolev_norm(0.0), 0.0);
        assert_eq!(op.apply_l(&v, None).unwrap().sobolev_norm(0.0), 0.0);
    }

    #[test]
    fn constant_sigma_gives_second_derivative() {
        let g = grid();
        let mut cs = CoefficientSet::zero(&g, 1, 1).unwrap();
        cs.sigma[0] = SpectralField::from_fn(&g, 1, |_, _| 2f64.sqrt());
        let op = OperatorAssembly::new(&cs).unwrap();
        let v = smooth(&g, 1, 2);
        let expect = v.derivative(0).derivative(0);
        assert!(op.apply_a1(&v).unwrap().max_rel_diff(&expect) < 1e-12);
    }

    #[test]
    fn constant_coefficient_symbol() {
        // A1 = (s^2/2) d^2 + s u d on one mode: symbol -(s^2/2)(2 pi xi)^2 + i s u (2 pi xi)
        let g = TorusGrid::new(1, 32, 2.0).unwrap();
        let (s, u, k) = (0.7, 0.3, 3.0);
        let mut cs = CoefficientSet::zero(&g, 1, 1).unwrap();
        cs.sigma[0] = SpectralField::from_fn(&g, 1, |_, _| s);
        cs.upsilon[0] = SpectralField::from_fn(&g, 1, |_, _| u);
        let op = OperatorAssembly::new(&cs).unwrap();
        let v = mode(&g, k);
        let w = 2.0 * PI * k / 2.0;
        let sym = Complex64::new(-0.5 * s * s * w * w, s * u * w);
        let got = op.apply_a1(&v).unwrap();
        let idx = g.mode_index(&[3]).unwrap();
        assert!((got.coeffs()[idx] - v.coeffs()[idx] * sym).norm() < 1e-13);
        // noise operator with constant e_1 sigma and no upsilon
        cs.upsilon[0] = SpectralField::zeros(&g, 1);
        let op = OperatorAssembly::new(&cs).unwrap();
        let nv = op.apply_n(&v).unwrap();
        assert!(nv.max_rel_diff(&v.derivative(0).scale(s)) < 1e-13);
    }

    #[test]
    fn translation_jump_cases() {
        let g = grid();
        let c = 0.1;
        let lam = 2.0;
        let mut cs = CoefficientSet::zero(&g, 1, 1).unwrap();
        let atom = JumpAtom::translation(&g, 1, 1, lam, &[c]).unwrap();
        cs.jumps = JumpCatalog::new(vec![atom], 0.5, 1.0).unwrap();
        let op = OperatorAssembly::new(&cs).unwrap();
        let v = mode(&g, 3.0);
        let shifted = SpectralField::from_fn(&g, 1, |_, x| (2.0 * PI * 3.0 * (x[0] + c)).cos());
        let iv = op.apply_i(&v, 0).unwrap();
        assert!(iv.max_rel_diff(&(&shifted - &v)) < 1e-12);
        let jv = op.apply_j1(&v).unwrap();
        let expect = (&(&shifted - &v) - &v.derivative(0).scale(c)).scale(lam);
        assert!(jv.max_rel_diff(&expect) < 1e-12);
        assert!(op.apply_i(&v, 5).is_err());
    }

    #[test]
    fn jump_taylor_consistency() {
        let g = TorusGrid::new(1, 128, 1.0).unwrap();
        let v = smooth(&g, 1, 3);
        let mut pts = Vec::new();
        for a in [0.004, 0.008, 0.016] {
            let mut cs = CoefficientSet::zero(&g, 1, 1).unwrap();
            let disp = SpectralField::from_fn(&g, 1, |_, x| a * (2.0 * PI * x[0]).sin());
            let atom = JumpAtom::new("t", 1, 1.0, disp, SpectralField::zeros(&g, 1)).unwrap();
            cs.jumps = JumpCatalog::new(vec![atom], 0.5, 1.0).unwrap();
            let op = OperatorAssembly::new(&cs).unwrap();
            pts.push((a.ln(), op.apply_j1(&v).unwrap().sobolev_norm(0.0).ln()));
        }
        let slope = crate::stats::fit_slope(&pts);
        assert!((slope - 2.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn drift_only() {
        let g = grid();
        let mut cs = CoefficientSet::zero(&g, 1, 1).unwrap();
        cs.drift = SpectralField::from_fn(&g, 1, |_, _| 0.7);
        let op = OperatorAssembly::new(&cs).unwrap();
        let v = smooth(&g, 1, 4);
        let got = op.apply_l(&v, None).unwrap();
        assert!(got.max_rel_diff(&v.derivative(0).scale(0.7)) < 1e-12);
    }

    #[test]
    fn full_operator_is_sum_of_parts() {
        let g = grid();
        let cs = rich_set(&g);
        let op = OperatorAssembly::new(&cs).unwrap();
        let v = smooth(&g, 2, 5);
        let f = smooth(&g, 2, 6);
        let full = op.apply_l(&v, Some(&f)).unwrap();
        let mut sum = op.apply_lk(1, &v).unwrap();
        sum.axpy(1.0, &op.apply_l2(&v).unwrap()).unwrap();
        sum.axpy(1.0, &op.apply_drift(&v).unwrap()).unwrap();
        sum.axpy(1.0, &f).unwrap();
        assert!(full.max_rel_diff(&sum) < 1e-12);
    }

    #[test]
    fn linearity() {
        let g = grid();
        let cs = rich_set(&g);
        let op = OperatorAssembly::new(&cs).unwrap();
        let (v, w) = (smooth(&g, 2, 7), smooth(&g, 2, 8));
        let (a, b) = (1.3, -0.4);
        let comb = &v.scale(a) + &w.scale(b);
        let check = |f: &dyn Fn(&SpectralField) -> SpectralField| {
            let lhs = f(&comb);
            let rhs = &f(&v).scale(a) + &f(&w).scale(b);
            assert!(lhs.max_rel_diff(&rhs) < 1e-12);
        };
        check(&|x| op.apply_l(x, None).unwrap());
        check(&|x| op.apply_n(x).unwrap());
        check(&|x| op.apply_i(x, 0).unwrap());
        check(&|x| op.apply_j1(x).unwrap());
    }

    #[test]
    fn extension_of_constants_is_block_diagonal() {
        let g = grid();
        let mut cs = CoefficientSet::zero(&g, 1, 1).unwrap();
        cs.upsilon[0] = SpectralField::from_fn(&g, 1, |_, _| 0.3);
        cs.zero_order = SpectralField::from_fn(&g, 1, |_, _| -0.2);
        let ext = extend_coefficients(&cs, 1).unwrap();
        assert_eq!(ext.system(), 2);
        let c = ext.zero_order.to_physical();
        let n = g.len();
        // (l j, lb jb) with j, jb in {0,1}
        for (ch, want) in [(0, -0.2), (1, 0.0), (2, 0.0), (3, -0.2)] {
            assert!(c[ch * n..(ch + 1) * n].iter().all(|v| (v - want).abs() < 1e-14));
        }
        let zero = CoefficientSet::zero(&g, 1, 1).unwrap();
        let ext = extend_coefficients(&zero, 2).unwrap();
        assert_eq!(ext.zero_order.sobolev_norm(0.0), 0.0);
    }

    #[test]
    fn extension_of_drift_matches_hand_formula() {
        let g = grid();
        let mut cs = CoefficientSet::zero(&g, 1, 1).unwrap();
        cs.drift = SpectralField::from_fn(&g, 1, |_, x| (2.0 * PI * x[0]).sin());
        let ext = extend_coefficients(&cs, 1).unwrap();
        let c = ext.zero_order.to_physical();
        let n = g.len();
        for p in 0..n {
            let x = g.node(p)[0];
            let db = 2.0 * PI * (2.0 * PI * x).cos();
            assert!((c[3 * n + p] - db).abs() < 1e-12);
            assert!(c[p].abs() < 1e-14 && c[n + p].abs() < 1e-14 && c[2 * n + p].abs() < 1e-14);
        }
    }

    #[test]
    fn extension_identity_holds() {
        let g = grid();
        let cs = rich_set(&g);
        let v = smooth(&g, 2, 9);
        for n in [1, 2] {
            let r = extension_identity_check(&cs, &v, n).unwrap();
            assert!(r < 1e-8, "n = {n}: residual {r}");
        }
        let zero = CoefficientSet::zero(&g, 2, 2).unwrap();
        assert!(extension_identity_check(&zero, &v, 1).unwrap() == 0.0);
    }

    #[test]
    fn extension_identity_in_two_dimensions() {
        let g = TorusGrid::new(2, 32, 1.0).unwrap();
        let mut cs = CoefficientSet::zero(&g, 1, 1).unwrap();
        let t = 2.0 * PI;
        cs.sigma[0] = SpectralField::from_fn(&g, 2, |c, x| 0.2 * ((t * x[c]).sin() + 0.5));
        cs.sigma[1] = SpectralField::from_fn(&g, 2, |c, x| 0.1 * (t * (x[0] + x[1]) + c as f64).cos());
        cs.upsilon[0] = SpectralField::from_fn(&g, 1, |_, x| 0.2 * (t * x[1]).cos());
        cs.drift = SpectralField::from_fn(&g, 2, |c, x| 0.3 * (t * x[1 - c]).sin());
        cs.zero_order = SpectralField::from_fn(&g, 1, |_, x| 0.1 * (t * x[0]).sin());
        let disp = SpectralField::from_fn(&g, 2, |c, x| 0.02 * (t * x[c]).cos() + 0.01);
        let rho = SpectralField::from_fn(&g, 1, |_, x| 0.1 * (t * x[1]).sin());
        cs.jumps = JumpCatalog::new(vec![JumpAtom::new("p", 1, 1.0, disp, rho).unwrap()], 0.5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = FieldSampler::new(1.0, 4).sample(&g, 1, &mut rng).unwrap();
        let r = extension_identity_check(&cs, &v, 1).unwrap();
        assert!(r < 1e-8, "residual {r}");
    }

    #[test]
    fn bound_report_flags_large_coefficients() {
        let g = grid();
        let mut cs = rich_set(&g);
        cs.regularity.n0 = 1e3;
        let rep = cs.bound_report().unwrap();
        assert!(rep.passed, "{rep:?}");
        cs.regularity.n0 = 1e-3;
        let rep = cs.bound_report().unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn shape_errors() {
        let g = grid();
        let cs = rich_set(&g);
        let op = OperatorAssembly::new(&cs).unwrap();
        let v = smooth(&g, 1, 1);
        assert!(matches!(op.apply_l(&v, None), Err(Error::Shape(_))));
        assert!(op.apply_a(3, &smooth(&g, 2, 1)).is_err());
    }
}
