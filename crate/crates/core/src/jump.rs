//! Jump maps `x -> x + theta * zeta(x, z)`, their inverses, and related
//! determinant and kernel identities.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use gauss_quad::jacobi::GaussJacobi;
use gauss_quad::legendre::GaussLegendre;
use rustfft::num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::{wavenumber, SpectralField, TorusGrid};

const NEWTON_MAX_ITER: usize = 50;
const NEWTON_REL_TOL: f64 = 1e-10;
const RATIO_FLOOR: f64 = 1e-14;

/// Per-axis Fourier phases `exp(i 2 pi k x_a / P)` at one point.
#[derive(Clone, Debug)]
struct PointPhases {
    axes: Vec<Vec<Complex64>>,
}

impl PointPhases {
    fn new(grid: &TorusGrid, x: &[f64]) -> Self {
        let m = grid.points();
        let axes = x
            .iter()
            .map(|&xa| {
                (0..m)
                    .map(|i| {
                        let k = wavenumber(i, m) as f64;
                        Complex64::from_polar(1.0, 2.0 * PI * k * xa / grid.period())
                    })
                    .collect()
            })
            .collect();
        PointPhases { axes }
    }

    fn eval(&self, coeffs: &[Complex64]) -> f64 {
        match self.axes.len() {
            1 => {
                // fold +-k pairs: Re(c_k p_k) + Re(c_{-k} p_{-k}) = Re((c_k + conj c_{-k}) p_k)
                let p = &self.axes[0];
                let m = p.len();
                let h = m / 2;
                let mut acc = coeffs[0].re;
                for k in 1..h {
                    let s = coeffs[k] + coeffs[m - k].conj();
                    acc += s.re * p[k].re - s.im * p[k].im;
                }
                acc + coeffs[h].re * p[h].re - coeffs[h].im * p[h].im
            }
            _ => {
                let m = self.axes[0].len();
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, row) in coeffs.chunks_exact(m).enumerate() {
                    let mut inner = Complex64::new(0.0, 0.0);
                    for (c, p) in row.iter().zip(&self.axes[1]) {
                        inner += c * p;
                    }
                    acc += inner * self.axes[0][i];
                }
                acc.re
            }
        }
    }
}

/// Evaluates band-limited fields at arbitrary points by trigonometric interpolation.
#[derive(Clone, Debug)]
pub struct Composer {
    grid: Arc<TorusGrid>,
    points: Vec<PointPhases>,
}

impl Composer {
    /// Targets the given points; the output field is sampled at grid node `i` from `points[i]`.
    pub fn new(grid: &Arc<TorusGrid>, points: &[Vec<f64>]) -> Result<Self> {
        if points.len() != grid.len() {
            return Err(Error::shape(format!(
                "composer needs {} target points, got {}",
                grid.len(),
                points.len()
            )));
        }
        Ok(Composer {
            grid: grid.clone(),
            points: points.iter().map(|x| PointPhases::new(grid, x)).collect(),
        })
    }

    /// Samples `v` at the target points, returning physical values channel-major.
    pub fn sample(&self, v: &SpectralField) -> Result<Vec<f64>> {
        if **v.grid() != *self.grid {
            return Err(Error::shape("composer grid differs from field grid"));
        }
        let mut out = Vec::with_capacity(v.channels() * self.points.len());
        for ch in 0..v.channels() {
            let c = v.channel_coeffs(ch);
            out.extend(self.points.iter().map(|p| p.eval(c)));
        }
        Ok(out)
    }

    /// `x -> v(points(x))` as a field on the grid.
    pub fn apply(&self, v: &SpectralField) -> Result<SpectralField> {
        let vals = self.sample(v)?;
        SpectralField::from_physical(&self.grid, v.channels(), &vals)
    }
}

/// One atom of a finite jump measure.
#[derive(Clone, Debug)]
pub struct JumpAtom {
    pub label: String,
    /// Which measure the atom belongs to (1 or 2).
    pub kind: u8,
    pub weight: f64,
    /// `d1` channels.
    displacement: SpectralField,
    /// `d2 x d2` channels, row-major.
    zero_order: SpectralField,
    unit_composer: Arc<OnceLock<Composer>>,
}

impl JumpAtom {
    pub fn new(
        label: impl Into<String>,
        kind: u8,
        weight: f64,
        displacement: SpectralField,
        zero_order: SpectralField,
    ) -> Result<Self> {
        if !(kind == 1 || kind == 2) {
            return Err(Error::param(format!("jump kind must be 1 or 2, got {kind}")));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::param(format!("atom weight must be finite and >= 0, got {weight}")));
        }
        let d = displacement.grid().dim();
        if displacement.channels() != d {
            return Err(Error::shape(format!(
                "displacement needs {d} channels, got {}",
                displacement.channels()
            )));
        }
        displacement.check_grid(&zero_order)?;
        let d2 = (zero_order.channels() as f64).sqrt().round() as usize;
        if d2 * d2 != zero_order.channels() || d2 == 0 {
            return Err(Error::shape("zero-order field must have d2*d2 channels"));
        }
        Ok(JumpAtom {
            label: label.into(),
            kind,
            weight,
            displacement,
            zero_order,
            unit_composer: Arc::new(OnceLock::new()),
        })
    }

    pub fn displacement(&self) -> &SpectralField {
        &self.displacement
    }

    pub fn zero_order(&self) -> &SpectralField {
        &self.zero_order
    }

    /// Same jump map with a new zero-order field (possibly of another system size).
    pub fn with_zero_order(&self, zero_order: SpectralField) -> Result<JumpAtom> {
        self.displacement.check_grid(&zero_order)?;
        let d2 = (zero_order.channels() as f64).sqrt().round() as usize;
        if d2 * d2 != zero_order.channels() || d2 == 0 {
            return Err(Error::shape("zero-order field must have d2*d2 channels"));
        }
        Ok(JumpAtom {
            zero_order,
            ..self.clone()
        })
    }

    /// Cached composer for the full jump `x -> x + zeta(x)`.
    pub fn unit_composer(&self) -> &Composer {
        self.unit_composer.get_or_init(|| {
            Composer::new(self.grid(), &self.forward_points(1.0)).expect("one target per node")
        })
    }

    /// Constant displacement `c` with zero `rho`.
    pub fn translation(grid: &Arc<TorusGrid>, d2: usize, kind: u8, weight: f64, c: &[f64]) -> Result<Self> {
        if c.len() != grid.dim() {
            return Err(Error::shape("translation vector has wrong dimension"));
        }
        let disp = SpectralField::from_fn(grid, grid.dim(), |ch, _| c[ch]);
        let rho = SpectralField::zeros(grid, d2 * d2);
        JumpAtom::new(format!("shift{c:?}"), kind, weight, disp, rho)
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        self.displacement.grid()
    }

    pub fn dim(&self) -> usize {
        self.grid().dim()
    }

    pub fn system_size(&self) -> usize {
        (self.zero_order.channels() as f64).sqrt().round() as usize
    }

    /// Displacement and its Jacobian at an arbitrary point.
    fn displacement_at(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let g = self.grid();
        let d = g.dim();
        let ph = PointPhases::new(g, x);
        let mut val = vec![0.0; d];
        let mut jac = vec![vec![0.0; d]; d];
        for i in 0..d {
            let c = self.displacement.channel_coeffs(i);
            val[i] = ph.eval(c);
            for (j, entry) in jac[i].iter_mut().enumerate() {
                let dc: Vec<Complex64> = c
                    .iter()
                    .enumerate()
                    .map(|(idx, &ci)| {
                        if g.is_nyquist(idx) {
                            Complex64::new(0.0, 0.0)
                        } else {
                            ci * Complex64::new(0.0, 2.0 * PI * g.xi(j, idx))
                        }
                    })
                    .collect();
                *entry = ph.eval(&dc);
            }
        }
        (val, jac)
    }

    /// `x + theta * zeta(x)`.
    pub fn forward_map(&self, x: &[f64], theta: f64) -> Vec<f64> {
        let (z, _) = self.displacement_at(x);
        x.iter().zip(&z).map(|(a, b)| a + theta * b).collect()
    }

    /// Solves `x + theta * zeta(x) = y` by damped Newton from `x = y`.
    pub fn invert_map(&self, y: &[f64], theta: f64) -> Result<Vec<f64>> {
        let tol = NEWTON_REL_TOL * self.grid().period();
        let residual = |x: &[f64]| -> (Vec<f64>, Vec<Vec<f64>>, f64) {
            let (z, j) = self.displacement_at(x);
            let r: Vec<f64> = (0..x.len()).map(|i| x[i] + theta * z[i] - y[i]).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            (r, j, norm)
        };
        let mut x = y.to_vec();
        let (mut r, mut jac, mut norm) = residual(&x);
        for _ in 0..NEWTON_MAX_ITER {
            // polish well below the acceptance tolerance; quadratic convergence makes this cheap
            if norm <= 1e-4 * tol {
                break;
            }
            let a: Vec<Vec<f64>> = (0..x.len())
                .map(|i| {
                    (0..x.len())
                        .map(|j| f64::from(i == j) + theta * jac[i][j])
                        .collect()
                })
                .collect();
            let step = solve_small(&a, &r).ok_or_else(|| Error::Inversion {
                point: y.to_vec(),
                residual: norm,
            })?;
            let mut lambda = 1.0;
            loop {
                let cand: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a - lambda * s).collect();
                let (r2, j2, n2) = residual(&cand);
                if n2 < norm {
                    x = cand;
                    r = r2;
                    jac = j2;
                    norm = n2;
                    break;
                }
                if lambda < 1e-6 {
                    break;
                }
                lambda *= 0.5;
            }
            if lambda < 1e-6 {
                break;
            }
        }
        if norm <= tol {
            Ok(x)
        } else {
            Err(Error::Inversion {
                point: y.to_vec(),
                residual: norm,
            })
        }
    }

    /// Forward images of every grid node.
    pub fn forward_points(&self, theta: f64) -> Vec<Vec<f64>> {
        let g = self.grid();
        let disp = self.displacement.to_physical();
        let n = g.len();
        (0..n)
            .map(|i| {
                let mut x = g.node(i);
                for (a, xa) in x.iter_mut().enumerate() {
                    *xa += theta * disp[a * n + i];
                }
                x
            })
            .collect()
    }

    /// Preimages of every grid node.
    pub fn inverse_points(&self, theta: f64) -> Result<Vec<Vec<f64>>> {
        let g = self.grid();
        (0..g.len()).map(|i| self.invert_map(&g.node(i), theta)).collect()
    }

    /// Samples `v` at `x + theta * zeta(x)`.
    pub fn composer(&self, theta: f64) -> Result<Composer> {
        Composer::new(self.grid(), &self.forward_points(theta))
    }

    /// Samples `v` at the preimage of each node.
    pub fn inverse_composer(&self, theta: f64) -> Result<Composer> {
        Composer::new(self.grid(), &self.inverse_points(theta)?)
    }

    /// `x -> det grad (inverse map)(x)`, from the spectral gradient of the inverse displacement.
    pub fn jacobian_det_inverse(&self, theta: f64) -> Result<SpectralField> {
        let g = self.grid().clone();
        let d = g.dim();
        let pre = self.inverse_points(theta)?;
        let n = g.len();
        let mut q = vec![0.0; d * n];
        for (i, p) in pre.iter().enumerate() {
            let node = g.node(i);
            for a in 0..d {
                q[a * n + i] = p[a] - node[a];
            }
        }
        let qf = SpectralField::from_physical(&g, d, &q)?;
        let grads: Vec<Vec<f64>> = (0..d).map(|b| qf.derivative(b).to_physical()).collect();
        let det: Vec<f64> = (0..n)
            .map(|i| {
                let m = |a: usize, b: usize| f64::from(a == b) + grads[b][a * n + i];
                match d {
                    1 => m(0, 0),
                    _ => m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0),
                }
            })
            .collect();
        SpectralField::from_physical(&g, 1, &det)
    }

    /// Pointwise terms of the second-order determinant identity at `theta = 1`.
    pub fn det_identity(&self) -> Result<DetIdentity> {
        let g = self.grid();
        let mut max_residual: f64 = 0.0;
        let mut max_grad_sq: f64 = 0.0;
        let mut max_ratio: f64 = 0.0;
        for i in 0..g.len() {
            let xs = self.invert_map(&g.node(i), 1.0)?;
            let (_, j) = self.displacement_at(&xs);
            let det_fwd = match j.len() {
                1 => 1.0 + j[0][0],
                _ => (1.0 + j[0][0]) * (1.0 + j[1][1]) - j[0][1] * j[1][0],
            };
            let div: f64 = (0..j.len()).map(|a| j[a][a]).sum();
            let grad_sq: f64 = j.iter().flatten().map(|v| v * v).sum();
            let res = (1.0 / det_fwd - 1.0 + div).abs();
            max_residual = max_residual.max(res);
            max_grad_sq = max_grad_sq.max(grad_sq);
            max_ratio = max_ratio.max(res / grad_sq.max(RATIO_FLOOR));
        }
        Ok(DetIdentity {
            max_residual,
            max_grad_sq,
            ratio: max_ratio,
        })
    }

    /// Largest pointwise ratio `|det grad inv - 1 + div zeta(inv)| / |grad zeta(inv)|^2`.
    pub fn det_identity_residual(&self) -> Result<f64> {
        Ok(self.det_identity()?.ratio)
    }

    /// Grid values of the displacement Jacobian, `[node][i][j] = d_j zeta^i`.
    pub fn gradient_on_grid(&self) -> Vec<Vec<Vec<f64>>> {
        let g = self.grid();
        let d = g.dim();
        let n = g.len();
        let parts: Vec<Vec<f64>> = (0..d)
            .flat_map(|i| {
                let c = self.displacement.channel(i);
                (0..d).map(move |j| c.derivative(j).to_physical())
            })
            .collect();
        (0..n)
            .map(|k| (0..d).map(|i| (0..d).map(|j| parts[i * d + j][k]).collect()).collect())
            .collect()
    }

    /// Invertibility checks on the grid for `theta` in a fixed sweep.
    pub fn hadamard_check(&self, eta: f64, n0: f64) -> DiffeoReport {
        let grads = self.gradient_on_grid();
        let mut report = DiffeoReport {
            atom: self.label.clone(),
            max_inversion_residual: 0.0,
            det_inverse_min: f64::INFINITY,
            det_inverse_max: f64::NEG_INFINITY,
            max_gradient: 0.0,
            max_inverse_norm: 0.0,
            singular: false,
            passed: true,
        };
        for jac in &grads {
            let gnorm = jac.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            report.max_gradient = report.max_gradient.max(gnorm);
            for step in 0..=4 {
                let theta = step as f64 / 4.0;
                let a: Vec<Vec<f64>> = (0..jac.len())
                    .map(|i| (0..jac.len()).map(|j| f64::from(i == j) + theta * jac[i][j]).collect())
                    .collect();
                let det = det_small(&a);
                if det.abs() < 1e-12 || det < 0.0 {
                    report.singular = true;
                    report.passed = false;
                    continue;
                }
                let inv_norm = inverse_operator_norm(&a);
                report.max_inverse_norm = report.max_inverse_norm.max(inv_norm);
                if theta == 1.0 {
                    report.det_inverse_min = report.det_inverse_min.min(1.0 / det);
                    report.det_inverse_max = report.det_inverse_max.max(1.0 / det);
                }
                let bound = if gnorm <= eta {
                    1.0 / (1.0 - theta * eta)
                } else if theta == 1.0 {
                    n0
                } else {
                    f64::INFINITY
                };
                if inv_norm > bound * (1.0 + 1e-12) {
                    report.passed = false;
                }
            }
        }
        if report.passed {
            let g = self.grid();
            for i in 0..g.len() {
                let y = g.node(i);
                match self.invert_map(&y, 1.0) {
                    Ok(x) => {
                        let back = self.forward_map(&x, 1.0);
                        let r = back.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                        report.max_inversion_residual = report.max_inversion_residual.max(r);
                    }
                    Err(Error::Inversion { residual, .. }) => {
                        report.max_inversion_residual = report.max_inversion_residual.max(residual);
                        report.passed = false;
                    }
                    Err(_) => report.passed = false,
                }
            }
        }
        report
    }

    /// `v(x + theta * zeta(x))`.
    pub fn compose_field(&self, v: &SpectralField, theta: f64) -> Result<SpectralField> {
        self.displacement.check_grid(v)?;
        if theta == 1.0 {
            return self.unit_composer().apply(v);
        }
        self.composer(theta)?.apply(v)
    }

    /// Sup-norm bounds and Holder proxies for this atom.
    pub fn bounds(&self, beta: f64) -> AtomBounds {
        let g = self.grid();
        let n = g.len();
        let d = g.dim();
        let disp = self.displacement.to_physical();
        let k_sup = (0..n)
            .map(|i| (0..d).map(|a| disp[a * n + i].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let grads = self.gradient_on_grid();
        let kbar = grads
            .iter()
            .map(|j| j.iter().flatten().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let div: Vec<Vec<f64>> = vec![grads.iter().map(|j| (0..d).map(|a| j[a][a]).sum()).collect()];
        let d2 = self.system_size();
        let rho = self.zero_order.to_physical();
        let l_sup = (0..n)
            .map(|i| (0..d2 * d2).map(|c| rho[c * n + i].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let rho_sym: Vec<Vec<f64>> = (0..d2)
            .flat_map(|a| (0..d2).map(move |b| (a, b)))
            .map(|(a, b)| {
                (0..n)
                    .map(|i| 0.5 * (rho[(a * d2 + b) * n + i] + rho[(b * d2 + a) * n + i]))
                    .collect()
            })
            .collect();
        AtomBounds {
            k_sup,
            k_grad: kbar,
            l_sup,
            k_holder: holder_proxy(g, &div, beta / 2.0),
            l_holder: holder_proxy(g, &rho_sym, beta / 2.0),
        }
    }
}

/// Second-order determinant identity terms.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DetIdentity {
    pub max_residual: f64,
    pub max_grad_sq: f64,
    pub ratio: f64,
}

/// Result of [`JumpAtom::hadamard_check`].
#[derive(Clone, Debug, Serialize)]
pub struct DiffeoReport {
    pub atom: String,
    pub max_inversion_residual: f64,
    pub det_inverse_min: f64,
    pub det_inverse_max: f64,
    pub max_gradient: f64,
    pub max_inverse_norm: f64,
    pub singular: bool,
    pub passed: bool,
}

/// Per-atom regularity numbers `K, Kbar, l, K~, l~`.
#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq)]
pub struct AtomBounds {
    pub k_sup: f64,
    pub k_grad: f64,
    pub l_sup: f64,
    pub k_holder: f64,
    pub l_holder: f64,
}

impl AtomBounds {
    /// `K^beta + Kbar^2 + K~^2 + l^2 + l~^2`.
    pub fn budget(&self, beta: f64) -> f64 {
        self.k_sup.powf(beta) + self.k_grad.powi(2) + self.k_holder.powi(2) + self.l_sup.powi(2) + self.l_holder.powi(2)
    }

    /// `l + Kbar`, the bound on the first special-coercivity integrand.
    pub fn kappa_bar(&self) -> f64 {
        self.l_sup + self.k_grad
    }

    /// `l^2 + l Kbar + l~ K^{beta/2} + Kbar^2 + K~ K^{beta/2}`, the bound on the jump energy defect.
    pub fn kappa(&self, beta: f64) -> f64 {
        let kb = self.k_sup.powf(beta / 2.0);
        self.l_sup.powi(2)
            + self.l_sup * self.k_grad
            + self.l_holder * kb
            + self.k_grad.powi(2)
            + self.k_holder * kb
    }

    /// `Kbar + l`, the factor in the forcing cross term.
    pub fn kappa_hat(&self) -> f64 {
        self.k_grad + self.l_sup
    }
}

/// Holder seminorm proxy: max difference quotient over node pairs at distance >= P/M.
pub fn holder_proxy(grid: &TorusGrid, channels: &[Vec<f64>], exponent: f64) -> f64 {
    let n = grid.len();
    let nodes = grid.nodes();
    let p = grid.period();
    let h = grid.spacing();
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = nodes[i]
                .iter()
                .zip(&nodes[j])
                .map(|(a, b)| {
                    let t = (a - b).abs();
                    t.min(p - t).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            if dist < h * (1.0 - 1e-12) {
                continue;
            }
            let diff = channels
                .iter()
                .map(|c| (c[i] - c[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.max(diff / dist.powf(exponent));
        }
    }
    best
}

/// A weighted list of atoms with catalog-level constants.
#[derive(Clone, Debug)]
pub struct JumpCatalog {
    pub atoms: Vec<JumpAtom>,
    pub eta: f64,
    pub beta: f64,
}

impl JumpCatalog {
    pub fn new(atoms: Vec<JumpAtom>, eta: f64, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::param(format!("eta must lie in [0,1), got {eta}")));
        }
        if !(0.0..=2.0).contains(&beta) {
            return Err(Error::param(format!("beta must lie in [0,2], got {beta}")));
        }
        Ok(JumpCatalog { atoms, eta, beta })
    }

    pub fn empty() -> Self {
        JumpCatalog {
            atoms: Vec::new(),
            eta: 0.5,
            beta: 1.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn of_kind(&self, kind: u8) -> impl Iterator<Item = &JumpAtom> {
        self.atoms.iter().filter(move |a| a.kind == kind)
    }

    /// `sum weight * (K^beta + Kbar^2 + K~^2 + l^2 + l~^2)`.
    pub fn budget(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.weight * a.bounds(self.beta).budget(self.beta))
            .sum()
    }

    pub fn hadamard_reports(&self, n0: f64) -> Vec<DiffeoReport> {
        self.atoms.iter().map(|a| a.hadamard_check(self.eta, n0)).collect()
    }
}

/// `|y + z|^{kappa - d} - |z|^{kappa - d}` with `d = y.len()`.
pub fn kernel_k(y: &[f64], z: &[f64], kappa: f64) -> f64 {
    let d = y.len() as f64;
    if y.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let nz2 = z.iter().map(|b| b * b).sum::<f64>();
    let cross = y.iter().zip(z).map(|(a, b)| 2.0 * a * b + a * a).sum::<f64>();
    let q = cross / nz2;
    if nz2 > 0.0 && q > -1.0 {
        // |y+z|^2 = |z|^2 (1 + q), cancellation-free for |z| >> |y|
        let e = 0.5 * (kappa - d);
        return nz2.powf(e) * (e * q.ln_1p()).exp_m1();
    }
    let nyz = y.iter().zip(z).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
    nyz.powf(kappa - d) - nz2.sqrt().powf(kappa - d)
}

/// `int_0^len u^{kappa-1} phi(u) du` for smooth `phi`: a Gauss-Jacobi panel at the
/// endpoint, then Legendre panels growing geometrically up to `width`.
pub(crate) struct EndpointRule {
    jacobi: GaussJacobi,
    legendre: GaussLegendre,
    kappa: f64,
}

impl EndpointRule {
    pub fn new(kappa: f64, nodes: usize) -> Result<Self> {
        Ok(EndpointRule {
            jacobi: GaussJacobi::new(nodes, 0.0, kappa - 1.0).map_err(|e| Error::param(e.to_string()))?,
            legendre: GaussLegendre::new(nodes).map_err(|e| Error::param(e.to_string()))?,
            kappa,
        })
    }

    pub fn legendre(&self) -> &GaussLegendre {
        &self.legendre
    }

    pub fn integrate(&self, len: f64, width: f64, phi: &dyn Fn(f64) -> f64) -> f64 {
        let head = len.min(width);
        let mut total = (0.5 * head).powf(self.kappa) * self.jacobi.integrate(-1.0, 1.0, |x| phi(0.5 * head * (1.0 + x)));
        let mut lo = head;
        while lo < len {
            let hi = (lo + lo.min(width)).min(len);
            total += self.legendre.integrate(lo, hi, |u| u.powf(self.kappa - 1.0) * phi(u));
            lo = hi;
        }
        total
    }
}

/// `int f(z) dz` over `[s, s + dir*inf)` when `f ~ |z|^{kappa-2}` at infinity.
pub(crate) fn tail_piece(f: &dyn Fn(f64) -> f64, s: f64, len: f64, dir: f64, kappa: f64, rule: &GaussLegendre) -> f64 {
    let p = 1.0 / (1.0 - kappa);
    composite(rule, 0.0, 1.0, 8, &|t: f64| {
        if t <= 0.0 {
            return 0.0;
        }
        f(s + dir * len * (t.powf(-p) - 1.0)) * len * p * t.powf(-p - 1.0)
    })
}

pub(crate) fn composite(rule: &GaussLegendre, a: f64, b: f64, panels: usize, f: &dyn Fn(f64) -> f64) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| rule.integrate(a + i as f64 * h, a + (i + 1) as f64 * h, f))
        .sum()
}

/// `int_R |k(y, z)| dz` in one dimension, exact up to quadrature error.
pub fn kernel_mass_1d(y: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::param(format!("kernel order must lie in (0,1), got {kappa}")));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    let rule = EndpointRule::new(kappa, 40)?;
    // reflect so the singularities sit at 0 and -a with a > 0; |k| changes sign only at -a/2
    let a = y.abs();
    // offset u from one singular point, the other at distance a + sign*u
    let near = |len: f64, sign: f64| {
        rule.integrate(len, len, &|_| 1.0) - composite(rule.legendre(), 0.0, len, 4, &|u| (a + sign * u).powf(kappa - 1.0))
    };
    let f = |z: f64| kernel_k(&[a], &[z], kappa).abs();
    let total = tail_piece(&f, -2.0 * a, a, -1.0, kappa, rule.legendre())
        + near(a, 1.0)
        + near(0.5 * a, -1.0)
        + near(0.5 * a, -1.0)
        + near(a, 1.0)
        + tail_piece(&f, a, a, 1.0, kappa, rule.legendre());
    Ok(total)
}

fn det_small(a: &[Vec<f64>]) -> f64 {
    match a.len() {
        1 => a[0][0],
        _ => a[0][0] * a[1][1] - a[0][1] * a[1][0],
    }
}

fn solve_small(a: &[Vec<f64>], r: &[f64]) -> Option<Vec<f64>> {
    let det = det_small(a);
    if det.abs() < 1e-300 || !det.is_finite() {
        return None;
    }
    Some(match a.len() {
        1 => vec![r[0] / det],
        _ => vec![
            (a[1][1] * r[0] - a[0][1] * r[1]) / det,
            (a[0][0] * r[1] - a[1][0] * r[0]) / det,
        ],
    })
}

/// Spectral norm of `A^{-1}` for a 1x1 or 2x2 matrix.
fn inverse_operator_norm(a: &[Vec<f64>]) -> f64 {
    match a.len() {
        1 => 1.0 / a[0][0].abs(),
        _ => {
            // smallest singular value of A
            let fro = a.iter().flatten().map(|v| v * v).sum::<f64>();
            let det = det_small(a).abs();
            let disc = (fro * fro - 4.0 * det * det).max(0.0).sqrt();
            let smin_sq = 0.5 * (fro - disc);
            if smin_sq <= 0.0 {
                f64::INFINITY
            } else {
                1.0 / smin_sq.sqrt()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::spectral::FieldSampler;

    fn sine_atom(grid: &Arc<TorusGrid>, a: f64) -> JumpAtom {
        let disp = SpectralField::from_fn(grid, 1, |_, x| a * (2.0 * PI * x[0]).sin());
        JumpAtom::new("sine", 1, 1.0, disp, SpectralField::zeros(grid, 1)).unwrap()
    }

    #[test]
    fn forward_map_cases() {
        let g = TorusGrid::new(1, 64, 1.0).unwrap();
        let zero = JumpAtom::translation(&g, 1, 1, 1.0, &[0.0]).unwrap();
        assert_eq!(zero.forward_map(&[0.3], 1.0), vec![0.3]);
        let shift = JumpAtom::translation(&g, 1, 1, 1.0, &[0.2]).unwrap();
        assert!((shift.forward_map(&[0.3], 1.0)[0] - 0.5).abs() < 1e-14);
        let s = sine_atom(&g, 0.05);
        let x = 0.137;
        let expect = x + 0.025 * (2.0 * PI * x).sin();
        assert!((s.forward_map(&[x], 0.5)[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn inversion_cases() {
        let g = TorusGrid::new(1, 64, 1.0).unwrap();
        let shift = JumpAtom::translation(&g, 1, 1, 1.0, &[0.2]).unwrap();
        assert!((shift.invert_map(&[0.3], 1.0).unwrap()[0] - 0.1).abs() < 1e-12);
        let s = sine_atom(&g, 0.05);
        for i in 0..g.len() {
            let x = g.node(i);
            let y = s.forward_map(&x, 1.0);
            let back = s.invert_map(&y, 1.0).unwrap();
            assert!((back[0] - x[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn inversion_reports_failure() {
        let g = TorusGrid::new(1, 32, 1.0).unwrap();
        // zeta = -sin(2 pi x)/(2 pi) has 1 + zeta' = 0 at x = 0
        let disp = SpectralField::from_fn(&g, 1, |_, x| -(2.0 * PI * x[0]).sin() / (2.0 * PI) * 1.5);
        let atom = JumpAtom::new("fold", 1, 1.0, disp, SpectralField::zeros(&g, 1)).unwrap();
        let rep = atom.hadamard_check(0.9, 10.0);
        assert!(rep.singular && !rep.passed);
    }

    #[test]
    fn jacobian_matches_reciprocal() {
        let g = TorusGrid::new(1, 128, 1.0).unwrap();
        let a = 0.05;
        let s = sine_atom(&g, a);
        let det = s.jacobian_det_inverse(1.0).unwrap().to_physical();
        for (i, d) in det.iter().enumerate() {
            let xs = s.invert_map(&g.node(i), 1.0).unwrap()[0];
            let fwd = 1.0 + 2.0 * PI * a * (2.0 * PI * xs).cos();
            assert!((d - 1.0 / fwd).abs() < 1e-8, "node {i}: {d} vs {}", 1.0 / fwd);
        }
        let zero = JumpAtom::translation(&g, 1, 1, 1.0, &[0.0]).unwrap();
        let one = zero.jacobian_det_inverse(1.0).unwrap().to_physical();
        assert!(one.iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn det_identity_scaling() {
        let g = TorusGrid::new(1, 64, 1.0).unwrap();
        let zero = JumpAtom::translation(&g, 1, 1, 1.0, &[0.0]).unwrap();
        assert_eq!(zero.det_identity_residual().unwrap(), 0.0);
        let c = JumpAtom::translation(&g, 1, 1, 1.0, &[0.3]).unwrap();
        assert!(c.det_identity_residual().unwrap() < 1e-10);
        for a in [0.01, 0.02, 0.05] {
            assert!(sine_atom(&g, a).det_identity_residual().unwrap() <= 10.0);
        }
        let mut pts = Vec::new();
        for a in [0.0025, 0.005, 0.01] {
            let r = sine_atom(&g, a).det_identity().unwrap();
            pts.push((a.ln(), r.max_residual.ln()));
        }
        let slope = crate::stats::fit_slope(&pts);
        assert!((slope - 2.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_k(&[0.0], &[0.7], 0.5), 0.0);
        let v = kernel_k(&[1.0], &[1.0], 0.5);
        assert!((v - (2f64.powf(-0.5) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn kernel_mass_is_homogeneous() {
        for kappa in [0.25, 0.5, 0.75] {
            let pts: Vec<(f64, f64)> = [0.5f64, 1.0, 2.0]
                .iter()
                .map(|&y| (y.ln(), kernel_mass_1d(y, kappa).unwrap().ln()))
                .collect();
            let slope = crate::stats::fit_slope(&pts);
            assert!((slope - kappa).abs() < 0.02, "kappa {kappa}: slope {slope}");
        }
    }

    #[test]
    fn kernel_mass_closed_form() {
        for kappa in [0.25, 0.5, 0.75] {
            for y in [1e-2, 0.3, -1.0, 10.0] {
                let exact = 2f64.powf(2.0 - kappa) * f64::abs(y).powf(kappa) / kappa;
                let got = kernel_mass_1d(y, kappa).unwrap();
                assert!((got - exact).abs() <= 1e-9 * exact, "kappa {kappa} y {y}: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn endpoint_rule_is_exact_for_powers() {
        let rule = EndpointRule::new(0.25, 20).unwrap();
        let got = rule.integrate(2.0, 0.3, &|u| u * u);
        let exact = 2f64.powf(2.25) / 2.25;
        assert!((got - exact).abs() < 1e-12 * exact);
    }

    #[test]
    fn composition_cases() {
        let g = TorusGrid::new(1, 64, 2.0).unwrap();
        let v = SpectralField::from_fn(&g, 1, |_, x| (2.0 * PI * 3.0 * x[0] / 2.0).cos());
        let zero = JumpAtom::translation(&g, 1, 1, 1.0, &[0.0]).unwrap();
        assert!(zero.compose_field(&v, 1.0).unwrap().max_rel_diff(&v) < 1e-13);
        let c = 0.3;
        let shift = JumpAtom::translation(&g, 1, 1, 1.0, &[c]).unwrap();
        let got = shift.compose_field(&v, 1.0).unwrap();
        let k = g.mode_index(&[3]).unwrap();
        let phase = Complex64::from_polar(1.0, 2.0 * PI * 3.0 * c / 2.0);
        assert!((got.coeffs()[k] - v.coeffs()[k] * phase).norm() < 1e-13);
    }

    #[test]
    fn change_of_variables() {
        let g = TorusGrid::new(1, 256, 1.0).unwrap();
        let s = sine_atom(&g, 0.05);
        let det = s.jacobian_det_inverse(1.0).unwrap().to_physical();
        let comp = s.composer(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let v = FieldSampler::new(3.0, 12).sample(&g, 1, &mut rng).unwrap();
            let lhs = comp.apply(&v).unwrap().sobolev_norm_sq(0.0);
            let vals = v.to_physical();
            let rhs: f64 = vals.iter().zip(&det).map(|(a, d)| a * a * d).sum::<f64>() * g.cell_volume();
            assert!((lhs - rhs).abs() / rhs < 1e-6, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn two_dimensional_round_trip() {
        let g = TorusGrid::new(2, 16, 1.0).unwrap();
        let disp = SpectralField::from_fn(&g, 2, |ch, x| {
            0.03 * if ch == 0 {
                (2.0 * PI * x[1]).sin()
            } else {
                (2.0 * PI * (x[0] + x[1])).cos()
            }
        });
        let atom = JumpAtom::new("twist", 2, 0.5, disp, SpectralField::zeros(&g, 4)).unwrap();
        let rep = atom.hadamard_check(0.5, 10.0);
        assert!(rep.passed, "{rep:?}");
        assert!(rep.max_inversion_residual < 1e-10);
    }

    #[test]
    fn bounds_of_zero_atom_vanish() {
        let g = TorusGrid::new(1, 16, 1.0).unwrap();
        let zero = JumpAtom::translation(&g, 2, 1, 1.0, &[0.0]).unwrap();
        assert_eq!(zero.bounds(1.0), AtomBounds::default());
        let rep = zero.hadamard_check(0.5, 2.0);
        assert!(rep.passed);
        assert!((rep.max_inverse_norm - 1.0).abs() < 1e-15);
    }
}
