//! Singular-integral representations of the fractional derivative in one dimension.
//!
//! Test functions are periodized Gaussians on the unit circle, handled through
//! their exact Fourier series, so the spectral `|xi|^kappa` multiplier serves as
//! the oracle for the quadrature side.

use std::f64::consts::PI;

use gauss_quad::legendre::GaussLegendre;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{refinement_stable, CheckReport};
use crate::error::{Error, Result};
use crate::jump::{kernel_k, kernel_mass_1d, EndpointRule};
use crate::stats::fit_slope;

/// Quadrature and tolerance settings of the kernel suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub orders: Vec<f64>,
    /// Whole periods integrated by quadrature before the asymptotic tail.
    pub periods: usize,
    /// Gauss-Legendre nodes per panel.
    pub nodes: usize,
    /// Panels per unit length away from singular points.
    pub panels: usize,
    pub tolerance: f64,
    pub slope_tolerance: f64,
    /// Absolute agreement demanded between the configured and the refined quadrature.
    pub quadrature_tolerance: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            orders: vec![0.25, 0.5, 0.75],
            periods: 64,
            nodes: 20,
            panels: 8,
            tolerance: 1e-3,
            slope_tolerance: 0.02,
            quadrature_tolerance: 1e-6,
        }
    }
}

/// A real trigonometric series of period one, `c_0 + 2 Re sum_{k >= 1} c_k e^{2 pi i k x}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrigSeries {
    coeffs: Vec<Complex64>,
}

impl TrigSeries {
    pub fn new(coeffs: Vec<Complex64>) -> Self {
        TrigSeries { coeffs }
    }

    pub fn constant(c: f64) -> Self {
        TrigSeries {
            coeffs: vec![Complex64::new(c, 0.0)],
        }
    }

    pub fn mean(&self) -> f64 {
        self.coeffs.first().map_or(0.0, |c| c.re)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let Some(c0) = self.coeffs.first() else {
            return 0.0;
        };
        let step = Complex64::from_polar(1.0, 2.0 * PI * x.rem_euclid(1.0));
        let mut z = Complex64::new(1.0, 0.0);
        let mut acc = 0.0;
        for c in &self.coeffs[1..] {
            z *= step;
            acc += (c * z).re;
        }
        c0.re + 2.0 * acc
    }

    fn map(&self, f: impl Fn(usize, Complex64) -> Complex64) -> TrigSeries {
        TrigSeries {
            coeffs: self.coeffs.iter().enumerate().map(|(k, &c)| f(k, c)).collect(),
        }
    }

    /// Multiplier `|k|^kappa`.
    pub fn fractional_derivative(&self, kappa: f64) -> TrigSeries {
        self.map(|k, c| if k == 0 { Complex64::new(0.0, 0.0) } else { c * (k as f64).powf(kappa) })
    }

    /// Mean-zero antiderivative of the mean-zero part.
    pub fn antiderivative(&self) -> TrigSeries {
        self.map(|k, c| {
            if k == 0 {
                Complex64::new(0.0, 0.0)
            } else {
                c / Complex64::new(0.0, 2.0 * PI * k as f64)
            }
        })
    }

    pub fn sum(parts: &[TrigSeries]) -> TrigSeries {
        let len = parts.iter().map(|p| p.coeffs.len()).max().unwrap_or(0);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); len];
        for p in parts {
            for (a, b) in coeffs.iter_mut().zip(&p.coeffs) {
                *a += b;
            }
        }
        TrigSeries { coeffs }
    }
}

/// `amplitude * sum_n exp(-(x - center - n)^2 / (2 width^2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianBump {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

impl GaussianBump {
    pub fn new(center: f64, width: f64, amplitude: f64) -> Self {
        GaussianBump {
            center,
            width,
            amplitude,
        }
    }

    /// Exact Fourier coefficients up to `k_max`.
    pub fn series(&self, k_max: usize) -> TrigSeries {
        let s = self.width;
        TrigSeries::new(
            (0..=k_max)
                .map(|k| {
                    let k = k as f64;
                    let mag = self.amplitude * s * (2.0 * PI).sqrt() * (-2.0 * PI * PI * k * k * s * s).exp();
                    Complex64::from_polar(mag, -2.0 * PI * k * self.center)
                })
                .collect(),
        )
    }
}

const SERIES_MODES: usize = 48;
const DYADIC_DEPTH: usize = 48;

struct Quadrature {
    rule: GaussLegendre,
    endpoint: EndpointRule,
    periods: usize,
    panels: usize,
}

impl Quadrature {
    fn new(cfg: &KernelConfig, refine: usize, kappa: f64) -> Result<Self> {
        Ok(Quadrature {
            rule: GaussLegendre::new(cfg.nodes).map_err(|e| Error::param(e.to_string()))?,
            endpoint: EndpointRule::new(kappa, cfg.nodes)?,
            periods: cfg.periods * refine,
            panels: cfg.panels * refine,
        })
    }

    fn panels(&self, a: f64, b: f64, count: usize, f: &dyn Fn(f64) -> f64) -> f64 {
        let h = (b - a) / count as f64;
        (0..count)
            .map(|i| self.rule.integrate(a + i as f64 * h, a + (i + 1) as f64 * h, f))
            .sum()
    }

    fn span(&self, a: f64, b: f64, f: &dyn Fn(f64) -> f64) -> f64 {
        self.panels(a, b, ((b - a) * self.panels as f64).ceil().max(1.0) as usize, f)
    }
}

/// `int_R (f(x + z) - f(x)) |z|^{-1-kappa} dz`.
fn singular_integral(f: &TrigSeries, x: f64, kappa: f64, q: &Quadrature) -> f64 {
    let fx = f.eval(x);
    let sym = |z: f64| (f.eval(x + z) + f.eval(x - z) - 2.0 * fx) * z.powf(-1.0 - kappa);
    // annuli [2^{-j-1}, 2^{-j}] around the singularity
    let mut near = 0.0;
    for j in 0..DYADIC_DEPTH {
        let hi = 0.5f64.powi(j as i32);
        near += q.rule.integrate(0.5 * hi, hi, sym);
    }
    let pair = |z: f64| (f.eval(x + z) + f.eval(x - z)) * z.powf(-1.0 - kappa);
    let j = q.periods as f64;
    let mut far = 0.0;
    for n in 1..q.periods {
        far += q.panels(n as f64, n as f64 + 1.0, q.panels, &pair);
    }
    // beyond J periods: exact for the mean, two integrations by parts for the rest
    let anti = f.antiderivative();
    let anti2 = anti.antiderivative();
    let mut tail = 2.0 * f.mean() * j.powf(-kappa) / kappa;
    for s in [1.0, -1.0] {
        tail += -s * anti.eval(x + s * j) * j.powf(-1.0 - kappa) - (1.0 + kappa) * anti2.eval(x + s * j) * j.powf(-2.0 - kappa);
    }
    near + far - 2.0 * fx / kappa + tail
}

/// `int_R g(x - z) k(y, z) dz` for mean-zero `g`.
fn difference_integral(g: &TrigSeries, x: f64, y: f64, kappa: f64, q: &Quadrature) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    let integrand = |z: f64| g.eval(x - z) * kernel_k(&[y], &[z], kappa);
    let r = q.periods as f64;
    let singular = [0.0, -y];
    let mut breaks: Vec<f64> = (-(q.periods as i64)..=q.periods as i64).map(|n| n as f64).collect();
    for &s in &singular {
        let mut h = y.abs();
        while h < 2.0 {
            breaks.push(s - h);
            breaks.push(s + h);
            h *= 2.0;
        }
        breaks.push(s);
    }
    breaks.retain(|b| b.abs() <= r);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    // k = |y + z|^{kappa-1} - |z|^{kappa-1}; next to a singular point s the matching power
    // is integrated against its exact weight in the offset u = |z - s|, the other term is smooth
    let touching = |s: f64, len: f64, dir: f64| {
        let (sign, other) = if s == 0.0 { (-1.0, -y) } else { (1.0, 0.0) };
        let width = 1.0 / q.panels as f64;
        let power = q.endpoint.integrate(len, width, &|u| g.eval(x - s - dir * u));
        let rest = |z: f64| -sign * g.eval(x - z) * (z - other).abs().powf(kappa - 1.0);
        let (a, b) = if dir > 0.0 { (s, s + len) } else { (s - len, s) };
        sign * power + q.span(a, b, &rest)
    };
    let is_singular = |z: f64| singular.iter().any(|s| (z - s).abs() < 1e-14);
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        total += match (is_singular(a), is_singular(b)) {
            (true, true) => {
                let m = 0.5 * (a + b);
                touching(a, m - a, 1.0) + touching(b, b - m, -1.0)
            }
            (true, false) => touching(a, b - a, 1.0),
            (false, true) => touching(b, b - a, -1.0),
            (false, false) => q.span(a, b, &integrand),
        };
    }
    let anti = g.antiderivative();
    let anti2 = anti.antiderivative();
    let k = |z: f64| kernel_k(&[y], &[z], kappa);
    let dk = |z: f64| {
        let t = |u: f64| u.abs().powf(kappa - 2.0) * u.signum();
        (kappa - 1.0) * (t(y + z) - t(z))
    };
    total += anti.eval(x - r) * k(r) + anti2.eval(x - r) * dk(r);
    total -= anti.eval(x + r) * k(-r) + anti2.eval(x + r) * dk(-r);
    total
}

const EVAL_POINTS: [f64; 6] = [0.05, 0.21, 0.37, 0.5, 0.66, 0.83];
const SHIFTS: [f64; 6] = [0.03, 0.1, -0.2, 0.4, 0.75, 1.3];
const REFERENCE_POINT: f64 = 0.3;
const REFERENCE_SHIFT: f64 = 0.25;

fn reference_function() -> TrigSeries {
    GaussianBump::new(0.3, 0.1, 1.0).series(SERIES_MODES)
}

fn held_out_functions() -> Vec<TrigSeries> {
    let one = |c, s, a| GaussianBump::new(c, s, a).series(SERIES_MODES);
    vec![
        one(0.1, 0.08, 1.0),
        one(0.55, 0.12, 0.7),
        one(0.8, 0.06, 1.3),
        one(0.35, 0.09, -0.8),
        TrigSeries::sum(&[one(0.2, 0.1, 1.0), one(0.7, 0.07, 0.5)]),
    ]
}

struct KernelPass {
    n1: f64,
    n2: f64,
    err_singular: f64,
    err_difference: f64,
    values: Vec<f64>,
}

fn kernel_pass(kappa: f64, q: &Quadrature) -> KernelPass {
    let reference = reference_function();
    let n1 = reference.fractional_derivative(kappa).eval(REFERENCE_POINT)
        / singular_integral(&reference, REFERENCE_POINT, kappa, q);
    let rd = reference.fractional_derivative(kappa);
    let n2 = (reference.eval(REFERENCE_POINT + REFERENCE_SHIFT) - reference.eval(REFERENCE_POINT))
        / difference_integral(&rd, REFERENCE_POINT, REFERENCE_SHIFT, kappa, q);
    let mut values = Vec::new();
    let mut err_singular: f64 = 0.0;
    let mut err_difference: f64 = 0.0;
    for f in held_out_functions() {
        let df = f.fractional_derivative(kappa);
        let (mut worst, mut scale) = (0.0f64, 0.0f64);
        for &x in &EVAL_POINTS {
            let integral = singular_integral(&f, x, kappa, q);
            values.push(integral);
            let exact = df.eval(x);
            worst = worst.max((n1 * integral - exact).abs());
            scale = scale.max(exact.abs());
        }
        err_singular = err_singular.max(worst / scale);
        let (mut worst, mut scale) = (0.0f64, 0.0f64);
        for &x in &EVAL_POINTS {
            for &y in &SHIFTS {
                let integral = difference_integral(&df, x, y, kappa, q);
                values.push(integral);
                let exact = f.eval(x + y) - f.eval(x);
                worst = worst.max((n2 * integral - exact).abs());
                scale = scale.max(exact.abs());
            }
        }
        err_difference = err_difference.max(worst / scale);
    }
    KernelPass {
        n1,
        n2,
        err_singular,
        err_difference,
        values,
    }
}

/// Log-log slope of the kernel mass `int |k(y, z)| dz` over `y` in `[1e-2, 1e1]`.
pub fn kernel_mass_slope(kappa: f64) -> Result<f64> {
    let pts = (0..13)
        .map(|i| {
            let y = 10f64.powf(-2.0 + 0.25 * i as f64);
            Ok((y.ln(), kernel_mass_1d(y, kappa)?.ln()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fit_slope(&pts))
}

/// Calibrated singular-integral and difference representations of `|xi|^kappa`, plus the mass law.
pub fn check_kernel_identities(kappa: f64, cfg: &KernelConfig) -> Result<CheckReport> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::param(format!("kernel order must lie in (0,1), got {kappa}")));
    }
    let coarse = kernel_pass(kappa, &Quadrature::new(cfg, 1, kappa)?);
    let fine = kernel_pass(kappa, &Quadrature::new(cfg, 2, kappa)?);
    let quad_delta = coarse
        .values
        .iter()
        .zip(&fine.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let slope = kernel_mass_slope(kappa)?;
    let mut report = CheckReport::new(format!("kernel_identities_kappa{kappa}"), held_out_functions().len(), coarse.n1, fine.n1);
    report.worst_ratio = coarse.err_singular.max(coarse.err_difference);
    report.stable &= refinement_stable(coarse.n2, fine.n2) && quad_delta <= cfg.quadrature_tolerance;
    report.detail("N1", coarse.n1);
    report.detail("N2", coarse.n2);
    report.detail("N2_refined", fine.n2);
    report.detail("err_singular", coarse.err_singular);
    report.detail("err_difference", coarse.err_difference);
    report.detail("quadrature_delta", quad_delta);
    report.detail("mass_slope", slope);
    report.pass = report.stable
        && coarse.err_singular <= cfg.tolerance
        && coarse.err_difference <= cfg.tolerance
        && (slope - kappa).abs() <= cfg.slope_tolerance;
    Ok(report)
}
