//! Periodic grids, spectral fields, and the Bessel-potential scale.
//!
//! A [`SpectralField`] stores Fourier-series coefficients
//! `v(x) = sum_k c_k exp(i 2 pi k.x / P)` on a torus of period `P`, with
//! frequencies `xi = k / P`. Every operator in this module is an exact Fourier
//! multiplier; products of fields go through a 3/2-padded grid.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::ops::{Add, Mul, Neg, Sub};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Uniform periodic grid on `[0, P)^d`.
pub struct TorusGrid {
    dim: usize,
    points: usize,
    period: f64,
    padded: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    pad_fwd: Arc<dyn Fft<f64>>,
    pad_inv: Arc<dyn Fft<f64>>,
    // per-mode tables, FFT ordering
    xi: Vec<Vec<f64>>,
    xi_sq: Vec<f64>,
    nyquist: Vec<bool>,
}

impl fmt::Debug for TorusGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TorusGrid")
            .field("dim", &self.dim)
            .field("points", &self.points)
            .field("period", &self.period)
            .finish()
    }
}

impl PartialEq for TorusGrid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.points == other.points && self.period == other.period
    }
}

pub(crate) fn wavenumber(i: usize, m: usize) -> i64 {
    if i < m / 2 {
        i as i64
    } else {
        i as i64 - m as i64
    }
}

impl TorusGrid {
    pub fn new(dim: usize, points: usize, period: f64) -> Result<Arc<Self>> {
        if !(1..=2).contains(&dim) {
            return Err(Error::param(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if points < 8 || !points.is_power_of_two() {
            return Err(Error::param(format!(
                "points per axis must be a power of two >= 8, got {points}"
            )));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::param(format!("period must be positive, got {period}")));
        }
        let padded = 3 * points / 2;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(points);
        let inv = planner.plan_fft_inverse(points);
        let pad_fwd = planner.plan_fft_forward(padded);
        let pad_inv = planner.plan_fft_inverse(padded);

        let len = points.pow(dim as u32);
        let mut xi = vec![vec![0.0; len]; dim];
        let mut xi_sq = vec![0.0; len];
        let mut nyquist = vec![false; len];
        for idx in 0..len {
            let mut rem = idx;
            for axis in (0..dim).rev() {
                let i = rem % points;
                rem /= points;
                let k = wavenumber(i, points);
                xi[axis][idx] = k as f64 / period;
                xi_sq[idx] += (k as f64 / period).powi(2);
                if i == points / 2 {
                    nyquist[idx] = true;
                }
            }
        }
        Ok(Arc::new(TorusGrid {
            dim,
            points,
            period,
            padded,
            fwd,
            inv,
            pad_fwd,
            pad_inv,
            xi,
            xi_sq,
            nyquist,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Number of nodes (and of modes) per channel.
    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn padded_len(&self) -> usize {
        self.padded.pow(self.dim as u32)
    }

    pub fn spacing(&self) -> f64 {
        self.period / self.points as f64
    }

    /// Volume of one cell, the weight of the grid quadrature.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        self.period.powi(self.dim as i32)
    }

    /// Same grid with twice the points per axis.
    pub fn refined(&self) -> Result<Arc<TorusGrid>> {
        TorusGrid::new(self.dim, self.points * 2, self.period)
    }

    /// Physical coordinates of node `idx` (row-major, axis 0 slowest).
    pub fn node(&self, idx: usize) -> Vec<f64> {
        let h = self.spacing();
        let mut out = vec![0.0; self.dim];
        let mut rem = idx;
        for axis in (0..self.dim).rev() {
            out[axis] = (rem % self.points) as f64 * h;
            rem /= self.points;
        }
        out
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Frequency component `xi_axis = k_axis / P` of mode `idx`.
    pub fn xi(&self, axis: usize, idx: usize) -> f64 {
        self.xi[axis][idx]
    }

    pub fn xi_norm_sq(&self, idx: usize) -> f64 {
        self.xi_sq[idx]
    }

    pub fn is_nyquist(&self, idx: usize) -> bool {
        self.nyquist[idx]
    }

    /// Integer wavevector of mode `idx`.
    pub fn wavevector(&self, idx: usize) -> Vec<i64> {
        let mut out = vec![0; self.dim];
        let mut rem = idx;
        for axis in (0..self.dim).rev() {
            out[axis] = wavenumber(rem % self.points, self.points);
            rem /= self.points;
        }
        out
    }

    /// Index of integer wavevector `k` if it is representable on this grid.
    pub fn mode_index(&self, k: &[i64]) -> Option<usize> {
        let m = self.points as i64;
        let mut idx = 0usize;
        for &ka in k {
            if ka < -m / 2 || ka >= m / 2 {
                return None;
            }
            let i = if ka >= 0 { ka } else { ka + m };
            idx = idx * self.points + i as usize;
        }
        Some(idx)
    }

    /// Bessel-potential symbol `(1 + 4 pi^2 |xi|^2)^{alpha/2}` of mode `idx`.
    pub fn bessel_symbol(&self, idx: usize, alpha: f64) -> f64 {
        (1.0 + 4.0 * PI * PI * self.xi_sq[idx]).powf(alpha / 2.0)
    }

    fn fft_nd(&self, data: &mut [Complex64], n: usize, plan: &Arc<dyn Fft<f64>>) {
        match self.dim {
            1 => plan.process(data),
            _ => {
                for row in data.chunks_exact_mut(n) {
                    plan.process(row);
                }
                let mut col = vec![ZERO; n];
                for c in 0..n {
                    for r in 0..n {
                        col[r] = data[r * n + c];
                    }
                    plan.process(&mut col);
                    for r in 0..n {
                        data[r * n + c] = col[r];
                    }
                }
            }
        }
    }

    /// Physical samples to normalized Fourier coefficients.
    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft_nd(&mut buf, self.points, &self.fwd);
        let scale = 1.0 / self.len() as f64;
        for c in &mut buf {
            *c *= scale;
        }
        symmetrize_in_place(&mut buf, self.points, self.dim);
        buf
    }

    /// Fourier coefficients to physical samples (real part).
    pub fn inverse(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let mut buf = coeffs.to_vec();
        self.fft_nd(&mut buf, self.points, &self.inv);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Evaluates coefficients on the 3/2-padded grid. The Nyquist mode is dropped.
    pub fn inverse_padded(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let mut buf = vec![ZERO; self.padded_len()];
        let m = self.points;
        let p = self.padded;
        for (idx, &c) in coeffs.iter().enumerate() {
            if self.nyquist[idx] || c == ZERO {
                continue;
            }
            let mut pidx = 0;
            let mut rem = idx;
            let mut stride = 1;
            for _ in 0..self.dim {
                let i = rem % m;
                rem /= m;
                let k = wavenumber(i, m);
                let pi = if k >= 0 { k as usize } else { (p as i64 + k) as usize };
                pidx += pi * stride;
                stride *= p;
            }
            buf[pidx] = c;
        }
        self.fft_nd(&mut buf, p, &self.pad_inv);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Padded physical samples back to (truncated) coefficients on this grid.
    pub fn forward_padded(&self, values: &[f64]) -> Vec<Complex64> {
        let m = self.points;
        let p = self.padded;
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft_nd(&mut buf, p, &self.pad_fwd);
        let scale = 1.0 / self.padded_len() as f64;
        let mut out = vec![ZERO; self.len()];
        for (idx, slot) in out.iter_mut().enumerate() {
            if self.nyquist[idx] {
                continue;
            }
            let mut pidx = 0;
            let mut rem = idx;
            let mut stride = 1;
            for _ in 0..self.dim {
                let i = rem % m;
                rem /= m;
                let k = wavenumber(i, m);
                let pi = if k >= 0 { k as usize } else { (p as i64 + k) as usize };
                pidx += pi * stride;
                stride *= p;
            }
            *slot = buf[pidx] * scale;
        }
        symmetrize_in_place(&mut out, m, self.dim);
        out
    }
}

fn mirror_index(idx: usize, m: usize, dim: usize) -> usize {
    let mut out = 0;
    let mut rem = idx;
    let mut stride = 1;
    for _ in 0..dim {
        let i = rem % m;
        rem /= m;
        out += ((m - i) % m) * stride;
        stride *= m;
    }
    out
}

/// Projects coefficients onto the Hermitian (real-signal) subspace.
pub(crate) fn symmetrize_in_place(coeffs: &mut [Complex64], m: usize, dim: usize) {
    for idx in 0..coeffs.len() {
        let j = mirror_index(idx, m, dim);
        if j < idx {
            continue;
        }
        if j == idx {
            coeffs[idx].im = 0.0;
        } else {
            let avg = 0.5 * (coeffs[idx] + coeffs[j].conj());
            coeffs[idx] = avg;
            coeffs[j] = avg.conj();
        }
    }
}

/// A multi-channel real field held by its Fourier coefficients.
#[derive(Clone, Debug)]
pub struct SpectralField {
    grid: Arc<TorusGrid>,
    channels: usize,
    coeffs: Vec<Complex64>,
}

impl PartialEq for SpectralField {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.channels == other.channels && self.coeffs == other.coeffs
    }
}

impl SpectralField {
    pub fn zeros(grid: &Arc<TorusGrid>, channels: usize) -> Self {
        SpectralField {
            grid: grid.clone(),
            channels,
            coeffs: vec![ZERO; channels * grid.len()],
        }
    }

    pub fn from_coeffs(grid: &Arc<TorusGrid>, channels: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != channels * grid.len() {
            return Err(Error::shape(format!(
                "expected {} coefficients, got {}",
                channels * grid.len(),
                coeffs.len()
            )));
        }
        Ok(SpectralField {
            grid: grid.clone(),
            channels,
            coeffs,
        })
    }

    /// Builds a field from physical samples, channel-major then row-major.
    pub fn from_physical(grid: &Arc<TorusGrid>, channels: usize, values: &[f64]) -> Result<Self> {
        let n = grid.len();
        if values.len() != channels * n {
            return Err(Error::shape(format!(
                "expected {} physical values, got {}",
                channels * n,
                values.len()
            )));
        }
        let mut coeffs = Vec::with_capacity(channels * n);
        for ch in values.chunks_exact(n) {
            coeffs.extend(grid.forward(ch));
        }
        Ok(SpectralField {
            grid: grid.clone(),
            channels,
            coeffs,
        })
    }

    /// Samples `f(channel, x)` on the grid nodes.
    pub fn from_fn(grid: &Arc<TorusGrid>, channels: usize, f: impl Fn(usize, &[f64]) -> f64) -> Self {
        let nodes = grid.nodes();
        let mut values = Vec::with_capacity(channels * nodes.len());
        for ch in 0..channels {
            values.extend(nodes.iter().map(|x| f(ch, x)));
        }
        Self::from_physical(grid, channels, &values).expect("shape is consistent by construction")
    }

    /// Stacks single- or multi-channel fields on a common grid.
    pub fn concat(parts: &[SpectralField]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot concatenate zero fields"))?;
        let mut coeffs = Vec::new();
        let mut channels = 0;
        for p in parts {
            first.check_grid(p)?;
            coeffs.extend_from_slice(&p.coeffs);
            channels += p.channels;
        }
        Ok(SpectralField {
            grid: first.grid.clone(),
            channels,
            coeffs,
        })
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn channel_coeffs(&self, ch: usize) -> &[Complex64] {
        let n = self.grid.len();
        &self.coeffs[ch * n..(ch + 1) * n]
    }

    pub fn channel(&self, ch: usize) -> SpectralField {
        SpectralField {
            grid: self.grid.clone(),
            channels: 1,
            coeffs: self.channel_coeffs(ch).to_vec(),
        }
    }

    pub fn to_physical(&self) -> Vec<f64> {
        let n = self.grid.len();
        let mut out = Vec::with_capacity(self.coeffs.len());
        for ch in self.coeffs.chunks_exact(n) {
            out.extend(self.grid.inverse(ch));
        }
        out
    }

    pub fn channel_physical(&self, ch: usize) -> Vec<f64> {
        self.grid.inverse(self.channel_coeffs(ch))
    }

    pub fn check_grid(&self, other: &SpectralField) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::shape(format!(
                "grid mismatch: {:?} vs {:?}",
                self.grid, other.grid
            )));
        }
        Ok(())
    }

    fn check_same(&self, other: &SpectralField) -> Result<()> {
        self.check_grid(other)?;
        if self.channels != other.channels {
            return Err(Error::shape(format!(
                "channel mismatch: {} vs {}",
                self.channels, other.channels
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Applies a per-mode symbol to every channel.
    pub fn map_symbol(&self, symbol: impl Fn(usize) -> Complex64) -> SpectralField {
        let n = self.grid.len();
        let table: Vec<Complex64> = (0..n).map(&symbol).collect();
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * table[i % n])
            .collect();
        SpectralField {
            grid: self.grid.clone(),
            channels: self.channels,
            coeffs,
        }
    }

    /// `Lambda^alpha v`, the multiplier `(1 + 4 pi^2 |xi|^2)^{alpha/2}`.
    pub fn apply_lambda(&self, alpha: f64) -> Result<SpectralField> {
        if !alpha.is_finite() {
            return Err(Error::param(format!("Sobolev order must be finite, got {alpha}")));
        }
        if alpha == 0.0 {
            return Ok(self.clone());
        }
        let g = self.grid.clone();
        Ok(self.map_symbol(|i| Complex64::new(g.bessel_symbol(i, alpha), 0.0)))
    }

    /// Fractional derivative with symbol `|xi|^kappa` (no `2 pi` factor).
    pub fn fractional_derivative(&self, kappa: f64) -> Result<SpectralField> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(Error::param(format!("fractional order must lie in (0,1), got {kappa}")));
        }
        let g = self.grid.clone();
        Ok(self.map_symbol(|i| Complex64::new(g.xi_norm_sq(i).sqrt().powf(kappa), 0.0)))
    }

    /// `(u, v)_alpha` summed over channels.
    pub fn sobolev_inner(&self, other: &SpectralField, alpha: f64) -> Result<f64> {
        self.check_same(other)?;
        if !alpha.is_finite() {
            return Err(Error::param(format!("Sobolev order must be finite, got {alpha}")));
        }
        let n = self.grid.len();
        let weights: Vec<f64> = (0..n).map(|i| self.grid.bessel_symbol(i, 2.0 * alpha)).collect();
        let mut acc = ZERO;
        for (i, (a, b)) in self.coeffs.iter().zip(&other.coeffs).enumerate() {
            acc += a * b.conj() * weights[i % n];
        }
        let vol = self.grid.volume();
        debug_assert!(
            acc.im.abs() <= 1e-10 * (acc.re.abs() + self.sobolev_norm(alpha) * other.sobolev_norm(alpha) + 1e-300),
            "imaginary residue {} in inner product",
            acc.im
        );
        Ok(acc.re * vol)
    }

    pub fn sobolev_norm_sq(&self, alpha: f64) -> f64 {
        let n = self.grid.len();
        let weights: Vec<f64> = (0..n).map(|i| self.grid.bessel_symbol(i, 2.0 * alpha)).collect();
        let s: f64 = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c.norm_sqr() * weights[i % n])
            .sum();
        s * self.grid.volume()
    }

    pub fn sobolev_norm(&self, alpha: f64) -> f64 {
        self.sobolev_norm_sq(alpha).sqrt()
    }

    /// Spectral partial derivative along `axis` (exact multiplier `i 2 pi xi_axis`).
    pub fn derivative(&self, axis: usize) -> SpectralField {
        let g = self.grid.clone();
        self.map_symbol(|i| {
            if g.is_nyquist(i) {
                ZERO
            } else {
                Complex64::new(0.0, 2.0 * PI * g.xi(axis, i))
            }
        })
    }

    /// `D v = (v, d_1 v, ..., d_d v)`; channel `l*(d+1) + j` holds `d_j v^l`.
    pub fn derivative_once(&self) -> SpectralField {
        let d = self.grid.dim;
        let n = self.grid.len();
        let derivs: Vec<SpectralField> = (0..d).map(|a| self.derivative(a)).collect();
        let mut coeffs = Vec::with_capacity(self.coeffs.len() * (d + 1));
        for l in 0..self.channels {
            coeffs.extend_from_slice(&self.coeffs[l * n..(l + 1) * n]);
            for dv in &derivs {
                coeffs.extend_from_slice(&dv.coeffs[l * n..(l + 1) * n]);
            }
        }
        SpectralField {
            grid: self.grid.clone(),
            channels: self.channels * (d + 1),
            coeffs,
        }
    }

    /// `D^n v`, with `channels * (d+1)^n` channels.
    pub fn derivative_stack(&self, n: usize) -> Result<SpectralField> {
        if n == 0 {
            return Err(Error::param("derivative stack order must be >= 1"));
        }
        let mut out = self.derivative_once();
        for _ in 1..n {
            out = out.derivative_once();
        }
        Ok(out)
    }

    /// Physical values of one channel on the padded grid after a per-mode symbol.
    pub fn padded_channel(&self, ch: usize, symbol: Option<&dyn Fn(usize) -> Complex64>) -> Vec<f64> {
        let src = self.channel_coeffs(ch);
        match symbol {
            None => self.grid.inverse_padded(src),
            Some(s) => {
                let tmp: Vec<Complex64> = src.iter().enumerate().map(|(i, c)| c * s(i)).collect();
                self.grid.inverse_padded(&tmp)
            }
        }
    }

    /// Builds a field from per-channel samples on the padded grid (truncating).
    pub fn from_padded(grid: &Arc<TorusGrid>, channels: &[Vec<f64>]) -> SpectralField {
        let mut coeffs = Vec::with_capacity(channels.len() * grid.len());
        for ch in channels {
            coeffs.extend(grid.forward_padded(ch));
        }
        SpectralField {
            grid: grid.clone(),
            channels: channels.len(),
            coeffs,
        }
    }

    /// Enforces Hermitian symmetry of every channel.
    pub fn symmetrize(&mut self) {
        let n = self.grid.len();
        let (m, d) = (self.grid.points, self.grid.dim);
        for ch in self.coeffs.chunks_exact_mut(n) {
            symmetrize_in_place(ch, m, d);
        }
    }

    /// Largest relative Hermitian asymmetry over all channels.
    pub fn hermitian_defect(&self) -> f64 {
        let n = self.grid.len();
        let (m, d) = (self.grid.points, self.grid.dim);
        let scale = self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1e-300);
        let mut worst: f64 = 0.0;
        for ch in self.coeffs.chunks_exact(n) {
            for idx in 0..n {
                let j = mirror_index(idx, m, d);
                worst = worst.max((ch[idx] - ch[j].conj()).norm());
            }
        }
        worst / scale
    }

    pub fn scale(&self, a: f64) -> SpectralField {
        SpectralField {
            grid: self.grid.clone(),
            channels: self.channels,
            coeffs: self.coeffs.iter().map(|c| c * a).collect(),
        }
    }

    /// The same trigonometric series on another grid of equal dimension and period.
    ///
    /// Modes outside the target band are dropped, and Nyquist modes of either grid are zeroed.
    pub fn resample(&self, target: &Arc<TorusGrid>) -> Result<SpectralField> {
        if target.dim() != self.grid.dim() || target.period() != self.grid.period() {
            return Err(Error::shape("resampling needs equal dimension and period"));
        }
        let n = self.grid.len();
        let mut out = SpectralField::zeros(target, self.channels);
        for idx in 0..n {
            if self.grid.is_nyquist(idx) {
                continue;
            }
            let Some(j) = target.mode_index(&self.grid.wavevector(idx)) else {
                continue;
            };
            if target.is_nyquist(j) {
                continue;
            }
            for ch in 0..self.channels {
                out.coeffs[ch * target.len() + j] = self.coeffs[ch * n + idx];
            }
        }
        Ok(out)
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &SpectralField) -> Result<()> {
        self.check_same(other)?;
        for (x, y) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *x += y * a;
        }
        Ok(())
    }

    /// Largest absolute coefficient difference, relative to the larger field.
    pub fn max_rel_diff(&self, other: &SpectralField) -> f64 {
        let scale = self
            .coeffs
            .iter()
            .chain(&other.coeffs)
            .map(|c| c.norm())
            .fold(0.0, f64::max)
            .max(1e-300);
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
            / scale
    }

    /// Writes physical values as CSV: header `d1,M,P,channels`, then one value per line.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_snapshot_to(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn write_snapshot_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "{},{},{},{}",
            self.grid.dim, self.grid.points, self.grid.period, self.channels
        )?;
        for v in self.to_physical() {
            writeln!(w, "{v}")?;
        }
        w.flush()
    }

    pub fn read_snapshot(path: impl AsRef<Path>) -> Result<SpectralField> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_snapshot_from(BufReader::new(file))
    }

    pub fn read_snapshot_from(r: impl BufRead) -> Result<SpectralField> {
        let mut lines = r.lines();
        let bad = |m: &str| Error::Problem(format!("snapshot: {m}"));
        let header = lines
            .next()
            .ok_or_else(|| bad("empty file"))?
            .map_err(|e| bad(&e.to_string()))?;
        let parts: Vec<&str> = header.trim().split(',').collect();
        if parts.len() != 4 {
            return Err(bad("header must be `d1,M,P,channels`"));
        }
        let dim: usize = parts[0].parse().map_err(|_| bad("bad d1"))?;
        let points: usize = parts[1].parse().map_err(|_| bad("bad M"))?;
        let period: f64 = parts[2].parse().map_err(|_| bad("bad P"))?;
        let channels: usize = parts[3].parse().map_err(|_| bad("bad channel count"))?;
        let grid = TorusGrid::new(dim, points, period)?;
        let mut values = Vec::with_capacity(channels * grid.len());
        for line in lines {
            let line = line.map_err(|e| bad(&e.to_string()))?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            values.push(t.parse::<f64>().map_err(|_| bad(&format!("bad value `{t}`")))?);
        }
        SpectralField::from_physical(&grid, channels, &values)
    }
}

impl Add for &SpectralField {
    type Output = SpectralField;
    fn add(self, rhs: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(1.0, rhs).expect("field shapes must agree");
        out
    }
}

impl Sub for &SpectralField {
    type Output = SpectralField;
    fn sub(self, rhs: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(-1.0, rhs).expect("field shapes must agree");
        out
    }
}

impl Mul<f64> for &SpectralField {
    type Output = SpectralField;
    fn mul(self, a: f64) -> SpectralField {
        self.scale(a)
    }
}

impl Neg for &SpectralField {
    type Output = SpectralField;
    fn neg(self) -> SpectralField {
        self.scale(-1.0)
    }
}

/// Random band-limited fields with spectrum `|k|^{-decay}` times a standard normal.
///
/// Modes are drawn per integer wavevector in a fixed order, so the same seed
/// yields the same continuum field on any grid that resolves the band.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSampler {
    pub decay: f64,
    pub k_min: usize,
    pub k_max: usize,
}

impl FieldSampler {
    pub fn new(decay: f64, k_max: usize) -> Self {
        FieldSampler { decay, k_min: 0, k_max }
    }

    pub fn band(decay: f64, k_min: usize, k_max: usize) -> Self {
        FieldSampler { decay, k_min, k_max }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        grid: &Arc<TorusGrid>,
        channels: usize,
        rng: &mut R,
    ) -> Result<SpectralField> {
        let kmax = self.k_max as i64;
        if 2 * kmax >= grid.points() as i64 {
            return Err(Error::param(format!(
                "sampler band {} not resolved by {} points",
                self.k_max,
                grid.points()
            )));
        }
        let mut field = SpectralField::zeros(grid, channels);
        let n = grid.len();
        let d = grid.dim();
        let range: Vec<i64> = (-kmax..=kmax).collect();
        let mut wavevectors: Vec<Vec<i64>> = vec![vec![]];
        for _ in 0..d {
            wavevectors = wavevectors
                .into_iter()
                .flat_map(|w| {
                    range.iter().map(move |&k| {
                        let mut v = w.clone();
                        v.push(k);
                        v
                    })
                })
                .collect();
        }
        for ch in 0..channels {
            for k in &wavevectors {
                // one representative per +-k pair: first nonzero component positive
                let first = k.iter().find(|&&c| c != 0);
                if matches!(first, Some(&c) if c < 0) {
                    continue;
                }
                let norm = (k.iter().map(|&c| (c * c) as f64).sum::<f64>()).sqrt();
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                if norm > self.k_max as f64 || norm < self.k_min as f64 {
                    continue;
                }
                let amp = norm.max(1.0).powf(-self.decay);
                let idx = grid.mode_index(k).expect("band checked above");
                if first.is_none() {
                    field.coeffs[ch * n + idx] = Complex64::new(re * amp, 0.0);
                } else {
                    let c = Complex64::new(re, im) * (amp / std::f64::consts::SQRT_2);
                    field.coeffs[ch * n + idx] = c;
                    let neg: Vec<i64> = k.iter().map(|&c| -c).collect();
                    let jdx = grid.mode_index(&neg).expect("band checked above");
                    field.coeffs[ch * n + jdx] = c.conj();
                }
            }
        }
        Ok(field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid1(m: usize) -> Arc<TorusGrid> {
        TorusGrid::new(1, m, 1.0).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TorusGrid::new(1, 12, 1.0).is_err());
        assert!(TorusGrid::new(1, 4, 1.0).is_err());
        assert!(TorusGrid::new(3, 16, 1.0).is_err());
        assert!(TorusGrid::new(1, 16, 0.0).is_err());
    }

    #[test]
    fn frequency_set_is_k_over_p() {
        let g = TorusGrid::new(1, 8, 2.0).unwrap();
        let xi: Vec<f64> = (0..8).map(|i| g.xi(0, i)).collect();
        assert_eq!(xi, vec![0.0, 0.5, 1.0, 1.5, -2.0, -1.5, -1.0, -0.5]);
    }

    #[test]
    fn lambda_zero_is_identity() {
        let g = grid1(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = FieldSampler::new(1.0, 10).sample(&g, 2, &mut rng).unwrap();
        assert_eq!(v.apply_lambda(0.0).unwrap(), v);
        assert!(v.apply_lambda(f64::NAN).is_err());
    }

    #[test]
    fn lambda_on_single_mode() {
        let g = TorusGrid::new(1, 32, 2.0).unwrap();
        let k = 3.0;
        let v = SpectralField::from_fn(&g, 1, |_, x| (2.0 * PI * k * x[0] / 2.0).cos());
        let w = v.apply_lambda(2.0).unwrap();
        let factor = 1.0 + 4.0 * PI * PI * (k / 2.0) * (k / 2.0);
        let expect = v.scale(factor);
        assert!(w.max_rel_diff(&expect) < 1e-13);
    }

    #[test]
    fn fractional_derivative_cases() {
        let g = grid1(32);
        let c = SpectralField::from_fn(&g, 1, |_, _| 3.0);
        let d = c.fractional_derivative(0.5).unwrap();
        assert!(d.sobolev_norm(0.0) < 1e-14);
        let v = SpectralField::from_fn(&g, 1, |_, x| (2.0 * PI * 4.0 * x[0]).cos());
        let d = v.fractional_derivative(0.5).unwrap();
        assert!(d.max_rel_diff(&v.scale(2.0)) < 1e-13);
        assert!(v.fractional_derivative(1.0).is_err());
        assert!(v.fractional_derivative(0.0).is_err());
    }

    #[test]
    fn inner_product_of_normalized_constant() {
        let g = TorusGrid::new(1, 16, 3.0).unwrap();
        let c = SpectralField::from_fn(&g, 1, |_, _| 1.0 / 3f64.sqrt());
        for alpha in [-2.0, 0.0, 1.5] {
            assert!((c.sobolev_inner(&c, alpha).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn inner_product_shape_errors() {
        let a = SpectralField::zeros(&grid1(16), 1);
        let b = SpectralField::zeros(&grid1(32), 1);
        let c = SpectralField::zeros(&grid1(16), 2);
        assert!(matches!(a.sobolev_inner(&b, 0.0), Err(Error::Shape(_))));
        assert!(matches!(a.sobolev_inner(&c, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn stack_of_constant() {
        let g = TorusGrid::new(2, 16, 1.0).unwrap();
        let c = SpectralField::from_fn(&g, 1, |_, _| 2.0);
        let s = c.derivative_stack(1).unwrap();
        assert_eq!(s.channels(), 3);
        assert!(s.channel(0).max_rel_diff(&c) < 1e-15);
        assert!(s.channel(1).sobolev_norm(0.0) < 1e-14);
        assert!(s.channel(2).sobolev_norm(0.0) < 1e-14);
        assert!(c.derivative_stack(0).is_err());
    }

    #[test]
    fn second_stack_matches_analytic_mode() {
        // v = sin(2 pi (x + 2 y)) on the unit torus
        let g = TorusGrid::new(2, 16, 1.0).unwrap();
        let w = [2.0 * PI, 4.0 * PI];
        let v = SpectralField::from_fn(&g, 1, |_, x| (w[0] * x[0] + w[1] * x[1]).sin());
        let s = v.derivative_stack(2).unwrap();
        assert_eq!(s.channels(), 9);
        for j1 in 0..3 {
            for j2 in 0..3 {
                let expect = SpectralField::from_fn(&g, 1, |_, x| {
                    let phase = w[0] * x[0] + w[1] * x[1];
                    let mut f = [phase.sin(), phase.cos()];
                    let mut scale = 1.0;
                    // each derivative rotates sin -> cos -> -sin
                    let mut order = 0;
                    for j in [j1, j2] {
                        if j > 0 {
                            scale *= w[j - 1];
                            order += 1;
                        }
                    }
                    for _ in 0..order {
                        f = [f[1], -f[0]];
                    }
                    scale * f[0]
                });
                let got = s.channel(j1 * 3 + j2);
                let diff = (&got - &expect).sobolev_norm(0.0);
                assert!(diff < 1e-11, "channel ({j1},{j2}) diff {diff}");
            }
        }
    }

    #[test]
    fn padded_product_is_exact_for_band_limited_inputs() {
        let g = grid1(32);
        let a = SpectralField::from_fn(&g, 1, |_, x| (2.0 * PI * 5.0 * x[0]).sin());
        let b = SpectralField::from_fn(&g, 1, |_, x| (2.0 * PI * 7.0 * x[0]).cos());
        let pa = a.padded_channel(0, None);
        let pb = b.padded_channel(0, None);
        let prod: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let p = SpectralField::from_padded(&g, &[prod]);
        let expect = SpectralField::from_fn(&g, 1, |_, x| {
            0.5 * ((2.0 * PI * 12.0 * x[0]).sin() - (2.0 * PI * 2.0 * x[0]).sin())
        });
        assert!(p.max_rel_diff(&expect) < 1e-13);
    }

    #[test]
    fn snapshot_round_trip() {
        let g = TorusGrid::new(2, 8, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = FieldSampler::new(1.0, 3).sample(&g, 2, &mut rng).unwrap();
        let mut buf = Vec::new();
        v.write_snapshot_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("2,8,1.5,2\n"));
        let back = SpectralField::read_snapshot_from(&buf[..]).unwrap();
        assert!(back.max_rel_diff(&v) < 1e-14);
    }

    #[test]
    fn sampler_is_grid_independent() {
        let g1 = grid1(32);
        let g2 = grid1(64);
        let s = FieldSampler::new(1.5, 8);
        let a = s.sample(&g1, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = s.sample(&g2, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for k in -8i64..=8 {
            let ia = g1.mode_index(&[k]).unwrap();
            let ib = g2.mode_index(&[k]).unwrap();
            assert_eq!(a.coeffs()[ia], b.coeffs()[ib]);
        }
        assert!(a.hermitian_defect() < 1e-15);
    }
}
