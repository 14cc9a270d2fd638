//! Driving noise: a clock, truncated Wiener increments, and Poisson counts for a finite atom list.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jump::JumpCatalog;

/// Shape of the clock `t -> V_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    /// `V_t = t`.
    #[default]
    Linear,
    /// `V_t = T (1 - e^{-t}) / (1 - e^{-T})`.
    Saturating,
}

/// A time grid with its clock values.
#[derive(Clone, Debug, PartialEq)]
pub struct Clock {
    horizon: f64,
    steps: usize,
    kind: ClockKind,
}

impl Clock {
    pub fn new(horizon: f64, steps: usize, kind: ClockKind) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::param("clock needs at least one step"));
        }
        Ok(Clock { horizon, steps, kind })
    }

    pub fn linear(horizon: f64, steps: usize) -> Result<Self> {
        Clock::new(horizon, steps, ClockKind::Linear)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ClockKind {
        self.kind
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn value_at(&self, t: f64) -> f64 {
        match self.kind {
            ClockKind::Linear => t,
            ClockKind::Saturating => self.horizon * (-(-t).exp_m1()) / (-(-self.horizon).exp_m1()),
        }
    }

    /// `V` at grid time `k`.
    pub fn value(&self, k: usize) -> f64 {
        if k == self.steps {
            return self.bound();
        }
        self.value_at(self.time(k))
    }

    /// `V_{k+1} - V_k`.
    pub fn increment(&self, k: usize) -> f64 {
        self.value(k + 1) - self.value(k)
    }

    /// The cap `C` with `V_T <= C`.
    pub fn bound(&self) -> f64 {
        self.horizon
    }

    /// Same clock with `steps / factor` steps.
    pub fn coarsen(&self, factor: usize) -> Result<Clock> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(Error::param(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps
            )));
        }
        Clock::new(self.horizon, self.steps / factor, self.kind)
    }
}

/// Purposes of independent random streams derived from one path seed.
const STREAM_WIENER: u64 = 0;
const STREAM_JUMPS: u64 = 1;

/// SplitMix64 finalizer, used to derive per-path seeds from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// One realization of the driving noise on a clock.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    clock: Clock,
    seed: u64,
    drivers: usize,
    // steps x drivers
    wiener: Vec<f64>,
    // steps x atoms
    counts: Vec<u32>,
    weights: Vec<f64>,
}

impl NoisePath {
    /// Samples `drivers` Wiener channels and Poisson counts for the catalog-1 atoms.
    pub fn sample(clock: &Clock, catalog: &JumpCatalog, drivers: usize, seed: u64) -> Result<Self> {
        let weights: Vec<f64> = catalog.of_kind(1).map(|a| a.weight).collect();
        NoisePath::sample_with_weights(clock, &weights, drivers, seed)
    }

    pub fn sample_with_weights(clock: &Clock, weights: &[f64], drivers: usize, seed: u64) -> Result<Self> {
        if drivers == 0 {
            return Err(Error::param("at least one Wiener driver is required"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::param(format!("atom weight must be finite and >= 0, got {w}")));
        }
        let steps = clock.steps();
        let mut rng = stream(seed, STREAM_WIENER);
        let mut wiener = Vec::with_capacity(steps * drivers);
        for k in 0..steps {
            let sd = clock.increment(k).sqrt();
            for _ in 0..drivers {
                let z: f64 = rng.sample(StandardNormal);
                wiener.push(sd * z);
            }
        }
        let mut counts = vec![0u32; steps * weights.len()];
        for (a, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut rng = stream(seed, STREAM_JUMPS + a as u64);
            for k in 0..steps {
                let lam = w * clock.increment(k);
                if lam > 0.0 {
                    let dist = Poisson::new(lam).map_err(|e| Error::param(e.to_string()))?;
                    counts[k * weights.len() + a] = dist.sample(&mut rng) as u32;
                }
            }
        }
        Ok(NoisePath {
            clock: clock.clone(),
            seed,
            drivers,
            wiener,
            counts,
            weights: weights.to_vec(),
        })
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn drivers(&self) -> usize {
        self.drivers
    }

    pub fn atoms(&self) -> usize {
        self.weights.len()
    }

    pub fn steps(&self) -> usize {
        self.clock.steps()
    }

    /// Wiener increments of all drivers at step `k`.
    pub fn wiener(&self, k: usize) -> &[f64] {
        &self.wiener[k * self.drivers..(k + 1) * self.drivers]
    }

    pub fn count(&self, k: usize, atom: usize) -> u32 {
        self.counts[k * self.weights.len() + atom]
    }

    /// Total events of one atom over the path.
    pub fn total_count(&self, atom: usize) -> u64 {
        (0..self.steps()).map(|k| u64::from(self.count(k, atom))).sum()
    }

    /// Count minus compensator, `N_k - w dV_k`.
    pub fn compensated_increment(&self, k: usize, atom: usize) -> f64 {
        f64::from(self.count(k, atom)) - self.weights[atom] * self.clock.increment(k)
    }

    /// Sums increments over blocks of `factor` steps; the coupled coarse path.
    pub fn coarsen(&self, factor: usize) -> Result<NoisePath> {
        let clock = self.clock.coarsen(factor)?;
        let (r, a) = (self.drivers, self.weights.len());
        let mut wiener = vec![0.0; clock.steps() * r];
        let mut counts = vec![0u32; clock.steps() * a];
        for k in 0..self.steps() {
            let kc = k / factor;
            for i in 0..r {
                wiener[kc * r + i] += self.wiener[k * r + i];
            }
            for j in 0..a {
                counts[kc * a + j] += self.counts[k * a + j];
            }
        }
        Ok(NoisePath {
            clock,
            seed: self.seed,
            drivers: r,
            wiener,
            counts,
            weights: self.weights.clone(),
        })
    }

    /// CSV with columns `step,t,V,dW_1..dW_R,events` (events as `atom:count;...`).
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "step,t,V")?;
        for i in 1..=self.drivers {
            write!(w, ",dW_{i}")?;
        }
        writeln!(w, ",events")?;
        for k in 0..self.steps() {
            write!(w, "{k},{},{}", self.clock.time(k + 1), self.clock.value(k + 1))?;
            for dw in self.wiener(k) {
                write!(w, ",{dw}")?;
            }
            let ev: Vec<String> = (0..self.atoms())
                .filter(|&a| self.count(k, a) > 0)
                .map(|a| format!("{a}:{}", self.count(k, a)))
                .collect();
            writeln!(w, ",{}", ev.join(";"))?;
        }
        Ok(())
    }

    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    #[test]
    fn clocks() {
        let c = Clock::linear(2.0, 4).unwrap();
        assert_eq!(c.increment(0), 0.5);
        assert_eq!(c.value(4), 2.0);
        let s = Clock::new(2.0, 8, ClockKind::Saturating).unwrap();
        assert_eq!(s.value(0), 0.0);
        assert!((s.value(8) - 2.0).abs() < 1e-15);
        let mut prev = 0.0;
        for k in 1..=8 {
            assert!(s.value(k) > prev);
            prev = s.value(k);
        }
        assert!(s.increment(0) > s.increment(7));
        assert!(Clock::linear(0.0, 4).is_err());
        assert!(c.coarsen(3).is_err());
    }

    #[test]
    fn pure_wiener_path() {
        let c = Clock::linear(1.0, 50).unwrap();
        let p = NoisePath::sample(&c, &JumpCatalog::empty(), 1, 3).unwrap();
        assert_eq!(p.atoms(), 0);
        assert_eq!(p.wiener(0).len(), 1);
    }

    #[test]
    fn zero_weight_means_no_events() {
        let c = Clock::linear(1.0, 50).unwrap();
        let p = NoisePath::sample_with_weights(&c, &[0.0], 2, 3).unwrap();
        assert_eq!(p.total_count(0), 0);
        assert_eq!(p.compensated_increment(0, 0), 0.0);
    }

    #[test]
    fn compensated_values() {
        let c = Clock::linear(1.0, 10).unwrap();
        let p = NoisePath::sample_with_weights(&c, &[2.0], 1, 1).unwrap();
        for k in 0..10 {
            let expect = f64::from(p.count(k, 0)) - 0.2;
            assert!((p.compensated_increment(k, 0) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let c = Clock::linear(1.0, 20).unwrap();
        let a = NoisePath::sample_with_weights(&c, &[1.0, 2.0], 3, 42).unwrap();
        let b = NoisePath::sample_with_weights(&c, &[1.0, 2.0], 3, 42).unwrap();
        let d = NoisePath::sample_with_weights(&c, &[1.0, 2.0], 3, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
    }

    #[test]
    fn coarsening_sums_increments() {
        let c = Clock::linear(1.0, 8).unwrap();
        let p = NoisePath::sample_with_weights(&c, &[5.0], 2, 9).unwrap();
        let q = p.coarsen(2).unwrap();
        assert_eq!(q.steps(), 4);
        for k in 0..4 {
            for i in 0..2 {
                let s = p.wiener(2 * k)[i] + p.wiener(2 * k + 1)[i];
                assert!((q.wiener(k)[i] - s).abs() < 1e-15);
            }
            assert_eq!(q.count(k, 0), p.count(2 * k, 0) + p.count(2 * k + 1, 0));
        }
    }

    #[test]
    fn ensemble_statistics() {
        let c = Clock::linear(1.0, 10).unwrap();
        let lam = 3.0;
        let paths = 10_000;
        let mut totals = Vec::with_capacity(paths);
        let mut comp_sums = Vec::with_capacity(paths);
        let mut dw0 = Vec::with_capacity(paths);
        let mut dw1 = Vec::with_capacity(paths);
        for i in 0..paths {
            let p = NoisePath::sample_with_weights(&c, &[lam], 2, derive_seed(7, i as u64)).unwrap();
            totals.push(p.total_count(0) as f64);
            comp_sums.push((0..5).map(|k| p.compensated_increment(k, 0)).sum::<f64>());
            dw0.push(p.wiener(3)[0]);
            dw1.push(p.wiener(3)[1]);
        }
        let m = stats::mean(&totals);
        assert!((m - lam).abs() < 3.0 * (lam / paths as f64).sqrt(), "mean count {m}");
        assert!(stats::mean(&comp_sums).abs() < 3.0 * stats::std_error(&comp_sums));
        // variance of a normal sample has standard error var * sqrt(2/(n-1))
        let v = stats::variance(&dw0);
        assert!((v - 0.1).abs() < 3.0 * 0.1 * (2.0 / (paths as f64 - 1.0)).sqrt(), "var {v}");
        let rho = stats::correlation(&dw0, &dw1);
        assert!(rho.abs() < 3.0 / (paths as f64).sqrt(), "corr {rho}");
    }

    #[test]
    fn csv_dump_has_expected_columns() {
        let c = Clock::linear(1.0, 3).unwrap();
        let p = NoisePath::sample_with_weights(&c, &[50.0], 2, 1).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,t,V,dW_1,dW_2,events"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 6);
        assert!(row[5].starts_with("0:"));
    }
}
