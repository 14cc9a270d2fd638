//! Problem files: coefficients and data written in the expression language.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::jump::{JumpAtom, JumpCatalog};
use crate::operators::{CoefficientSet, Regularity};
use crate::spectral::{FieldSampler, SpectralField, TorusGrid};

fn one() -> usize {
    1
}

fn default_drivers() -> usize {
    4
}

fn default_period() -> f64 {
    1.0
}

/// Regularity constants as written in a problem file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularitySpec {
    pub n0: f64,
    pub eta: f64,
    pub order: usize,
    pub beta: f64,
}

impl Default for RegularitySpec {
    fn default() -> Self {
        let r = Regularity::default();
        RegularitySpec {
            n0: r.n0,
            eta: r.eta,
            order: r.order,
            beta: r.beta,
        }
    }
}

/// One jump atom as written in a problem file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub label: String,
    pub kind: u8,
    pub weight: f64,
    /// `[i]`
    pub displacement: Vec<Expr>,
    /// `[l][lb]`; empty means zero.
    #[serde(default)]
    pub zero_order: Vec<Vec<Expr>>,
}

/// Coefficients of the system; empty lists mean zero fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub dim: usize,
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default = "one")]
    pub system: usize,
    #[serde(default = "default_drivers")]
    pub drivers: usize,
    /// `[i][rho]`
    #[serde(default)]
    pub sigma1: Vec<Vec<Expr>>,
    #[serde(default)]
    pub sigma2: Vec<Vec<Expr>>,
    /// `[l][lb][rho]`
    #[serde(default)]
    pub upsilon1: Vec<Vec<Vec<Expr>>>,
    #[serde(default)]
    pub upsilon2: Vec<Vec<Vec<Expr>>>,
    /// `[i]`
    #[serde(default)]
    pub drift: Vec<Expr>,
    /// `[l][lb]`
    #[serde(default)]
    pub zero_order: Vec<Vec<Expr>>,
    #[serde(default)]
    pub atoms: Vec<AtomSpec>,
    #[serde(default)]
    pub regularity: RegularitySpec,
}

fn flatten2(name: &str, rows: &[Vec<Expr>], n: usize, m: usize) -> Result<Vec<Expr>> {
    if rows.is_empty() {
        return Ok(vec![Expr::constant(0.0); n * m]);
    }
    if rows.len() != n || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Problem(format!("`{name}` must be a {n} x {m} array")));
    }
    Ok(rows.iter().flatten().cloned().collect())
}

fn flatten3(name: &str, rows: &[Vec<Vec<Expr>>], n: usize, m: usize, r: usize) -> Result<Vec<Expr>> {
    if rows.is_empty() {
        return Ok(vec![Expr::constant(0.0); n * m * r]);
    }
    if rows.len() != n || rows.iter().any(|a| a.len() != m || a.iter().any(|b| b.len() != r)) {
        return Err(Error::Problem(format!("`{name}` must be a {n} x {m} x {r} array")));
    }
    Ok(rows.iter().flatten().flatten().cloned().collect())
}

fn flatten1(name: &str, row: &[Expr], n: usize) -> Result<Vec<Expr>> {
    if row.is_empty() {
        return Ok(vec![Expr::constant(0.0); n]);
    }
    if row.len() != n {
        return Err(Error::Problem(format!("`{name}` must have {n} entries")));
    }
    Ok(row.to_vec())
}

/// Samples a list of expressions as a multi-channel field.
pub fn sample_exprs(grid: &Arc<TorusGrid>, exprs: &[Expr]) -> Result<SpectralField> {
    let mut vals = Vec::with_capacity(exprs.len() * grid.len());
    for e in exprs {
        vals.extend(e.sample(grid)?);
    }
    SpectralField::from_physical(grid, exprs.len(), &vals)
}

impl CoefficientSpec {
    /// Builds the grid for this problem with `points` nodes per axis.
    pub fn grid(&self, points: usize) -> Result<Arc<TorusGrid>> {
        TorusGrid::new(self.dim, points, self.period)
    }

    pub fn regularity(&self) -> Regularity {
        Regularity {
            n0: self.regularity.n0,
            eta: self.regularity.eta,
            order: self.regularity.order,
            beta: self.regularity.beta,
        }
    }

    /// Samples every coefficient on `grid`.
    pub fn build(&self, grid: &Arc<TorusGrid>) -> Result<CoefficientSet> {
        if grid.dim() != self.dim || grid.period() != self.period {
            return Err(Error::shape(format!(
                "problem is posed on a {}-d torus of period {}, grid is {:?}",
                self.dim, self.period, grid
            )));
        }
        let (d, d2, r) = (self.dim, self.system, self.drivers);
        let mut cs = CoefficientSet::zero(grid, d2, r)?;
        cs.sigma[0] = sample_exprs(grid, &flatten2("sigma1", &self.sigma1, d, r)?)?;
        cs.sigma[1] = sample_exprs(grid, &flatten2("sigma2", &self.sigma2, d, r)?)?;
        cs.upsilon[0] = sample_exprs(grid, &flatten3("upsilon1", &self.upsilon1, d2, d2, r)?)?;
        cs.upsilon[1] = sample_exprs(grid, &flatten3("upsilon2", &self.upsilon2, d2, d2, r)?)?;
        cs.drift = sample_exprs(grid, &flatten1("drift", &self.drift, d)?)?;
        cs.zero_order = sample_exprs(grid, &flatten2("zero_order", &self.zero_order, d2, d2)?)?;
        let mut atoms = Vec::with_capacity(self.atoms.len());
        for a in &self.atoms {
            let disp = sample_exprs(grid, &flatten1(&a.label, &a.displacement, d)?)?;
            let rho = sample_exprs(grid, &flatten2(&a.label, &a.zero_order, d2, d2)?)?;
            atoms.push(JumpAtom::new(a.label.clone(), a.kind, a.weight, disp, rho)?);
        }
        let reg = self.regularity();
        cs.jumps = JumpCatalog::new(atoms, reg.eta, reg.beta)?;
        cs.regularity = reg;
        Ok(cs)
    }

    pub fn kind_one_atoms(&self) -> usize {
        self.atoms.iter().filter(|a| a.kind == 1).count()
    }
}

/// Source of a multi-channel field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    /// One expression per channel.
    Expr { values: Vec<Expr> },
    /// Random band-limited field with amplitude `|k|^-decay`.
    Random { decay: f64, k_max: usize, seed: u64 },
    /// A snapshot file (see [`SpectralField::write_snapshot`]).
    Snapshot { path: PathBuf },
}

impl FieldSpec {
    pub fn build(&self, grid: &Arc<TorusGrid>, channels: usize, base: Option<&Path>) -> Result<SpectralField> {
        match self {
            FieldSpec::Zero => Ok(SpectralField::zeros(grid, channels)),
            FieldSpec::Expr { values } => {
                if values.len() != channels {
                    return Err(Error::Problem(format!(
                        "field needs {channels} expressions, got {}",
                        values.len()
                    )));
                }
                sample_exprs(grid, values)
            }
            FieldSpec::Random { decay, k_max, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                FieldSampler::new(*decay, *k_max).sample(grid, channels, &mut rng)
            }
            FieldSpec::Snapshot { path } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                let f = SpectralField::read_snapshot(&full)?;
                if **f.grid() != **grid || f.channels() != channels {
                    return Err(Error::Problem(format!(
                        "snapshot {} does not match the run grid or channel count",
                        full.display()
                    )));
                }
                Ok(f)
            }
        }
    }

    /// Snapshot paths referenced by this field.
    pub fn files(&self) -> Vec<&Path> {
        match self {
            FieldSpec::Snapshot { path } => vec![path.as_path()],
            _ => Vec::new(),
        }
    }
}

/// Initial condition and free terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub initial: FieldSpec,
    /// `f`, `[l]`.
    #[serde(default)]
    pub forcing: Vec<Expr>,
    /// `g`, `[l][rho]`.
    #[serde(default)]
    pub noise_forcing: Vec<Vec<Expr>>,
    /// `h`, one `[l]` list per kind-1 atom in catalog order.
    #[serde(default)]
    pub jump_forcing: Vec<Vec<Expr>>,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            initial: FieldSpec::Zero,
            forcing: Vec::new(),
            noise_forcing: Vec::new(),
            jump_forcing: Vec::new(),
        }
    }
}

/// A complete problem: coefficients plus data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub data: DataSpec,
}

/// Data sampled on a grid.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub initial: SpectralField,
    pub forcing: Option<SpectralField>,
    /// Channel `l * R + rho`.
    pub noise_forcing: Option<SpectralField>,
    /// One field per kind-1 atom (`None` when zero).
    pub jump_forcing: Vec<Option<SpectralField>>,
}

impl ProblemData {
    pub fn zero(grid: &Arc<TorusGrid>, system: usize, kind_one_atoms: usize) -> Self {
        ProblemData {
            initial: SpectralField::zeros(grid, system),
            forcing: None,
            noise_forcing: None,
            jump_forcing: vec![None; kind_one_atoms],
        }
    }

    /// Every field multiplied by `s`.
    pub fn scaled(&self, s: f64) -> ProblemData {
        ProblemData {
            initial: self.initial.scale(s),
            forcing: self.forcing.as_ref().map(|f| f.scale(s)),
            noise_forcing: self.noise_forcing.as_ref().map(|f| f.scale(s)),
            jump_forcing: self.jump_forcing.iter().map(|h| h.as_ref().map(|f| f.scale(s))).collect(),
        }
    }
}

impl Problem {
    /// Parses a problem from TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Problem = toml::from_str(text).map_err(|e| Error::Problem(e.to_string()))?;
        Ok(p)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Problem(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Problem::from_toml(&text)
    }

    /// Named problems shipped with the crate: `zero`, `reference`, `smooth`, `system`.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "zero" => ZERO,
            "reference" => REFERENCE,
            "smooth" => SMOOTH,
            "system" => SYSTEM,
            _ => return Err(Error::Problem(format!("unknown builtin problem `{name}`"))),
        };
        Problem::from_toml(text)
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["zero", "reference", "smooth", "system"]
    }

    /// Samples the data on `grid`; relative snapshot paths resolve against `base`.
    pub fn build_data(&self, grid: &Arc<TorusGrid>, base: Option<&Path>) -> Result<ProblemData> {
        let c = &self.coefficients;
        let (d2, r) = (c.system, c.drivers);
        let atoms = c.kind_one_atoms();
        let initial = self.data.initial.build(grid, d2, base)?;
        let forcing = if self.data.forcing.is_empty() {
            None
        } else {
            Some(sample_exprs(grid, &flatten1("forcing", &self.data.forcing, d2)?)?)
        };
        let noise_forcing = if self.data.noise_forcing.is_empty() {
            None
        } else {
            Some(sample_exprs(grid, &flatten2("noise_forcing", &self.data.noise_forcing, d2, r)?)?)
        };
        let jump_forcing = if self.data.jump_forcing.is_empty() {
            vec![None; atoms]
        } else {
            if self.data.jump_forcing.len() != atoms {
                return Err(Error::Problem(format!(
                    "`jump_forcing` needs one entry per kind-1 atom ({atoms})"
                )));
            }
            self.data
                .jump_forcing
                .iter()
                .map(|h| sample_exprs(grid, &flatten1("jump_forcing", h, d2)?).map(Some))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(ProblemData {
            initial,
            forcing,
            noise_forcing,
            jump_forcing,
        })
    }

    /// Files the problem depends on.
    pub fn files(&self) -> Vec<&Path> {
        self.data.initial.files()
    }
}

const ZERO: &str = r#"
[coefficients]
dim = 1
period = 1.0

[data.initial]
type = "zero"
"#;

// Degenerate set on a torus of period 4: no second-kind diffusion, the noise
// balances the first-kind diffusion exactly.
const REFERENCE: &str = r#"
[coefficients]
dim = 1
period = 4.0
system = 1
drivers = 2
sigma1 = [["0.1*cos(pi*x/2)", "0.08 + 0.04*sin(pi*x/2)"]]
upsilon1 = [[["0.2*sin(pi*x/2)", "0.1"]]]
drift = ["0.3 + 0.2*sin(pi*x/2)"]
zero_order = [["-0.1 + 0.05*cos(pi*x/2)"]]

[coefficients.regularity]
n0 = 50.0
eta = 0.5
order = 2
beta = 1.0

[[coefficients.atoms]]
label = "lift"
kind = 1
weight = 2.0
displacement = ["0.1 + 0.05*sin(pi*x/2)"]
zero_order = [["0.1*cos(pi*x/2)"]]

[[coefficients.atoms]]
label = "drag"
kind = 2
weight = 0.5
displacement = ["-0.03 + 0.01*cos(pi*x/2)"]
zero_order = [["0.05"]]

[data]
forcing = ["0.2*sin(pi*x/2)"]
noise_forcing = [["0.1*cos(pi*x/2)", "0"]]
jump_forcing = [["0.1*sin(pi*x)"]]

[data.initial]
type = "random"
decay = 1.5
k_max = 60
seed = 2024
"#;

const SMOOTH: &str = r#"
[coefficients]
dim = 1
period = 4.0
system = 1
drivers = 2
sigma1 = [["0.1*cos(pi*x/2)", "0.08 + 0.04*sin(pi*x/2)"]]
sigma2 = [["0.05", "0"]]
upsilon1 = [[["0.2*sin(pi*x/2)", "0.1"]]]
upsilon2 = [[["0.1", "0"]]]
drift = ["0.3 + 0.2*sin(pi*x/2)"]
zero_order = [["-0.1 + 0.05*cos(pi*x/2)"]]

[coefficients.regularity]
n0 = 50.0
eta = 0.5
order = 2
beta = 1.0

[[coefficients.atoms]]
label = "lift"
kind = 1
weight = 2.0
displacement = ["0.1 + 0.05*sin(pi*x/2)"]
zero_order = [["0.1*cos(pi*x/2)"]]

[[coefficients.atoms]]
label = "drag"
kind = 2
weight = 0.5
displacement = ["-0.03 + 0.01*cos(pi*x/2)"]
zero_order = [["0.05"]]

[data]
forcing = ["0.2*sin(pi*x/2)"]
noise_forcing = [["0.1*cos(pi*x/2)", "0"]]
jump_forcing = [["0.1*sin(pi*x)"]]

[data.initial]
type = "random"
decay = 2.0
k_max = 8
seed = 2024
"#;

// Two coupled components with matrix-valued zero-order terms.
const SYSTEM: &str = r#"
[coefficients]
dim = 1
period = 1.0
system = 2
drivers = 2
sigma1 = [["0.05*sin(2*pi*x)", "0.04"]]
sigma2 = [["0.03", "0.02*cos(2*pi*x)"]]
upsilon1 = [[["0.1*cos(2*pi*x)", "0"], ["0.05", "0.02*sin(2*pi*x)"]], [["0", "0.03"], ["0.1", "0.1*sin(2*pi*x)"]]]
upsilon2 = [[["0.02", "0"], ["0", "0.01"]], [["0", "0"], ["0.02*cos(2*pi*x)", "0"]]]
drift = ["0.2*cos(2*pi*x)"]
zero_order = [["-0.1", "0.05*sin(2*pi*x)"], ["0.02", "-0.2*cos(2*pi*x)"]]

[coefficients.regularity]
n0 = 100.0
eta = 0.5
order = 2
beta = 1.0

[[coefficients.atoms]]
label = "swap"
kind = 1
weight = 1.0
displacement = ["0.02 + 0.01*sin(2*pi*x)"]
zero_order = [["0.05", "0.1*cos(2*pi*x)"], ["-0.05", "0"]]

[[coefficients.atoms]]
label = "creep"
kind = 2
weight = 0.5
displacement = ["-0.03*cos(2*pi*x)"]
zero_order = [["0", "0"], ["0", "0.05"]]

[data]
forcing = ["sin(2*pi*x)", "0"]

[data.initial]
type = "expr"
values = ["exp(cos(2*pi*x))", "sin(4*pi*x)"]
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_build() {
        for name in Problem::builtin_names() {
            let p = Problem::builtin(name).unwrap();
            let g = p.coefficients.grid(128).unwrap();
            let cs = p.coefficients.build(&g).unwrap();
            cs.check_shapes().unwrap();
            p.build_data(&g, None).unwrap();
        }
        assert!(Problem::builtin("nope").is_err());
    }

    #[test]
    fn reference_set_validates() {
        let p = Problem::builtin("reference").unwrap();
        let g = p.coefficients.grid(128).unwrap();
        let cs = p.coefficients.build(&g).unwrap();
        let rep = cs.bound_report().unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn toml_round_trip() {
        let p = Problem::builtin("system").unwrap();
        let text = p.to_toml().unwrap();
        assert_eq!(Problem::from_toml(&text).unwrap(), p);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut p = Problem::builtin("reference").unwrap();
        p.coefficients.drift.push(Expr::constant(1.0));
        let g = p.coefficients.grid(16).unwrap();
        assert!(matches!(p.coefficients.build(&g), Err(Error::Problem(_))));
        assert!(Problem::from_toml("[coefficients]\ndim = 1\nbogus = 3\n").is_err());
    }
}
