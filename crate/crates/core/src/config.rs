//! JSON run configuration and its content hash.

use std::path::{Path, PathBuf};
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::examples::{Benchmark, EngineOptions};
use crate::model::{
    shift_to_equilibrium, CertificationPolicy, ConstraintUniverse, InputBox, NonlinearityAtom,
    Partition, SignCase, SystemModel, ValidationOptions,
};
use crate::network::{self, NetworkInstance, NetworkOptions, NetworkPattern};
use crate::polytope::Polyhedron;
use crate::simulate::SimulationOptions;
use crate::solver::SolverOptions;
use crate::terminal::TerminalOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub system: SystemSpec,
    /// State weight; identity when absent.
    #[serde(default)]
    pub q: Option<Vec<Vec<f64>>>,
    /// Artificial-input weight; identity when absent.
    #[serde(default)]
    pub r: Option<Vec<Vec<f64>>>,
    pub horizon: usize,
    /// Seed of generated networks.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub terminal: TerminalOptions,
    #[serde(default)]
    pub validation: ValidationOptions,
    #[serde(default)]
    pub simulation: SimulationSpec,
    /// Relative paths are resolved against the config file. Not hashed.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    Explicit(ExplicitSystem),
    Network(NetworkSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitSystem {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub atoms: Vec<AtomSpec>,
    pub state_set: RegionSpec,
    pub partitions: Vec<PartitionSpec>,
    pub input_box: BoxSpec,
    #[serde(default)]
    pub policy: CertificationPolicy,
    /// When present the problem is posed in coordinates centred here.
    #[serde(default)]
    pub equilibrium: Option<EquilibriumSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AtomSpec {
    Affine { c: Vec<f64>, d: f64 },
    Quadratic { h: Vec<Vec<f64>>, c: Vec<f64>, d: f64 },
    Sinusoid { amplitude: f64, frequency: Vec<f64>, phase: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// A box, or rows `a x <= b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegionSpec {
    Box(BoxSpec),
    Rows { a: Vec<Vec<f64>>, b: Vec<f64> },
}

/// `region` is intersected with the state set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub region: RegionSpec,
    pub sign_cases: Vec<SignCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumSpec {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Sparsity pattern file; the built-in 15-node pattern when absent.
    #[serde(default)]
    pub pattern: Option<PathBuf>,
    #[serde(default)]
    pub options: NetworkOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub stop_tol: f64,
    /// Wall-clock limit per controller evaluation, in seconds.
    pub step_budget_secs: Option<f64>,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            stop_tol: SimulationOptions::default().stop_tol,
            step_budget_secs: None,
        }
    }
}

/// A parsed configuration together with the files it refers to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    /// Contents of the network pattern, for network systems.
    pub pattern_text: Option<String>,
}

/// A configuration turned into a benchmark.
#[derive(Debug, Clone)]
pub struct BuiltProblem {
    pub benchmark: Benchmark,
    /// The drawn network, for network systems.
    pub network: Option<NetworkInstance>,
    /// Equilibrium the coordinates are centred at, if any.
    pub x_eq: Option<DVector<f64>>,
    pub u_eq: Option<DVector<f64>>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what} must be a non-empty rectangular matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{what} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector(v: &[f64], len: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::Config(format!("{what} has length {}, expected {len}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("{what} has non-finite entries")));
    }
    Ok(DVector::from_column_slice(v))
}

fn square(rows: &Option<Vec<Vec<f64>>>, n: usize, what: &str) -> Result<DMatrix<f64>> {
    match rows {
        None => Ok(DMatrix::identity(n, n)),
        Some(rows) => {
            let m = matrix(rows, what)?;
            if m.shape() != (n, n) {
                return Err(Error::Config(format!("{what} must be {n}x{n}")));
            }
            Ok(m)
        }
    }
}

impl RegionSpec {
    fn polyhedron(&self, n: usize, what: &str) -> Result<Polyhedron> {
        match self {
            RegionSpec::Box(b) => {
                let lo = vector(&b.lower, n, &format!("{what}.lower"))?;
                let hi = vector(&b.upper, n, &format!("{what}.upper"))?;
                Ok(Polyhedron::from_box(&lo, &hi))
            }
            RegionSpec::Rows { a, b } => {
                let a = matrix(a, &format!("{what}.a"))?;
                if a.ncols() != n {
                    return Err(Error::Config(format!("{what}.a must have {n} columns")));
                }
                let b = vector(b, a.nrows(), &format!("{what}.b"))?;
                Polyhedron::new(a, b)
            }
        }
    }
}

impl AtomSpec {
    fn atom(&self, n: usize, i: usize) -> Result<NonlinearityAtom> {
        let what = format!("atoms[{i}]");
        Ok(match self {
            AtomSpec::Affine { c, d } => NonlinearityAtom::affine(vector(c, n, &what)?, *d),
            AtomSpec::Quadratic { h, c, d } => {
                let h = matrix(h, &what)?;
                if h.shape() != (n, n) {
                    return Err(Error::Config(format!("{what}.h must be {n}x{n}")));
                }
                NonlinearityAtom::quadratic(h, vector(c, n, &what)?, *d)
                    .map_err(|e| Error::Config(format!("{what}: {e}")))?
            }
            AtomSpec::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => NonlinearityAtom::sinusoid(*amplitude, vector(frequency, n, &what)?, *phase),
        })
    }
}

impl ExplicitSystem {
    fn build(&self) -> Result<(SystemModel, ConstraintUniverse)> {
        let a = matrix(&self.a, "system.a")?;
        let n = a.nrows();
        let b = matrix(&self.b, "system.b")?;
        let m = b.ncols();
        if self.atoms.len() != m {
            return Err(Error::Config(format!("{m} input columns but {} atoms", self.atoms.len())));
        }
        let atoms = self
            .atoms
            .iter()
            .enumerate()
            .map(|(i, s)| s.atom(n, i))
            .collect::<Result<_>>()?;
        let model = SystemModel::new(a, b, atoms).map_err(|e| Error::Config(e.to_string()))?;
        let state_set = self.state_set.polyhedron(n, "state_set")?;
        let partitions = self
            .partitions
            .iter()
            .enumerate()
            .map(|(j, p)| {
                if p.sign_cases.len() != m {
                    return Err(Error::Config(format!("partitions[{j}] needs {m} sign cases")));
                }
                let region = p.region.polyhedron(n, &format!("partitions[{j}].region"))?;
                Ok(Partition {
                    polyhedron: state_set.intersect(&region)?,
                    sign_cases: p.sign_cases.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if partitions.is_empty() {
            return Err(Error::Config("at least one partition is required".into()));
        }
        let input_box = InputBox::new(
            vector(&self.input_box.lower, m, "input_box.lower")?,
            vector(&self.input_box.upper, m, "input_box.upper")?,
        )?;
        Ok((model, ConstraintUniverse::new(state_set, partitions, input_box, self.policy)))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        if config.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(config.simulation.stop_tol >= 0.0) {
            return Err(Error::Config("simulation.stop_tol must be nonnegative".into()));
        }
        if let Some(b) = config.simulation.step_budget_secs {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config("simulation.step_budget_secs must be positive".into()));
            }
        }
        Ok(config)
    }

    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            validation: self.validation.clone(),
            terminal: self.terminal.clone(),
            solver: self.solver.clone(),
        }
    }

    pub fn simulation_options(&self) -> SimulationOptions {
        SimulationOptions {
            stop_tol: self.simulation.stop_tol,
            step_budget: self.simulation.step_budget_secs.map(Duration::from_secs_f64),
        }
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, &base)
    }

    /// Parses `text`; relative paths inside it are resolved against `base_dir`.
    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self> {
        let config = RunConfig::parse(text)?;
        let mut loaded = Self {
            config,
            base_dir: base_dir.to_path_buf(),
            pattern_text: None,
        };
        loaded.reload_pattern()?;
        Ok(loaded)
    }

    fn reload_pattern(&mut self) -> Result<()> {
        self.pattern_text = match &self.config.system {
            SystemSpec::Network(spec) => Some(match &spec.pattern {
                Some(p) => {
                    let path = self.base_dir.join(p);
                    std::fs::read_to_string(&path)
                        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
                }
                None => network::DEFAULT_PATTERN.to_string(),
            }),
            SystemSpec::Explicit(_) => None,
        };
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self
    }

    /// SHA-256 over the canonical configuration (without `output_dir`) and
    /// the pattern contents, hex encoded.
    pub fn hash(&self) -> String {
        let mut canonical = self.config.clone();
        canonical.output_dir = None;
        if let SystemSpec::Network(spec) = &mut canonical.system {
            spec.pattern = None;
        }
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&canonical).expect("config serializes"));
        if let Some(p) = &self.pattern_text {
            hasher.update(b"\npattern\n");
            hasher.update(p.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Output directory, resolved against the config location.
    pub fn output_dir(&self) -> Option<PathBuf> {
        self.config.output_dir.as_ref().map(|d| self.base_dir.join(d))
    }

    pub fn build(&self) -> Result<BuiltProblem> {
        let c = &self.config;
        match &c.system {
            SystemSpec::Explicit(sys) => {
                let (model, universe) = sys.build()?;
                let n = model.n();
                let m = model.m();
                let (model, universe, x_eq, u_eq) = match &sys.equilibrium {
                    None => (model, universe, None, None),
                    Some(eq) => {
                        let x_eq = vector(&eq.x, n, "equilibrium.x")?;
                        let u_eq = vector(&eq.u, m, "equilibrium.u")?;
                        let shifted =
                            shift_to_equilibrium(&model, &universe, &x_eq, &u_eq, &c.validation)?;
                        (shifted.model, shifted.universe, Some(x_eq), Some(u_eq))
                    }
                };
                Ok(BuiltProblem {
                    benchmark: Benchmark {
                        q: square(&c.q, n, "q")?,
                        r: square(&c.r, m, "r")?,
                        model,
                        universe,
                        horizon: c.horizon,
                    },
                    network: None,
                    x_eq,
                    u_eq,
                })
            }
            SystemSpec::Network(spec) => {
                let text = self.pattern_text.as_deref().unwrap_or(network::DEFAULT_PATTERN);
                let pattern = NetworkPattern::parse(text)?;
                let mut opts = spec.options.clone();
                opts.horizon = c.horizon;
                let inst = network::generate(&pattern, c.seed, &opts)?;
                let shifted = inst.shifted(&c.validation)?;
                let n = shifted.model.n();
                Ok(BuiltProblem {
                    benchmark: Benchmark {
                        q: square(&c.q, n, "q")?,
                        r: square(&c.r, 1, "r")?,
                        model: shifted.model,
                        universe: shifted.universe,
                        horizon: c.horizon,
                    },
                    x_eq: Some(inst.x_eq.clone()),
                    u_eq: Some(DVector::from_element(1, inst.u_eq)),
                    network: Some(inst),
                })
            }
        }
    }
}
