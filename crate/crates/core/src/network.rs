//! Seeded rank-one bilinear networks `x+ = A x + b c'x u`.
//!
//! The edge weights of the published instance are not available, so
//! instances are drawn from a fixed sparsity pattern with a seeded RNG.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::examples::Benchmark;
use crate::model::{
    shift_to_equilibrium, CertificationPolicy, ConstraintUniverse, InputBox, NonlinearityAtom,
    Partition, ShiftedSystem, SignCase, SystemModel, ValidationOptions,
};
use crate::polytope::Polyhedron;
use crate::terminal::{lqr_gain, solve_dare, spectral_radius};

/// The 15-node pattern shipped with the toolkit.
pub const DEFAULT_PATTERN: &str = include_str!("../../../configs/network15.pattern");

/// Which entries of `A`, `b` and `c` may be nonzero (0-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkPattern {
    pub n: usize,
    pub a_entries: Vec<(usize, usize)>,
    pub b_nodes: Vec<usize>,
    pub c_nodes: Vec<usize>,
}

impl NetworkPattern {
    /// Parses the line format `n N`, `a i j`, `b i`, `c j` with 1-based
    /// labels; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut n = None;
        let mut a_entries = Vec::new();
        let mut b_nodes = Vec::new();
        let mut c_nodes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("pattern line {}: {raw:?}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let nums: Vec<usize> = fields[1..]
                .iter()
                .map(|f| f.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            match (fields[0], nums.as_slice()) {
                ("n", [v]) => n = Some(*v),
                ("a", [i, j]) if *i > 0 && *j > 0 => a_entries.push((i - 1, j - 1)),
                ("b", [i]) if *i > 0 => b_nodes.push(i - 1),
                ("c", [j]) if *j > 0 => c_nodes.push(j - 1),
                _ => return Err(bad()),
            }
        }
        let n = n.ok_or_else(|| Error::Config("pattern lacks an `n` line".into()))?;
        let all = a_entries
            .iter()
            .flat_map(|&(i, j)| [i, j])
            .chain(b_nodes.iter().copied())
            .chain(c_nodes.iter().copied());
        if let Some(bad) = all.into_iter().find(|&i| i >= n) {
            return Err(Error::Config(format!("pattern node {} exceeds n = {n}", bad + 1)));
        }
        if a_entries.is_empty() || b_nodes.is_empty() || c_nodes.is_empty() {
            return Err(Error::Config("pattern needs a, b and c entries".into()));
        }
        a_entries.sort_unstable();
        a_entries.dedup();
        b_nodes.sort_unstable();
        b_nodes.dedup();
        c_nodes.sort_unstable();
        c_nodes.dedup();
        Ok(Self {
            n,
            a_entries,
            b_nodes,
            c_nodes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkOptions {
    pub spectral_radius: f64,
    /// `X = {‖x‖∞ <= state_bound}`.
    pub state_bound: f64,
    /// `U = {|u| <= input_bound}`.
    pub input_bound: f64,
    /// Draws with `|u_eq|` above this are rejected.
    pub max_u_eq: f64,
    /// Draws whose LQR loop (Q = I, R = 1) around the equilibrium is slower
    /// than this are rejected.
    pub max_closed_loop_radius: f64,
    /// Draws with `max_{1<=k<=horizon} ‖A^k‖∞` above this are rejected.
    pub max_transient_gain: f64,
    /// `‖x_eq‖∞` is drawn uniformly from this range.
    pub eq_magnitude: (f64, f64),
    pub max_attempts: usize,
    /// Horizon of the transient-gain test; taken from the run configuration.
    #[serde(skip)]
    pub horizon: usize,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        Self {
            spectral_radius: 0.95,
            state_bound: 10.0,
            input_bound: 2.0,
            max_u_eq: 1.5,
            max_closed_loop_radius: 0.8,
            max_transient_gain: 5.0,
            eq_magnitude: (1.0, 3.0),
            max_attempts: 10_000,
            horizon: 15,
        }
    }
}

/// A drawn network in original coordinates and its equilibrium.
#[derive(Debug, Clone)]
pub struct NetworkInstance {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub model: SystemModel,
    pub universe: ConstraintUniverse,
    pub x_eq: DVector<f64>,
    pub u_eq: f64,
    /// 1-based index of the accepted draw.
    pub attempt: usize,
}

/// Original-coordinate universe: `X` split by the hyperplane `c'x = 0`.
pub fn network_universe(c: &DVector<f64>, opts: &NetworkOptions) -> ConstraintUniverse {
    let n = c.len();
    let x = Polyhedron::from_box(
        &DVector::from_element(n, -opts.state_bound),
        &DVector::from_element(n, opts.state_bound),
    );
    let partitions = vec![
        Partition {
            polyhedron: x.with_row(c, 0.0),
            sign_cases: vec![SignCase::NonposConvex],
        },
        Partition {
            polyhedron: x.with_row(&(-c), 0.0),
            sign_cases: vec![SignCase::NonnegConcave],
        },
    ];
    ConstraintUniverse::new(
        x,
        partitions,
        InputBox::symmetric(1, opts.input_bound),
        CertificationPolicy::Strict,
    )
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize, support: &[usize]) -> Option<DVector<f64>> {
    let mut v = DVector::zeros(n);
    for &i in support {
        v[i] = rng.gen_range(-1.0..=1.0);
    }
    let norm = v.norm();
    (norm > 1e-6).then(|| v / norm)
}

/// `max_{1<=k<=steps} ‖A^k‖∞`.
pub fn transient_gain(a: &DMatrix<f64>, steps: usize) -> f64 {
    let mut power = a.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let row_sum = power.row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max);
        worst = worst.max(row_sum);
        power = a * &power;
    }
    worst
}

/// Draws instances from `pattern` until one passes the acceptance rules.
///
/// The equilibrium follows from `det(I - A - u b c') = 0`, i.e.
/// `u_eq = 1 / c'(I - A)^{-1} b` and `x_eq ∝ (I - A)^{-1} b`, scaled so that
/// `c'x_eq < 0` (the equilibrium lies in the interior of the first partition).
pub fn generate(pattern: &NetworkPattern, seed: u64, opts: &NetworkOptions) -> Result<NetworkInstance> {
    let n = pattern.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eye = DMatrix::<f64>::identity(n, n);
    for attempt in 1..=opts.max_attempts {
        let mut a = DMatrix::zeros(n, n);
        for &(i, j) in &pattern.a_entries {
            a[(i, j)] = rng.gen_range(-1.0..=1.0);
        }
        let rho = spectral_radius(&a);
        let b = unit_vector(&mut rng, n, &pattern.b_nodes);
        let c = unit_vector(&mut rng, n, &pattern.c_nodes);
        let magnitude = rng.gen_range(opts.eq_magnitude.0..=opts.eq_magnitude.1);
        let (Some(b), Some(c)) = (b, c) else { continue };
        if rho < 1e-9 {
            continue;
        }
        a *= opts.spectral_radius / rho;
        if transient_gain(&a, opts.horizon) > opts.max_transient_gain {
            continue;
        }
        let Some(w) = (&eye - &a).lu().solve(&b) else {
            continue;
        };
        let cw = c.dot(&w);
        if cw.abs() < 1e-12 {
            continue;
        }
        let u_eq = 1.0 / cw;
        if u_eq.abs() > opts.max_u_eq || w.amax() < 1e-12 {
            continue;
        }
        let mut x_eq = &w * (magnitude / w.amax());
        if c.dot(&x_eq) > 0.0 {
            x_eq = -x_eq;
        }
        let a_shift = &a + &b * c.transpose() * u_eq;
        let bm = DMatrix::from_column_slice(n, 1, b.as_slice());
        let Ok(p) = solve_dare(&a_shift, &bm, &eye, &DMatrix::identity(1, 1)) else {
            continue;
        };
        let Ok(k) = lqr_gain(&a_shift, &bm, &p, &DMatrix::identity(1, 1)) else {
            continue;
        };
        if spectral_radius(&(&a_shift + &bm * k)) > opts.max_closed_loop_radius {
            continue;
        }
        let model = SystemModel::new(a.clone(), bm, vec![NonlinearityAtom::affine(c.clone(), 0.0)])?;
        let universe = network_universe(&c, opts);
        return Ok(NetworkInstance {
            a,
            b,
            c,
            model,
            universe,
            x_eq,
            u_eq,
            attempt,
        });
    }
    Err(Error::Config(format!(
        "no admissible network found in {} draws",
        opts.max_attempts
    )))
}

impl NetworkInstance {
    /// The instance in coordinates centred at its equilibrium.
    pub fn shifted(&self, validation: &ValidationOptions) -> Result<ShiftedSystem> {
        shift_to_equilibrium(
            &self.model,
            &self.universe,
            &self.x_eq,
            &DVector::from_element(1, self.u_eq),
            validation,
        )
    }

    /// Shifted benchmark with `Q = I`, `R = 1`.
    pub fn benchmark(&self, validation: &ValidationOptions, horizon: usize) -> Result<Benchmark> {
        let shifted = self.shifted(validation)?;
        let n = self.model.n();
        Ok(Benchmark {
            model: shifted.model,
            universe: shifted.universe,
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(1, 1),
            horizon,
        })
    }
}

/// The default 15-node instance for `seed`.
pub fn example2(seed: u64) -> Result<(NetworkInstance, Benchmark)> {
    let pattern = NetworkPattern::parse(DEFAULT_PATTERN)?;
    let opts = NetworkOptions::default();
    let inst = generate(&pattern, seed, &opts)?;
    let bench = inst.benchmark(&ValidationOptions::default(), opts.horizon)?;
    Ok((inst, bench))
}
