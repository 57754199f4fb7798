//! The system class `x+ = A x + B G(x) u` with `G(x) = diag(g_1(x), …, g_m(x))`,
//! its constraint sets, the state-space partition, and certification of the
//! per-partition sign/curvature conditions.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::polytope::Polyhedron;
use crate::solver::{self, ConvexProgram, SolveStatus, SolverOptions};

/// One scalar input gain `g_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearityAtom {
    /// `c·x + d`
    Affine { c: DVector<f64>, d: f64 },
    /// `x'Hx + c·x + d`
    Quadratic {
        h: DMatrix<f64>,
        c: DVector<f64>,
        d: f64,
    },
    /// `a cos(w·x + phi)`
    Sinusoid {
        amplitude: f64,
        frequency: DVector<f64>,
        phase: f64,
    },
}

impl NonlinearityAtom {
    pub fn affine(c: DVector<f64>, d: f64) -> Self {
        Self::Affine { c, d }
    }

    /// Builds a quadratic atom; `h` must be symmetric to 1e-12.
    pub fn quadratic(h: DMatrix<f64>, c: DVector<f64>, d: f64) -> Result<Self> {
        if h.nrows() != h.ncols() || h.nrows() != c.len() {
            return Err(Error::Dimension("quadratic atom shapes disagree".into()));
        }
        if (&h - h.transpose()).amax() > 1e-12 {
            return Err(Error::Dimension("quadratic atom H is not symmetric".into()));
        }
        Ok(Self::Quadratic { h, c, d })
    }

    pub fn sinusoid(amplitude: f64, frequency: DVector<f64>, phase: f64) -> Self {
        Self::Sinusoid {
            amplitude,
            frequency,
            phase,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Affine { c, .. } | Self::Quadratic { c, .. } => c.len(),
            Self::Sinusoid { frequency, .. } => frequency.len(),
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Self::Affine { .. })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::Affine { c, d } => dot(c, x) + d,
            Self::Quadratic { h, c, d } => {
                let n = c.len();
                let mut quad = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        quad += x[i] * h[(i, j)] * x[j];
                    }
                }
                quad + dot(c, x) + d
            }
            Self::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => amplitude * (dot(frequency, x) + phase).cos(),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> DVector<f64> {
        match self {
            Self::Affine { c, .. } => c.clone(),
            Self::Quadratic { h, c, .. } => {
                let xv = DVector::from_column_slice(x);
                (h * &xv) * 2.0 + c
            }
            Self::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => frequency * (-amplitude * (dot(frequency, x) + phase).sin()),
        }
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            Self::Affine { c, .. } => DMatrix::zeros(c.len(), c.len()),
            Self::Quadratic { h, .. } => h * 2.0,
            Self::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => frequency * frequency.transpose() * (-amplitude * (dot(frequency, x) + phase).cos()),
        }
    }
}

fn dot(c: &DVector<f64>, x: &[f64]) -> f64 {
    c.iter().zip(x).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    g: Vec<NonlinearityAtom>,
}

impl SystemModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: Vec<NonlinearityAtom>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n {
            return Err(Error::Dimension(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if b.ncols() != g.len() {
            return Err(Error::Dimension(format!(
                "B has {} columns but {} input gains were given",
                b.ncols(),
                g.len()
            )));
        }
        if let Some(i) = g.iter().position(|atom| atom.dim() != n) {
            return Err(Error::Dimension(format!("gain {} is not defined on R^{n}", i + 1)));
        }
        Ok(Self { a, b, g })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn atoms(&self) -> &[NonlinearityAtom] {
        &self.g
    }

    /// `(g_1(x), …, g_m(x))`.
    pub fn eval_g(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.m(), self.g.iter().map(|a| a.value(x.as_slice())))
    }

    /// Jacobian of `x ↦ (g_1(x), …, g_m(x))`, one gradient per row.
    pub fn eval_g_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.m(), self.n());
        for (i, atom) in self.g.iter().enumerate() {
            j.row_mut(i).copy_from(&atom.gradient(x.as_slice()).transpose());
        }
        j
    }

    /// Stacked Hessians of the gains.
    pub fn eval_g_hessians(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.g.iter().map(|a| a.hessian(x.as_slice())).collect()
    }

    pub fn gain_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.eval_g(x))
    }

    /// True dynamics `A x + B G(x) u`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * self.eval_g(x).component_mul(u)
    }

    /// Linear dynamics in the artificial input, `A x + B v`.
    pub fn step_artificial(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * v
    }
}

/// `U = [lower_1, upper_1] × … × [lower_m, upper_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl InputBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension("input box bounds differ in length".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(m: usize, bound: f64) -> Self {
        Self {
            lower: DVector::from_element(m, -bound),
            upper: DVector::from_element(m, bound),
        }
    }

    pub fn m(&self) -> usize {
        self.lower.len()
    }

    /// Channels whose interval does not contain 0 strictly.
    pub fn origin_violations(&self) -> Vec<usize> {
        (0..self.m())
            .filter(|&i| !(self.lower[i] < 0.0 && 0.0 < self.upper[i]))
            .collect()
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.slack(u) >= -tol
    }

    /// `min_i min(u_i - lower_i, upper_i - u_i)`.
    pub fn slack(&self, u: &DVector<f64>) -> f64 {
        (0..self.m())
            .map(|i| (u[i] - self.lower[i]).min(self.upper[i] - u[i]))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Which branch of the sign/curvature condition a gain satisfies on a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignCase {
    /// `g >= 0` and concave.
    NonnegConcave,
    /// `g <= 0` and convex.
    NonposConvex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MixedSign,
    CurvatureMismatch,
    ArgumentRange,
    Unverifiable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Certificate {
    Certified(SignCase),
    /// `sign` carries the certified sign when only the curvature test failed.
    Reject {
        reason: RejectReason,
        sign: Option<SignCase>,
    },
}

/// How strictly partitions are certified before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificationPolicy {
    /// Sign and curvature must both be certified.
    #[default]
    Strict,
    /// The sign must be certified; curvature failures are reported as warnings.
    SignOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub polyhedron: Polyhedron,
    pub sign_cases: Vec<SignCase>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintUniverse {
    pub state_set: Polyhedron,
    pub partitions: Vec<Partition>,
    pub input_box: InputBox,
    pub policy: CertificationPolicy,
    certified: Vec<bool>,
}

impl ConstraintUniverse {
    pub fn new(
        state_set: Polyhedron,
        partitions: Vec<Partition>,
        input_box: InputBox,
        policy: CertificationPolicy,
    ) -> Self {
        let certified = vec![false; partitions.len()];
        Self {
            state_set,
            partitions,
            input_box,
            policy,
            certified,
        }
    }

    pub fn s(&self) -> usize {
        self.partitions.len()
    }

    /// 1-based partition lookup.
    pub fn partition(&self, j: usize) -> Option<&Partition> {
        j.checked_sub(1).and_then(|i| self.partitions.get(i))
    }

    pub fn is_certified(&self, j: usize) -> bool {
        j >= 1 && self.certified.get(j - 1).copied().unwrap_or(false)
    }

    /// Runs [`validate_universe`] and marks every partition that passed.
    pub fn certify(&mut self, model: &SystemModel, opts: &ValidationOptions) -> ValidationReport {
        let report = validate_universe(model, self, opts);
        let box_ok = report.input_box_ok;
        for (i, ok) in report.partition_ok.iter().enumerate() {
            self.certified[i] = *ok && box_ok;
        }
        report
    }

    /// Indices (1-based) of partitions containing `x`.
    pub fn partitions_containing(&self, x: &DVector<f64>, tol: f64) -> Vec<usize> {
        self.partitions
            .iter()
            .enumerate()
            .filter(|(_, p)| p.polyhedron.contains(x, tol))
            .map(|(i, _)| i + 1)
            .collect()
    }
}

const SIGN_TOL: f64 = 1e-9;

/// Certifies which branch of the sign/curvature condition `atom` satisfies on
/// `polyhedron`.
pub fn certify_curvature(atom: &NonlinearityAtom, polyhedron: &Polyhedron) -> Result<Certificate> {
    if polyhedron.is_empty() {
        return Err(Error::InvalidPartition("polyhedron is empty".into()));
    }
    if !polyhedron.is_bounded() {
        return Err(Error::InvalidPartition("polyhedron is unbounded".into()));
    }
    match atom {
        NonlinearityAtom::Affine { c, d } => {
            let (lo, hi) = polyhedron
                .affine_range(c, *d)
                .ok_or_else(|| Error::InvalidPartition("LP failed on partition".into()))?;
            Ok(sign_only_certificate(lo, hi, true, true))
        }
        NonlinearityAtom::Quadratic { h, c, d } => certify_quadratic(h, c, *d, polyhedron),
        NonlinearityAtom::Sinusoid {
            amplitude,
            frequency,
            phase,
        } => {
            let (lo, hi) = polyhedron
                .affine_range(frequency, *phase)
                .ok_or_else(|| Error::InvalidPartition("LP failed on partition".into()))?;
            if *amplitude == 0.0 {
                return Ok(Certificate::Certified(SignCase::NonnegConcave));
            }
            // cos is >= 0 and concave on [kπ - π/2, kπ + π/2] for even k,
            // <= 0 and convex for odd k
            let k = ((lo + hi) / (2.0 * PI)).round();
            let centre = k * PI;
            if lo < centre - FRAC_PI_2 - SIGN_TOL || hi > centre + FRAC_PI_2 + SIGN_TOL {
                return Ok(Certificate::Reject {
                    reason: RejectReason::ArgumentRange,
                    sign: None,
                });
            }
            let even = (k as i64).rem_euclid(2) == 0;
            let case = if even == (*amplitude > 0.0) {
                SignCase::NonnegConcave
            } else {
                SignCase::NonposConvex
            };
            Ok(Certificate::Certified(case))
        }
    }
}

fn sign_only_certificate(lo: f64, hi: f64, convex: bool, concave: bool) -> Certificate {
    let sign = if lo >= -SIGN_TOL {
        Some(SignCase::NonnegConcave)
    } else if hi <= SIGN_TOL {
        Some(SignCase::NonposConvex)
    } else {
        None
    };
    match sign {
        None => Certificate::Reject {
            reason: RejectReason::MixedSign,
            sign: None,
        },
        Some(SignCase::NonnegConcave) if concave => Certificate::Certified(SignCase::NonnegConcave),
        Some(SignCase::NonposConvex) if convex => Certificate::Certified(SignCase::NonposConvex),
        Some(case) => {
            // affine-like zero function on a set can satisfy both
            if lo >= -SIGN_TOL && hi <= SIGN_TOL && (convex || concave) {
                let alt = if convex {
                    SignCase::NonposConvex
                } else {
                    SignCase::NonnegConcave
                };
                return Certificate::Certified(alt);
            }
            Certificate::Reject {
                reason: RejectReason::CurvatureMismatch,
                sign: Some(case),
            }
        }
    }
}

fn certify_quadratic(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    d: f64,
    polyhedron: &Polyhedron,
) -> Result<Certificate> {
    let eig = SymmetricEigen::new(h.clone());
    let convex = eig.eigenvalues.min() >= -1e-10;
    let concave = eig.eigenvalues.max() <= 1e-10;
    let pos = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)))
        * eig.eigenvectors.transpose();
    let neg = h - &pos;
    let Some((lo, hi)) = quadratic_bounds(&pos, &neg, c, d, polyhedron)? else {
        return Ok(Certificate::Reject {
            reason: RejectReason::Unverifiable,
            sign: None,
        });
    };
    Ok(sign_only_certificate(lo, hi, convex, concave))
}

/// Sound bounds `lo <= min f`, `hi >= max f` of `f = x'(P+N)x + c·x + d` over
/// the polyhedron, with `P` PSD and `N` NSD: convex pieces are minimized by a
/// convex solve and maximized over vertices, concave pieces symmetrically.
fn quadratic_bounds(
    pos: &DMatrix<f64>,
    neg: &DMatrix<f64>,
    c: &DVector<f64>,
    d: f64,
    polyhedron: &Polyhedron,
) -> Result<Option<(f64, f64)>> {
    let vertices = match polyhedron.vertices(1e-9) {
        Ok(v) if !v.is_empty() => v,
        Ok(_) => return Err(Error::InvalidPartition("polyhedron has no vertices".into())),
        Err(Error::Unsupported(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let quad = |m: &DMatrix<f64>, x: &DVector<f64>| x.dot(&(m * x));
    let n = c.len();
    let zero = DVector::zeros(n);
    let convex_max = vertices
        .iter()
        .map(|x| quad(pos, x) + c.dot(x) + d)
        .fold(f64::NEG_INFINITY, f64::max);
    let concave_min = vertices
        .iter()
        .map(|x| quad(neg, x))
        .fold(f64::INFINITY, f64::min);
    let Some(convex_min) = minimize_convex_quadratic(pos, c, polyhedron)? else {
        return Ok(None);
    };
    let neg_flip = -neg;
    let Some(concave_max_neg) = minimize_convex_quadratic(&neg_flip, &zero, polyhedron)? else {
        return Ok(None);
    };
    let lo = convex_min + d + concave_min;
    let hi = convex_max + (-concave_max_neg);
    // widen by the interior-point accuracy
    Ok(Some((lo - 1e-9, hi + 1e-9)))
}

/// `min x'Mx + c·x` over the polyhedron, `M` PSD.
fn minimize_convex_quadratic(
    m: &DMatrix<f64>,
    c: &DVector<f64>,
    polyhedron: &Polyhedron,
) -> Result<Option<f64>> {
    let n = c.len();
    if m.amax() <= 1e-15 {
        return Ok(polyhedron.minimize(c).value());
    }
    let program = ConvexProgram::new(
        m * 2.0,
        c.clone(),
        0.0,
        DMatrix::zeros(0, n),
        DVector::zeros(0),
        polyhedron.a().clone(),
        polyhedron.b().clone(),
        vec![],
    )?;
    let out = solver::solve(&program, &SolverOptions::default());
    if out.status != SolveStatus::Optimal {
        return Ok(None);
    }
    Ok(Some(out.value))
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationOptions {
    /// Grid pitch as a fraction of the state-set diameter.
    pub grid_pitch_fraction: f64,
    /// Largest grid evaluated exhaustively; beyond it a seeded Monte-Carlo
    /// sample of `monte_carlo_samples` points is used.
    pub max_grid_points: usize,
    pub monte_carlo_samples: usize,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            grid_pitch_fraction: 0.05,
            max_grid_points: 1_000_000,
            monte_carlo_samples: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationIssue {
    /// 1-based partition index, when the issue is tied to one.
    pub partition: Option<usize>,
    /// 1-based input channel, when the issue is tied to one.
    pub channel: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub s: usize,
    /// `certificates[j][i]` for partition `j+1`, channel `i+1`.
    pub certificates: Vec<Vec<Option<Certificate>>>,
    pub partition_ok: Vec<bool>,
    pub input_box_ok: bool,
    pub coverage_points: usize,
    pub coverage_uncovered: usize,
    /// Union coverage is a sampled check, never a proof.
    pub coverage_heuristic: bool,
    pub coverage_method: String,
    pub failures: Vec<ValidationIssue>,
    pub warnings: Vec<ValidationIssue>,
}

impl ValidationReport {
    /// Certified case table, `None` where certification failed.
    pub fn sign_case_table(&self) -> Vec<Vec<Option<SignCase>>> {
        self.certificates
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| match c {
                        Some(Certificate::Certified(case)) => Some(*case),
                        _ => None,
                    })
                    .collect()
            })
            .collect()
    }
}

/// Checks every (gain, partition) certificate against the declared case,
/// union coverage of the state set, and the input-box origin condition.
pub fn validate_universe(
    model: &SystemModel,
    universe: &ConstraintUniverse,
    opts: &ValidationOptions,
) -> ValidationReport {
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    let mut certificates = Vec::new();
    let mut partition_ok = Vec::new();

    let bad_box = universe.input_box.origin_violations();
    let input_box_ok = bad_box.is_empty() && universe.input_box.m() == model.m();
    if universe.input_box.m() != model.m() {
        failures.push(ValidationIssue {
            partition: None,
            channel: None,
            message: format!(
                "input box has {} channels, model has {}",
                universe.input_box.m(),
                model.m()
            ),
        });
    }
    for i in bad_box {
        failures.push(ValidationIssue {
            partition: None,
            channel: Some(i + 1),
            message: "origin not strictly interior to the input interval".into(),
        });
    }

    for (jdx, part) in universe.partitions.iter().enumerate() {
        let j = jdx + 1;
        let mut ok = true;
        let mut row = Vec::new();
        if part.sign_cases.len() != model.m() {
            failures.push(ValidationIssue {
                partition: Some(j),
                channel: None,
                message: format!(
                    "{} sign cases declared for {} channels",
                    part.sign_cases.len(),
                    model.m()
                ),
            });
            certificates.push(vec![None; model.m()]);
            partition_ok.push(false);
            continue;
        }
        if part.polyhedron.dim() != model.n() {
            failures.push(ValidationIssue {
                partition: Some(j),
                channel: None,
                message: "partition dimension differs from the state dimension".into(),
            });
            certificates.push(vec![None; model.m()]);
            partition_ok.push(false);
            continue;
        }
        for (idx, atom) in model.atoms().iter().enumerate() {
            let i = idx + 1;
            let declared = part.sign_cases[idx];
            match certify_curvature(atom, &part.polyhedron) {
                Err(e) => {
                    ok = false;
                    failures.push(ValidationIssue {
                        partition: Some(j),
                        channel: Some(i),
                        message: e.to_string(),
                    });
                    row.push(None);
                }
                Ok(cert) => {
                    row.push(Some(cert));
                    match cert {
                        Certificate::Certified(case) if case == declared => {}
                        Certificate::Certified(case) => {
                            ok = false;
                            failures.push(ValidationIssue {
                                partition: Some(j),
                                channel: Some(i),
                                message: format!("declared {declared:?} but certified {case:?}"),
                            });
                        }
                        Certificate::Reject {
                            reason: RejectReason::CurvatureMismatch,
                            sign: Some(case),
                        } if case == declared
                            && universe.policy == CertificationPolicy::SignOnly =>
                        {
                            warnings.push(ValidationIssue {
                                partition: Some(j),
                                channel: Some(i),
                                message: format!(
                                    "sign {declared:?} certified but curvature is not; \
                                     accepted under the sign-only policy"
                                ),
                            });
                        }
                        Certificate::Reject { reason, sign } => {
                            ok = false;
                            failures.push(ValidationIssue {
                                partition: Some(j),
                                channel: Some(i),
                                message: format!(
                                    "rejected ({reason:?}, certified sign {sign:?}) for declared {declared:?}"
                                ),
                            });
                        }
                    }
                }
            }
        }
        certificates.push(row);
        partition_ok.push(ok);
    }

    let (coverage_points, coverage_uncovered, coverage_method) =
        union_coverage(universe, opts, &mut failures);

    let passed = failures.is_empty();
    ValidationReport {
        passed,
        s: universe.s(),
        certificates,
        partition_ok,
        input_box_ok,
        coverage_points,
        coverage_uncovered,
        coverage_heuristic: true,
        coverage_method,
        failures,
        warnings,
    }
}

fn union_coverage(
    universe: &ConstraintUniverse,
    opts: &ValidationOptions,
    failures: &mut Vec<ValidationIssue>,
) -> (usize, usize, String) {
    let Some((lo, hi)) = universe.state_set.bounding_box() else {
        failures.push(ValidationIssue {
            partition: None,
            channel: None,
            message: "state constraint set is empty or unbounded".into(),
        });
        return (0, 0, "none".into());
    };
    let n = lo.len();
    let diameter = (&hi - &lo).norm();
    let pitch = (opts.grid_pitch_fraction * diameter).max(1e-12);
    let per_dim: Vec<usize> = (0..n)
        .map(|i| ((hi[i] - lo[i]) / pitch).floor() as usize + 1)
        .collect();
    let total = per_dim
        .iter()
        .try_fold(1usize, |acc, &k| acc.checked_mul(k))
        .unwrap_or(usize::MAX);
    let covered = |x: &DVector<f64>| {
        universe
            .partitions
            .iter()
            .any(|p| p.polyhedron.contains(x, 1e-9))
    };
    let mut checked = 0;
    let mut uncovered = 0;
    let mut first_miss: Option<DVector<f64>> = None;
    let method;
    if total <= opts.max_grid_points {
        method = format!("grid pitch {pitch:.4}");
        let mut idx = vec![0usize; n];
        loop {
            let x = DVector::from_fn(n, |i, _| {
                if per_dim[i] <= 1 {
                    0.5 * (lo[i] + hi[i])
                } else {
                    lo[i] + (hi[i] - lo[i]) * idx[i] as f64 / (per_dim[i] - 1) as f64
                }
            });
            if universe.state_set.contains(&x, 1e-12) {
                checked += 1;
                if !covered(&x) {
                    uncovered += 1;
                    first_miss.get_or_insert(x);
                }
            }
            let mut d = 0;
            loop {
                if d == n {
                    break;
                }
                idx[d] += 1;
                if idx[d] < per_dim[d] {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == n {
                break;
            }
        }
    } else {
        method = format!("monte-carlo {} samples", opts.monte_carlo_samples);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.monte_carlo_samples {
            let x = DVector::from_fn(n, |i, _| rng.gen_range(lo[i]..=hi[i]));
            if universe.state_set.contains(&x, 1e-12) {
                checked += 1;
                if !covered(&x) {
                    uncovered += 1;
                    first_miss.get_or_insert(x);
                }
            }
        }
    }
    if let Some(x) = first_miss {
        failures.push(ValidationIssue {
            partition: None,
            channel: None,
            message: format!(
                "{uncovered} of {checked} sampled states lie in no partition, e.g. {:?}",
                x.as_slice()
            ),
        });
    }
    (checked, uncovered, method)
}

/// A model and universe expressed in coordinates centred at an equilibrium.
#[derive(Debug, Clone)]
pub struct ShiftedSystem {
    pub model: SystemModel,
    pub universe: ConstraintUniverse,
    pub x_eq: DVector<f64>,
    pub u_eq: DVector<f64>,
    pub residual: f64,
    /// False when `u_eq` lies outside the original input box.
    pub u_eq_admissible: bool,
    pub report: ValidationReport,
}

/// Re-expresses an affine-gain (bilinear) system in the coordinates
/// `Δx = x - x_eq`, `Δu = u - u_eq`.
pub fn shift_to_equilibrium(
    model: &SystemModel,
    universe: &ConstraintUniverse,
    x_eq: &DVector<f64>,
    u_eq: &DVector<f64>,
    opts: &ValidationOptions,
) -> Result<ShiftedSystem> {
    if x_eq.len() != model.n() || u_eq.len() != model.m() {
        return Err(Error::Dimension("equilibrium has wrong dimensions".into()));
    }
    let residual = (model.step(x_eq, u_eq) - x_eq).amax();
    if !(residual <= 1e-9) {
        return Err(Error::NotEquilibrium { residual });
    }
    let mut a_shift = model.a().clone();
    let mut atoms = Vec::with_capacity(model.m());
    for (i, atom) in model.atoms().iter().enumerate() {
        let NonlinearityAtom::Affine { c, d } = atom else {
            return Err(Error::UnsupportedAtomForShift { channel: i + 1 });
        };
        a_shift += model.b().column(i) * c.transpose() * u_eq[i];
        atoms.push(NonlinearityAtom::affine(c.clone(), c.dot(x_eq) + d));
    }
    let shifted_model = SystemModel::new(a_shift, model.b().clone(), atoms)?;
    let partitions = universe
        .partitions
        .iter()
        .map(|p| Partition {
            polyhedron: p.polyhedron.translate_to_origin(x_eq),
            sign_cases: p.sign_cases.clone(),
        })
        .collect();
    let input_box = InputBox {
        lower: &universe.input_box.lower - u_eq,
        upper: &universe.input_box.upper - u_eq,
    };
    let u_eq_admissible = universe.input_box.contains(u_eq, 0.0);
    let mut shifted_universe = ConstraintUniverse::new(
        universe.state_set.translate_to_origin(x_eq),
        partitions,
        input_box,
        universe.policy,
    );
    let report = shifted_universe.certify(&shifted_model, opts);
    Ok(ShiftedSystem {
        model: shifted_model,
        universe: shifted_universe,
        x_eq: x_eq.clone(),
        u_eq: u_eq.clone(),
        residual,
        u_eq_admissible,
        report,
    })
}
