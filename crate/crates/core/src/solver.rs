//! Dense primal-dual interior-point solver for convex programs with a
//! quadratic objective, linear equalities, linear inequalities and smooth
//! convex inequalities.
//!
//! Equalities are eliminated up front through an orthonormal null-space
//! basis, so the Newton systems are small symmetric positive definite
//! solves in the reduced coordinates. Feasibility is decided by a phase-one
//! program that minimizes a common slack `t` over all inequalities.

use std::fmt::Debug;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{Cholesky, ColPivQR, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// A twice differentiable function on a small local vector.
///
/// Implementors supply closed-form derivatives; the solver never differences.
pub trait ConvexFunction: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, z: &[f64]) -> f64;
    fn gradient(&self, z: &[f64]) -> DVector<f64>;
    fn hessian(&self, z: &[f64]) -> DMatrix<f64>;
}

/// `func(z[vars]) <= 0`.
#[derive(Debug, Clone)]
pub struct NonlinearConstraint {
    pub vars: Vec<usize>,
    pub func: Arc<dyn ConvexFunction>,
}

impl NonlinearConstraint {
    fn local(&self, z: &DVector<f64>) -> Vec<f64> {
        self.vars.iter().map(|&i| z[i]).collect()
    }

    pub fn value_at(&self, z: &DVector<f64>) -> f64 {
        self.func.value(&self.local(z))
    }
}

/// Orthonormal null-space basis and particular-solution map of `E z = e`.
///
/// Depends only on `E`, so programs that share an equality matrix can share it.
#[derive(Debug, Clone)]
pub struct EqualityReduction {
    basis: DMatrix<f64>,
    particular: DMatrix<f64>,
    rank: usize,
}

impl EqualityReduction {
    pub fn new(eq: &DMatrix<f64>) -> Self {
        let d = eq.ncols();
        let r = eq.nrows();
        if r == 0 {
            return Self {
                basis: DMatrix::identity(d, d),
                particular: DMatrix::zeros(d, 0),
                rank: 0,
            };
        }
        let qr = ColPivQR::new(eq.transpose());
        let rmat = qr.r();
        let diag_max = (0..r.min(d)).map(|i| rmat[(i, i)].abs()).fold(0.0, f64::max);
        let rank = (0..r.min(d))
            .filter(|&i| rmat[(i, i)].abs() > 1e-11 * diag_max.max(1.0))
            .count();
        let mut q_t = DMatrix::identity(d, d);
        qr.q_tr_mul(&mut q_t);
        let q = q_t.transpose();
        let range = q.columns(0, rank).into_owned();
        let basis = q.columns(rank, d - rank).into_owned();
        // z_p = Q1 (E Q1)^+ e: least-squares through the row space of E.
        let eq1 = eq * &range;
        let pinv = eq1
            .clone()
            .svd(true, true)
            .pseudo_inverse(1e-12)
            .unwrap_or_else(|_| DMatrix::zeros(rank, r));
        let particular = &range * pinv;
        Self {
            basis,
            particular,
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }
}

/// `min ½ z'Pz + q'z + c  s.t.  E z = e,  G z <= h,  f_j(z) <= 0`.
#[derive(Debug, Clone)]
pub struct ConvexProgram {
    dim: usize,
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
    eq_a: DMatrix<f64>,
    eq_b: DVector<f64>,
    reduction: Arc<EqualityReduction>,
    ineq_a: DMatrix<f64>,
    ineq_b: DVector<f64>,
    nonlinear: Vec<NonlinearConstraint>,
    warm_start: Option<DVector<f64>>,
}

impl ConvexProgram {
    /// Validates shapes and PSD-ness of the objective and factors the
    /// equality system.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constant: f64,
        eq_a: DMatrix<f64>,
        eq_b: DVector<f64>,
        ineq_a: DMatrix<f64>,
        ineq_b: DVector<f64>,
        nonlinear: Vec<NonlinearConstraint>,
    ) -> Result<Self> {
        let reduction = Arc::new(EqualityReduction::new(&eq_a));
        Self::with_reduction(
            hessian, linear, constant, eq_a, eq_b, reduction, ineq_a, ineq_b, nonlinear,
        )
    }

    /// Like [`ConvexProgram::new`] but reuses a precomputed factorization of `eq_a`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_reduction(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constant: f64,
        eq_a: DMatrix<f64>,
        eq_b: DVector<f64>,
        reduction: Arc<EqualityReduction>,
        ineq_a: DMatrix<f64>,
        ineq_b: DVector<f64>,
        nonlinear: Vec<NonlinearConstraint>,
    ) -> Result<Self> {
        let dim = linear.len();
        let shape_ok = hessian.nrows() == dim
            && hessian.ncols() == dim
            && eq_a.ncols() == dim
            && eq_a.nrows() == eq_b.len()
            && ineq_a.ncols() == dim
            && ineq_a.nrows() == ineq_b.len()
            && reduction.basis.nrows() == dim
            && reduction.particular.ncols() == eq_a.nrows();
        if !shape_ok {
            return Err(Error::InvalidProgram("inconsistent dimensions".into()));
        }
        for c in &nonlinear {
            if c.vars.len() != c.func.dim() || c.vars.iter().any(|&i| i >= dim) {
                return Err(Error::InvalidProgram(
                    "nonlinear constraint variable map does not match its function".into(),
                ));
            }
        }
        if (&hessian - hessian.transpose()).amax() > 1e-10 * (1.0 + hessian.amax()) {
            return Err(Error::InvalidProgram("objective Hessian is not symmetric".into()));
        }
        // λ_min(H) >= -δ  <=>  H + δI admits a Cholesky factor
        if dim > 0 && hessian.iter().any(|v| *v != 0.0) {
            let delta = 1e-10 * (1.0 + hessian.amax());
            let shifted = &hessian + DMatrix::identity(dim, dim) * delta;
            if Cholesky::new(shifted).is_none() {
                return Err(Error::InvalidProgram("objective Hessian is not PSD".into()));
            }
        }
        Ok(Self {
            dim,
            hessian,
            linear,
            constant,
            eq_a,
            eq_b,
            reduction,
            ineq_a,
            ineq_b,
            nonlinear,
            warm_start: None,
        })
    }

    pub fn with_warm_start(mut self, z: DVector<f64>) -> Self {
        if z.len() == self.dim {
            self.warm_start = Some(z);
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_linear_inequalities(&self) -> usize {
        self.ineq_a.nrows()
    }

    pub fn nonlinear(&self) -> &[NonlinearConstraint] {
        &self.nonlinear
    }

    pub fn linear_inequalities(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.ineq_a, &self.ineq_b)
    }

    pub fn equalities(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.eq_a, &self.eq_b)
    }

    /// True when every inequality is linear, i.e. the program is a QP.
    pub fn is_qp(&self) -> bool {
        self.nonlinear.is_empty()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z) + self.constant
    }

    /// All inequality values, linear rows first.
    pub fn constraint_values(&self, z: &DVector<f64>) -> DVector<f64> {
        let lin = &self.ineq_a * z - &self.ineq_b;
        let mut out = DVector::zeros(lin.len() + self.nonlinear.len());
        out.rows_mut(0, lin.len()).copy_from(&lin);
        for (j, c) in self.nonlinear.iter().enumerate() {
            out[lin.len() + j] = c.value_at(z);
        }
        out
    }

    pub fn max_constraint_violation(&self, z: &DVector<f64>) -> f64 {
        let ineq = self
            .constraint_values(z)
            .iter()
            .copied()
            .fold(0.0_f64, f64::max);
        let eq = if self.eq_a.nrows() > 0 {
            (&self.eq_a * z - &self.eq_b).amax()
        } else {
            0.0
        };
        ineq.max(eq)
    }

    fn particular_solution(&self) -> DVector<f64> {
        &self.reduction.particular * &self.eq_b
    }

    fn equalities_consistent(&self, z_p: &DVector<f64>) -> bool {
        if self.eq_a.nrows() == 0 {
            return true;
        }
        let res = (&self.eq_a * z_p - &self.eq_b).amax();
        res <= 1e-9 * (1.0 + self.eq_b.amax())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol_stationarity: f64,
    pub tol_primal: f64,
    pub tol_gap: f64,
    /// Looser stationarity accepted once it has held for a few consecutive
    /// iterations with the gap already converged.
    pub tol_acceptable: f64,
    pub max_iter: usize,
    /// Phase-one optimum above which a program is declared infeasible.
    pub infeasibility_threshold: f64,
    /// Optional plain-text iteration log (one line per iteration, appended).
    #[serde(skip)]
    pub trace: Option<std::path::PathBuf>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_stationarity: 1e-8,
            tol_primal: 1e-8,
            tol_gap: 1e-8,
            tol_acceptable: 1e-6,
            max_iter: 200,
            infeasibility_threshold: 1e-7,
            trace: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub value: f64,
    pub point: DVector<f64>,
    /// Multipliers of the inequalities, linear rows first.
    pub multipliers: DVector<f64>,
    pub residuals: KktResiduals,
    pub iterations: usize,
}

impl SolveOutcome {
    fn failed(status: SolveStatus, dim: usize, iterations: usize) -> Self {
        Self {
            status,
            value: f64::INFINITY,
            point: DVector::zeros(dim),
            multipliers: DVector::zeros(0),
            residuals: KktResiduals::default(),
            iterations,
        }
    }
}

/// Phase one stops early once every inequality holds with this margin.
const STRICT_MARGIN: f64 = 1e-6;
const ACCEPTABLE_ITERS: usize = 5;
/// Iterations without a 10% improvement of the KKT score before giving up.
const STALL_ITERS: usize = 25;
/// Iterates keep `s_i λ_i >= CENTRALITY * μ`.
const CENTRALITY: f64 = 1e-3;

#[derive(Debug, Clone)]
pub enum PhaseOne {
    /// A point with every inequality at most `slack`; `strict` when all are negative.
    Feasible {
        point: DVector<f64>,
        slack: f64,
        strict: bool,
    },
    Infeasible { slack: f64 },
}

/// Decides feasibility by minimizing `t` subject to `f_i(z) <= t`, `t >= -1`
/// and the equalities.
pub fn phase_one(program: &ConvexProgram, opts: &SolverOptions) -> Result<PhaseOne> {
    let z_p = program.particular_solution();
    if !program.equalities_consistent(&z_p) {
        return Ok(PhaseOne::Infeasible {
            slack: f64::INFINITY,
        });
    }
    let basis = &program.reduction.basis;
    let k = basis.ncols();
    let z_start = match &program.warm_start {
        Some(ws) => ws.clone(),
        None => z_p.clone(),
    };
    let w_start = basis.transpose() * (&z_start - &z_p);
    let z0 = &z_p + basis * &w_start;
    let n_ineq = program.ineq_a.nrows() + program.nonlinear.len();
    if n_ineq == 0 {
        return Ok(PhaseOne::Feasible {
            point: z0,
            slack: f64::NEG_INFINITY,
            strict: true,
        });
    }
    let worst0 = program.constraint_values(&z0).max();
    if !worst0.is_finite() {
        return Err(Error::NumericalFailure("constraints are not finite at the start".into()));
    }
    if worst0 < -STRICT_MARGIN {
        return Ok(PhaseOne::Feasible {
            point: z0,
            slack: worst0,
            strict: true,
        });
    }

    let lin = &program.ineq_a * basis;
    let lin_rhs = &program.ineq_b - &program.ineq_a * &z_p;
    let terms = reduced_terms(program, &z_p, basis, Some(k));
    let finish = |w: &DVector<f64>, t_opt: f64, status: SolveStatus| -> Result<PhaseOne> {
        let point = &z_p + basis * w;
        let worst = program.constraint_values(&point).max();
        if worst <= opts.infeasibility_threshold {
            return Ok(PhaseOne::Feasible {
                point,
                slack: worst,
                strict: worst < 0.0,
            });
        }
        match status {
            SolveStatus::Optimal => Ok(PhaseOne::Infeasible {
                slack: t_opt.min(worst),
            }),
            SolveStatus::MaxIter => Err(Error::MaxIter(opts.max_iter)),
            _ => Err(Error::NumericalFailure("phase one failed".into())),
        }
    };

    // Stage A: an interior point of the linear rows alone. Stage B then keeps
    // those rows hard and relaxes only the nonlinear constraints, so iterates
    // never leave the region where their curvature was certified.
    let mut w = w_start.clone();
    let lin_worst = if lin.nrows() > 0 {
        (&lin * &w - &lin_rhs).max()
    } else {
        f64::NEG_INFINITY
    };
    let mut hard_linear = true;
    if lin_worst >= -STRICT_MARGIN {
        let res = relaxed_phase(&lin, &lin_rhs, true, vec![], &w, opts, "phase-one-linear")?;
        let t_lin = res.x[k];
        w = res.x.rows(0, k).into_owned();
        if res.status == SolveStatus::Optimal && t_lin > opts.infeasibility_threshold {
            return Ok(PhaseOne::Infeasible { slack: t_lin });
        }
        if res.status != SolveStatus::Optimal && t_lin > opts.infeasibility_threshold {
            return finish(&w, t_lin, res.status);
        }
        // no interior: fall back to relaxing everything
        hard_linear = t_lin < -1e-9;
    }
    if terms.is_empty() {
        return finish(&w, f64::NEG_INFINITY, SolveStatus::Optimal);
    }
    let res = relaxed_phase(&lin, &lin_rhs, !hard_linear, terms, &w, opts, "phase-one")?;
    let w = res.x.rows(0, k).into_owned();
    finish(&w, res.x[k], res.status)
}

/// `min t` over `(w, t)` subject to `t >= -1`, the nonlinear terms relaxed by
/// `t`, and the linear rows either hard or relaxed by `t`.
fn relaxed_phase(
    lin: &DMatrix<f64>,
    lin_rhs: &DVector<f64>,
    relax_linear: bool,
    terms: Vec<ReducedTerm>,
    w: &DVector<f64>,
    opts: &SolverOptions,
    label: &str,
) -> Result<CoreResult> {
    let k = w.len();
    let n = k + 1;
    let rows = lin.nrows();
    let mut c = DMatrix::zeros(rows + 1, n);
    c.view_mut((0, 0), (rows, k)).copy_from(lin);
    if relax_linear {
        for i in 0..rows {
            c[(i, k)] = -1.0;
        }
    }
    c[(rows, k)] = -1.0;
    let mut d = DVector::zeros(rows + 1);
    d.rows_mut(0, rows).copy_from(lin_rhs);
    d[rows] = 1.0;
    let mut g = DVector::zeros(n);
    g[k] = 1.0;
    let core = CoreProblem {
        h: DMatrix::zeros(n, n),
        g,
        c,
        d,
        terms,
        relax: 0.0,
    };
    let mut x0 = DVector::zeros(n);
    x0.rows_mut(0, k).copy_from(w);
    x0[k] = 0.0;
    let worst = core.constraints(&x0).max();
    x0[k] = worst.max(-0.5) + 1.0;
    let stop = |x: &DVector<f64>| x[k] < -STRICT_MARGIN;
    run_ipm(&core, x0, opts, Some(&stop), label)
}

/// Solves the program; infeasibility is decided by [`phase_one`] first.
///
/// A feasible set without interior (phase-one optimum in `[0, threshold]`)
/// is solved with every inequality relaxed by that optimum plus `1e-9`.
pub fn solve(program: &ConvexProgram, opts: &SolverOptions) -> SolveOutcome {
    let dim = program.dim;
    let start = match phase_one(program, opts) {
        Ok(PhaseOne::Feasible { point, .. }) => point,
        Ok(PhaseOne::Infeasible { .. }) => {
            return SolveOutcome::failed(SolveStatus::Infeasible, dim, 0)
        }
        Err(Error::MaxIter(_)) => return SolveOutcome::failed(SolveStatus::MaxIter, dim, 0),
        Err(_) => return SolveOutcome::failed(SolveStatus::NumericalFailure, dim, 0),
    };
    let worst = program.constraint_values(&start).max();
    let relax = if worst < -1e-12 { 0.0 } else { worst.max(0.0) + 1e-9 };
    let z_p = program.particular_solution();
    let basis = &program.reduction.basis;
    let w0 = basis.transpose() * (&start - &z_p);
    let h = basis.transpose() * &program.hessian * basis;
    let g = basis.transpose() * (&program.hessian * &z_p + &program.linear);
    let c = &program.ineq_a * basis;
    let d = &program.ineq_b - &program.ineq_a * &z_p;
    let terms = reduced_terms(program, &z_p, basis, None);
    let core = CoreProblem {
        h,
        g,
        c,
        d,
        terms,
        relax,
    };
    let res = match run_ipm(&core, w0, opts, None, "solve") {
        Ok(r) => r,
        Err(_) => return SolveOutcome::failed(SolveStatus::NumericalFailure, dim, 0),
    };
    let point = &z_p + basis * &res.x;
    let values = program.constraint_values(&point);
    let complementarity = values
        .iter()
        .zip(res.lambda.iter())
        .map(|(f, l)| (f * l).abs())
        .fold(0.0, f64::max);
    let primal = program.max_constraint_violation(&point);
    SolveOutcome {
        status: res.status,
        value: program.objective(&point),
        point,
        multipliers: res.lambda,
        residuals: KktResiduals {
            stationarity: res.stationarity,
            primal,
            complementarity,
        },
        iterations: res.iterations,
    }
}

/// Nonlinear inequality expressed in reduced coordinates:
/// `func(base + map x) + t_coef * x[t_idx] <= 0`.
#[derive(Debug)]
struct ReducedTerm {
    func: Arc<dyn ConvexFunction>,
    base: DVector<f64>,
    map: DMatrix<f64>,
    t_idx: Option<usize>,
}

impl ReducedTerm {
    fn local(&self, x: &DVector<f64>) -> Vec<f64> {
        let k = self.map.ncols();
        let y = &self.base + &self.map * x.rows(0, k);
        y.as_slice().to_vec()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let v = self.func.value(&self.local(x));
        match self.t_idx {
            Some(t) => v - x[t],
            None => v,
        }
    }
}

fn reduced_terms(
    program: &ConvexProgram,
    z_p: &DVector<f64>,
    basis: &DMatrix<f64>,
    t_idx: Option<usize>,
) -> Vec<ReducedTerm> {
    let k = basis.ncols();
    program
        .nonlinear
        .iter()
        .map(|c| {
            let mut map = DMatrix::zeros(c.vars.len(), k);
            let mut base = DVector::zeros(c.vars.len());
            for (r, &i) in c.vars.iter().enumerate() {
                map.row_mut(r).copy_from(&basis.row(i));
                base[r] = z_p[i];
            }
            ReducedTerm {
                func: c.func.clone(),
                base,
                map,
                t_idx,
            }
        })
        .collect()
}

/// `min ½ x'Hx + g'x  s.t.  C x <= d + relax,  terms(x) <= relax`.
struct CoreProblem {
    h: DMatrix<f64>,
    g: DVector<f64>,
    c: DMatrix<f64>,
    d: DVector<f64>,
    terms: Vec<ReducedTerm>,
    relax: f64,
}

struct CoreResult {
    status: SolveStatus,
    x: DVector<f64>,
    lambda: DVector<f64>,
    stationarity: f64,
    iterations: usize,
}

impl CoreProblem {
    fn n_ineq(&self) -> usize {
        self.c.nrows() + self.terms.len()
    }

    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let lin = &self.c * x - &self.d;
        let mut out = DVector::zeros(self.n_ineq());
        out.rows_mut(0, lin.len()).copy_from(&lin);
        for (j, t) in self.terms.iter().enumerate() {
            out[lin.len() + j] = t.value(x);
        }
        out.add_scalar_mut(-self.relax);
        out
    }

    /// Jacobian of all constraints and `Σ λ_j ∇²f_j` of the nonlinear ones.
    fn jacobian_and_curvature(
        &self,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = x.len();
        let rows = self.c.nrows();
        let mut jac = DMatrix::zeros(self.n_ineq(), n);
        jac.view_mut((0, 0), (rows, n)).copy_from(&self.c);
        let mut curv = DMatrix::zeros(n, n);
        for (j, t) in self.terms.iter().enumerate() {
            let local = t.local(x);
            let grad = t.func.gradient(&local);
            let k = t.map.ncols();
            let gr = t.map.transpose() * &grad;
            jac.view_mut((rows + j, 0), (1, k)).copy_from(&gr.transpose());
            if let Some(ti) = t.t_idx {
                jac[(rows + j, ti)] = -1.0;
            }
            let lam = lambda[rows + j];
            if lam != 0.0 {
                let hl = psd_part(t.func.hessian(&local));
                let hr = t.map.transpose() * hl * &t.map;
                let mut block = curv.view_mut((0, 0), (k, k));
                block += hr * lam;
            }
        }
        (jac, curv)
    }
}

/// Clamps negative eigenvalues so the Newton matrix stays positive definite
/// even when a supplied Hessian is slightly indefinite.
fn psd_part(h: DMatrix<f64>) -> DMatrix<f64> {
    if h.nrows() == 0 || h.iter().all(|v| *v == 0.0) {
        return h;
    }
    let eig = SymmetricEigen::new(h.clone());
    if eig.eigenvalues.min() >= 0.0 {
        return h;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

fn factor(m: &DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Some(ch);
    }
    let scale = 1.0 + m.diagonal().amax();
    let mut delta = 1e-12 * scale;
    while delta < 1e-2 * scale {
        let reg = m + DMatrix::identity(m.nrows(), m.ncols()) * delta;
        if let Some(ch) = Cholesky::new(reg) {
            return Some(ch);
        }
        delta *= 100.0;
    }
    None
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = 1.0_f64;
    for (x, dx) in v.iter().zip(dv.iter()) {
        if *dx < 0.0 {
            alpha = alpha.min(-x / dx);
        }
    }
    alpha
}

/// Primal-dual interior-point iteration on strictly feasible iterates.
///
/// Slacks are always `s = -f(x) > 0`; each step backtracks until the new
/// point is strictly feasible and, with nonlinear constraints, until the
/// log-barrier merit decreases sufficiently.
fn run_ipm(
    p: &CoreProblem,
    x0: DVector<f64>,
    opts: &SolverOptions,
    early_stop: Option<&dyn Fn(&DVector<f64>) -> bool>,
    label: &str,
) -> Result<CoreResult> {
    let n = x0.len();
    let m = p.n_ineq();
    let mut trace = match &opts.trace {
        Some(path) => std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .ok(),
        None => None,
    };
    let mut x = x0;
    let mut s = -p.constraints(&x);
    if m > 0 && !(s.min() > 0.0) {
        return Err(Error::NumericalFailure(format!(
            "{label}: start is not strictly feasible"
        )));
    }
    let mut lambda = s.map(|v| (1.0 / v).clamp(1e-6, 1e6));
    let nonlinear = !p.terms.is_empty();
    let mut long_step = false;
    let mut stat = f64::INFINITY;
    let mut acceptable = 0;
    // last iterate that met the acceptable tolerances; returned if the
    // iteration later stalls at the roundoff floor
    let mut fallback: Option<CoreResult> = None;
    // best iterate with stationarity and gap both within tol_acceptable; only
    // used once the method has stopped making progress
    let mut loose: Option<(f64, CoreResult)> = None;
    let mut best_score = f64::INFINITY;
    let mut since_best = 0;
    let give_up = |fallback: Option<CoreResult>, loose: Option<(f64, CoreResult)>, x, lambda, stat, iter| {
        fallback.or(loose.map(|l| l.1)).unwrap_or(CoreResult {
            status: SolveStatus::MaxIter,
            x,
            lambda,
            stationarity: stat,
            iterations: iter,
        })
    };

    for iter in 0..opts.max_iter {
        let (jac, curv) = p.jacobian_and_curvature(&x, &lambda);
        let hx = &p.h * &x;
        let jl = jac.transpose() * &lambda;
        // dual residual relative to the terms it is made of
        let stat_scale = 1.0 + p.g.amax().max(hx.amax()).max(jl.amax());
        let dual = hx + &p.g + jl;
        let gap = s.dot(&lambda);
        let mu = gap / m.max(1) as f64;
        stat = dual.amax();
        if let Some(t) = trace.as_mut() {
            let _ = writeln!(
                t,
                "{label} iter={iter} stat={stat:.3e} gap={gap:.3e} min_slack={:.3e} mode={}",
                if m > 0 { s.min() } else { f64::INFINITY },
                if long_step { "long-step" } else { "mehrotra" }
            );
        }
        if !stat.is_finite() || !gap.is_finite() {
            return Err(Error::NumericalFailure(format!("{label}: non-finite residuals")));
        }
        let done = |status| CoreResult {
            status,
            x: x.clone(),
            lambda: lambda.clone(),
            stationarity: stat,
            iterations: iter,
        };
        if stat <= opts.tol_stationarity * stat_scale && gap <= opts.tol_gap {
            return Ok(done(SolveStatus::Optimal));
        }
        if stat <= opts.tol_acceptable * stat_scale && gap <= opts.tol_gap {
            fallback = Some(done(SolveStatus::Optimal));
            acceptable += 1;
            if acceptable >= ACCEPTABLE_ITERS {
                return Ok(done(SolveStatus::Optimal));
            }
        } else {
            acceptable = 0;
        }
        let score = (stat / (opts.tol_stationarity * stat_scale)).max(gap / opts.tol_gap);
        if stat <= opts.tol_acceptable * stat_scale
            && gap <= opts.tol_acceptable
            && loose.as_ref().is_none_or(|(best, _)| score < *best)
        {
            loose = Some((score, done(SolveStatus::Optimal)));
        }
        if score < 0.9 * best_score {
            best_score = score;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= STALL_ITERS {
                return Ok(give_up(fallback, loose, x, lambda, stat, iter));
            }
        }
        if let Some(stop) = early_stop {
            if stop(&x) {
                return Ok(done(SolveStatus::Optimal));
            }
        }

        let dvec = lambda.component_div(&s);
        let mut mat = &p.h + &curv;
        if m > 0 {
            let scaled = DMatrix::from_fn(m, n, |i, j| jac[(i, j)] * dvec[i]);
            mat += jac.transpose() * scaled;
        }
        let Some(chol) = factor(&mat) else {
            return Err(Error::NumericalFailure(format!("{label}: singular Newton matrix")));
        };
        // rc is the complementarity residual to cancel: λ∘s - target
        let direction = |rc: &DVector<f64>| {
            let rhs = -(&dual) + jac.transpose() * rc.component_div(&s);
            let dx = chol.solve(&rhs);
            let ds = -(&jac * &dx);
            let dl = (-lambda.component_mul(&ds) - rc).component_div(&s);
            (dx, ds, dl)
        };
        let ls = lambda.component_mul(&s);
        let (tau, (dx, ds, dl)) = if m == 0 {
            (0.0, direction(&DVector::zeros(0)))
        } else if long_step {
            let tau = 0.1 * mu;
            (tau, direction(&ls.add_scalar(-tau)))
        } else {
            let (_, ds_a, dl_a) = direction(&ls);
            let a_aff = max_step(&s, &ds_a).min(max_step(&lambda, &dl_a));
            let mu_aff = (&s + &ds_a * a_aff).dot(&(&lambda + &dl_a * a_aff)) / m as f64;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let tau = sigma * mu;
            let rc = ls.add_scalar(-tau) + ds_a.component_mul(&dl_a);
            (tau, direction(&rc))
        };
        if dx.iter().chain(dl.iter()).any(|v| !v.is_finite()) {
            if long_step {
                return Err(Error::NumericalFailure(format!("{label}: non-finite step")));
            }
            long_step = true;
            continue;
        }
        let mut alpha = if m == 0 {
            1.0
        } else {
            let lin_s = if nonlinear { 1.0 } else { max_step(&s, &ds) };
            (0.99 * lin_s.min(max_step(&lambda, &dl))).min(1.0)
        };
        // barrier merit obj(x) - tau Σ log s_i(x); the centred direction is its
        // Newton step, so it is a descent direction whenever the matrix is PD
        let barrier = |x: &DVector<f64>, s: &DVector<f64>| {
            0.5 * x.dot(&(&p.h * x)) + p.g.dot(x) - tau * s.iter().map(|v| v.ln()).sum::<f64>()
        };
        let grad_phi = &p.h * &x + &p.g + jac.transpose() * s.map(|v| tau / v);
        let slope = grad_phi.dot(&dx);
        // once the primal has settled only the duals move; roundoff in the
        // merit must not block that
        let settled = dx.amax() <= 1e-10 * (1.0 + x.amax());
        if nonlinear && !(slope < 0.0) && !settled {
            if long_step {
                return Ok(give_up(fallback, loose, x, lambda, stat, iter));
            }
            long_step = true;
            continue;
        }
        let phi0 = barrier(&x, &s);
        let noise = 1e-13 * (1.0 + phi0.abs());
        let mut accepted = false;
        for _ in 0..60 {
            let xn = &x + &dx * alpha;
            let sn = -p.constraints(&xn);
            if m > 0 && !sn.iter().zip(s.iter()).all(|(a, b)| *a >= 0.01 * b) {
                alpha *= 0.5;
                continue;
            }
            if nonlinear && !(barrier(&xn, &sn) <= phi0 + 1e-4 * alpha * slope.min(0.0) + noise) {
                alpha *= 0.5;
                continue;
            }
            let ln = &lambda + &dl * alpha;
            if m > 0 {
                let prod = sn.component_mul(&ln);
                let mu_n = prod.sum() / m as f64;
                if prod.min() < CENTRALITY * mu_n && alpha > 1e-8 {
                    alpha *= 0.5;
                    continue;
                }
            }
            x = xn;
            s = sn;
            lambda = ln;
            accepted = true;
            break;
        }
        if accepted && !long_step && alpha < 1e-2 {
            if let Some(f) = fallback.take() {
                return Ok(f);
            }
            long_step = true;
        }
        if !accepted {
            if let Some(f) = fallback.take() {
                return Ok(f);
            }
            if long_step {
                return Ok(give_up(fallback, loose, x, lambda, stat, iter));
            }
            long_step = true;
        }
    }
    Ok(give_up(fallback, loose, x, lambda, stat, opts.max_iter))
}
