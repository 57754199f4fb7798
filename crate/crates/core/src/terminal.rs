//! Terminal ingredients: Riccati solution, LQR gain and an invariant
//! polyhedral terminal set under the LQR loop.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::cost::QuadraticStageCost;
use crate::error::{Error, Result};
use crate::lp::LpOutcome;
use crate::model::SystemModel;
use crate::polytope::Polyhedron;
use crate::transform::{MixedSetZj, ZERO_TOL};

const DARE_TOL: f64 = 1e-12;
const DARE_MAX_ITER: usize = 100_000;

/// Fixed-point iteration `P <- A'(P - PB(R + B'PB)^{-1}B'P)A + Q` from `P = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let next = riccati_map(a, b, q, r, &p)?;
        let delta = (&next - &p).amax();
        p = next;
        if !delta.is_finite() {
            break;
        }
        if delta <= DARE_TOL * (1.0 + p.amax()) {
            return Ok((&p + p.transpose()) * 0.5);
        }
    }
    Err(Error::NoConvergence(DARE_MAX_ITER))
}

/// Joseph form `(A + BK)'P(A + BK) + K'RK + Q`, symmetrised. The textbook form
/// lets roundoff accumulate in the antisymmetric part when `A` is unstable.
fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let btp = b.transpose() * p;
    let inner = r + &btp * b;
    let k = -inner
        .cholesky()
        .ok_or(Error::SingularInnerMatrix)?
        .solve(&(btp * a));
    let acl = a + b * &k;
    let next = acl.transpose() * p * &acl + k.transpose() * r * &k + q;
    Ok((&next + next.transpose()) * 0.5)
}

/// `‖A'(P - PB(R + B'PB)^{-1}B'P)A - P + Q‖_∞` (elementwise).
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    match riccati_map(a, b, q, r, p) {
        Ok(next) => (next - p).amax(),
        Err(_) => f64::INFINITY,
    }
}

/// `K = -(R + B'PB)^{-1} B'PA`, so that `v = K x`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    p: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let inner = r + b.transpose() * p * b;
    let lu = inner.lu();
    let rhs = b.transpose() * p * a;
    let k = lu.solve(&rhs).ok_or(Error::SingularInnerMatrix)?;
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInnerMatrix);
    }
    Ok(-k)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalOptions {
    /// Ray directions used for the inner approximation of nonlinear sections.
    pub n_dirs: usize,
    pub k_max: usize,
    pub redundancy_tol: f64,
}

impl Default for TerminalOptions {
    fn default() -> Self {
        Self {
            n_dirs: 64,
            k_max: 200,
            redundancy_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub t: Polyhedron,
    /// Number of closed-loop steps after which the admissible set was finitely determined.
    pub k_star: usize,
}

impl TerminalIngredients {
    /// Riccati solution, LQR gain and terminal set inside `z1`.
    pub fn compute(
        model: &SystemModel,
        cost: &QuadraticStageCost,
        z1: &MixedSetZj,
        opts: &TerminalOptions,
    ) -> Result<Self> {
        let p = solve_dare(model.a(), model.b(), &cost.q, &cost.r)?;
        let k = lqr_gain(model.a(), model.b(), &p, &cost.r)?;
        let (t, k_star) = build_terminal_set(model, &k, z1, opts)?;
        Ok(Self { p, k, t, k_star })
    }

    pub fn closed_loop(&self, model: &SystemModel) -> DMatrix<f64> {
        model.a() + model.b() * &self.k
    }

    /// CSV with header `h_1..h_n,rhs`, one row per inequality of `T`.
    pub fn terminal_set_csv(&self) -> String {
        let n = self.t.dim();
        let mut out = String::new();
        for i in 0..n {
            let _ = write!(out, "h_{},", i + 1);
        }
        out.push_str("rhs\n");
        for r in 0..self.t.n_rows() {
            for i in 0..n {
                let _ = write!(out, "{:e},", self.t.a()[(r, i)]);
            }
            let _ = writeln!(out, "{:e}", self.t.b()[r]);
        }
        out
    }
}

/// Builds the terminal set and returns it with its determinedness index.
///
/// The section `{x : (x, Kx) ∈ Z_1}` is first replaced by a polyhedral inner
/// approximation, then the maximal admissible set of `A + BK` inside it is
/// computed by stacking `H (A+BK)^k x <= h` until a layer is redundant.
pub fn build_terminal_set(
    model: &SystemModel,
    k: &DMatrix<f64>,
    z1: &MixedSetZj,
    opts: &TerminalOptions,
) -> Result<(Polyhedron, usize)> {
    let n = model.n();
    let origin = DVector::zeros(n);
    let x1 = &z1.polyhedron;
    if x1.max_violation(&origin) >= 0.0 {
        return Err(Error::InteriorityViolated(
            "the origin is not strictly inside the first partition".into(),
        ));
    }
    let g0 = model.eval_g(&origin);
    if let Some(i) = (0..model.m()).find(|&i| g0[i].abs() <= ZERO_TOL) {
        return Err(Error::InteriorityViolated(format!(
            "input gain {} vanishes at the origin",
            i + 1
        )));
    }
    let section = section_inner_approximation(k, z1, opts)?;
    let ak = model.a() + model.b() * k;
    moas(&section, &ak, opts)
}

/// Polyhedral inner approximation of `{x : (x, Kx) ∈ Z_1}`.
fn section_inner_approximation(
    k: &DMatrix<f64>,
    z1: &MixedSetZj,
    opts: &TerminalOptions,
) -> Result<Polyhedron> {
    let n = z1.n();
    let (zrows, zrhs) = z1.linear_rows();
    // [Hx | Hv] (x, Kx) = (Hx + Hv K) x
    let hx = zrows.columns(0, n).into_owned();
    let hv = zrows.columns(n, z1.m()).into_owned();
    let linear = Polyhedron::new(hx + hv * k, zrhs)?;
    let nonlinear: Vec<_> = z1
        .generators
        .iter()
        .filter(|g| !g.atom.is_affine())
        .collect();
    if nonlinear.is_empty() {
        return Ok(linear);
    }
    if n != 2 {
        return Err(Error::Unsupported(
            "inner approximation of nonlinear terminal sections is implemented for n = 2".into(),
        ));
    }
    let worst = |x: &DVector<f64>| {
        nonlinear
            .iter()
            .map(|g| g.eval(x.as_slice(), (k.row(g.channel) * x)[0]))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    if worst(&DVector::zeros(2)) >= 0.0 {
        return Err(Error::InteriorityViolated(
            "the LQR section does not contain the origin strictly".into(),
        ));
    }
    let mut boundary = Vec::with_capacity(opts.n_dirs);
    for idx in 0..opts.n_dirs {
        let theta = TAU * idx as f64 / opts.n_dirs as f64;
        let d = DVector::from_vec(vec![theta.cos(), theta.sin()]);
        let tau_lin = (0..linear.n_rows())
            .filter_map(|r| {
                let ad = (linear.a().row(r) * &d)[0];
                (ad > 1e-14).then(|| linear.b()[r] / ad)
            })
            .fold(f64::INFINITY, f64::min);
        if !tau_lin.is_finite() {
            return Err(Error::InvalidPartition("LQR section is unbounded".into()));
        }
        // first crossing of the nonlinear boundary along the ray
        const SCAN: usize = 400;
        let mut lo = 0.0;
        let mut hi = tau_lin;
        for s in 1..=SCAN {
            let tau = tau_lin * s as f64 / SCAN as f64;
            if worst(&(&d * tau)) > 0.0 {
                hi = tau;
                break;
            }
            lo = tau;
        }
        if hi > lo {
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if worst(&(&d * mid)) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
        }
        boundary.push(&d * lo);
    }
    // Shrink towards the origin until the hull's edges are admissible.
    let mut scale = 1.0;
    for _ in 0..200 {
        let pts: Vec<DVector<f64>> = boundary.iter().map(|p| p * scale).collect();
        let hull = convex_hull_2d(&pts);
        let admissible = (0..hull.len()).all(|e| {
            let p = &hull[e];
            let q = &hull[(e + 1) % hull.len()];
            (0..=64).all(|s| {
                let x = p + (q - p) * (s as f64 / 64.0);
                worst(&x) <= 0.0 && linear.max_violation(&x) <= 0.0
            })
        });
        if admissible && hull.len() >= 3 {
            let mut rows = Vec::with_capacity(hull.len());
            let mut rhs = Vec::with_capacity(hull.len());
            for e in 0..hull.len() {
                let p = &hull[e];
                let q = &hull[(e + 1) % hull.len()];
                let normal = DVector::from_vec(vec![q[1] - p[1], p[0] - q[0]]);
                rhs.push(normal.dot(p));
                rows.push(normal.transpose());
            }
            let poly = Polyhedron::new(DMatrix::from_rows(&rows), DVector::from_vec(rhs))?;
            return poly.intersect(&linear);
        }
        scale *= 0.98;
    }
    Err(Error::InteriorityViolated(
        "could not find an admissible inner approximation of the LQR section".into(),
    ))
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull_2d(points: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut pts: Vec<&DVector<f64>> = points.iter().collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-14 && (a[1] - b[1]).abs() < 1e-14);
    if pts.len() < 3 {
        return pts.into_iter().cloned().collect();
    }
    let cross = |o: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<&DVector<f64>> = Vec::with_capacity(2 * pts.len());
    for p in pts.iter().copied() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for p in pts.iter().rev().skip(1).copied() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull.into_iter().cloned().collect()
}

/// Maximal admissible set of `x+ = ak x` inside `constraints`.
fn moas(constraints: &Polyhedron, ak: &DMatrix<f64>, opts: &TerminalOptions) -> Result<(Polyhedron, usize)> {
    let base = constraints.remove_redundant(opts.redundancy_tol);
    let h0 = base.a().clone();
    let b0 = base.b().clone();
    let mut current = base;
    let mut power = DMatrix::identity(ak.nrows(), ak.ncols());
    for step in 1..=opts.k_max {
        power = ak * power;
        let layer = &h0 * &power;
        let mut redundant = true;
        let mut next = current.clone();
        for r in 0..layer.nrows() {
            let row = layer.row(r).transpose();
            match current.maximize(&row) {
                LpOutcome::Optimal { value, .. } if value <= b0[r] + opts.redundancy_tol => {}
                LpOutcome::Infeasible => {
                    return Err(Error::InteriorityViolated("terminal set is empty".into()))
                }
                _ => {
                    redundant = false;
                    next = next.with_row(&row, b0[r]);
                }
            }
        }
        if redundant {
            return Ok((current.remove_redundant(opts.redundancy_tol), step - 1));
        }
        current = next;
    }
    Err(Error::NotFinitelyDetermined(opts.k_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn zero_dynamics_give_q() {
        let q = m(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = solve_dare(&DMatrix::zeros(2, 2), &m(2, 1, &[1.0, 0.0]), &q, &m(1, 1, &[1.0])).unwrap();
        assert!((p - q).amax() < 1e-15);
    }

    #[test]
    fn scalar_golden_ratio() {
        let one = m(1, 1, &[1.0]);
        let p = solve_dare(&one, &one, &one, &one).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - phi).abs() < 1e-10);
        let k = lqr_gain(&one, &one, &p, &one).unwrap();
        assert!((k[(0, 0)] + phi / (1.0 + phi)).abs() < 1e-10);
    }

    #[test]
    fn zero_input_matrix_gives_zero_gain() {
        let a = m(2, 2, &[0.5, 0.0, 0.0, 0.3]);
        let b = DMatrix::zeros(2, 1);
        let q = DMatrix::identity(2, 2);
        let p = solve_dare(&a, &b, &q, &m(1, 1, &[1.0])).unwrap();
        assert_eq!(lqr_gain(&a, &b, &p, &m(1, 1, &[1.0])).unwrap(), DMatrix::zeros(1, 2));
    }

    #[test]
    fn uncontrollable_unstable_mode_does_not_converge() {
        let a = m(1, 1, &[2.0]);
        let b = DMatrix::zeros(1, 1);
        let one = m(1, 1, &[1.0]);
        assert!(matches!(solve_dare(&a, &b, &one, &one), Err(Error::NoConvergence(_))));
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let pts: Vec<_> = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]]
            .iter()
            .map(|p| DVector::from_vec(p.to_vec()))
            .collect();
        assert_eq!(convex_hull_2d(&pts).len(), 4);
    }

    #[test]
    fn stable_diagonal_box_is_its_own_admissible_set() {
        let ak = m(2, 2, &[0.5, 0.0, 0.0, 0.8]);
        let b = Polyhedron::from_box(&DVector::from_element(2, -1.0), &DVector::from_element(2, 1.0));
        let (t, k_star) = moas(&b, &ak, &TerminalOptions::default()).unwrap();
        assert_eq!(k_star, 0);
        assert_eq!(t.n_rows(), 4);
    }

    #[test]
    fn rotation_shrinks_box_to_octagon() {
        let c = std::f64::consts::FRAC_PI_4.cos();
        let ak = m(2, 2, &[c, -c, c, c]) * 0.99;
        let b = Polyhedron::from_box(&DVector::from_element(2, -1.0), &DVector::from_element(2, 1.0));
        let (t, k_star) = moas(&b, &ak, &TerminalOptions::default()).unwrap();
        assert!(k_star >= 1);
        for v in t.vertices(1e-9).unwrap() {
            assert!(t.contains(&(&ak * &v), 1e-9));
        }
    }

    #[test]
    fn unstable_loop_is_not_finitely_determined() {
        let ak = m(1, 1, &[1.0]);
        let b = Polyhedron::from_box(&DVector::from_element(1, -1.0), &DVector::from_element(1, 1.0));
        // a marginally stable loop makes every layer redundant at once
        assert_eq!(moas(&b, &ak, &TerminalOptions::default()).unwrap().1, 0);
        let rot = m(2, 2, &[0.0, -1.0, 1.0, 0.0]) * 1.0001;
        let b2 = Polyhedron::from_box(&DVector::from_element(2, -1.0), &DVector::from_element(2, 1.0));
        let opts = TerminalOptions {
            k_max: 20,
            ..TerminalOptions::default()
        };
        assert!(matches!(moas(&b2, &rot, &opts), Err(Error::NotFinitelyDetermined(20))));
    }
}
