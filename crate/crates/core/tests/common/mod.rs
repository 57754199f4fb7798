//! Independent oracles shared by the integration tests. Only `exactness`
//! drives the engine; everything else is computed from first principles.
#![allow(dead_code)]

pub mod exactness;

use convex_nmpc::examples::Benchmark;
use convex_nmpc::model::{
    CertificationPolicy, ConstraintUniverse, InputBox, NonlinearityAtom, Partition, SignCase,
    SystemModel,
};
use convex_nmpc::polytope::Polyhedron;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Structure-preserving doubling for `P = A'PA - A'PB(R+B'PB)^{-1}B'PA + Q`.
pub fn sda_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * r.clone().try_inverse().expect("R invertible") * b.transpose();
    let mut hk = q.clone();
    for _ in 0..200 {
        let w = (&eye + &gk * &hk).try_inverse().expect("I + GH invertible");
        let a_next = &ak * &w * &ak;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let step = (&h_next - &hk).amax();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if step <= 1e-14 * (1.0 + hk.amax()) {
            break;
        }
    }
    (&hk + hk.transpose()) * 0.5
}

/// `‖A'(P - PB(R+B'PB)^{-1}B'P)A - P + Q‖∞`, computed directly.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let inner = (r + b.transpose() * p * b).try_inverse().expect("invertible");
    let core = p - p * b * inner * b.transpose() * p;
    (a.transpose() * core * a - p + q).amax()
}

/// Projected gradient with step `1/L` on `min ½x'Hx + g'x, lo <= x <= hi`.
pub fn projected_gradient_box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    iters: usize,
) -> DVector<f64> {
    let l = h.clone().symmetric_eigen().eigenvalues.max().max(1e-12);
    let mut x = DVector::zeros(g.len());
    for i in 0..x.len() {
        x[i] = 0.0f64.clamp(lo[i], hi[i]);
    }
    for _ in 0..iters {
        let grad = h * &x + g;
        x -= grad / l;
        for i in 0..x.len() {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    }
    x
}

/// Exact QP oracle by active-set enumeration: `min ½x'Hx + g'x, Ax <= b`
/// with `H` positive definite. Returns the optimal value and point.
pub fn active_set_qp(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
    let n = g.len();
    let m = b.len();
    assert!(m <= 16, "enumeration is exponential");
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if act.len() > n {
            continue;
        }
        let k = act.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-g));
        for (r, &i) in act.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(i, j)];
                kkt[(j, n + r)] = a[(i, j)];
            }
            rhs[n + r] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let lambda = sol.rows(n, k);
        if lambda.iter().any(|&l| l < -1e-10) {
            continue;
        }
        if (a * &x - b).iter().any(|&r| r > 1e-9) {
            continue;
        }
        let val = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
        if best.as_ref().is_none_or(|(v, _)| val < *v) {
            best = Some((val, x));
        }
    }
    best
}

/// Central differences with step `h`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Newton on `(A - I)x + b (c'x) u = 0` with `x[anchor]` pinned to `value`.
pub fn newton_equilibrium(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DVector<f64>,
    mut x: DVector<f64>,
    mut u: f64,
    anchor: usize,
    value: f64,
) -> Option<(DVector<f64>, f64)> {
    let n = x.len();
    let eye = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let cx = c.dot(&x);
        let mut f = DVector::zeros(n + 1);
        f.rows_mut(0, n).copy_from(&((a - &eye) * &x + b * (cx * u)));
        f[n] = x[anchor] - value;
        if f.amax() < 1e-14 {
            return Some((x, u));
        }
        let mut jac = DMatrix::zeros(n + 1, n + 1);
        jac.view_mut((0, 0), (n, n))
            .copy_from(&(a - &eye + b * c.transpose() * u));
        jac.view_mut((0, n), (n, 1)).copy_from(&(b * cx));
        jac[(n, anchor)] = 1.0;
        let step = jac.lu().solve(&(-f))?;
        x += step.rows(0, n);
        u += step[n];
    }
    None
}

/// Plant data for brute-force searches over true input sequences.
pub struct Plant<'a> {
    pub model: &'a SystemModel,
    pub state_set: &'a Polyhedron,
    pub input_box: &'a InputBox,
    pub q: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub p: &'a DMatrix<f64>,
    pub terminal: &'a Polyhedron,
    pub horizon: usize,
}

const FEAS_TOL: f64 = 1e-9;

impl Plant<'_> {
    /// Cost of an input sequence `u` (step-major) from `x0`, or `None` when
    /// it leaves `X` or ends outside `T`.
    pub fn rollout(&self, x0: &DVector<f64>, u: &[f64]) -> Option<f64> {
        let m = self.model.m();
        let mut x = x0.clone();
        let mut cost = 0.0;
        for k in 0..self.horizon {
            if self.state_set.max_violation(&x) > FEAS_TOL {
                return None;
            }
            let uk = DVector::from_column_slice(&u[k * m..(k + 1) * m]);
            let v = self.model.eval_g(&x).component_mul(&uk);
            cost += x.dot(&(self.q * &x)) + v.dot(&(self.r * &v));
            x = self.model.a() * &x + self.model.b() * v;
        }
        if self.terminal.max_violation(&x) > FEAS_TOL {
            return None;
        }
        Some(cost + x.dot(&(self.p * &x)))
    }

    /// Dense grid search over all input sequences with `pts` values per
    /// input per step, followed by shrinking local grids around the best.
    pub fn grid_optimum(&self, x0: &DVector<f64>, pts: usize) -> Option<(f64, Vec<f64>)> {
        let m = self.model.m();
        let d = m * self.horizon;
        let lo: Vec<f64> = (0..d).map(|i| self.input_box.lower[i % m]).collect();
        let hi: Vec<f64> = (0..d).map(|i| self.input_box.upper[i % m]).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut u = vec![0.0; d];
        let total = (pts as u64).pow(d as u32);
        for mut idx in 0..total {
            for i in 0..d {
                let k = (idx % pts as u64) as f64;
                idx /= pts as u64;
                u[i] = lo[i] + (hi[i] - lo[i]) * k / (pts - 1) as f64;
            }
            if let Some(c) = self.rollout(x0, &u) {
                if best.as_ref().is_none_or(|(b, _)| c < *b) {
                    best = Some((c, u.clone()));
                }
            }
        }
        let (mut val, mut arg) = best?;
        let mut radius: Vec<f64> = (0..d).map(|i| 2.0 * (hi[i] - lo[i]) / (pts - 1) as f64).collect();
        let local = 11usize;
        for _ in 0..12 {
            let centre = arg.clone();
            let total = (local as u64).pow(d as u32);
            for mut idx in 0..total {
                for i in 0..d {
                    let k = (idx % local as u64) as f64;
                    idx /= local as u64;
                    let t = -1.0 + 2.0 * k / (local - 1) as f64;
                    u[i] = (centre[i] + t * radius[i]).clamp(lo[i], hi[i]);
                }
                if let Some(c) = self.rollout(x0, &u) {
                    if c < val {
                        val = c;
                        arg = u.clone();
                    }
                }
            }
            for r in &mut radius {
                *r *= 0.4;
            }
        }
        Some((val, arg))
    }
}

/// A seeded toy instance: `n` states, `m` affine gains, two partitions split
/// by the first gain's zero set inside `X = [-1, 1]^n`, `U = [-1, 1]^m`.
/// Further gains are positive on all of `X`.
pub fn toy_instance(seed: u64, n: usize, m: usize, horizon: usize) -> Benchmark {
    let mut rng = rng(seed);
    let a = DMatrix::from_fn(n, n, |i, j| {
        (if i == j { 1.0 } else { 0.0 }) + rng.gen_range(-0.3..0.3)
    });
    let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
    let mut atoms = Vec::new();
    let c1 = DVector::from_fn(n, |_, _| rng.gen_range(0.5..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
    let d1 = rng.gen_range(0.2..0.7) * c1.abs().sum();
    atoms.push(NonlinearityAtom::affine(c1.clone(), d1));
    for _ in 1..m {
        let c = DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
        let d = c.abs().sum() + rng.gen_range(0.3..1.0);
        atoms.push(NonlinearityAtom::affine(c, d));
    }
    let model = SystemModel::new(a, b, atoms).unwrap();
    let x = Polyhedron::from_box(&DVector::from_element(n, -1.0), &DVector::from_element(n, 1.0));
    let mut first = vec![SignCase::NonnegConcave; m];
    let mut second = vec![SignCase::NonnegConcave; m];
    first[0] = SignCase::NonnegConcave;
    second[0] = SignCase::NonposConvex;
    let partitions = vec![
        Partition {
            polyhedron: x.with_row(&(-&c1), d1),
            sign_cases: first,
        },
        Partition {
            polyhedron: x.with_row(&c1, -d1),
            sign_cases: second,
        },
    ];
    let universe = ConstraintUniverse::new(x, partitions, InputBox::symmetric(m, 1.0), CertificationPolicy::Strict);
    Benchmark {
        model,
        universe,
        q: DMatrix::identity(n, n),
        r: DMatrix::identity(m, m),
        horizon,
    }
}

/// Uniform sample from a bounded polyhedron by rejection from its bounding box.
pub fn sample_in(poly: &Polyhedron, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let (lo, hi) = poly.bounding_box().expect("bounded");
    loop {
        let x = DVector::from_fn(lo.len(), |i, _| {
            if hi[i] > lo[i] {
                rng.gen_range(lo[i]..=hi[i])
            } else {
                lo[i]
            }
        });
        if poly.contains(&x, 0.0) {
            return x;
        }
    }
}

/// Sample from a polyhedron containing the origin: a random direction and a
/// uniform fraction of the distance to the boundary along it.
pub fn sample_star(poly: &Polyhedron, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let n = poly.dim();
    loop {
        let d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        if d.norm() < 1e-3 {
            continue;
        }
        let ad = poly.a() * &d;
        let mut t_max = f64::INFINITY;
        for r in 0..poly.n_rows() {
            if ad[r] > 0.0 {
                t_max = t_max.min(poly.b()[r] / ad[r]);
            }
        }
        if t_max.is_finite() && t_max > 0.0 {
            return d * (t_max * rng.gen_range(0.0..1.0));
        }
    }
}

/// Random controllable `(A, B)` with spectral radius in `[0.5, 1.5)`, `Q > 0`, `R > 0`.
pub fn random_stabilizable(r: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    loop {
        let n = r.gen_range(1..=5);
        let m = r.gen_range(1..=3);
        let mut a = DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0));
        let rho = convex_nmpc::terminal::spectral_radius(&a);
        if rho < 1e-6 {
            continue;
        }
        a *= r.gen_range(0.5..1.5) / rho;
        let b = DMatrix::from_fn(n, m, |_, _| r.gen_range(-1.0..1.0));
        // Controllability matrix rank n implies stabilizability.
        let mut ctrb = DMatrix::zeros(n, n * m);
        let mut ak = DMatrix::identity(n, n);
        for k in 0..n {
            ctrb.view_mut((0, k * m), (n, m)).copy_from(&(&ak * &b));
            ak = &a * ak;
        }
        if ctrb.svd(false, false).singular_values.min() < 1e-3 {
            continue;
        }
        let qf = DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0));
        let q = &qf * qf.transpose() + DMatrix::identity(n, n) * 0.1;
        let r_w = DMatrix::identity(m, m) * r.gen_range(0.1..2.0);
        return (a, b, q, r_w);
    }
}
