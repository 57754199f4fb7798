//! H-representation polyhedra `{x : A x <= b}` and the handful of LP-backed
//! operations the rest of the crate needs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lp::{self, LpOutcome};

/// Upper bound on the number of row subsets examined by [`Polyhedron::vertices`].
const MAX_VERTEX_COMBINATIONS: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Polyhedron {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension(format!(
                "polyhedron has {} rows but rhs of length {}",
                a.nrows(),
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Dimension("polyhedron data must be finite".into()));
        }
        Ok(Self { a, b })
    }

    /// The box `lower <= x <= upper`.
    pub fn from_box(lower: &DVector<f64>, upper: &DVector<f64>) -> Self {
        let n = lower.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = upper[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lower[i];
        }
        Self { a, b }
    }

    /// The whole space `R^n` (no rows).
    pub fn universe(n: usize) -> Self {
        Self {
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    /// Largest constraint violation `max_i (a_i x - b_i)`; negative inside.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let r = &self.a * x - &self.b;
        r.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.n_rows() == 0 || self.max_violation(x) <= tol
    }

    /// Stacks the rows of both polyhedra.
    pub fn intersect(&self, other: &Polyhedron) -> Result<Polyhedron> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!(
                "cannot intersect polyhedra of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let rows = self.n_rows() + other.n_rows();
        let mut a = DMatrix::zeros(rows, self.dim());
        a.rows_mut(0, self.n_rows()).copy_from(&self.a);
        a.rows_mut(self.n_rows(), other.n_rows()).copy_from(&other.a);
        let mut b = DVector::zeros(rows);
        b.rows_mut(0, self.n_rows()).copy_from(&self.b);
        b.rows_mut(self.n_rows(), other.n_rows()).copy_from(&other.b);
        Ok(Polyhedron { a, b })
    }

    /// Appends a single row `row · x <= rhs`.
    pub fn with_row(&self, row: &DVector<f64>, rhs: f64) -> Polyhedron {
        let mut a = self.a.clone().insert_row(self.n_rows(), 0.0);
        a.row_mut(self.n_rows()).copy_from(&row.transpose());
        let b = self.b.clone().insert_row(self.n_rows(), rhs);
        Polyhedron { a, b }
    }

    /// The set `{y : y + shift ∈ self}`.
    pub fn translate_to_origin(&self, shift: &DVector<f64>) -> Polyhedron {
        Polyhedron {
            a: self.a.clone(),
            b: &self.b - &self.a * shift,
        }
    }

    /// The preimage `{x : M x ∈ self}`.
    pub fn preimage(&self, m: &DMatrix<f64>) -> Polyhedron {
        Polyhedron {
            a: &self.a * m,
            b: self.b.clone(),
        }
    }

    pub fn maximize(&self, objective: &DVector<f64>) -> LpOutcome {
        lp::maximize(objective, &self.a, &self.b)
    }

    pub fn minimize(&self, objective: &DVector<f64>) -> LpOutcome {
        lp::minimize(objective, &self.a, &self.b)
    }

    pub fn is_empty(&self) -> bool {
        matches!(
            self.maximize(&DVector::zeros(self.dim())),
            LpOutcome::Infeasible
        )
    }

    /// Coordinate-wise bounds, or `None` when empty or unbounded.
    pub fn bounding_box(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.dim();
        let mut lower = DVector::zeros(n);
        let mut upper = DVector::zeros(n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            upper[i] = self.maximize(&e).value()?;
            lower[i] = self.minimize(&e).value()?;
        }
        Some((lower, upper))
    }

    pub fn is_bounded(&self) -> bool {
        self.bounding_box().is_some()
    }

    /// Range `[min, max]` of the affine function `c · x + d` over the set.
    pub fn affine_range(&self, c: &DVector<f64>, d: f64) -> Option<(f64, f64)> {
        let hi = self.maximize(c).value()?;
        let lo = self.minimize(c).value()?;
        Some((lo + d, hi + d))
    }

    /// Rows scaled to unit Euclidean norm; zero rows are dropped when they are
    /// satisfied by every point and reported as an empty set otherwise.
    pub fn normalized(&self) -> Polyhedron {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        let mut infeasible = false;
        for i in 0..self.n_rows() {
            let norm = self.a.row(i).norm();
            if norm <= 1e-14 {
                if self.b[i] < 0.0 {
                    infeasible = true;
                }
                continue;
            }
            rows.push(self.a.row(i) / norm);
            rhs.push(self.b[i] / norm);
        }
        if infeasible {
            // x <= -1 and -x <= -1 on the first coordinate
            let n = self.dim();
            let mut a = DMatrix::zeros(2, n);
            a[(0, 0)] = 1.0;
            a[(1, 0)] = -1.0;
            return Polyhedron {
                a,
                b: DVector::from_vec(vec![-1.0, -1.0]),
            };
        }
        let a = if rows.is_empty() {
            DMatrix::zeros(0, self.dim())
        } else {
            DMatrix::from_rows(&rows)
        };
        Polyhedron {
            a,
            b: DVector::from_vec(rhs),
        }
    }

    /// Removes rows implied by the others: row `i` is dropped when
    /// `max a_i x` over the remaining kept rows is at most `b_i + tol`.
    pub fn remove_redundant(&self, tol: f64) -> Polyhedron {
        let normed = self.normalized();
        let n = normed.dim();
        // exact duplicates first: keep the tightest of parallel identical rows
        let mut order: Vec<usize> = (0..normed.n_rows()).collect();
        order.sort_by(|&i, &j| normed.b[i].total_cmp(&normed.b[j]));
        let mut unique: Vec<usize> = Vec::new();
        for &i in &order {
            let dup = unique.iter().any(|&j| {
                (normed.a.row(i) - normed.a.row(j)).amax() <= 1e-12 && normed.b[j] <= normed.b[i]
            });
            if !dup {
                unique.push(i);
            }
        }
        unique.sort_unstable();

        let mut keep = vec![true; unique.len()];
        for k in 0..unique.len() {
            let others: Vec<usize> = (0..unique.len())
                .filter(|&l| l != k && keep[l])
                .map(|l| unique[l])
                .collect();
            let (a, b) = select_rows(&normed, &others, n);
            // bound the LP by the tested row relaxed by one unit
            let i = unique[k];
            let row = normed.a.row(i).transpose();
            let bounded_a = stack_row(&a, &row);
            let mut bounded_b = b.clone().insert_row(b.len(), 0.0);
            bounded_b[b.len()] = normed.b[i] + 1.0;
            match lp::maximize(&row, &bounded_a, &bounded_b) {
                LpOutcome::Optimal { value, .. } if value <= normed.b[i] + tol => keep[k] = false,
                LpOutcome::Infeasible => keep[k] = false,
                _ => {}
            }
        }
        let kept: Vec<usize> = (0..unique.len()).filter(|&k| keep[k]).map(|k| unique[k]).collect();
        let (a, b) = select_rows(&normed, &kept, n);
        Polyhedron { a, b }
    }

    /// Vertices of a bounded polyhedron by enumeration of `n`-row subsets.
    pub fn vertices(&self, tol: f64) -> Result<Vec<DVector<f64>>> {
        let n = self.dim();
        let rows = self.n_rows();
        if rows < n {
            return Err(Error::InvalidPartition(
                "polyhedron has fewer rows than dimensions and cannot be bounded".into(),
            ));
        }
        let combos = binomial(rows, n);
        if combos > MAX_VERTEX_COMBINATIONS {
            return Err(Error::Unsupported(format!(
                "vertex enumeration over {combos} row subsets"
            )));
        }
        let mut out: Vec<DVector<f64>> = Vec::new();
        let mut idx: Vec<usize> = (0..n).collect();
        loop {
            let mut m = DMatrix::zeros(n, n);
            let mut rhs = DVector::zeros(n);
            for (r, &i) in idx.iter().enumerate() {
                m.row_mut(r).copy_from(&self.a.row(i));
                rhs[r] = self.b[i];
            }
            let sv = m.singular_values();
            if sv.min() > 1e-10 * sv.max().max(1.0) {
                if let Some(x) = m.clone().full_piv_lu().solve(&rhs) {
                    if self.max_violation(&x) <= tol
                        && !out.iter().any(|v| (v - &x).amax() <= 1e-9 * (1.0 + x.amax()))
                    {
                        out.push(x);
                    }
                }
            }
            if !next_combination(&mut idx, rows) {
                break;
            }
        }
        Ok(out)
    }
}

fn select_rows(p: &Polyhedron, rows: &[usize], n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(rows.len(), n);
    let mut b = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        a.row_mut(r).copy_from(&p.a.row(i));
        b[r] = p.b[i];
    }
    (a, b)
}

fn stack_row(a: &DMatrix<f64>, row: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone().insert_row(a.nrows(), 0.0);
    out.row_mut(a.nrows()).copy_from(&row.transpose());
    out
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
