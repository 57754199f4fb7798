//! Artificial input `v = G(x) u` and the mixed state/input sets `Z_j`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{ConstraintUniverse, InputBox, NonlinearityAtom, SignCase, SystemModel};
use crate::polytope::Polyhedron;
use crate::solver::ConvexFunction;

/// Threshold below which `|g_i(x)|` counts as zero.
pub const ZERO_TOL: f64 = 1e-9;
/// Largest `|v_i|` accepted on a channel whose gain vanishes.
pub const SINGULAR_V_TOL: f64 = 1e-7;
/// Box violations up to this size (in either `u` or `v` units) are clipped as noise.
pub const BOX_NOISE_TOL: f64 = 1e-7;

/// Vanishing (`singular`) and non-vanishing (`regular`) input channels at a state.
/// Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSplit {
    pub singular: Vec<usize>,
    pub regular: Vec<usize>,
}

pub fn split_indices(model: &SystemModel, x: &DVector<f64>, zero_tol: f64) -> IndexSplit {
    let g = model.eval_g(x);
    let (singular, regular) = (0..model.m()).partition(|&i| g[i].abs() <= zero_tol);
    IndexSplit { singular, regular }
}

/// `v_i = g_i(x) u_i`.
pub fn forward_input(model: &SystemModel, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    model.eval_g(x).component_mul(u)
}

/// Inverts [`forward_input`] on the regular channels and sets `u_S = 0`.
pub fn recover_input(
    model: &SystemModel,
    input_box: &InputBox,
    x: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g = model.eval_g(x);
    let mut u = DVector::zeros(model.m());
    for i in 0..model.m() {
        if g[i].abs() <= ZERO_TOL {
            if v[i].abs() > SINGULAR_V_TOL {
                return Err(Error::InconsistentArtificialInput {
                    channel: i + 1,
                    value: v[i].abs(),
                });
            }
            continue;
        }
        let raw = v[i] / g[i];
        let clipped = raw.clamp(input_box.lower[i], input_box.upper[i]);
        let excess = (raw - clipped).abs();
        if excess > BOX_NOISE_TOL && excess * g[i].abs() > BOX_NOISE_TOL {
            return Err(Error::InputBoxViolation {
                channel: i + 1,
                value: raw,
                excess,
            });
        }
        u[i] = clipped;
    }
    Ok(u)
}

/// `alpha * g(x) + beta * v <= 0` on the local vector `(x, v_channel)`.
#[derive(Debug, Clone)]
pub struct ChannelGenerator {
    pub channel: usize,
    pub atom: NonlinearityAtom,
    pub alpha: f64,
    pub beta: f64,
}

impl ChannelGenerator {
    pub fn eval(&self, x: &[f64], v: f64) -> f64 {
        self.alpha * self.atom.value(x) + self.beta * v
    }

    /// Row and right-hand side over `(x, v_channel)` when the atom is affine.
    pub fn as_linear(&self) -> Option<(DVector<f64>, f64)> {
        match &self.atom {
            NonlinearityAtom::Affine { c, d } => {
                let n = c.len();
                let mut row = DVector::zeros(n + 1);
                row.rows_mut(0, n).copy_from(&(c * self.alpha));
                row[n] = self.beta;
                Some((row, -self.alpha * d))
            }
            _ => None,
        }
    }

    fn describe(&self) -> Value {
        let atom = match &self.atom {
            NonlinearityAtom::Affine { c, d } => json!({"affine": {"c": c.as_slice(), "d": d}}),
            NonlinearityAtom::Quadratic { h, c, d } => json!({"quadratic": {
                "h": (0..h.nrows()).map(|i| h.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                "c": c.as_slice(), "d": d}}),
            NonlinearityAtom::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => json!({"sinusoid": {"amplitude": amplitude, "frequency": frequency.as_slice(), "phase": phase}}),
        };
        json!({"channel": self.channel + 1, "alpha": self.alpha, "beta": self.beta, "g": atom})
    }
}

impl ConvexFunction for ChannelGenerator {
    fn dim(&self) -> usize {
        self.atom.dim() + 1
    }

    fn value(&self, z: &[f64]) -> f64 {
        let n = self.atom.dim();
        self.eval(&z[..n], z[n])
    }

    fn gradient(&self, z: &[f64]) -> DVector<f64> {
        let n = self.atom.dim();
        let mut g = DVector::zeros(n + 1);
        g.rows_mut(0, n)
            .copy_from(&(self.atom.gradient(&z[..n]) * self.alpha));
        g[n] = self.beta;
        g
    }

    fn hessian(&self, z: &[f64]) -> DMatrix<f64> {
        let n = self.atom.dim();
        let mut h = DMatrix::zeros(n + 1, n + 1);
        h.view_mut((0, 0), (n, n))
            .copy_from(&(self.atom.hessian(&z[..n]) * self.alpha));
        h
    }
}

/// `Z_j`: the partition polyhedron in `x` plus two generators per channel.
#[derive(Debug, Clone)]
pub struct MixedSetZj {
    /// 1-based partition index.
    pub partition: usize,
    pub polyhedron: Polyhedron,
    /// Channel-major: lower then upper generator of each channel.
    pub generators: Vec<ChannelGenerator>,
    n: usize,
    m: usize,
}

pub fn build_zj(universe: &ConstraintUniverse, model: &SystemModel, j: usize) -> Result<MixedSetZj> {
    let part = universe
        .partition(j)
        .ok_or_else(|| Error::OutOfRange(format!("partition {j} of {}", universe.s())))?;
    if !universe.is_certified(j) {
        return Err(Error::UncertifiedPartition(j));
    }
    let ubox = &universe.input_box;
    let mut generators = Vec::with_capacity(2 * model.m());
    for (i, atom) in model.atoms().iter().enumerate() {
        let (lo_coef, hi_coef) = match part.sign_cases[i] {
            // g u_lo <= v <= g u_hi
            SignCase::NonnegConcave => (ubox.lower[i], ubox.upper[i]),
            // g u_hi <= v <= g u_lo
            SignCase::NonposConvex => (ubox.upper[i], ubox.lower[i]),
        };
        generators.push(ChannelGenerator {
            channel: i,
            atom: atom.clone(),
            alpha: lo_coef,
            beta: -1.0,
        });
        generators.push(ChannelGenerator {
            channel: i,
            atom: atom.clone(),
            alpha: -hi_coef,
            beta: 1.0,
        });
    }
    Ok(MixedSetZj {
        partition: j,
        polyhedron: part.polyhedron.clone(),
        generators,
        n: model.n(),
        m: model.m(),
    })
}

impl MixedSetZj {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn is_polyhedral(&self) -> bool {
        self.generators.iter().all(|g| g.atom.is_affine())
    }

    /// Smallest slack over the polyhedron rows and every generator; nonnegative
    /// means `(x, v)` lies in `Z_j`.
    pub fn slack(&self, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let poly = -self.polyhedron.max_violation(x);
        self.generators
            .iter()
            .map(|g| -g.eval(x.as_slice(), v[g.channel]))
            .fold(poly, f64::min)
    }

    pub fn contains(&self, x: &DVector<f64>, v: &DVector<f64>, tol: f64) -> bool {
        self.slack(x, v) >= -tol
    }

    /// Linear rows over `(x, v)` in `R^{n+m}`: the polyhedron and every affine generator.
    pub fn linear_rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (n, m) = (self.n, self.m);
        let mut rows: Vec<(DVector<f64>, f64)> = (0..self.polyhedron.n_rows())
            .map(|r| {
                let mut row = DVector::zeros(n + m);
                row.rows_mut(0, n)
                    .copy_from(&self.polyhedron.a().row(r).transpose());
                (row, self.polyhedron.b()[r])
            })
            .collect();
        for g in &self.generators {
            if let Some((local, rhs)) = g.as_linear() {
                let mut row = DVector::zeros(n + m);
                row.rows_mut(0, n).copy_from(&local.rows(0, n));
                row[n + g.channel] = local[n];
                rows.push((row, rhs));
            }
        }
        let mut a = DMatrix::zeros(rows.len(), n + m);
        let mut b = DVector::zeros(rows.len());
        for (i, (row, rhs)) in rows.into_iter().enumerate() {
            a.row_mut(i).copy_from(&row.transpose());
            b[i] = rhs;
        }
        (a, b)
    }

    /// Non-affine generators with their local-variable layout `(x, v_channel)`.
    pub fn nonlinear_generators(&self) -> impl Iterator<Item = Arc<ChannelGenerator>> + '_ {
        self.generators
            .iter()
            .filter(|g| !g.atom.is_affine())
            .map(|g| Arc::new(g.clone()))
    }

    /// Structured-text dump of the set for debugging.
    pub fn to_json(&self) -> Value {
        let a = self.polyhedron.a();
        json!({
            "partition": self.partition,
            "polyhedron": {
                "a": (0..a.nrows()).map(|i| a.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                "b": self.polyhedron.b().as_slice(),
            },
            "generators": self.generators.iter().map(ChannelGenerator::describe).collect::<Vec<_>>(),
        })
    }
}
