//! Stage costs in artificial-input coordinates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::SystemModel;
use crate::transform::forward_input;

/// A stage cost `l(x, v)` that is convex on every `Z_j`.
pub trait StageCost {
    fn value(&self, x: &DVector<f64>, v: &DVector<f64>) -> f64;
}

/// `l(x, v) = x'Qx + v'Rv`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticStageCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl QuadraticStageCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if !q.is_square() || !r.is_square() {
            return Err(Error::Dimension("Q and R must be square".into()));
        }
        if (&q - q.transpose()).amax() > 1e-12 || (&r - r.transpose()).amax() > 1e-12 {
            return Err(Error::Config("Q and R must be symmetric".into()));
        }
        if q.nrows() > 0 && SymmetricEigen::new(q.clone()).eigenvalues.min() < -1e-10 {
            return Err(Error::Config("Q is not positive semidefinite".into()));
        }
        if r.nrows() == 0 || SymmetricEigen::new(r.clone()).eigenvalues.min() < 1e-10 {
            return Err(Error::Config("R is not positive definite".into()));
        }
        Ok(Self { q, r })
    }
}

impl StageCost for QuadraticStageCost {
    fn value(&self, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
        stage_cost_v(self, x, v)
    }
}

pub fn stage_cost_v(cost: &QuadraticStageCost, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
    x.dot(&(&cost.q * x)) + v.dot(&(&cost.r * v))
}

/// The pull-back `l(x, G(x) u)`.
pub fn stage_cost_u(
    model: &SystemModel,
    cost: &QuadraticStageCost,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    stage_cost_v(cost, x, &forward_input(model, x, u))
}

/// `x'Px`.
pub fn terminal_cost(p: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(p * x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    #[test]
    fn example_one_values() {
        let sys = examples::example1();
        let cost = QuadraticStageCost::new(sys.q.clone(), sys.r.clone()).unwrap();
        assert_eq!(stage_cost_v(&cost, &dv(&[0.0, 0.0]), &dv(&[0.0, 0.0])), 0.0);
        assert!((stage_cost_v(&cost, &dv(&[1.0, 0.0]), &dv(&[1.0, 0.0])) - 0.06).abs() < 1e-15);
        let c = stage_cost_u(&sys.model, &cost, &dv(&[0.0, 0.0]), &dv(&[1.0, 0.0]));
        assert!((c - 0.04).abs() < 1e-15);
    }

    #[test]
    fn rejects_singular_r() {
        let err = QuadraticStageCost::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1));
        assert!(err.is_err());
        let err = QuadraticStageCost::new(-DMatrix::identity(1, 1), DMatrix::identity(1, 1));
        assert!(err.is_err());
    }
}
