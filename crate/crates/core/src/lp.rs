//! Thin linear-programming layer used for certification, redundancy removal
//! and terminal-set construction.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

/// Result of a single LP over an H-polyhedron.
#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, point: DVector<f64> },
    Infeasible,
    Unbounded,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Optimal { value, .. } => Some(*value),
            _ => None,
        }
    }
}

/// Maximizes `objective · x` subject to `a x <= b`.
pub fn maximize(objective: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> LpOutcome {
    solve(objective, a, b, OptimizationDirection::Maximize)
}

/// Minimizes `objective · x` subject to `a x <= b`.
pub fn minimize(objective: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> LpOutcome {
    solve(objective, a, b, OptimizationDirection::Minimize)
}

fn solve(
    objective: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    direction: OptimizationDirection,
) -> LpOutcome {
    let n = objective.len();
    debug_assert_eq!(a.ncols(), n);
    let mut problem = Problem::new(direction);
    let vars: Vec<_> = (0..n)
        .map(|j| problem.add_var(objective[j], (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    for i in 0..a.nrows() {
        let terms: Vec<_> = (0..n)
            .filter(|&j| a[(i, j)] != 0.0)
            .map(|j| (vars[j], a[(i, j)]))
            .collect();
        if terms.is_empty() {
            if b[i] < 0.0 {
                return LpOutcome::Infeasible;
            }
            continue;
        }
        problem.add_constraint(terms.as_slice(), ComparisonOp::Le, b[i]);
    }
    match problem.solve() {
        Ok(outcome) => match outcome.solution() {
            Some(sol) => {
                let point = DVector::from_iterator(n, vars.iter().map(|&v| sol.var_value(v)));
                // Recompute from the point so the value carries no solver-internal offset.
                let value = objective.dot(&point);
                LpOutcome::Optimal { value, point }
            }
            None => LpOutcome::Infeasible,
        },
        Err(microlp::Error::Infeasible) => LpOutcome::Infeasible,
        Err(microlp::Error::Unbounded) => LpOutcome::Unbounded,
        Err(_) => LpOutcome::Infeasible,
    }
}
