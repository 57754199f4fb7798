//! Closed-loop simulation: solve at the current state, apply the recovered
//! input to the true dynamics, repeat.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenario::{PrunedTree, ScenarioEngine, SolveResult};

#[derive(Debug, Clone)]
pub struct SimulationOptions {
    /// Stop once `‖x‖∞ <= stop_tol`.
    pub stop_tol: f64,
    /// Wall-clock limit for a single controller evaluation.
    pub step_budget: Option<Duration>,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            stop_tol: 1e-6,
            step_budget: None,
        }
    }
}

/// One closed-loop sample: the state and the input applied at it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub value: f64,
    pub mu_star: u64,
    /// Smallest slack of `x` in the state set and of `u` in the input box.
    pub min_slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The requested number of steps was applied.
    Steps,
    Converged,
    /// No scenario is feasible at `final_state`.
    Infeasible,
    BudgetExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    /// State after the last applied input (equal to the last record's state
    /// when the run stopped before applying one).
    pub final_state: Vec<f64>,
    pub stop: StopReason,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let (n, m) = match self.records.first() {
            Some(r) => (r.x.len(), r.u.len()),
            None => (self.final_state.len(), 0),
        };
        let mut out = String::from("k");
        for i in 1..=n {
            let _ = write!(out, ",x_{i}");
        }
        for i in 1..=m {
            let _ = write!(out, ",u_{i}");
        }
        for i in 1..=m {
            let _ = write!(out, ",v_{i}");
        }
        out.push_str(",V,mu_star,min_slack\n");
        for r in &self.records {
            let _ = write!(out, "{}", r.k);
            for v in r.x.iter().chain(&r.u).chain(&r.v) {
                let _ = write!(out, ",{v:e}");
            }
            let _ = writeln!(out, ",{:e},{},{:e}", r.value, r.mu_star, r.min_slack);
        }
        out
    }
}

/// Receding-horizon controller around a [`ScenarioEngine`].
#[derive(Debug)]
pub struct ClosedLoop<'a> {
    pub engine: &'a ScenarioEngine,
    pub pruned: &'a PrunedTree,
    pub options: SimulationOptions,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(engine: &'a ScenarioEngine, pruned: &'a PrunedTree, options: SimulationOptions) -> Self {
        Self {
            engine,
            pruned,
            options,
        }
    }

    /// Solves at `x`, applies `u*(0)` and returns the next state with its record.
    pub fn step(&self, k: usize, x: &DVector<f64>) -> Result<(DVector<f64>, StepRecord, SolveResult)> {
        let start = Instant::now();
        let res = self.engine.solve_state(x, self.pruned)?;
        if let Some(budget) = self.options.step_budget {
            if start.elapsed() > budget {
                return Err(Error::BudgetExceeded { k });
            }
        }
        let Some(mu) = res.mu_star else {
            return Err(Error::InfeasibleState { k });
        };
        let model = self.engine.model();
        let universe = self.engine.universe();
        let u = DVector::from_vec(res.u0.clone());
        let next = model.step(x, &u);
        let state_slack = -universe.state_set.max_violation(x);
        let record = StepRecord {
            k,
            x: x.iter().copied().collect(),
            u: res.u0.clone(),
            v: res.v0.clone(),
            value: res.value,
            mu_star: mu,
            min_slack: state_slack.min(universe.input_box.slack(&u)),
        };
        Ok((next, record, res))
    }

    /// Runs up to `steps` closed-loop steps from `x0`. Infeasibility and
    /// budget overruns end the run with the partial trajectory.
    pub fn run(&self, x0: &DVector<f64>, steps: usize) -> Result<Trajectory> {
        let mut x = x0.clone();
        let mut records = Vec::new();
        let mut stop = StopReason::Steps;
        for k in 0..=steps {
            let (next, record) = match self.step(k, &x) {
                Ok((next, record, _)) => (next, record),
                Err(Error::InfeasibleState { .. }) => {
                    stop = StopReason::Infeasible;
                    break;
                }
                Err(Error::BudgetExceeded { .. }) => {
                    stop = StopReason::BudgetExceeded;
                    break;
                }
                Err(e) => return Err(e),
            };
            records.push(record);
            if x.amax() <= self.options.stop_tol {
                stop = StopReason::Converged;
                break;
            }
            if k == steps {
                break;
            }
            x = next;
        }
        Ok(Trajectory {
            records,
            final_state: x.iter().copied().collect(),
            stop,
        })
    }
}
