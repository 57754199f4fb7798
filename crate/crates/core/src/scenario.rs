//! Constraint scenarios: indexing, subproblem assembly, offline pruning and
//! the per-state argmin over scenarios.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::QuadraticStageCost;
use crate::error::{Error, Result};
use crate::model::{ConstraintUniverse, SystemModel};
use crate::solver::{
    self, ConvexFunction, ConvexProgram, EqualityReduction, NonlinearConstraint, PhaseOne,
    SolveStatus, SolverOptions,
};
use crate::terminal::TerminalIngredients;
use crate::transform::{build_zj, recover_input, MixedSetZj};

/// Above this many offline-feasible scenarios, `solve_state` first prunes
/// prefixes with the initial state fixed.
pub const ONLINE_PRUNING_MIN: usize = 64;

/// `mu = 1 + sum_k (eps_k - 1) s^k` for `eps_k` in `1..=s`.
pub fn encode(eps: &[usize], s: usize) -> Result<u64> {
    if s == 0 {
        return Err(Error::OutOfRange("s must be positive".into()));
    }
    let mut mu: u64 = 0;
    let mut weight: u64 = 1;
    for (k, &e) in eps.iter().enumerate() {
        if e == 0 || e > s {
            return Err(Error::OutOfRange(format!("eps_{k} = {e} not in 1..={s}")));
        }
        let term = ((e - 1) as u64)
            .checked_mul(weight)
            .ok_or_else(|| Error::OutOfRange("scenario index overflows u64".into()))?;
        mu = mu
            .checked_add(term)
            .ok_or_else(|| Error::OutOfRange("scenario index overflows u64".into()))?;
        if k + 1 < eps.len() {
            weight = weight
                .checked_mul(s as u64)
                .ok_or_else(|| Error::OutOfRange("scenario index overflows u64".into()))?;
        }
    }
    Ok(mu + 1)
}

/// Inverse of [`encode`] for horizon `n`.
pub fn decode(mu: u64, n: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 {
        return Err(Error::OutOfRange("s must be positive".into()));
    }
    let total = (s as u64)
        .checked_pow(n as u32)
        .ok_or_else(|| Error::OutOfRange("s^N overflows u64".into()))?;
    if mu == 0 || mu > total {
        return Err(Error::OutOfRange(format!("mu = {mu} not in 1..={total}")));
    }
    let mut rest = mu - 1;
    let mut eps = Vec::with_capacity(n);
    for _ in 0..n {
        eps.push((rest % s as u64) as usize + 1);
        rest /= s as u64;
    }
    Ok(eps)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneStats {
    /// Prefix feasibility problems solved, including full-length ones.
    pub nodes_visited: u64,
    pub subtrees_eliminated: u64,
    /// Scenarios removed without reaching their leaf.
    pub scenarios_eliminated: u64,
    /// Full-length scenarios whose own feasibility problem was solved.
    pub leaves_checked: u64,
}

/// Scenarios that survive offline pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedTree {
    pub horizon: usize,
    pub s: usize,
    /// Feasible for some initial state with the terminal constraint, ascending.
    pub feasible: Vec<u64>,
    /// Feasible for some initial state when the terminal constraint is dropped.
    pub feasible_without_terminal: Vec<u64>,
    pub stats: PruneStats,
    pub config_hash: String,
}

impl PrunedTree {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Loads a persisted tree; `None` when it was computed for another configuration.
    pub fn load(path: &Path, config_hash: &str) -> Result<Option<Self>> {
        let text = std::fs::read_to_string(path)?;
        let tree: PrunedTree = serde_json::from_str(&text)?;
        Ok((tree.config_hash == config_hash).then_some(tree))
    }

    /// Every scenario, for runs that skip pruning.
    pub fn unpruned(horizon: usize, s: usize) -> Result<Self> {
        let total = (s as u64)
            .checked_pow(horizon as u32)
            .ok_or_else(|| Error::OutOfRange("s^N overflows u64".into()))?;
        let all: Vec<u64> = (1..=total).collect();
        Ok(Self {
            horizon,
            s,
            feasible: all.clone(),
            feasible_without_terminal: all,
            stats: PruneStats::default(),
            config_hash: String::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioValue {
    pub mu: u64,
    pub status: SolveStatus,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveResult {
    pub status: ResultStatus,
    pub value: f64,
    pub mu_star: Option<u64>,
    pub eps_star: Vec<usize>,
    /// Predicted states `x(0..=N)`.
    pub states: Vec<Vec<f64>>,
    /// Artificial inputs `v(0..N)`.
    pub inputs: Vec<Vec<f64>>,
    pub v0: Vec<f64>,
    pub u0: Vec<f64>,
    pub scenarios: Vec<ScenarioValue>,
}

impl SolveResult {
    pub fn is_feasible(&self) -> bool {
        self.status == ResultStatus::Optimal
    }
}

/// Owns everything needed to assemble and solve scenario subproblems.
#[derive(Debug)]
pub struct ScenarioEngine {
    model: SystemModel,
    universe: ConstraintUniverse,
    cost: QuadraticStageCost,
    terminal: TerminalIngredients,
    horizon: usize,
    zsets: Vec<MixedSetZj>,
    zrows: Vec<(DMatrix<f64>, DVector<f64>)>,
    nonlinear: Vec<Vec<Arc<dyn ConvexFunction>>>,
    channels: Vec<Vec<usize>>,
    options: SolverOptions,
    reductions: Mutex<HashMap<(usize, bool), Arc<EqualityReduction>>>,
}

impl ScenarioEngine {
    /// All partitions of `universe` must already be certified.
    pub fn new(
        model: SystemModel,
        universe: ConstraintUniverse,
        cost: QuadraticStageCost,
        terminal: TerminalIngredients,
        horizon: usize,
        options: SolverOptions,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let zsets = (1..=universe.s())
            .map(|j| build_zj(&universe, &model, j))
            .collect::<Result<Vec<_>>>()?;
        let zrows = zsets.iter().map(MixedSetZj::linear_rows).collect();
        let mut nonlinear = Vec::new();
        let mut channels = Vec::new();
        for z in &zsets {
            let gens: Vec<_> = z.nonlinear_generators().collect();
            channels.push(gens.iter().map(|g| g.channel).collect());
            nonlinear.push(
                gens.into_iter()
                    .map(|g| g as Arc<dyn ConvexFunction>)
                    .collect(),
            );
        }
        Ok(Self {
            model,
            universe,
            cost,
            terminal,
            horizon,
            zsets,
            zrows,
            nonlinear,
            channels,
            options,
            reductions: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    pub fn universe(&self) -> &ConstraintUniverse {
        &self.universe
    }

    pub fn cost(&self) -> &QuadraticStageCost {
        &self.cost
    }

    pub fn terminal(&self) -> &TerminalIngredients {
        &self.terminal
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn s(&self) -> usize {
        self.universe.s()
    }

    pub fn zsets(&self) -> &[MixedSetZj] {
        &self.zsets
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    /// True when no scenario subproblem carries a nonlinear constraint.
    pub fn is_qp(&self) -> bool {
        self.zsets.iter().all(MixedSetZj::is_polyhedral)
    }

    /// The full-horizon subproblem of scenario `mu`; `x0 = None` leaves the
    /// initial state free inside the first step's partition.
    pub fn assemble(&self, mu: u64, x0: Option<&DVector<f64>>) -> Result<ConvexProgram> {
        let eps = decode(mu, self.horizon, self.s())?;
        self.build(&eps, x0, true, true)
    }

    /// Feasibility program of a scenario prefix with the initial state free:
    /// no objective, and the terminal constraint on the last state only when asked.
    pub fn feasibility_program(&self, eps: &[usize], terminal: bool) -> Result<ConvexProgram> {
        self.prefix_program(eps, None, terminal)
    }

    /// Feasibility program of a prefix, optionally with `x(0)` fixed.
    pub fn prefix_program(
        &self,
        eps: &[usize],
        x0: Option<&DVector<f64>>,
        terminal: bool,
    ) -> Result<ConvexProgram> {
        if eps.is_empty() || eps.len() > self.horizon || eps.iter().any(|&j| j == 0 || j > self.s()) {
            return Err(Error::OutOfRange(format!("invalid scenario prefix {eps:?}")));
        }
        self.build(eps, x0, terminal, false)
    }

    fn reduction(&self, len: usize, fixed_x0: bool, eq: &DMatrix<f64>) -> Arc<EqualityReduction> {
        let mut cache = self.reductions.lock().expect("reduction cache poisoned");
        cache
            .entry((len, fixed_x0))
            .or_insert_with(|| Arc::new(EqualityReduction::new(eq)))
            .clone()
    }

    /// Program over `(x(0..=L), v(0..L))` for the prefix `eps` of length `L`.
    fn build(
        &self,
        eps: &[usize],
        x0: Option<&DVector<f64>>,
        terminal: bool,
        objective: bool,
    ) -> Result<ConvexProgram> {
        let (n, m) = (self.model.n(), self.model.m());
        let len = eps.len();
        let nx = (len + 1) * n;
        let dim = nx + len * m;
        let xi = |k: usize| k * n;
        let vi = |k: usize| nx + k * m;

        let mut hessian = DMatrix::zeros(dim, dim);
        if objective {
            for k in 0..len {
                hessian
                    .view_mut((xi(k), xi(k)), (n, n))
                    .copy_from(&(&self.cost.q * 2.0));
                hessian
                    .view_mut((vi(k), vi(k)), (m, m))
                    .copy_from(&(&self.cost.r * 2.0));
            }
            hessian
                .view_mut((xi(len), xi(len)), (n, n))
                .copy_from(&(&self.terminal.p * 2.0));
        }

        let n_eq = len * n + if x0.is_some() { n } else { 0 };
        let mut eq_a = DMatrix::zeros(n_eq, dim);
        let mut eq_b = DVector::zeros(n_eq);
        for k in 0..len {
            let r = k * n;
            for i in 0..n {
                eq_a[(r + i, xi(k + 1) + i)] = 1.0;
            }
            eq_a.view_mut((r, xi(k)), (n, n))
                .copy_from(&(-self.model.a()));
            eq_a.view_mut((r, vi(k)), (n, m))
                .copy_from(&(-self.model.b()));
        }
        if let Some(x0) = x0 {
            let r = len * n;
            for i in 0..n {
                eq_a[(r + i, xi(0) + i)] = 1.0;
                eq_b[r + i] = x0[i];
            }
        }
        let reduction = self.reduction(len, x0.is_some(), &eq_a);

        let t = &self.terminal.t;
        let n_rows: usize = eps.iter().map(|&j| self.zrows[j - 1].0.nrows()).sum::<usize>()
            + if terminal { t.n_rows() } else { 0 };
        let mut ineq_a = DMatrix::zeros(n_rows, dim);
        let mut ineq_b = DVector::zeros(n_rows);
        let mut nonlinear = Vec::new();
        let mut r = 0;
        for (k, &j) in eps.iter().enumerate() {
            let (za, zb) = &self.zrows[j - 1];
            let rows = za.nrows();
            ineq_a
                .view_mut((r, xi(k)), (rows, n))
                .copy_from(&za.columns(0, n));
            ineq_a
                .view_mut((r, vi(k)), (rows, m))
                .copy_from(&za.columns(n, m));
            ineq_b.rows_mut(r, rows).copy_from(zb);
            r += rows;
            for (func, &ch) in self.nonlinear[j - 1].iter().zip(&self.channels[j - 1]) {
                let mut vars: Vec<usize> = (xi(k)..xi(k) + n).collect();
                vars.push(vi(k) + ch);
                nonlinear.push(NonlinearConstraint {
                    vars,
                    func: func.clone(),
                });
            }
        }
        if terminal {
            ineq_a
                .view_mut((r, xi(len)), (t.n_rows(), n))
                .copy_from(t.a());
            ineq_b.rows_mut(r, t.n_rows()).copy_from(t.b());
        }
        ConvexProgram::with_reduction(
            hessian,
            DVector::zeros(dim),
            0.0,
            eq_a,
            eq_b,
            reduction,
            ineq_a,
            ineq_b,
            nonlinear,
        )
    }

    fn prefix_feasible(
        &self,
        eps: &[usize],
        terminal: bool,
        warm: Option<&DVector<f64>>,
    ) -> Result<Option<DVector<f64>>> {
        let mut program = self.build(eps, None, terminal, false)?;
        if let Some(w) = warm {
            program = program.with_warm_start(w.clone());
        }
        let context = |e: Error| {
            let mut padded = eps.to_vec();
            padded.resize(self.horizon, 1);
            Error::Scenario {
                mu: encode(&padded, self.s()).unwrap_or(0),
                source: Box::new(e),
            }
        };
        match solver::phase_one(&program, &self.options).map_err(context)? {
            PhaseOne::Feasible { point, .. } => Ok(Some(point)),
            PhaseOne::Infeasible { .. } => Ok(None),
        }
    }

    /// Extends a feasible point of a prefix by one step with zero input.
    fn extend(&self, point: &DVector<f64>, len: usize) -> DVector<f64> {
        let (n, m) = (self.model.n(), self.model.m());
        let old_nx = (len + 1) * n;
        let new_nx = (len + 2) * n;
        let mut z = DVector::zeros(new_nx + (len + 1) * m);
        z.rows_mut(0, old_nx).copy_from(&point.rows(0, old_nx));
        let last = point.rows(len * n, n).into_owned();
        z.rows_mut(old_nx, n).copy_from(&(self.model.a() * last));
        z.rows_mut(new_nx, len * m)
            .copy_from(&point.rows(old_nx, len * m));
        z
    }

    /// Depth-first elimination of scenarios infeasible for every initial state.
    pub fn prune(&self) -> Result<PrunedTree> {
        let n = self.horizon;
        let mut stats = PruneStats::default();
        let mut feasible = Vec::new();
        let mut without = Vec::new();
        let mut eps = Vec::with_capacity(n);
        self.dfs(&mut eps, None, &mut stats, &mut feasible, &mut without)?;
        feasible.sort_unstable();
        without.sort_unstable();
        Ok(PrunedTree {
            horizon: n,
            s: self.s(),
            feasible,
            feasible_without_terminal: without,
            stats,
            config_hash: String::new(),
        })
    }

    fn dfs(
        &self,
        eps: &mut Vec<usize>,
        parent: Option<&DVector<f64>>,
        stats: &mut PruneStats,
        feasible: &mut Vec<u64>,
        without: &mut Vec<u64>,
    ) -> Result<()> {
        let s = self.s();
        let depth = eps.len();
        for j in 1..=s {
            eps.push(j);
            let warm = parent.map(|p| self.extend(p, depth));
            stats.nodes_visited += 1;
            let point = self.prefix_feasible(eps, false, warm.as_ref())?;
            match point {
                None => {
                    stats.subtrees_eliminated += 1;
                    stats.scenarios_eliminated += (s as u64).pow((self.horizon - depth - 1) as u32);
                }
                Some(point) if depth + 1 == self.horizon => {
                    stats.leaves_checked += 1;
                    let mu = encode(eps, s)?;
                    without.push(mu);
                    if self.prefix_feasible(eps, true, Some(&point))?.is_some() {
                        feasible.push(mu);
                    }
                }
                Some(point) => self.dfs(eps, Some(&point), stats, feasible, without)?,
            }
            eps.pop();
        }
        Ok(())
    }

    /// Scenarios of `pruned` none of whose proper prefixes is infeasible with
    /// `x(0) = x`, ascending. Scenarios sharing a prefix of length `L` agree
    /// on `(mu - 1) mod s^L`, which indexes the allowed prefixes.
    pub fn candidates_at(&self, x: &DVector<f64>, pruned: &PrunedTree) -> Result<Vec<u64>> {
        let s = self.s() as u64;
        let total = s.pow(self.horizon as u32);
        let allowed: Option<HashSet<(usize, u64)>> = (pruned.feasible.len() as u64 != total).then(|| {
            let mut set = HashSet::new();
            for &mu in &pruned.feasible {
                let mut modulus = 1;
                for len in 1..self.horizon {
                    modulus *= s;
                    set.insert((len, (mu - 1) % modulus));
                }
            }
            set
        });
        let mut out = Vec::new();
        let mut eps = Vec::with_capacity(self.horizon);
        self.online_dfs(x, &mut eps, 0, 1, None, allowed.as_ref(), pruned, &mut out)?;
        out.sort_unstable();
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn online_dfs(
        &self,
        x: &DVector<f64>,
        eps: &mut Vec<usize>,
        code: u64,
        weight: u64,
        parent: Option<&DVector<f64>>,
        allowed: Option<&HashSet<(usize, u64)>>,
        pruned: &PrunedTree,
        out: &mut Vec<u64>,
    ) -> Result<()> {
        let depth = eps.len();
        for j in 1..=self.s() {
            let code = code + (j as u64 - 1) * weight;
            eps.push(j);
            if depth + 1 == self.horizon {
                let mu = code + 1;
                if allowed.is_none() || pruned.feasible.binary_search(&mu).is_ok() {
                    out.push(mu);
                }
            } else if allowed.is_none_or(|a| a.contains(&(depth + 1, code))) {
                let mut program = self.build(eps, Some(x), false, false)?;
                if let Some(p) = parent {
                    program = program.with_warm_start(self.extend(p, depth));
                }
                let phase = solver::phase_one(&program, &self.options).map_err(|e| {
                    let mut padded = eps.clone();
                    padded.resize(self.horizon, 1);
                    Error::Scenario {
                        mu: encode(&padded, self.s()).unwrap_or(0),
                        source: Box::new(e),
                    }
                })?;
                if let PhaseOne::Feasible { point, .. } = phase {
                    self.online_dfs(x, eps, code, weight * self.s() as u64, Some(&point), allowed, pruned, out)?;
                }
            }
            eps.pop();
        }
        Ok(())
    }

    /// Solves every scenario of `pruned` at `x` and returns the best one,
    /// ties going to the smallest index.
    pub fn solve_state(&self, x: &DVector<f64>, pruned: &PrunedTree) -> Result<SolveResult> {
        let violation = self.universe.state_set.max_violation(x);
        if violation > 1e-7 {
            return Err(Error::StateOutsideX(violation));
        }
        if pruned.horizon != self.horizon || pruned.s != self.s() {
            return Err(Error::Config(
                "pruned tree was computed for another horizon or partition count".into(),
            ));
        }
        let candidates = if pruned.feasible.len() > ONLINE_PRUNING_MIN {
            self.candidates_at(x, pruned)?
        } else {
            pruned.feasible.clone()
        };
        let outcomes: Vec<(u64, solver::SolveOutcome)> = candidates
            .par_iter()
            .map(|&mu| -> Result<_> {
                let program = self.assemble(mu, Some(x))?;
                Ok((mu, solver::solve(&program, &self.options)))
            })
            .collect::<Result<_>>()?;
        for (mu, out) in &outcomes {
            if matches!(out.status, SolveStatus::MaxIter | SolveStatus::NumericalFailure) {
                let source = match out.status {
                    SolveStatus::MaxIter => Error::MaxIter(self.options.max_iter),
                    _ => Error::NumericalFailure("interior-point iterates became non-finite".into()),
                };
                return Err(Error::Scenario {
                    mu: *mu,
                    source: Box::new(source),
                });
            }
        }
        let scenarios: Vec<ScenarioValue> = outcomes
            .iter()
            .map(|(mu, o)| ScenarioValue {
                mu: *mu,
                status: o.status,
                value: o.value,
            })
            .collect();
        let best_value = outcomes
            .iter()
            .filter(|(_, o)| o.status == SolveStatus::Optimal)
            .map(|(_, o)| o.value)
            .fold(f64::INFINITY, f64::min);
        let tie_tol = 1e-9 * (1.0 + best_value.abs());
        let best = outcomes
            .iter()
            .filter(|(_, o)| o.status == SolveStatus::Optimal && o.value <= best_value + tie_tol)
            .min_by_key(|(mu, _)| *mu);
        let Some((mu, out)) = best else {
            return Ok(SolveResult {
                status: ResultStatus::Infeasible,
                value: f64::INFINITY,
                mu_star: None,
                eps_star: vec![],
                states: vec![],
                inputs: vec![],
                v0: vec![],
                u0: vec![],
                scenarios,
            });
        };
        let (n, m) = (self.model.n(), self.model.m());
        let nx = (self.horizon + 1) * n;
        let states: Vec<Vec<f64>> = (0..=self.horizon)
            .map(|k| out.point.rows(k * n, n).iter().copied().collect())
            .collect();
        let inputs: Vec<Vec<f64>> = (0..self.horizon)
            .map(|k| out.point.rows(nx + k * m, m).iter().copied().collect())
            .collect();
        let v0 = DVector::from_vec(inputs[0].clone());
        let u0 = recover_input(&self.model, &self.universe.input_box, x, &v0)
            .map_err(|e| Error::Scenario {
                mu: *mu,
                source: Box::new(e),
            })?;
        Ok(SolveResult {
            status: ResultStatus::Optimal,
            value: out.value,
            mu_star: Some(*mu),
            eps_star: decode(*mu, self.horizon, self.s())?,
            states,
            inputs,
            v0: v0.iter().copied().collect(),
            u0: u0.iter().copied().collect(),
            scenarios,
        })
    }
}
