//! Decomposition optimum against dense grid search on seeded toy instances.

use convex_nmpc::EngineOptions;
use nalgebra::DVector;

use super::{rng, sample_in, toy_instance, Plant};

#[derive(Debug, Clone)]
pub struct ExactnessCase {
    pub seed: u64,
    /// `(n, m, N)`.
    pub shape: (usize, usize, usize),
    pub value: f64,
    pub oracle: f64,
    /// `|value - oracle| / max(|oracle|, 1e-3)`.
    pub rel_err: f64,
    /// `‖x(1) - (A x0 + B G(x0) u*(0))‖∞` against the predicted `x(1)`.
    pub next_err: f64,
    pub u0_in_box: bool,
}

/// Grid points per input dimension so a full grid stays around a few million rollouts.
fn grid_points(dims: usize) -> usize {
    match dims {
        1 => 2001,
        2 => 1001,
        3 => 201,
        _ => 41,
    }
}

/// Checks up to `target` instances drawn from 60 seeds. Instances whose
/// engine cannot be built or that have no feasible sampled state are skipped.
pub fn run(target: usize) -> Vec<ExactnessCase> {
    let shapes = [(1, 1, 3), (2, 1, 3), (2, 1, 2), (2, 2, 1), (1, 2, 2), (2, 2, 2)];
    let mut cases = Vec::new();
    for seed in 0..60u64 {
        if cases.len() >= target {
            break;
        }
        let (n, m, horizon) = shapes[seed as usize % shapes.len()];
        let Ok((engine, _)) = toy_instance(100 + seed, n, m, horizon).into_engine(&EngineOptions::default()) else {
            continue;
        };
        let tree = engine.prune().unwrap();
        let term = engine.terminal();
        let plant = Plant {
            model: engine.model(),
            state_set: &engine.universe().state_set,
            input_box: &engine.universe().input_box,
            q: &engine.cost().q,
            r: &engine.cost().r,
            p: &term.p,
            terminal: &term.t,
            horizon,
        };
        let mut r = rng(seed);
        let mut start = None;
        for _ in 0..50 {
            let x = sample_in(&engine.universe().state_set, &mut r);
            if x.amax() < 0.2 {
                continue;
            }
            let res = engine.solve_state(&x, &tree).unwrap();
            if res.is_feasible() {
                start = Some((x, res));
                break;
            }
        }
        let Some((x0, res)) = start else { continue };
        let oracle = plant
            .grid_optimum(&x0, grid_points(m * horizon))
            .map_or(f64::INFINITY, |(v, _)| v);
        let u0 = DVector::from_vec(res.u0.clone());
        let next = engine.model().step(&x0, &u0);
        cases.push(ExactnessCase {
            seed,
            shape: (n, m, horizon),
            value: res.value,
            oracle,
            rel_err: (res.value - oracle).abs() / oracle.abs().max(1e-3),
            next_err: (next - DVector::from_vec(res.states[1].clone())).amax(),
            u0_in_box: engine.universe().input_box.contains(&u0, 1e-9),
        });
    }
    cases
}
