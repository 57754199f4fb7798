mod common;

use common::rng;
use convex_nmpc::cost::{stage_cost_u, stage_cost_v, terminal_cost};
use convex_nmpc::examples::example1;
use convex_nmpc::transform::forward_input;
use convex_nmpc::{EngineOptions, QuadraticStageCost};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #[test]
    fn pull_back_equals_lifted_cost(x in prop::collection::vec(-2.0f64..2.0, 2), u in prop::collection::vec(-1.0f64..1.0, 2)) {
        let bench = example1();
        let cost = QuadraticStageCost::new(bench.q.clone(), bench.r.clone()).unwrap();
        let x = DVector::from_vec(x);
        let u = DVector::from_vec(u);
        let v = forward_input(&bench.model, &x, &u);
        let lhs = stage_cost_u(&bench.model, &cost, &x, &u);
        prop_assert!((lhs - stage_cost_v(&cost, &x, &v)).abs() <= 1e-14 * (1.0 + lhs));
        let manual = 0.05 * x.norm_squared() + 0.01 * v.norm_squared();
        prop_assert!((lhs - manual).abs() <= 1e-14 * (1.0 + manual));
        prop_assert!(lhs >= 0.0);
    }
}

#[test]
fn weights_must_be_symmetric_and_definite() {
    assert!(QuadraticStageCost::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1)).is_ok());
    assert!(QuadraticStageCost::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), DMatrix::identity(1, 1)).is_err());
    assert!(QuadraticStageCost::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), DMatrix::identity(1, 1)).is_err());
    assert!(QuadraticStageCost::new(DMatrix::identity(2, 2), DMatrix::zeros(1, 1)).is_err());
}

#[test]
fn reported_value_is_the_sum_of_stage_and_terminal_costs() {
    let (engine, _) = example1().into_engine(&EngineOptions::default()).unwrap();
    let tree = engine.prune().unwrap();
    let mut r = rng(6);
    let mut checked = 0;
    while checked < 5 {
        let x = DVector::from_fn(2, |_, _| r.gen_range(-1.5..1.5));
        let res = engine.solve_state(&x, &tree).unwrap();
        if !res.is_feasible() {
            continue;
        }
        let mut total = 0.0;
        for k in 0..engine.horizon() {
            let xk = DVector::from_vec(res.states[k].clone());
            let vk = DVector::from_vec(res.inputs[k].clone());
            total += stage_cost_v(engine.cost(), &xk, &vk);
        }
        let xn = DVector::from_vec(res.states[engine.horizon()].clone());
        total += terminal_cost(&engine.terminal().p, &xn);
        assert!((total - res.value).abs() <= 1e-9 * (1.0 + res.value), "{total} vs {}", res.value);
        checked += 1;
    }
}
