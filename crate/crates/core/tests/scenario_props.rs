mod common;

use common::{rng, sample_in, toy_instance};
use convex_nmpc::scenario::{decode, encode};
use convex_nmpc::{LoadedConfig, PrunedTree, ScenarioEngine};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn toy_engine() -> ScenarioEngine {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json");
    let loaded = LoadedConfig::load(std::path::Path::new(path)).unwrap();
    let built = loaded.build().unwrap();
    built
        .benchmark
        .into_engine(&loaded.config.engine_options())
        .unwrap()
        .0
}

proptest! {
    #[test]
    fn scenario_index_round_trip(s in 1usize..5, eps_seed in prop::collection::vec(0usize..1000, 1..8)) {
        let eps: Vec<usize> = eps_seed.iter().map(|e| e % s + 1).collect();
        let mu = encode(&eps, s).unwrap();
        prop_assert!(mu >= 1 && mu <= (s as u64).pow(eps.len() as u32));
        prop_assert_eq!(decode(mu, eps.len(), s).unwrap(), eps);
    }

    #[test]
    fn decode_then_encode(s in 1usize..4, n in 1usize..7, raw in 0u64..u64::MAX) {
        let total = (s as u64).pow(n as u32);
        let mu = raw % total + 1;
        prop_assert_eq!(encode(&decode(mu, n, s).unwrap(), s).unwrap(), mu);
    }
}

#[test]
fn index_rejects_out_of_range() {
    assert!(decode(0, 3, 2).is_err());
    assert!(decode(9, 3, 2).is_err());
    assert!(encode(&[1, 3], 2).is_err());
    assert!(encode(&[0], 2).is_err());
}

/// Brute-force prefix feasibility of the toy: grid over `x0` and both inputs.
fn toy_brute_force(engine: &ScenarioEngine, terminal: bool) -> Vec<u64> {
    let u = engine.universe();
    let t = &engine.terminal().t;
    let g = |x: f64| x + 0.5;
    let pts = 801;
    let grid = |lo: f64, hi: f64| (0..pts).map(move |i| lo + (hi - lo) * i as f64 / (pts - 1) as f64);
    let mut out = Vec::new();
    for e0 in 1..=2 {
        for e1 in 1..=2 {
            let in_part = |j: usize, x: f64| u.partitions[j - 1].polyhedron.max_violation(&DVector::from_element(1, x)) <= 1e-12;
            let found = grid(-1.0, 1.0).filter(|&x0| in_part(e0, x0)).any(|x0| {
                grid(-1.0, 1.0).any(|u0| {
                    let x1 = x0 + g(x0) * u0;
                    in_part(e1, x1)
                        && (!terminal
                            || grid(-1.0, 1.0).any(|u1| {
                                t.max_violation(&DVector::from_element(1, x1 + g(x1) * u1)) <= 1e-12
                            }))
                })
            });
            if found {
                out.push(encode(&[e0, e1], 2).unwrap());
            }
        }
    }
    out.sort_unstable();
    out
}

#[test]
fn toy_prune_matches_enumeration() {
    let engine = toy_engine();
    let tree = engine.prune().unwrap();
    assert_eq!(tree.feasible, toy_brute_force(&engine, true));
    assert_eq!(tree.feasible_without_terminal, toy_brute_force(&engine, false));
    assert_eq!(tree.feasible.len(), 1);
    assert_eq!(tree.feasible_without_terminal.len(), 4);
}

#[test]
fn prune_accounting() {
    for engine in [toy_engine(), toy_instance(3, 2, 1, 3).into_engine(&Default::default()).unwrap().0] {
        let tree = engine.prune().unwrap();
        let total = (engine.s() as u64).pow(engine.horizon() as u32);
        let st = &tree.stats;
        assert_eq!(st.scenarios_eliminated + st.leaves_checked, total);
        assert_eq!(tree.feasible_without_terminal.len() as u64, st.leaves_checked);
        assert!(tree.feasible.iter().all(|mu| tree.feasible_without_terminal.contains(mu)));
        assert!(tree.feasible.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn pruning_does_not_change_the_optimum() {
    let engine = toy_instance(5, 2, 1, 3).into_engine(&Default::default()).unwrap().0;
    let tree = engine.prune().unwrap();
    let all = PrunedTree::unpruned(engine.horizon(), engine.s()).unwrap();
    let mut r = rng(11);
    for _ in 0..10 {
        let x = sample_in(&engine.universe().state_set, &mut r);
        let a = engine.solve_state(&x, &tree).unwrap();
        let b = engine.solve_state(&x, &all).unwrap();
        assert_eq!(a.is_feasible(), b.is_feasible());
        if a.is_feasible() {
            assert!((a.value - b.value).abs() <= 1e-7 * (1.0 + b.value), "{} vs {}", a.value, b.value);
        }
    }
}

#[test]
fn ties_go_to_smallest_index() {
    // Two copies of the same partition make every scenario the same program.
    let mut bench = toy_instance(9, 2, 1, 2);
    let p1 = bench.universe.partitions[0].clone();
    bench.universe.state_set = p1.polyhedron.clone();
    bench.universe.partitions = vec![p1.clone(), p1];
    let (engine, _) = bench.into_engine(&Default::default()).unwrap();
    let all = PrunedTree::unpruned(2, 2).unwrap();
    let mut r = rng(4);
    let mut solved = 0;
    for _ in 0..20 {
        let x = common::sample_star(&engine.terminal().t, &mut r);
        if !engine.universe().state_set.contains(&x, 0.0) {
            continue;
        }
        let res = engine.solve_state(&x, &all).unwrap();
        assert!(res.is_feasible());
        assert_eq!(res.scenarios.len(), 4);
        for sv in &res.scenarios {
            assert!((sv.value - res.value).abs() <= 1e-12 * (1.0 + res.value));
        }
        assert_eq!(res.mu_star, Some(1));
        solved += 1;
    }
    assert!(solved > 0);
}

#[test]
fn overlap_states_are_admitted_by_each_containing_partition() {
    let engine = toy_engine();
    let x = DVector::from_element(1, -0.5);
    for j in engine.universe().partitions_containing(&x, 1e-12) {
        let zj = &engine.zsets()[j - 1];
        assert!(zj.contains(&x, &DVector::zeros(1), 1e-12));
    }
}

#[test]
fn value_bounded_by_terminal_cost_inside_terminal_set() {
    let (engine, _) = toy_instance(7, 2, 1, 2).into_engine(&Default::default()).unwrap();
    let tree = engine.prune().unwrap();
    let term = engine.terminal();
    let mut r = rng(2);
    let mut checked = 0;
    while checked < 20 {
        let x = common::sample_star(&term.t, &mut r);
        if !engine.universe().state_set.contains(&x, 0.0) {
            continue;
        }
        let res = engine.solve_state(&x, &tree).unwrap();
        assert!(res.is_feasible());
        let bound = x.dot(&(&term.p * &x));
        assert!(res.value <= bound + 1e-6 * (1.0 + bound), "{} > {bound}", res.value);
        checked += 1;
    }
}

#[test]
fn decomposition_is_exact_on_random_toys() {
    let cases = common::exactness::run(24);
    assert!(cases.len() >= 20, "only {} instances checked", cases.len());
    for c in &cases {
        assert!(c.rel_err <= 1e-3, "{c:?}");
        // The grid only visits feasible input sequences, so it can never beat the optimum.
        assert!(c.value <= c.oracle + 1e-7 * (1.0 + c.oracle), "{c:?}");
        assert!(c.next_err <= 1e-6, "{c:?}");
        assert!(c.u0_in_box, "{c:?}");
    }
}

#[test]
fn infeasible_state_reports_infeasible() {
    let engine = toy_engine();
    let tree = engine.prune().unwrap();
    // From -1 the reachable set after two steps stays below the terminal set.
    let res = engine.solve_state(&DVector::from_element(1, -1.0), &tree).unwrap();
    assert!(!res.is_feasible());
    assert!(res.value.is_infinite());
    let mut r = rng(0);
    let x: f64 = r.gen_range(1.5..3.0);
    assert!(engine.solve_state(&DVector::from_element(1, x), &tree).is_err());
}
