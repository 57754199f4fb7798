//! Shared fixtures for the benchmarks.

use convex_nmpc::examples::example1;
use convex_nmpc::network::example2;
use convex_nmpc::{EngineOptions, PrunedTree, ScenarioEngine};

pub fn example1_engine() -> ScenarioEngine {
    example1().into_engine(&EngineOptions::default()).expect("example 1 builds").0
}

pub fn example1_pruned() -> (ScenarioEngine, PrunedTree) {
    let engine = example1_engine();
    let tree = engine.prune().expect("prune");
    (engine, tree)
}

pub fn example2_engine() -> ScenarioEngine {
    let (_, bench) = example2(0).expect("example 2 builds");
    bench.into_engine(&EngineOptions::default()).expect("example 2 engine").0
}
