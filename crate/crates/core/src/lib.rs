//! Exact NMPC for input-affine systems `x+ = Ax + B G(x) u` with diagonal
//! `G`, by splitting the horizon into convex scenario subproblems.

pub mod config;
pub mod cost;
pub mod error;
pub mod examples;
pub mod lp;
pub mod model;
pub mod network;
pub mod polytope;
pub mod scenario;
pub mod simulate;
pub mod solver;
pub mod terminal;
pub mod transform;

pub use config::{LoadedConfig, RunConfig};
pub use cost::QuadraticStageCost;
pub use error::{Error, Result};
pub use examples::{Benchmark, EngineOptions};
pub use model::{
    CertificationPolicy, ConstraintUniverse, InputBox, NonlinearityAtom, Partition, SignCase,
    SystemModel, ValidationOptions, ValidationReport,
};
pub use polytope::Polyhedron;
pub use scenario::{PrunedTree, ScenarioEngine, SolveResult};
pub use simulate::{ClosedLoop, SimulationOptions, StepRecord, Trajectory};
pub use solver::{SolveStatus, SolverOptions};
pub use terminal::{TerminalIngredients, TerminalOptions};
