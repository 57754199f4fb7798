//! Built-in benchmark problems.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::cost::QuadraticStageCost;
use crate::error::{Error, Result};
use crate::model::{
    CertificationPolicy, ConstraintUniverse, InputBox, NonlinearityAtom, Partition, SignCase,
    SystemModel, ValidationOptions, ValidationReport,
};
use crate::polytope::Polyhedron;
use crate::scenario::ScenarioEngine;
use crate::solver::SolverOptions;
use crate::terminal::{TerminalIngredients, TerminalOptions};
use crate::transform::build_zj;

/// A complete problem instance: dynamics, constraints, stage weights and horizon.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub model: SystemModel,
    pub universe: ConstraintUniverse,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub horizon: usize,
}

/// The two-state, two-input example with a quadratic and a sinusoidal gain.
///
/// `g1` is nonpositive on the whole box but indefinite, so the universe uses
/// the sign-only certification policy.
pub fn example1() -> Benchmark {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]);
    let b = DMatrix::from_row_slice(2, 2, &[0.01, -0.05, 0.05, -0.01]);
    let g1 = NonlinearityAtom::quadratic(
        DMatrix::from_row_slice(2, 2, &[3.0 / 64.0, -1.0 / 16.0, -1.0 / 16.0, 3.0 / 64.0]),
        DVector::zeros(2),
        -2.0,
    )
    .expect("symmetric");
    let g2 = NonlinearityAtom::sinusoid(4.0, DVector::from_vec(vec![3.0 * PI / 8.0, -3.0 * PI / 8.0]), 0.0);
    let model = SystemModel::new(a, b, vec![g1, g2]).expect("consistent shapes");

    let x_box = Polyhedron::from_box(&DVector::from_element(2, -2.0), &DVector::from_element(2, 2.0));
    let diff = DVector::from_vec(vec![1.0, -1.0]);
    let slab = |lo: f64, hi: f64| {
        x_box
            .with_row(&diff, hi)
            .with_row(&(-&diff), -lo)
    };
    let partitions = vec![
        Partition {
            polyhedron: slab(-4.0 / 3.0, 4.0 / 3.0),
            sign_cases: vec![SignCase::NonposConvex, SignCase::NonnegConcave],
        },
        Partition {
            polyhedron: slab(-4.0, -4.0 / 3.0),
            sign_cases: vec![SignCase::NonposConvex, SignCase::NonposConvex],
        },
        Partition {
            polyhedron: slab(4.0 / 3.0, 4.0),
            sign_cases: vec![SignCase::NonposConvex, SignCase::NonposConvex],
        },
    ];
    let universe = ConstraintUniverse::new(
        x_box,
        partitions,
        InputBox::symmetric(2, 1.0),
        CertificationPolicy::SignOnly,
    );
    Benchmark {
        model,
        universe,
        q: DMatrix::identity(2, 2) * 0.05,
        r: DMatrix::identity(2, 2) * 0.01,
        horizon: 15,
    }
}

/// Options for turning a [`Benchmark`] into a ready-to-use [`ScenarioEngine`].
#[derive(Debug, Clone, Default)]
pub struct EngineOptions {
    pub validation: ValidationOptions,
    pub terminal: TerminalOptions,
    pub solver: SolverOptions,
}

impl Benchmark {
    /// Certifies the partitions, computes the terminal ingredients and builds
    /// the scenario engine. Fails when validation does not pass.
    pub fn into_engine(mut self, opts: &EngineOptions) -> Result<(ScenarioEngine, ValidationReport)> {
        let report = self.universe.certify(&self.model, &opts.validation);
        if !report.passed {
            let first = report
                .failures
                .first()
                .map(|f| f.message.clone())
                .unwrap_or_default();
            return Err(Error::InvalidPartition(first));
        }
        let cost = QuadraticStageCost::new(self.q, self.r)?;
        let z1 = build_zj(&self.universe, &self.model, 1)?;
        let terminal = TerminalIngredients::compute(&self.model, &cost, &z1, &opts.terminal)?;
        let engine = ScenarioEngine::new(
            self.model,
            self.universe,
            cost,
            terminal,
            self.horizon,
            opts.solver.clone(),
        )?;
        Ok((engine, report))
    }
}
