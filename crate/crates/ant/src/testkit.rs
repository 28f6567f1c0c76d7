//! Shared fixtures for unit tests: tiny module specs, models, and synthetic
//! datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Targets};
use crate::model::{initial_root_chain, AntModel};
use crate::module::{build_module, ModuleKind, ModuleSpec, TaskKind};
use crate::tensor::Tensor;
use crate::train::GrowthSpecs;

pub const CLS3: TaskKind = TaskKind::Classification { classes: 3 };
pub const REG2: TaskKind = TaskKind::Regression { dim: 2 };

pub fn spec(kind: ModuleKind, recipe: &str) -> ModuleSpec {
    ModuleSpec::parse(kind, recipe, 0).unwrap()
}

pub fn growth_specs() -> GrowthSpecs {
    GrowthSpecs {
        router: spec(ModuleKind::Router, "fc3,relu,fc1,sigmoid"),
        transformer: spec(ModuleKind::Transformer, "fc4,relu"),
        solver: spec(ModuleKind::Solver, "lc"),
    }
}

/// Single-leaf model with an fc4+relu root chain.
pub fn root_model(task: TaskKind, input_dim: usize, seed: u64) -> AntModel {
    let t = spec(ModuleKind::Transformer, "fc4,relu");
    let chain = initial_root_chain(&t, &[input_dim], task, seed).unwrap();
    let head = match task {
        TaskKind::Classification { .. } => "lc",
        TaskKind::Regression { .. } => "lr",
    };
    let out = chain.last().unwrap().output_shape.clone();
    let solver =
        build_module(&spec(ModuleKind::Solver, head), &out, task, seed.wrapping_add(99)).unwrap();
    AntModel::new_root(task, vec![input_dim], chain, solver).unwrap()
}

/// Single-leaf model whose root chain is the identity, so the solver sees the
/// raw input.
pub fn identity_model(task: TaskKind, input_dim: usize, seed: u64) -> AntModel {
    let chain =
        initial_root_chain(&ModuleSpec::identity_transformer(), &[input_dim], task, 0).unwrap();
    let head = match task {
        TaskKind::Classification { .. } => "lc",
        TaskKind::Regression { .. } => "lr",
    };
    let solver =
        build_module(&spec(ModuleKind::Solver, head), &[input_dim], task, seed).unwrap();
    AntModel::new_root(task, vec![input_dim], chain, solver).unwrap()
}

/// Classification samples with a weak class-dependent shift.
pub fn cls_data(n: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let y = rng.gen_range(0..classes);
        let x: Vec<f64> = (0..dim)
            .map(|d| rng.gen::<f64>() - 0.5 + if d % classes == y { 1.0 } else { 0.0 })
            .collect();
        xs.push(Tensor { shape: vec![dim], data: x });
        ys.push(y);
    }
    Dataset::new(xs, Targets::Classes(ys)).unwrap()
}

/// Regression samples with targets linear in the inputs.
pub fn reg_data(n: usize, dim: usize, odim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..odim).map(|j| x[j % dim] * 2.0).collect();
        xs.push(Tensor { shape: vec![dim], data: x });
        ys.push(Tensor { shape: vec![odim], data: y });
    }
    Dataset::new(xs, Targets::Values(ys)).unwrap()
}

/// One-dimensional two-class problem that a single linear solver cannot fit:
/// class 1 outside the unit interval, class 0 inside.
pub fn band_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let x = rng.gen::<f64>() * 4.0 - 2.0;
        ys.push(if x.abs() > 1.0 { 1usize } else { 0 });
        xs.push(Tensor { shape: vec![1], data: vec![x] });
    }
    Dataset::new(xs, Targets::Classes(ys)).unwrap()
}
