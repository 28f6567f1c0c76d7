//! Evaluation: metrics over both inference modes, routing diagnostics,
//! ensembles, report-driven pruning, and DOT export of the architecture.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::model::{AntModel, NodeId};
use crate::module::{PredictiveDistribution, TaskKind};
use crate::tensor::Tensor;
use crate::train::derive_seed;
use crate::{AntError, Result};

/// Leaves with empirical visit mass below this fraction are reported as
/// prunable.
pub const PRUNE_REPORT_THRESHOLD: f64 = 1e-3;

/// Inference mode selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    Multi,
    Single,
    Sampled,
    LeastLikely,
}

impl std::str::FromStr for EvalMode {
    type Err = AntError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(EvalMode::Multi),
            "single" => Ok(EvalMode::Single),
            "sampled" => Ok(EvalMode::Sampled),
            "least-likely" => Ok(EvalMode::LeastLikely),
            _ => Err(AntError::Config(format!(
                "unknown mode '{}' (expected multi, single, sampled, or least-likely)",
                s
            ))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EvalMode::Multi => "multi",
            EvalMode::Single => "single",
            EvalMode::Sampled => "sampled",
            EvalMode::LeastLikely => "least-likely",
        };
        f.write_str(s)
    }
}

/// Evaluation summary; `error_*` is percent misclassified for classification
/// and mean squared error (over samples and target dimensions) for
/// regression.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub num_samples: usize,
    pub error_multi: f64,
    pub error_single: f64,
    pub params_multi: u64,
    pub params_single: f64,
    pub flops_multi: u64,
    pub flops_single: f64,
    pub num_leaves: usize,
    /// Mean leaf-assignment mass per leaf, in leaf order; sums to 1.
    pub leaf_visit: Vec<(NodeId, f64)>,
    /// Router outputs bucketed into [0,0.1), ..., [0.9,1].
    pub polarization: [u64; 10],
    /// Leaves with visit mass below `PRUNE_REPORT_THRESHOLD`.
    pub prunable: Vec<NodeId>,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = match self.task {
            TaskKind::Classification { .. } => "%",
            TaskKind::Regression { .. } => " mse",
        };
        writeln!(f, "task = {}", self.task)?;
        writeln!(f, "samples = {}", self.num_samples)?;
        writeln!(f, "error_multi = {:.6}{}", self.error_multi, unit)?;
        writeln!(f, "error_single = {:.6}{}", self.error_single, unit)?;
        writeln!(f, "params_multi = {}", self.params_multi)?;
        writeln!(f, "params_single = {:.1}", self.params_single)?;
        writeln!(f, "flops_multi = {}", self.flops_multi)?;
        writeln!(f, "flops_single = {:.1}", self.flops_single)?;
        writeln!(f, "num_leaves = {}", self.num_leaves)?;
        write!(f, "leaf_visit =")?;
        for (n, p) in &self.leaf_visit {
            write!(f, " n{}:{:.6}", n, p)?;
        }
        writeln!(f)?;
        write!(f, "polarization =")?;
        for b in &self.polarization {
            write!(f, " {}", b)?;
        }
        writeln!(f)?;
        write!(f, "prunable =")?;
        if self.prunable.is_empty() {
            write!(f, " none")?;
        }
        for n in &self.prunable {
            write!(f, " n{}", n)?;
        }
        writeln!(f)
    }
}

fn check_targets(model: &AntModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(AntError::Data("empty evaluation dataset".into()));
    }
    if data.input_shape != model.input_shape {
        return Err(AntError::Data(format!(
            "dataset samples are {:?} but the model expects {:?}",
            data.input_shape, model.input_shape
        )));
    }
    match (model.task, &data.targets) {
        (TaskKind::Classification { classes }, Targets::Classes(ys)) => {
            if let Some(&y) = ys.iter().find(|&&y| y >= classes) {
                return Err(AntError::Data(format!(
                    "target class {} out of range for {} classes",
                    y, classes
                )));
            }
            Ok(())
        }
        (TaskKind::Regression { dim }, Targets::Values(ys)) => {
            if let Some(y) = ys.iter().find(|y| y.shape != [dim]) {
                return Err(AntError::Data(format!(
                    "target shape {:?} does not match model output [{}]",
                    y.shape, dim
                )));
            }
            Ok(())
        }
        (TaskKind::Classification { .. }, Targets::Values(_)) => {
            Err(AntError::Data("value targets given to a classification model".into()))
        }
        (TaskKind::Regression { .. }, Targets::Classes(_)) => {
            Err(AntError::Data("class targets given to a regression model".into()))
        }
    }
}

fn argmax_row(data: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = j;
        }
    }
    best
}

/// Per-prediction error contribution: 1/0 mismatch for classification, the
/// dimension-averaged squared error for regression.
fn sample_error(task: TaskKind, row: &[f64], targets: &Targets, i: usize) -> f64 {
    match (task, targets) {
        (TaskKind::Classification { .. }, Targets::Classes(ys)) => {
            (argmax_row(row) != ys[i]) as u8 as f64
        }
        (TaskKind::Regression { dim }, Targets::Values(ys)) => {
            let se: f64 = row.iter().zip(&ys[i].data).map(|(m, y)| (m - y) * (m - y)).sum();
            se / dim as f64
        }
        _ => unreachable!("targets checked on entry"),
    }
}

fn finish_error(task: TaskKind, sum: f64, n: usize) -> f64 {
    match task {
        TaskKind::Classification { .. } => 100.0 * sum / n as f64,
        TaskKind::Regression { .. } => sum / n as f64,
    }
}

/// Evaluate both inference modes and the routing diagnostics in one pass.
pub fn evaluate(model: &AntModel, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    check_targets(model, data)?;
    let n = data.len();
    let k = model.task.output_dim();
    let mut err_multi = 0.0;
    let mut err_single = 0.0;
    let mut leaf_mass: BTreeMap<NodeId, f64> = model.leaves().into_iter().map(|l| (l, 0.0)).collect();
    let mut greedy_counts: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut polarization = [0u64; 10];
    let mut seen = 0usize;
    for (x, t) in data.chunks(batch_size) {
        let b = x.shape[0];
        let ev = model.eval_batch(&x)?;
        let mix = model.mixture_batch(&ev);
        let greedy = model.greedy_leaves(&ev);
        for i in 0..b {
            err_multi += sample_error(model.task, &mix.data[i * k..(i + 1) * k], &t, i);
            let leaf = greedy[i];
            let dist = &ev.leaf_dists[&leaf];
            err_single += sample_error(model.task, &dist.data[i * k..(i + 1) * k], &t, i);
            *greedy_counts.entry(leaf).or_insert(0) += 1;
        }
        for (c, &leaf) in ev.leaves.iter().enumerate() {
            let mass: f64 = (0..b).map(|i| ev.pi.data[i * ev.leaves.len() + c]).sum();
            *leaf_mass.get_mut(&leaf).expect("every leaf has a mass slot") += mass;
        }
        for probs in ev.router_probs.values() {
            for &p in probs {
                let bucket = ((p * 10.0) as usize).min(9);
                polarization[bucket] += 1;
            }
        }
        seen += b;
    }
    debug_assert_eq!(seen, n);
    let leaf_visit: Vec<(NodeId, f64)> =
        leaf_mass.iter().map(|(&l, &m)| (l, m / n as f64)).collect();
    let prunable: Vec<NodeId> = leaf_visit
        .iter()
        .filter(|(_, p)| *p < PRUNE_REPORT_THRESHOLD)
        .map(|(l, _)| *l)
        .collect();
    // Single-path costs from the observed greedy leaf frequencies.
    let mut params_single = 0.0;
    let mut flops_single = 0.0;
    for (&leaf, &c) in &greedy_counts {
        params_single += c as f64 * model.path_params(leaf) as f64;
        flops_single += c as f64 * model.path_flops(leaf) as f64;
    }
    params_single /= n as f64;
    flops_single /= n as f64;
    Ok(MetricsReport {
        task: model.task,
        num_samples: n,
        error_multi: finish_error(model.task, err_multi, n),
        error_single: finish_error(model.task, err_single, n),
        params_multi: model.total_params(),
        params_single,
        flops_multi: model.total_flops(),
        flops_single,
        num_leaves: model.num_leaves(),
        leaf_visit,
        polarization,
        prunable,
    })
}

/// Error under Bernoulli-sampled routing with per-sample seeds derived from
/// `seed`; deterministic for a fixed seed.
pub fn sampled_error(model: &AntModel, data: &Dataset, seed: u64, batch_size: usize) -> Result<f64> {
    check_targets(model, data)?;
    let k = model.task.output_dim();
    let mut err = 0.0;
    let mut global = 0u64;
    for (x, t) in data.chunks(batch_size) {
        let b = x.shape[0];
        let ev = model.eval_batch(&x)?;
        for i in 0..b {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sample", global));
            global += 1;
            let mut node = model.root();
            while let Some((left, right)) = model.children(node) {
                let p = ev.router_probs[&node][i];
                let u: f64 = rng.gen();
                node = if u < p { left } else { right };
            }
            let dist = &ev.leaf_dists[&node];
            err += sample_error(model.task, &dist.data[i * k..(i + 1) * k], &t, i);
        }
    }
    Ok(finish_error(model.task, err, data.len()))
}

/// Error when every sample is routed to its least likely leaf (smallest
/// assignment mass, ties toward the lowest leaf id). Classification
/// diagnostic; needs at least two leaves.
pub fn least_likely_path_eval(model: &AntModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    if !matches!(model.task, TaskKind::Classification { .. }) {
        return Err(AntError::Model("least-likely diagnostic is for classification models".into()));
    }
    if model.num_leaves() < 2 {
        return Err(AntError::Model(
            "least-likely diagnostic needs at least two leaves".into(),
        ));
    }
    check_targets(model, data)?;
    let k = model.task.output_dim();
    let mut err = 0.0;
    for (x, t) in data.chunks(batch_size) {
        let b = x.shape[0];
        let ev = model.eval_batch(&x)?;
        let l = ev.leaves.len();
        for i in 0..b {
            let mut best: Option<(f64, NodeId)> = None;
            for (c, &leaf) in ev.leaves.iter().enumerate() {
                let p = ev.pi.data[i * l + c];
                let better = match best {
                    None => true,
                    Some((bp, bl)) => p < bp || (p == bp && leaf < bl),
                };
                if better {
                    best = Some((p, leaf));
                }
            }
            let (_, leaf) = best.expect("at least one leaf");
            let dist = &ev.leaf_dists[&leaf];
            err += sample_error(model.task, &dist.data[i * k..(i + 1) * k], &t, i);
        }
    }
    Ok(finish_error(model.task, err, data.len()))
}

/// The single error number for a CLI-selected mode.
pub fn error_for_mode(
    model: &AntModel,
    data: &Dataset,
    mode: EvalMode,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    match mode {
        EvalMode::Multi => Ok(evaluate(model, data, batch_size)?.error_multi),
        EvalMode::Single => Ok(evaluate(model, data, batch_size)?.error_single),
        EvalMode::Sampled => sampled_error(model, data, seed, batch_size),
        EvalMode::LeastLikely => least_likely_path_eval(model, data, batch_size),
    }
}

fn check_ensemble(models: &[&AntModel]) -> Result<()> {
    if models.is_empty() {
        return Err(AntError::Model("ensemble needs at least one model".into()));
    }
    for m in &models[1..] {
        if m.task != models[0].task {
            return Err(AntError::Model("ensemble members have different tasks".into()));
        }
        if m.input_shape != models[0].input_shape {
            return Err(AntError::Model("ensemble members expect different input shapes".into()));
        }
    }
    Ok(())
}

/// Arithmetic mean of the member predictive distributions (classification) or
/// predicted means (regression) for a single sample.
pub fn ensemble_predict(
    models: &[&AntModel],
    x: &Tensor,
    mode: EvalMode,
) -> Result<PredictiveDistribution> {
    check_ensemble(models)?;
    if !matches!(mode, EvalMode::Multi | EvalMode::Single) {
        return Err(AntError::Config(format!("ensemble prediction does not support mode {}", mode)));
    }
    let k = models[0].task.output_dim();
    let mut acc = Tensor::zeros(&[k]);
    for m in models {
        let dist = match mode {
            EvalMode::Multi => m.predict_multi_path(x)?,
            EvalMode::Single => m.predict_single_path(x)?.0,
            _ => unreachable!(),
        };
        for (a, v) in acc.data.iter_mut().zip(&dist.values().data) {
            *a += v;
        }
    }
    for a in acc.data.iter_mut() {
        *a /= models.len() as f64;
    }
    Ok(match models[0].task {
        TaskKind::Classification { .. } => PredictiveDistribution::Classification(acc),
        TaskKind::Regression { .. } => PredictiveDistribution::Regression(acc),
    })
}

/// Ensemble error over a dataset, averaging member outputs per sample.
pub fn ensemble_evaluate(
    models: &[&AntModel],
    data: &Dataset,
    mode: EvalMode,
    batch_size: usize,
) -> Result<f64> {
    check_ensemble(models)?;
    if !matches!(mode, EvalMode::Multi | EvalMode::Single) {
        return Err(AntError::Config(format!("ensemble evaluation does not support mode {}", mode)));
    }
    for m in models {
        check_targets(m, data)?;
    }
    let k = models[0].task.output_dim();
    let mut err = 0.0;
    for (x, t) in data.chunks(batch_size) {
        let b = x.shape[0];
        let mut acc = Tensor::zeros(&[b, k]);
        for m in models {
            let ev = m.eval_batch(&x)?;
            match mode {
                EvalMode::Multi => {
                    let mix = m.mixture_batch(&ev);
                    for (a, v) in acc.data.iter_mut().zip(&mix.data) {
                        *a += v;
                    }
                }
                EvalMode::Single => {
                    let greedy = m.greedy_leaves(&ev);
                    for i in 0..b {
                        let dist = &ev.leaf_dists[&greedy[i]];
                        for j in 0..k {
                            acc.data[i * k + j] += dist.data[i * k + j];
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
        for a in acc.data.iter_mut() {
            *a /= models.len() as f64;
        }
        for i in 0..b {
            err += sample_error(models[0].task, &acc.data[i * k..(i + 1) * k], &t, i);
        }
    }
    Ok(finish_error(models[0].task, err, data.len()))
}

/// Empirical mean reach mass per node (root mass is 1; a child's mass never
/// exceeds its parent's).
pub fn node_visit_masses(
    model: &AntModel,
    data: &Dataset,
    batch_size: usize,
) -> Result<BTreeMap<NodeId, f64>> {
    let mut mass: BTreeMap<NodeId, f64> = (0..model.num_nodes()).map(|n| (n, 0.0)).collect();
    let mut n_total = 0usize;
    for (x, _) in data.chunks(batch_size) {
        let ev = model.eval_batch(&x)?;
        for (&node, reach) in &ev.node_reach {
            *mass.get_mut(&node).expect("node ids are dense") += reach.iter().sum::<f64>();
        }
        n_total += x.shape[0];
    }
    for v in mass.values_mut() {
        *v /= n_total as f64;
    }
    Ok(mass)
}

/// Reach-weighted class histogram per node (classification only).
fn node_class_histograms(
    model: &AntModel,
    data: &Dataset,
    batch_size: usize,
) -> Result<BTreeMap<NodeId, Vec<f64>>> {
    let TaskKind::Classification { classes } = model.task else {
        return Ok(BTreeMap::new());
    };
    let mut hist: BTreeMap<NodeId, Vec<f64>> =
        (0..model.num_nodes()).map(|n| (n, vec![0.0; classes])).collect();
    for (x, t) in data.chunks(batch_size) {
        let Targets::Classes(ys) = &t else {
            return Err(AntError::Data("class targets required for histograms".into()));
        };
        let ev = model.eval_batch(&x)?;
        for (&node, reach) in &ev.node_reach {
            let h = hist.get_mut(&node).expect("node ids are dense");
            for (i, &r) in reach.iter().enumerate() {
                h[ys[i]] += r;
            }
        }
    }
    for h in hist.values_mut() {
        let total: f64 = h.iter().sum();
        if total > 0.0 {
            for v in h.iter_mut() {
                *v /= total;
            }
        }
    }
    Ok(hist)
}

fn fmt_hist(h: &[f64]) -> String {
    let mut s = String::from("[");
    for (i, v) in h.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.2}", v);
    }
    s.push(']');
    s
}

/// Render the tree as a DOT graph: routers as white circles, solvers as gray
/// boxes, transformer stages as black dots on the edges, every named node
/// annotated with its empirical visit mass (and class histogram for
/// classification). Output is deterministic for a fixed model and dataset.
pub fn export_dot(model: &AntModel, data: &Dataset, batch_size: usize) -> Result<String> {
    check_targets(model, data)?;
    let mass = node_visit_masses(model, data, batch_size)?;
    let hist = node_class_histograms(model, data, batch_size)?;
    let mut out = String::new();
    out.push_str("digraph ant {\n");
    out.push_str("  rankdir=TB;\n");
    out.push_str("  node [fontname=\"Helvetica\"];\n");
    // Named nodes first, in id order.
    for n in 0..model.num_nodes() {
        let visit = mass[&n];
        let annot = match hist.get(&n) {
            Some(h) => format!("\\nvisit {:.3}\\nclasses {}", visit, fmt_hist(h)),
            None => format!("\\nvisit {:.3}", visit),
        };
        if model.is_leaf(n) {
            let _ = writeln!(
                out,
                "  n{} [shape=box, style=filled, fillcolor=lightgray, label=\"n{} solver{}\"];",
                n, n, annot
            );
        } else {
            let _ = writeln!(
                out,
                "  n{} [shape=circle, style=filled, fillcolor=white, label=\"n{} router{}\"];",
                n, n, annot
            );
        }
    }
    // Transformer dots and edges. The chain into node n runs from its parent
    // (or the input for the root); identity stages are invisible no-ops and
    // draw nothing.
    for n in 0..model.num_nodes() {
        let mut from: Option<String> = model.parent(n).map(|p| format!("n{}", p));
        for (k, m) in model.edge_chain(n).iter().enumerate() {
            if m.spec.layers == [crate::module::LayerSpec::Identity] {
                continue;
            }
            let dot = format!("t{}_{}", n, k);
            let _ = writeln!(out, "  {} [shape=point, width=0.12, color=black];", dot);
            if let Some(f) = &from {
                let _ = writeln!(out, "  {} -> {};", f, dot);
            }
            from = Some(dot);
        }
        if let Some(f) = from {
            if f != format!("n{}", n) {
                let _ = writeln!(out, "  {} -> n{};", f, n);
            }
        }
    }
    out.push_str("}\n");
    Ok(out)
}

/// Physically remove leaves whose empirical visit mass falls below
/// `threshold`; refuses to prune every leaf. Returns the pruned model and the
/// removed leaf ids (possibly empty).
pub fn prune_below(
    model: &AntModel,
    data: &Dataset,
    threshold: f64,
    batch_size: usize,
) -> Result<(AntModel, Vec<NodeId>)> {
    check_targets(model, data)?;
    let mass = node_visit_masses(model, data, batch_size)?;
    let remove: Vec<NodeId> =
        model.leaves().into_iter().filter(|l| mass[l] < threshold).collect();
    if remove.is_empty() {
        return Ok((model.clone(), remove));
    }
    if remove.len() == model.num_leaves() {
        return Err(AntError::Model(format!(
            "pruning below {} would remove every leaf",
            threshold
        )));
    }
    let pruned = model.pruned(&remove)?;
    Ok((pruned, remove))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamRole;
    use crate::testkit::*;

    /// Identity-chain classifier whose solver is overwritten to map input
    /// coordinate y to a large logit, so argmax equals the target exactly.
    fn perfect_classifier() -> AntModel {
        let mut m = identity_model(CLS3, 3, 1);
        {
            let solver = m.module_mut((0, ParamRole::Solver));
            let mut ps = solver.params_mut();
            let w = ps.next().unwrap();
            for j in 0..3 {
                for i in 0..3 {
                    w.data[j * 3 + i] = if i == j { 10.0 } else { 0.0 };
                }
            }
            ps.next().unwrap().data.fill(0.0);
        }
        m
    }

    fn onehot_data(n: usize) -> Dataset {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 3;
            let mut x = vec![0.0; 3];
            x[y] = 5.0;
            xs.push(Tensor { shape: vec![3], data: x });
            ys.push(y);
        }
        Dataset::new(xs, Targets::Classes(ys)).unwrap()
    }

    #[test]
    fn perfect_classifier_scores_zero_in_both_modes() {
        let m = perfect_classifier();
        let data = onehot_data(9);
        let rep = evaluate(&m, &data, 4).unwrap();
        assert_eq!(rep.error_multi, 0.0);
        assert_eq!(rep.error_single, 0.0);
        assert_eq!(rep.num_leaves, 1);
    }

    #[test]
    fn uniform_predictor_on_balanced_labels_errs_ninety_percent() {
        let task = TaskKind::Classification { classes: 10 };
        let m = identity_model(task, 2, 2);
        let xs = vec![Tensor::zeros(&[2]); 20];
        let ys = (0..20).map(|i| i % 10).collect();
        let data = Dataset::new(xs, Targets::Classes(ys)).unwrap();
        let rep = evaluate(&m, &data, 8).unwrap();
        assert!((rep.error_multi - 90.0).abs() < 1e-9);
        assert!((rep.error_single - 90.0).abs() < 1e-9);
    }

    #[test]
    fn zero_regressor_on_zero_targets_has_zero_mse() {
        let m = identity_model(REG2, 2, 3);
        let xs = vec![Tensor::zeros(&[2]); 5];
        let ys = vec![Tensor::zeros(&[2]); 5];
        let data = Dataset::new(xs, Targets::Values(ys)).unwrap();
        let rep = evaluate(&m, &data, 2).unwrap();
        assert_eq!(rep.error_multi, 0.0);
        assert_eq!(rep.error_single, 0.0);
    }

    #[test]
    fn report_invariants_hold_on_a_two_leaf_model() {
        let specs = growth_specs();
        let m = root_model(CLS3, 3, 4)
            .split_leaf(0, &specs.router, &spec(crate::module::ModuleKind::Solver, "lc"), 5)
            .unwrap();
        let data = cls_data(25, 3, 3, 6);
        let rep = evaluate(&m, &data, 8).unwrap();
        assert!(rep.params_single <= rep.params_multi as f64 + 1e-9);
        assert!(rep.flops_single <= rep.flops_multi as f64 + 1e-9);
        let visit_sum: f64 = rep.leaf_visit.iter().map(|(_, p)| p).sum();
        assert!((visit_sum - 1.0).abs() < 1e-9);
        let bucket_sum: u64 = rep.polarization.iter().sum();
        assert_eq!(bucket_sum, 25);
        assert_eq!(rep.num_leaves, 2);
    }

    #[test]
    fn single_leaf_report_has_equal_mode_costs() {
        let m = root_model(CLS3, 3, 7);
        let data = cls_data(10, 3, 3, 8);
        let rep = evaluate(&m, &data, 4).unwrap();
        assert_eq!(rep.params_single, rep.params_multi as f64);
        assert_eq!(rep.flops_single, rep.flops_multi as f64);
        assert_eq!(rep.error_single, rep.error_multi);
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let m = root_model(CLS3, 3, 9);
        let data = reg_data(5, 3, 2, 10);
        assert!(matches!(evaluate(&m, &data, 4), Err(AntError::Data(_))));
    }

    /// Two-leaf model with a hard-left router (huge bias) and solvers that
    /// disagree: the left always answers class 0, the right class 1.
    fn polarized_model() -> AntModel {
        let router = spec(crate::module::ModuleKind::Router, "fc1,sigmoid");
        let solver = spec(crate::module::ModuleKind::Solver, "lc");
        let mut m = identity_model(CLS3, 2, 11).split_leaf(0, &router, &solver, 12).unwrap();
        {
            let r = m.module_mut((0, ParamRole::Router));
            let mut ps = r.params_mut();
            ps.next().unwrap().data.fill(0.0);
            ps.next().unwrap().data.fill(40.0);
        }
        for (leaf, class) in [(1usize, 0usize), (2usize, 1usize)] {
            let s = m.module_mut((leaf, ParamRole::Solver));
            let mut ps = s.params_mut();
            ps.next().unwrap().data.fill(0.0);
            let b = ps.next().unwrap();
            b.data.fill(0.0);
            b.data[class] = 30.0;
        }
        m
    }

    #[test]
    fn least_likely_routes_to_the_smallest_mass_leaf() {
        let m = polarized_model();
        let xs = vec![Tensor { shape: vec![2], data: vec![0.3, -0.2] }; 6];
        let data = Dataset::new(xs, Targets::Classes(vec![1; 6])).unwrap();
        let rep = evaluate(&m, &data, 3).unwrap();
        assert!((rep.error_single - 100.0).abs() < 1e-9, "greedy goes left to class 0");
        let ll = least_likely_path_eval(&m, &data, 3).unwrap();
        assert_eq!(ll, 0.0, "least-likely goes right to class 1");
    }

    #[test]
    fn least_likely_with_identical_solvers_matches_single_path() {
        let specs = growth_specs();
        let mut m = root_model(CLS3, 3, 13)
            .split_leaf(0, &specs.router, &spec(crate::module::ModuleKind::Solver, "lc"), 14)
            .unwrap();
        let src: Vec<Tensor> = m.module((1, ParamRole::Solver)).params().cloned().collect();
        for (p, q) in m.module_mut((2, ParamRole::Solver)).params_mut().zip(&src) {
            *p = q.clone();
        }
        let data = cls_data(20, 3, 3, 15);
        let rep = evaluate(&m, &data, 8).unwrap();
        let ll = least_likely_path_eval(&m, &data, 8).unwrap();
        assert_eq!(ll, rep.error_single);
    }

    #[test]
    fn least_likely_rejects_single_leaf_and_regression() {
        let data = cls_data(5, 3, 3, 16);
        let single = root_model(CLS3, 3, 17);
        assert!(least_likely_path_eval(&single, &data, 4).is_err());
        let specs = growth_specs();
        let reg = root_model(REG2, 3, 18)
            .split_leaf(0, &specs.router, &spec(crate::module::ModuleKind::Solver, "lr"), 19)
            .unwrap();
        let rdata = reg_data(5, 3, 2, 20);
        assert!(least_likely_path_eval(&reg, &rdata, 4).is_err());
    }

    #[test]
    fn sampled_error_is_deterministic_in_seed() {
        let specs = growth_specs();
        let m = root_model(CLS3, 3, 21)
            .split_leaf(0, &specs.router, &spec(crate::module::ModuleKind::Solver, "lc"), 22)
            .unwrap();
        let data = cls_data(30, 3, 3, 23);
        let a = sampled_error(&m, &data, 77, 8).unwrap();
        let b = sampled_error(&m, &data, 77, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_model_ensemble_is_the_model() {
        let m = root_model(CLS3, 3, 24);
        let data = cls_data(6, 3, 3, 25);
        for x in &data.inputs {
            let solo = m.predict_multi_path(x).unwrap();
            let ens = ensemble_predict(&[&m], x, EvalMode::Multi).unwrap();
            assert_eq!(solo.values().data, ens.values().data);
        }
    }

    #[test]
    fn ensemble_is_the_exact_arithmetic_mean() {
        let m1 = root_model(CLS3, 3, 26);
        let m2 = root_model(CLS3, 3, 27);
        let data = cls_data(8, 3, 3, 28);
        for x in &data.inputs {
            let d1 = m1.predict_multi_path(x).unwrap();
            let d2 = m2.predict_multi_path(x).unwrap();
            let ens = ensemble_predict(&[&m1, &m2], x, EvalMode::Multi).unwrap();
            let mut sum = 0.0;
            for j in 0..3 {
                let mean = (d1.values().data[j] + d2.values().data[j]) / 2.0;
                assert!((ens.values().data[j] - mean).abs() < 1e-12);
                sum += ens.values().data[j];
            }
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ensembles_reject_mixed_tasks_and_empty_sets() {
        let c = root_model(CLS3, 3, 29);
        let r = root_model(REG2, 3, 30);
        let x = Tensor::zeros(&[3]);
        assert!(ensemble_predict(&[&c, &r], &x, EvalMode::Multi).is_err());
        assert!(ensemble_predict(&[], &x, EvalMode::Multi).is_err());
    }

    #[test]
    fn ensemble_evaluate_matches_per_sample_averaging() {
        let m1 = root_model(CLS3, 3, 31);
        let m2 = root_model(CLS3, 3, 32);
        let data = cls_data(12, 3, 3, 33);
        let err = ensemble_evaluate(&[&m1, &m2], &data, EvalMode::Multi, 5).unwrap();
        let Targets::Classes(ys) = &data.targets else { unreachable!() };
        let mut wrong = 0;
        for (i, x) in data.inputs.iter().enumerate() {
            let ens = ensemble_predict(&[&m1, &m2], x, EvalMode::Multi).unwrap();
            if argmax_row(&ens.values().data) != ys[i] {
                wrong += 1;
            }
        }
        let manual = 100.0 * wrong as f64 / data.len() as f64;
        assert!((err - manual).abs() < 1e-9);
    }

    fn three_leaf_model() -> AntModel {
        let specs = growth_specs();
        let lc = spec(crate::module::ModuleKind::Solver, "lc");
        root_model(CLS3, 3, 34)
            .split_leaf(0, &specs.router, &lc, 35)
            .unwrap()
            .split_leaf(1, &specs.router, &lc, 36)
            .unwrap()
    }

    #[test]
    fn node_masses_start_at_one_and_never_increase_down_a_path() {
        let m = three_leaf_model();
        let data = cls_data(15, 3, 3, 37);
        let mass = node_visit_masses(&m, &data, 6).unwrap();
        assert!((mass[&m.root()] - 1.0).abs() < 1e-12);
        for n in 0..m.num_nodes() {
            if let Some(p) = m.parent(n) {
                assert!(mass[&n] <= mass[&p] + 1e-12, "node {} heavier than parent {}", n, p);
            }
        }
        let leaf_sum: f64 = m.leaves().iter().map(|l| mass[l]).sum();
        assert!((leaf_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dot_export_parses_and_is_deterministic() {
        let m = three_leaf_model();
        let data = cls_data(10, 3, 3, 38);
        let text = export_dot(&m, &data, 4).unwrap();
        let again = export_dot(&m, &data, 4).unwrap();
        assert_eq!(text, again);
        dot_parser::ast::Graph::try_from(text.as_str()).expect("valid DOT");
        assert_eq!(text.matches("shape=box").count(), m.num_leaves());
        assert_eq!(text.matches("shape=circle").count(), m.num_nodes() - m.num_leaves());
        assert!(text.contains("classes ["));
    }

    #[test]
    fn single_leaf_identity_tree_exports_one_node() {
        let m = identity_model(CLS3, 3, 39);
        let data = cls_data(4, 3, 3, 40);
        let text = export_dot(&m, &data, 4).unwrap();
        dot_parser::ast::Graph::try_from(text.as_str()).expect("valid DOT");
        assert!(!text.contains("->"), "no edges expected:\n{}", text);
        assert_eq!(text.matches("shape=").count(), 1);
        assert!(text.contains("visit 1.000"));
    }

    #[test]
    fn prune_below_drops_the_dead_branch_and_keeps_predictions() {
        let m = polarized_model();
        let xs: Vec<Tensor> =
            (0..6).map(|i| Tensor { shape: vec![2], data: vec![0.1 * i as f64, -0.3] }).collect();
        let data = Dataset::new(xs, Targets::Classes(vec![0; 6])).unwrap();
        let (pruned, removed) = prune_below(&m, &data, 1e-3, 3).unwrap();
        assert_eq!(removed, vec![2]);
        assert_eq!(pruned.num_leaves(), 1);
        for x in &data.inputs {
            let before = m.predict_multi_path(x).unwrap();
            let after = pruned.predict_multi_path(x).unwrap();
            for j in 0..3 {
                assert!((before.values().data[j] - after.values().data[j]).abs() < 1e-6);
            }
        }
        assert!(prune_below(&m, &data, 2.0, 3).is_err());
        // strictly-below semantics: a zero threshold never removes anything
        let (same, none) = prune_below(&m, &data, 0.0, 3).unwrap();
        assert!(none.is_empty());
        assert_eq!(same.num_nodes(), m.num_nodes());
    }

    #[test]
    fn report_text_is_stable_and_complete() {
        let m = three_leaf_model();
        let data = cls_data(10, 3, 3, 41);
        let rep = evaluate(&m, &data, 4).unwrap();
        let text = rep.to_string();
        for key in [
            "task = ",
            "samples = ",
            "error_multi = ",
            "error_single = ",
            "params_multi = ",
            "params_single = ",
            "flops_multi = ",
            "flops_single = ",
            "num_leaves = ",
            "leaf_visit = ",
            "polarization = ",
            "prunable = ",
        ] {
            assert!(text.contains(key), "missing {}", key);
        }
        assert_eq!(text, rep.to_string());
    }

    #[test]
    fn eval_modes_parse_from_cli_strings() {
        assert_eq!("multi".parse::<EvalMode>().unwrap(), EvalMode::Multi);
        assert_eq!("single".parse::<EvalMode>().unwrap(), EvalMode::Single);
        assert_eq!("sampled".parse::<EvalMode>().unwrap(), EvalMode::Sampled);
        assert_eq!("least-likely".parse::<EvalMode>().unwrap(), EvalMode::LeastLikely);
        assert!("best".parse::<EvalMode>().is_err());
    }
}
