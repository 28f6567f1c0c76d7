//! Training: the mixture objective assembled on the tape, Adam updates,
//! locally trained growth candidates with early stopping, global refinement,
//! and structured epoch logging.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Targets};
use crate::model::{AntModel, ModuleAddr, NodeId, ParamKey, ParamRole};
use crate::module::{build_module, ModuleInstance, ModuleSpec, TaskKind, ROUTER_CLAMP};
use crate::tensor::Tensor;
use crate::{AntError, Result};

/// Terms whose log-weight underflows to -inf are pinned here instead; exp of
/// it is exactly zero, so the term still contributes nothing.
const LOG_FLOOR: f64 = -1e300;

// -- configuration ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub refine_epochs: usize,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub rng_seed: u64,
    /// Growth safeguard counting routers plus parameterized transformers on
    /// the root path; None disables the guard.
    pub max_depth: Option<usize>,
    /// Debug cap on epochs within any one training phase.
    pub max_epochs_per_phase: Option<usize>,
    /// Debug cap on the number of growth decisions.
    pub max_growth_decisions: Option<usize>,
    pub augment: crate::data::Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 512,
            patience: 5,
            refine_epochs: 100,
            lr_decay_every: 50,
            lr_decay_factor: 10.0,
            rng_seed: 0,
            max_depth: Some(10),
            max_epochs_per_phase: None,
            max_growth_decisions: None,
            augment: crate::data::Augment::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(AntError::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(AntError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(AntError::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(AntError::Config(format!("{} must be in [0, 1)", name)));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(AntError::Config("adam_eps must be positive".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(AntError::Config("lr_decay_every must be at least 1".into()));
        }
        if !(self.lr_decay_factor >= 1.0) {
            return Err(AntError::Config("lr_decay_factor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stable stream derivation so that independent consumers (splits, module
/// init, shuffles) never share raw RNG state.
pub fn derive_seed(base: u64, tag: &str, idx: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = mix(base ^ 0x243f_6a88_85a3_08d3);
    for &b in tag.as_bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ idx)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

// -- logging ----------------------------------------------------------------

#[derive(Serialize)]
struct EpochRec<'a> {
    phase: &'a str,
    leaf: Option<usize>,
    candidate: Option<&'a str>,
    epoch: usize,
    train_nll: f64,
    val_nll: f64,
    lr: f64,
}

/// JSON-lines epoch log. Contains no timestamps so identical runs produce
/// identical files.
pub struct TrainLogger {
    out: Option<BufWriter<File>>,
}

impl TrainLogger {
    pub fn disabled() -> Self {
        TrainLogger { out: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        Ok(TrainLogger { out: Some(BufWriter::new(File::create(path)?)) })
    }

    fn write(&mut self, rec: &EpochRec) -> Result<()> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, rec)
                .map_err(|e| AntError::Training(format!("writing train log: {}", e)))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.out {
            w.flush()?;
        }
        Ok(())
    }
}

/// Identifies the training phase in log lines.
#[derive(Clone, Copy)]
pub struct LogCtx<'a> {
    pub phase: &'a str,
    pub leaf: Option<usize>,
    pub candidate: Option<&'a str>,
}

// -- Adam -------------------------------------------------------------------

/// Bias-corrected Adam. `deltas` validates gradients, advances the step
/// counter, and returns the per-parameter updates to subtract.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Adam {
        Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn deltas(&mut self, lr: f64, grads: &[&Tensor]) -> Result<Vec<Tensor>> {
        if grads.len() != self.m.len() {
            return Err(AntError::Training(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() {
                return Err(AntError::Training(format!(
                    "adam: gradient {} has {} elements, parameter has {}",
                    i,
                    g.len(),
                    self.m[i].len()
                )));
            }
            if !g.all_finite() {
                return Err(AntError::Training(format!("adam: non-finite gradient in tensor {}", i)));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.iter().enumerate() {
            let mut d = Tensor::zeros(&g.shape);
            for (j, &gj) in g.data.iter().enumerate() {
                let m = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * gj;
                let v = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * gj * gj;
                self.m[i][j] = m;
                self.v[i][j] = v;
                d.data[j] = lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            }
            out.push(d);
        }
        Ok(out)
    }
}

// -- NLL on the tape --------------------------------------------------------

fn class_indices(targets: &Targets, task: TaskKind) -> Result<Vec<usize>> {
    let classes = match task {
        TaskKind::Classification { classes } => classes,
        TaskKind::Regression { .. } => {
            return Err(AntError::Training("class targets given to a regression model".into()))
        }
    };
    match targets {
        Targets::Classes(c) => {
            for &y in c {
                if y >= classes {
                    return Err(AntError::Training(format!(
                        "target class {} out of range (model has {} classes)",
                        y, classes
                    )));
                }
            }
            Ok(c.clone())
        }
        Targets::Values(_) => {
            Err(AntError::Training("value targets given to a classification model".into()))
        }
    }
}

fn value_matrix(targets: &Targets, task: TaskKind) -> Result<Tensor> {
    let dim = match task {
        TaskKind::Regression { dim } => dim,
        TaskKind::Classification { .. } => {
            return Err(AntError::Training("value targets given to a classification model".into()))
        }
    };
    match targets {
        Targets::Values(v) => {
            let refs: Vec<&Tensor> = v.iter().collect();
            let y = Tensor::stack(&refs)?;
            if y.shape[1..] != [dim] {
                return Err(AntError::Training(format!(
                    "target dimension {:?} does not match model output {}",
                    &y.shape[1..],
                    dim
                )));
            }
            Ok(y)
        }
        Targets::Classes(_) => {
            Err(AntError::Training("class targets given to a regression model".into()))
        }
    }
}

struct NllWalk<'a> {
    model: &'a AntModel,
    trainable: &'a BTreeSet<ModuleAddr>,
    binds: Vec<(ParamKey, Var)>,
    cols: Vec<Var>,
    cls_idx: Vec<usize>,
    y_const: Option<Var>,
    batch: usize,
}

impl<'a> NllWalk<'a> {
    fn module_fwd(&mut self, tape: &mut Tape, addr: ModuleAddr, x: Var) -> Result<Var> {
        let m = self.model.module(addr);
        let tr = self.trainable.contains(&addr);
        let vars = m.bind_params(tape, tr)?;
        if tr {
            for (idx, &v) in vars.iter().enumerate() {
                self.binds.push((ParamKey { node: addr.0, role: addr.1, idx }, v));
            }
        }
        m.forward_tape(tape, x, &vars)
    }

    /// Router output as a clamped [B] vector on the tape.
    fn router_var(&mut self, tape: &mut Tape, node: NodeId, feat: Var) -> Result<Var> {
        let out = self.module_fwd(tape, (node, ParamRole::Router), feat)?;
        let flat = tape.flatten(out, false);
        Ok(tape.clamp(flat, ROUTER_CLAMP, 1.0 - ROUTER_CLAMP))
    }

    fn leaf_term(&mut self, tape: &mut Tape, node: NodeId, feat: Var, acc: Option<Var>) -> Result<()> {
        let out = self.module_fwd(tape, (node, ParamRole::Solver), feat)?;
        let term = match self.model.task {
            TaskKind::Classification { .. } => {
                let ls = tape.logsoftmax(out)?;
                let lp = tape.gather_cols(ls, self.cls_idx.clone())?;
                match acc {
                    Some(a) => tape.add(lp, a)?,
                    None => lp,
                }
            }
            TaskKind::Regression { .. } => {
                let diff = tape.sub(self.y_const.unwrap(), out)?;
                let sq = tape.mul(diff, diff)?;
                let d = tape.sum_rows(sq)?;
                match acc {
                    Some(a) => tape.mul(a, d)?,
                    None => d,
                }
            }
        };
        self.cols.push(term);
        Ok(())
    }

    fn walk(&mut self, tape: &mut Tape, node: NodeId, input: Var, acc: Option<Var>) -> Result<()> {
        let mut feat = input;
        for i in 0..self.model.edge_chain(node).len() {
            feat = self.module_fwd(tape, (node, ParamRole::Edge(i)), feat)?;
        }
        let Some((left, right)) = self.model.children(node) else {
            return self.leaf_term(tape, node, feat, acc);
        };
        let classification = matches!(self.model.task, TaskKind::Classification { .. });
        match self.model.forced.get(&node).copied() {
            Some(p) if p == 1.0 => self.walk(tape, left, feat, acc),
            Some(p) if p == 0.0 => self.walk(tape, right, feat, acc),
            Some(p) => {
                // fixed decision probability: constants replace the router
                let p = p.clamp(ROUTER_CLAMP, 1.0 - ROUTER_CLAMP);
                let (lv, rv) = if classification { (p.ln(), (1.0 - p).ln()) } else { (p, 1.0 - p) };
                let lc = tape.constant(Tensor { shape: vec![self.batch], data: vec![lv; self.batch] })?;
                let rc = tape.constant(Tensor { shape: vec![self.batch], data: vec![rv; self.batch] })?;
                let (al, ar) = self.combine(tape, acc, lc, rc, classification)?;
                self.walk(tape, left, feat, Some(al))?;
                self.walk(tape, right, feat, Some(ar))
            }
            None => {
                let r = self.router_var(tape, node, feat)?;
                let (lpart, rpart) = if classification {
                    let lr_ = tape.log(r);
                    let om = tape.affine_scalar(r, -1.0, 1.0);
                    (lr_, tape.log(om))
                } else {
                    (r, tape.affine_scalar(r, -1.0, 1.0))
                };
                let (al, ar) = self.combine(tape, acc, lpart, rpart, classification)?;
                self.walk(tape, left, feat, Some(al))?;
                self.walk(tape, right, feat, Some(ar))
            }
        }
    }

    /// Fold one routing decision into the running path weight (log-sum for
    /// classification, product for regression).
    fn combine(
        &mut self,
        tape: &mut Tape,
        acc: Option<Var>,
        left: Var,
        right: Var,
        classification: bool,
    ) -> Result<(Var, Var)> {
        match acc {
            None => Ok((left, right)),
            Some(a) => {
                if classification {
                    Ok((tape.add(a, left)?, tape.add(a, right)?))
                } else {
                    Ok((tape.mul(a, left)?, tape.mul(a, right)?))
                }
            }
        }
    }
}

/// Build the training objective for one batch: classification gives the
/// negative mean log mixture likelihood computed in the log domain;
/// regression gives the mean path-weighted squared error. Returns the loss
/// variable and tape bindings for the trainable parameters, sorted by key.
pub fn build_nll(
    model: &AntModel,
    x: &Tensor,
    targets: &Targets,
    trainable: &BTreeSet<ModuleAddr>,
) -> Result<(Tape, Var, Vec<(ParamKey, Var)>)> {
    if x.rank() != model.input_shape.len() + 1 || x.shape[1..] != model.input_shape[..] {
        return Err(AntError::shape(
            "nll",
            format!("expected batched input [N, {:?}], got {:?}", model.input_shape, x.shape),
        ));
    }
    let b = x.shape[0];
    if b == 0 {
        return Err(AntError::Training("empty batch".into()));
    }
    if targets.len() != b {
        return Err(AntError::Training(format!("{} inputs but {} targets", b, targets.len())));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let (cls_idx, y_const) = match model.task {
        TaskKind::Classification { .. } => (class_indices(targets, model.task)?, None),
        TaskKind::Regression { .. } => {
            let y = value_matrix(targets, model.task)?;
            (Vec::new(), Some(tape.constant(y)?))
        }
    };
    let mut walk = NllWalk {
        model,
        trainable,
        binds: Vec::new(),
        cols: Vec::new(),
        cls_idx,
        y_const,
        batch: b,
    };
    walk.walk(&mut tape, model.root(), xv, None)?;
    let loss = finish_loss(&mut tape, &walk.cols, model.task)?;
    let mut binds = walk.binds;
    binds.sort_by_key(|(k, _)| *k);
    Ok((tape, loss, binds))
}

fn finish_loss(tape: &mut Tape, cols: &[Var], task: TaskKind) -> Result<Var> {
    match task {
        TaskKind::Classification { .. } => {
            let stack = tape.stack_cols(cols)?;
            let lse = tape.lse_rows(stack)?;
            let mean = tape.mean_all(lse);
            Ok(tape.affine_scalar(mean, -1.0, 0.0))
        }
        TaskKind::Regression { .. } => {
            let mut total = cols[0];
            for &c in &cols[1..] {
                total = tape.add(total, c)?;
            }
            Ok(tape.mean_all(total))
        }
    }
}

/// Dataset NLL under the exact training objective, streamed in batches.
pub fn nll_value(model: &AntModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    let none = BTreeSet::new();
    let mut sum = 0.0;
    for (x, t) in data.chunks(batch_size) {
        let b = x.shape[0] as f64;
        let (tape, loss, _) = build_nll(model, &x, &t, &none)?;
        sum += tape.value(loss).item()? * b;
    }
    Ok(sum / data.len() as f64)
}

// -- generic early-stopped local loop ---------------------------------------

trait LocalProblem {
    fn train_len(&self) -> usize;
    fn begin_epoch(&mut self, _epoch: usize) {}
    /// One optimizer step; returns the batch training loss. A non-finite
    /// return or an `AntError::Training` marks divergence.
    fn step_batch(&mut self, idx: &[usize], lr: f64) -> Result<f64>;
    fn val_nll(&self) -> Result<f64>;
    fn save_best(&mut self);
    fn restore_best(&mut self);
}

/// An epoch only resets patience when it beats the best validation NLL by
/// this much. Without the margin, a converged phase creeping down by ~1e-11
/// per epoch never triggers patience and runs for thousands of epochs.
const MIN_IMPROVEMENT: f64 = 1e-6;

/// Epochs run until `patience` epochs pass without material validation
/// improvement; the best-validation parameters are restored on exit.
fn early_stopped(
    p: &mut dyn LocalProblem,
    cfg: &TrainConfig,
    stream: u64,
    logger: &mut TrainLogger,
    ctx: LogCtx,
) -> Result<(f64, usize)> {
    let n = p.train_len();
    let mut best = f64::INFINITY;
    let mut bad = 0usize;
    let mut epoch = 0usize;
    loop {
        if let Some(cap) = cfg.max_epochs_per_phase {
            if epoch >= cap {
                break;
            }
        }
        epoch += 1;
        p.begin_epoch(epoch);
        let order = shuffled_indices(n, derive_seed(stream, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut diverged = false;
        for chunk in order.chunks(cfg.batch_size) {
            match p.step_batch(chunk, cfg.learning_rate) {
                Ok(l) if l.is_finite() => {
                    loss_sum += l * chunk.len() as f64;
                    seen += chunk.len();
                }
                Ok(_) | Err(AntError::Training(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if diverged {
            break;
        }
        let val = p.val_nll()?;
        logger.write(&EpochRec {
            phase: ctx.phase,
            leaf: ctx.leaf,
            candidate: ctx.candidate,
            epoch,
            train_nll: loss_sum / seen as f64,
            val_nll: val,
            lr: cfg.learning_rate,
        })?;
        let material = val < best - MIN_IMPROVEMENT;
        if val < best {
            best = val;
            p.save_best();
        }
        if material {
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    p.restore_best();
    Ok((best, epoch))
}

// -- whole-model training ---------------------------------------------------

struct FullProblem<'a> {
    model: &'a mut AntModel,
    trainable: &'a BTreeSet<ModuleAddr>,
    keys: Vec<ParamKey>,
    adam: Adam,
    train: &'a Dataset,
    val: &'a Dataset,
    batch_size: usize,
    snapshot: Vec<Tensor>,
}

impl<'a> FullProblem<'a> {
    fn new(
        model: &'a mut AntModel,
        trainable: &'a BTreeSet<ModuleAddr>,
        train: &'a Dataset,
        val: &'a Dataset,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let keys: Vec<ParamKey> =
            model.param_keys().into_iter().filter(|k| trainable.contains(&(k.node, k.role))).collect();
        if keys.is_empty() {
            return Err(AntError::Training(
                "no trainable parameters in the requested module set".into(),
            ));
        }
        let sizes: Vec<usize> = keys.iter().map(|&k| model.param(k).len()).collect();
        let adam = Adam::new(cfg, &sizes);
        let snapshot = keys.iter().map(|&k| model.param(k).clone()).collect();
        Ok(FullProblem { model, trainable, keys, adam, train, val, batch_size: cfg.batch_size, snapshot })
    }
}

impl LocalProblem for FullProblem<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn step_batch(&mut self, idx: &[usize], lr: f64) -> Result<f64> {
        let (x, t) = self.train.gather(idx);
        let (tape, loss, binds) = build_nll(self.model, &x, &t, self.trainable)?;
        let loss_val = tape.value(loss).item()?;
        if !loss_val.is_finite() {
            return Ok(loss_val);
        }
        if binds.len() != self.keys.len() {
            return Err(AntError::Training(format!(
                "{} bound trainable tensors but {} expected",
                binds.len(),
                self.keys.len()
            )));
        }
        let grads = tape.backward(loss)?;
        let gts: Vec<Tensor> = binds
            .iter()
            .map(|&(k, v)| grads.get_or_zeros(v, &self.model.param(k).shape))
            .collect();
        let grefs: Vec<&Tensor> = gts.iter().collect();
        let deltas = self.adam.deltas(lr, &grefs)?;
        for (&k, d) in self.keys.iter().zip(&deltas) {
            let p = self.model.param_mut(k);
            for (pj, dj) in p.data.iter_mut().zip(&d.data) {
                *pj -= dj;
            }
        }
        Ok(loss_val)
    }

    fn val_nll(&self) -> Result<f64> {
        nll_value(self.model, self.val, self.batch_size)
    }

    fn save_best(&mut self) {
        for (i, &k) in self.keys.iter().enumerate() {
            self.snapshot[i] = self.model.param(k).clone();
        }
    }

    fn restore_best(&mut self) {
        for (i, &k) in self.keys.iter().enumerate() {
            *self.model.param_mut(k) = self.snapshot[i].clone();
        }
    }
}

pub struct LocalOutcome {
    pub best_val_nll: f64,
    pub epochs: usize,
}

/// Train only the given modules, freezing everything else, with early
/// stopping on validation NLL. The model keeps the best-validation
/// parameters for the trainable set; frozen parameters are untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    model: &mut AntModel,
    trainable: &BTreeSet<ModuleAddr>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    stream: u64,
    logger: &mut TrainLogger,
    ctx: LogCtx,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    if trainable.is_empty() {
        return Err(AntError::Training("empty trainable set".into()));
    }
    let known: BTreeSet<ModuleAddr> = model.module_addrs().into_iter().collect();
    for addr in trainable {
        if !known.contains(addr) {
            return Err(AntError::Training(format!(
                "trainable module {:?} does not exist in the model",
                addr
            )));
        }
    }
    let mut problem = FullProblem::new(model, trainable, train, val, cfg)?;
    let (best, epochs) = early_stopped(&mut problem, cfg, stream, logger, ctx)?;
    Ok(LocalOutcome { best_val_nll: best, epochs })
}

// -- growth candidates ------------------------------------------------------

/// New modules proposed at one leaf.
#[derive(Clone)]
pub enum CandidateModules {
    Split { router: ModuleInstance, left: ModuleInstance, right: ModuleInstance },
    Deepen { chain: Vec<ModuleInstance>, solver: ModuleInstance },
}

impl CandidateModules {
    fn modules(&self) -> Vec<&ModuleInstance> {
        match self {
            CandidateModules::Split { router, left, right } => vec![router, left, right],
            CandidateModules::Deepen { chain, solver } => {
                chain.iter().chain(std::iter::once(solver)).collect()
            }
        }
    }

    fn modules_mut(&mut self) -> Vec<&mut ModuleInstance> {
        match self {
            CandidateModules::Split { router, left, right } => vec![router, left, right],
            CandidateModules::Deepen { chain, solver } => {
                chain.iter_mut().chain(std::iter::once(solver)).collect()
            }
        }
    }
}

/// Frozen per-sample quantities at a growth leaf: the feature entering the
/// leaf, the path weight of reaching it, and the pooled contribution of every
/// other leaf to the mixture. Log domain for classification, linear for
/// regression.
pub struct LeafCache {
    inputs: Vec<Tensor>,
    targets: Targets,
    reach: Vec<f64>,
    other: Option<Vec<f64>>,
}

impl LeafCache {
    fn gather(&self, idx: &[usize]) -> (Tensor, Targets, Vec<f64>, Option<Vec<f64>>) {
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &self.inputs[i]).collect();
        let x = Tensor::stack(&refs).expect("uniform feature shapes");
        let t = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i].clone()).collect()),
        };
        let reach = idx.iter().map(|&i| self.reach[i]).collect();
        let other = self.other.as_ref().map(|o| idx.iter().map(|&i| o[i]).collect());
        (x, t, reach, other)
    }
}

/// Log path weight of `leaf` for sample `i`, summed decision by decision in
/// root-to-leaf order (mirroring the tape's accumulation).
fn log_path_weight(model: &AntModel, ev: &crate::model::BatchedEval, leaf: NodeId, i: usize) -> f64 {
    let path = model.path_to(leaf);
    let mut acc = 0.0;
    for w in path.windows(2) {
        let (parent, child) = (w[0], w[1]);
        let p = ev.router_probs[&parent][i];
        let (l, _) = model.children(parent).unwrap();
        acc += if child == l { p.ln() } else { (1.0 - p).ln() };
    }
    acc
}

fn path_weight(model: &AntModel, ev: &crate::model::BatchedEval, leaf: NodeId, i: usize) -> f64 {
    let path = model.path_to(leaf);
    let mut acc = 1.0;
    for w in path.windows(2) {
        let (parent, child) = (w[0], w[1]);
        let p = ev.router_probs[&parent][i];
        let (l, _) = model.children(parent).unwrap();
        acc *= if child == l { p } else { 1.0 - p };
    }
    acc
}

/// Evaluate the frozen model once over `data` and cache everything candidate
/// training needs at `attach`.
pub fn build_leaf_cache(
    model: &AntModel,
    attach: NodeId,
    data: &Dataset,
    batch_size: usize,
) -> Result<LeafCache> {
    let mut inputs = Vec::with_capacity(data.len());
    let mut reach = Vec::with_capacity(data.len());
    let leaves = model.leaves();
    let has_others = leaves.len() > 1;
    let mut other: Option<Vec<f64>> = if has_others { Some(Vec::with_capacity(data.len())) } else { None };
    let classification = matches!(model.task, TaskKind::Classification { .. });
    let mut seen = 0usize;
    for (x, t) in data.chunks(batch_size) {
        let b = x.shape[0];
        let (ev, feat) = model.eval_batch_capture(&x, Some(attach))?;
        let feat = feat.ok_or_else(|| AntError::Model(format!("leaf {} unreachable", attach)))?;
        for i in 0..b {
            inputs.push(feat.unstack_row(i));
            if classification {
                reach.push(log_path_weight(model, &ev, attach, i));
            } else {
                reach.push(path_weight(model, &ev, attach, i));
            }
        }
        if let Some(out) = &mut other {
            for i in 0..b {
                let mut acc_log = f64::NEG_INFINITY;
                let mut acc_lin = 0.0;
                for &l in &leaves {
                    if l == attach {
                        continue;
                    }
                    let Some(dist) = ev.leaf_dists.get(&l) else { continue };
                    if classification {
                        let y = match &t {
                            Targets::Classes(c) => c[i],
                            Targets::Values(_) => unreachable!(),
                        };
                        let k = dist.shape[1];
                        let term = log_path_weight(model, &ev, l, i) + dist.data[i * k + y].ln();
                        // streaming log-sum-exp
                        if term > acc_log {
                            acc_log = (acc_log - term).exp().ln_1p() + term;
                        } else if term.is_finite() {
                            acc_log = (term - acc_log).exp().ln_1p() + acc_log;
                        }
                    } else {
                        let y = match &t {
                            Targets::Values(v) => &v[i],
                            Targets::Classes(_) => unreachable!(),
                        };
                        let k = dist.shape[1];
                        let se: f64 = (0..k).map(|j| {
                            let d = y.data[j] - dist.data[i * k + j];
                            d * d
                        }).sum();
                        acc_lin += path_weight(model, &ev, l, i) * se;
                    }
                }
                out.push(if classification { acc_log.max(LOG_FLOOR) } else { acc_lin });
            }
        }
        seen += b;
    }
    debug_assert_eq!(seen, data.len());
    let targets = data.targets.clone();
    Ok(LeafCache { inputs, targets, reach, other })
}

/// Candidate objective over cached quantities; structurally mirrors the loss
/// of the mutated full model with every pre-existing module frozen. Returns
/// the loss and the candidate parameter variables in module order.
fn candidate_loss(
    tape: &mut Tape,
    cand: &CandidateModules,
    task: TaskKind,
    x: &Tensor,
    targets: &Targets,
    reach: &[f64],
    other: Option<&[f64]>,
    trainable: bool,
) -> Result<(Var, Vec<Var>)> {
    let b = x.shape[0];
    let xv = tape.constant(x.clone())?;
    let mut param_vars = Vec::new();
    let mut cols = Vec::new();
    let classification = matches!(task, TaskKind::Classification { .. });
    if let Some(o) = other {
        cols.push(tape.constant(Tensor { shape: vec![b], data: o.to_vec() })?);
    }
    let acc0 = tape.constant(Tensor { shape: vec![b], data: reach.to_vec() })?;
    let cls_idx = if classification { class_indices(targets, task)? } else { Vec::new() };
    let y_const = if classification { None } else { Some(tape.constant(value_matrix(targets, task)?)?) };

    let fwd = |tape: &mut Tape, m: &ModuleInstance, x: Var, vars: &mut Vec<Var>| -> Result<Var> {
        let pv = m.bind_params(tape, trainable)?;
        vars.extend(pv.iter().copied());
        m.forward_tape(tape, x, &pv)
    };
    let leaf_term = |tape: &mut Tape, logits_or_mu: Var, acc: Var| -> Result<Var> {
        if classification {
            let ls = tape.logsoftmax(logits_or_mu)?;
            let lp = tape.gather_cols(ls, cls_idx.clone())?;
            tape.add(lp, acc)
        } else {
            let diff = tape.sub(y_const.unwrap(), logits_or_mu)?;
            let sq = tape.mul(diff, diff)?;
            let d = tape.sum_rows(sq)?;
            tape.mul(acc, d)
        }
    };

    match cand {
        CandidateModules::Split { router, left, right } => {
            let out = fwd(tape, router, xv, &mut param_vars)?;
            let flat = tape.flatten(out, false);
            let r = tape.clamp(flat, ROUTER_CLAMP, 1.0 - ROUTER_CLAMP);
            let (lpart, rpart) = if classification {
                let lr_ = tape.log(r);
                let om = tape.affine_scalar(r, -1.0, 1.0);
                (lr_, tape.log(om))
            } else {
                (r, tape.affine_scalar(r, -1.0, 1.0))
            };
            let (al, ar) = if classification {
                (tape.add(acc0, lpart)?, tape.add(acc0, rpart)?)
            } else {
                (tape.mul(acc0, lpart)?, tape.mul(acc0, rpart)?)
            };
            let lo = fwd(tape, left, xv, &mut param_vars)?;
            cols.push(leaf_term(tape, lo, al)?);
            let ro = fwd(tape, right, xv, &mut param_vars)?;
            cols.push(leaf_term(tape, ro, ar)?);
        }
        CandidateModules::Deepen { chain, solver } => {
            let mut h = xv;
            for m in chain {
                h = fwd(tape, m, h, &mut param_vars)?;
            }
            let out = fwd(tape, solver, h, &mut param_vars)?;
            cols.push(leaf_term(tape, out, acc0)?);
        }
    }
    let loss = finish_loss(tape, &cols, task)?;
    Ok((loss, param_vars))
}

struct CandidateProblem<'a> {
    cand: CandidateModules,
    task: TaskKind,
    train: &'a LeafCache,
    val: &'a LeafCache,
    batch_size: usize,
    adam: Adam,
    snapshot: Vec<Tensor>,
}

impl<'a> CandidateProblem<'a> {
    fn new(cand: CandidateModules, task: TaskKind, train: &'a LeafCache, val: &'a LeafCache, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> =
            cand.modules().iter().flat_map(|m| m.params().map(|t| t.len())).collect();
        let snapshot: Vec<Tensor> =
            cand.modules().iter().flat_map(|m| m.params().cloned()).collect();
        let adam = Adam::new(cfg, &sizes);
        CandidateProblem { cand, task, train, val, batch_size: cfg.batch_size, adam, snapshot }
    }

    fn loss_on(&self, cache: &LeafCache, idx: &[usize], trainable: bool) -> Result<(Tape, Var, Vec<Var>)> {
        let (x, t, reach, other) = cache.gather(idx);
        let mut tape = Tape::new();
        let (loss, vars) = candidate_loss(
            &mut tape,
            &self.cand,
            self.task,
            &x,
            &t,
            &reach,
            other.as_deref(),
            trainable,
        )?;
        Ok((tape, loss, vars))
    }
}

impl LocalProblem for CandidateProblem<'_> {
    fn train_len(&self) -> usize {
        self.train.inputs.len()
    }

    fn step_batch(&mut self, idx: &[usize], lr: f64) -> Result<f64> {
        let (tape, loss, vars) = self.loss_on(self.train, idx, true)?;
        let loss_val = tape.value(loss).item()?;
        if !loss_val.is_finite() {
            return Ok(loss_val);
        }
        let grads = tape.backward(loss)?;
        let shapes: Vec<Vec<usize>> = self
            .cand
            .modules()
            .iter()
            .flat_map(|m| m.params().map(|t| t.shape.clone()))
            .collect();
        let gts: Vec<Tensor> =
            vars.iter().zip(&shapes).map(|(&v, s)| grads.get_or_zeros(v, s)).collect();
        let grefs: Vec<&Tensor> = gts.iter().collect();
        let deltas = self.adam.deltas(lr, &grefs)?;
        let mut di = 0;
        for m in self.cand.modules_mut() {
            for p in m.params_mut() {
                for (pj, dj) in p.data.iter_mut().zip(&deltas[di].data) {
                    *pj -= dj;
                }
                di += 1;
            }
        }
        Ok(loss_val)
    }

    fn val_nll(&self) -> Result<f64> {
        let n = self.val.inputs.len();
        let mut sum = 0.0;
        for start in (0..n).step_by(self.batch_size) {
            let idx: Vec<usize> = (start..(start + self.batch_size).min(n)).collect();
            let (tape, loss, _) = self.loss_on(self.val, &idx, false)?;
            sum += tape.value(loss).item()? * idx.len() as f64;
        }
        Ok(sum / n as f64)
    }

    fn save_best(&mut self) {
        self.snapshot = self.cand.modules().iter().flat_map(|m| m.params().cloned()).collect();
    }

    fn restore_best(&mut self) {
        let mut i = 0;
        for m in self.cand.modules_mut() {
            for p in m.params_mut() {
                *p = self.snapshot[i].clone();
                i += 1;
            }
        }
    }
}

// -- growth -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    None,
    /// Splitting disabled: the tree can only deepen.
    NoRouter,
    /// Deepening disabled and the initial transformer is the identity.
    NoTransformer,
}

#[derive(Clone, Debug)]
pub struct GrowthSpecs {
    pub router: ModuleSpec,
    pub transformer: ModuleSpec,
    pub solver: ModuleSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrowthDecision {
    SplitData,
    DeepenTransform,
    Keep,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecisionRec {
    pub seq: usize,
    pub leaf: usize,
    pub decision: GrowthDecision,
    pub reason: String,
    pub val_keep: f64,
    pub val_split: Option<f64>,
    pub val_deepen: Option<f64>,
    pub best_val_nll_after: f64,
    pub num_nodes: usize,
    pub num_leaves: usize,
    pub total_params: u64,
}

pub struct GrowthOutcome {
    pub history: Vec<DecisionRec>,
    pub best_val_nll: f64,
}

/// Pick the growth action given candidate validation NLLs. Only finite
/// values strictly below the current NLL count as improvements; an exact tie
/// between the two goes to deepening.
pub fn decide(val_keep: f64, val_split: Option<f64>, val_deepen: Option<f64>) -> GrowthDecision {
    let s = val_split.filter(|v| v.is_finite() && *v < val_keep);
    let d = val_deepen.filter(|v| v.is_finite() && *v < val_keep);
    match (s, d) {
        (None, None) => GrowthDecision::Keep,
        (Some(_), None) => GrowthDecision::SplitData,
        (None, Some(_)) => GrowthDecision::DeepenTransform,
        (Some(sv), Some(dv)) => {
            if dv <= sv {
                GrowthDecision::DeepenTransform
            } else {
                GrowthDecision::SplitData
            }
        }
    }
}

fn train_candidate(
    model: &AntModel,
    leaf: NodeId,
    cand: CandidateModules,
    caches: (&LeafCache, &LeafCache),
    cfg: &TrainConfig,
    stream: u64,
    logger: &mut TrainLogger,
    name: &'static str,
) -> Result<(f64, CandidateModules)> {
    let mut problem = CandidateProblem::new(cand, model.task, caches.0, caches.1, cfg);
    let ctx = LogCtx { phase: "growth", leaf: Some(leaf), candidate: Some(name) };
    let (best, _) = early_stopped(&mut problem, cfg, stream, logger, ctx)?;
    Ok((best, problem.cand))
}

fn build_split_candidate(
    model: &AntModel,
    leaf: NodeId,
    specs: &GrowthSpecs,
    stream: u64,
) -> Result<CandidateModules> {
    let shape = model.shape_at(leaf).to_vec();
    let router = build_module(&specs.router, &shape, model.task, derive_seed(stream, "init", 0))?;
    let left = build_module(&specs.solver, &shape, model.task, derive_seed(stream, "init", 1))?;
    let right = build_module(&specs.solver, &shape, model.task, derive_seed(stream, "init", 2))?;
    Ok(CandidateModules::Split { router, left, right })
}

fn build_deepen_candidate(
    model: &AntModel,
    leaf: NodeId,
    specs: &GrowthSpecs,
    stream: u64,
) -> Result<CandidateModules> {
    let shape = model.shape_at(leaf).to_vec();
    let t = build_module(&specs.transformer, &shape, model.task, derive_seed(stream, "init", 0))?;
    let mut chain = vec![t];
    if model.pool_after_deepen(leaf, &specs.transformer, &chain[0].output_shape) {
        let pool =
            build_module(&ModuleSpec::maxpool_transformer(), &chain[0].output_shape, model.task, 0)?;
        chain.push(pool);
    }
    let out_shape = chain.last().unwrap().output_shape.clone();
    let solver =
        build_module(&specs.solver, &out_shape, model.task, derive_seed(stream, "init", 1))?;
    Ok(CandidateModules::Deepen { chain, solver })
}

/// Grow the tree: repeatedly pop the shallowest suboptimal leaf, train split
/// and deepen candidates against the frozen model, and accept whichever
/// improves validation NLL (preferring deepen on ties). Leaves whose
/// candidates fail to improve are marked optimal and never revisited.
pub fn grow(
    model: &mut AntModel,
    train: &Dataset,
    val: &Dataset,
    specs: &GrowthSpecs,
    ablation: Ablation,
    cfg: &TrainConfig,
    logger: &mut TrainLogger,
) -> Result<GrowthOutcome> {
    cfg.validate()?;
    let mut frontier: BTreeSet<(usize, NodeId)> =
        model.leaves().into_iter().map(|l| (model.depth(l), l)).collect();
    let mut best = nll_value(model, val, cfg.batch_size)?;
    let mut history = Vec::new();
    let mut seq = 0usize;
    let split_allowed = ablation != Ablation::NoRouter;
    let deepen_allowed = ablation != Ablation::NoTransformer && specs.transformer.has_params();
    while let Some((depth, leaf)) = frontier.pop_first() {
        if let Some(cap) = cfg.max_growth_decisions {
            if seq >= cap {
                break;
            }
        }
        let mut rec = DecisionRec {
            seq,
            leaf,
            decision: GrowthDecision::Keep,
            reason: String::new(),
            val_keep: best,
            val_split: None,
            val_deepen: None,
            best_val_nll_after: best,
            num_nodes: model.num_nodes(),
            num_leaves: model.num_leaves(),
            total_params: model.total_params(),
        };
        if let Some(md) = cfg.max_depth {
            if model.module_depth(leaf) >= md {
                rec.reason = "max depth reached".into();
                history.push(rec);
                seq += 1;
                continue;
            }
        }
        let cache_train = build_leaf_cache(model, leaf, train, cfg.batch_size)?;
        let cache_val = build_leaf_cache(model, leaf, val, cfg.batch_size)?;
        let mut split_out = None;
        if split_allowed {
            let stream = derive_seed(cfg.rng_seed, "cand", (seq * 2) as u64);
            let cand = build_split_candidate(model, leaf, specs, stream)?;
            let (v, trained) =
                train_candidate(model, leaf, cand, (&cache_train, &cache_val), cfg, stream, logger, "split")?;
            rec.val_split = v.is_finite().then_some(v);
            split_out = Some((v, trained));
        }
        let mut deepen_out = None;
        if deepen_allowed {
            let stream = derive_seed(cfg.rng_seed, "cand", (seq * 2 + 1) as u64);
            let cand = build_deepen_candidate(model, leaf, specs, stream)?;
            let (v, trained) =
                train_candidate(model, leaf, cand, (&cache_train, &cache_val), cfg, stream, logger, "deepen")?;
            rec.val_deepen = v.is_finite().then_some(v);
            deepen_out = Some((v, trained));
        }
        let decision = decide(
            best,
            split_out.as_ref().map(|(v, _)| *v),
            deepen_out.as_ref().map(|(v, _)| *v),
        );
        match decision {
            GrowthDecision::SplitData => {
                let (_, trained) = split_out.unwrap();
                let CandidateModules::Split { router, left, right } = trained else { unreachable!() };
                *model = model.split_leaf_installed(leaf, router, left, right)?;
                let (l, r) = model.children(leaf).unwrap();
                frontier.insert((depth + 1, l));
                frontier.insert((depth + 1, r));
                best = nll_value(model, val, cfg.batch_size)?;
                rec.decision = GrowthDecision::SplitData;
                rec.reason = "split improved validation NLL".into();
            }
            GrowthDecision::DeepenTransform => {
                let (_, trained) = deepen_out.unwrap();
                let CandidateModules::Deepen { chain, solver } = trained else { unreachable!() };
                *model = model.deepen_edge_installed(leaf, chain, solver)?;
                frontier.insert((depth, leaf));
                best = nll_value(model, val, cfg.batch_size)?;
                rec.decision = GrowthDecision::DeepenTransform;
                rec.reason = "deepen improved validation NLL".into();
            }
            GrowthDecision::Keep => {
                rec.reason = "no candidate improved validation NLL".into();
            }
        }
        rec.best_val_nll_after = best;
        rec.num_nodes = model.num_nodes();
        rec.num_leaves = model.num_leaves();
        rec.total_params = model.total_params();
        history.push(rec);
        seq += 1;
    }
    Ok(GrowthOutcome { history, best_val_nll: best })
}

// -- refinement -------------------------------------------------------------

/// Refinement learning rate for a 1-based epoch index: the base rate divided
/// by the decay factor once per completed decay interval.
pub fn lr_for_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate / cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Jointly train every parameter for `refine_epochs` with the stepped
/// learning-rate schedule, keeping the best-validation snapshot (including
/// the entry model, so refinement never worsens the selected model).
pub fn refine(
    model: &mut AntModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    logger: &mut TrainLogger,
) -> Result<f64> {
    cfg.validate()?;
    let mut best = nll_value(model, val, cfg.batch_size)?;
    let mut best_snap = model.clone();
    let trainable: BTreeSet<ModuleAddr> = model.module_addrs().into_iter().collect();
    let keys = model.param_keys();
    let sizes: Vec<usize> = keys.iter().map(|&k| model.param(k).len()).collect();
    let mut adam = Adam::new(cfg, &sizes);
    let stream = derive_seed(cfg.rng_seed, "refine", 0);
    let mut aug_rng;
    let total = match cfg.max_epochs_per_phase {
        Some(cap) => cfg.refine_epochs.min(cap),
        None => cfg.refine_epochs,
    };
    'outer: for epoch in 1..=total {
        let lr = lr_for_epoch(cfg, epoch);
        aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(stream, "augment", epoch as u64));
        let order = shuffled_indices(train.len(), derive_seed(stream, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, t) = train.gather(chunk);
            if cfg.augment != crate::data::Augment::None {
                x = augment_batch(&x, cfg.augment, &mut aug_rng)?;
            }
            let (tape, loss, binds) = build_nll(model, &x, &t, &trainable)?;
            let loss_val = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                break 'outer;
            }
            let grads = tape.backward(loss)?;
            let gts: Vec<Tensor> = binds
                .iter()
                .map(|&(k, v)| grads.get_or_zeros(v, &model.param(k).shape))
                .collect();
            let grefs: Vec<&Tensor> = gts.iter().collect();
            let deltas = match adam.deltas(lr, &grefs) {
                Ok(d) => d,
                Err(AntError::Training(_)) => break 'outer,
                Err(e) => return Err(e),
            };
            for (&k, d) in keys.iter().zip(&deltas) {
                let p = model.param_mut(k);
                for (pj, dj) in p.data.iter_mut().zip(&d.data) {
                    *pj -= dj;
                }
            }
            loss_sum += loss_val * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_nll = nll_value(model, val, cfg.batch_size)?;
        logger.write(&EpochRec {
            phase: "refine",
            leaf: None,
            candidate: None,
            epoch,
            train_nll: loss_sum / seen.max(1) as f64,
            val_nll,
            lr,
        })?;
        if val_nll < best {
            best = val_nll;
            best_snap = model.clone();
        }
    }
    *model = best_snap;
    Ok(best)
}

/// Apply training-time augmentation to a stacked batch.
fn augment_batch(x: &Tensor, aug: crate::data::Augment, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let b = x.shape[0];
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        rows.push(crate::data::augment_sample(&x.unstack_row(i), aug, rng)?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    Tensor::stack(&refs)
}

// -- root initialization ----------------------------------------------------

/// Build the initial single-leaf model: root-edge transformer chain (identity
/// under the no-transformer ablation) plus the root solver.
pub fn init_root_model(
    task: TaskKind,
    input_shape: &[usize],
    specs: &GrowthSpecs,
    ablation: Ablation,
    cfg: &TrainConfig,
) -> Result<AntModel> {
    let tspec = if ablation == Ablation::NoTransformer {
        ModuleSpec::identity_transformer()
    } else {
        specs.transformer.clone()
    };
    let chain = crate::model::initial_root_chain(
        &tspec,
        input_shape,
        task,
        derive_seed(cfg.rng_seed, "root", 0),
    )?;
    let out_shape = chain.last().unwrap().output_shape.clone();
    let solver =
        build_module(&specs.solver, &out_shape, task, derive_seed(cfg.rng_seed, "root", 1))?;
    AntModel::new_root(task, input_shape.to_vec(), chain, solver)
}
