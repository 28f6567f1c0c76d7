//! The tree model: binary topology with a routed mixture of leaf predictors.
//! Internal nodes hold routers, leaves hold solvers, and every edge (plus the
//! extra edge feeding the root) carries a chain of transformers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PreprocessState;
use crate::kernels;
use crate::module::{
    build_module, ModuleInstance, ModuleKind, ModuleSpec, PredictiveDistribution, TaskKind,
};
use crate::tensor::Tensor;
use crate::{AntError, Result};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Internal { left: NodeId, right: NodeId },
    Leaf,
}

#[derive(Clone, Debug)]
struct NodeRec {
    kind: NodeKind,
    parent: Option<NodeId>,
    /// Tree level, root at 0. Orders the growth frontier.
    depth: usize,
}

/// Which module at a node a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRole {
    /// Index into the node's incoming transformer chain.
    Edge(usize),
    Router,
    Solver,
}

/// Stable module address: node plus role.
pub type ModuleAddr = (NodeId, ParamRole);

/// Stable parameter address within a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub node: NodeId,
    pub role: ParamRole,
    /// Index into the module's parameter list (weights and biases in layer order).
    pub idx: usize,
}

/// Per-sample leaf probabilities with cached per-node features and raw router
/// decisions. Leaves are listed in depth-first order, left subtree first.
#[derive(Clone, Debug)]
pub struct LeafAssignment {
    pub leaves: Vec<NodeId>,
    pub pi: Vec<f64>,
    pub features: BTreeMap<NodeId, Tensor>,
    pub decisions: BTreeMap<NodeId, f64>,
}

/// Batched traversal record over a batch of B samples.
pub struct BatchedEval {
    pub leaves: Vec<NodeId>,
    /// [B, L] leaf probabilities, columns in `leaves` order.
    pub pi: Tensor,
    /// Router output per live internal node, length B.
    pub router_probs: BTreeMap<NodeId, Vec<f64>>,
    /// Reach probability per node, length B; zero inside pruned subtrees.
    pub node_reach: BTreeMap<NodeId, Vec<f64>>,
    /// Solver output rows per live leaf: probabilities (classification) or
    /// means (regression), shape [B, out].
    pub leaf_dists: BTreeMap<NodeId, Tensor>,
}

#[derive(Clone, Debug)]
pub struct AntModel {
    pub task: TaskKind,
    pub input_shape: Vec<usize>,
    nodes: Vec<NodeRec>,
    root: NodeId,
    /// Incoming transformer chain per node; index = node id. Never empty.
    edges: Vec<Vec<ModuleInstance>>,
    routers: Vec<Option<ModuleInstance>>,
    solvers: Vec<Option<ModuleInstance>>,
    /// Preprocessing statistics fitted on training data; saved with the model.
    pub preprocess: PreprocessState,
    /// Diagnostic router overrides. An exact 0 or 1 routes deterministically
    /// and prunes the dead side from traversal and loss. Not persisted.
    pub forced: BTreeMap<NodeId, f64>,
}

impl AntModel {
    /// Single-leaf model: the extra root edge carries `root_chain`, the root
    /// node holds `solver`.
    pub fn new_root(
        task: TaskKind,
        input_shape: Vec<usize>,
        root_chain: Vec<ModuleInstance>,
        solver: ModuleInstance,
    ) -> Result<Self> {
        if root_chain.is_empty() {
            return Err(AntError::Model("root edge must carry at least one transformer".into()));
        }
        if solver.spec.kind != ModuleKind::Solver {
            return Err(AntError::Model("root module must be a solver".into()));
        }
        Ok(AntModel {
            task,
            input_shape,
            nodes: vec![NodeRec { kind: NodeKind::Leaf, parent: None, depth: 0 }],
            root: 0,
            edges: vec![root_chain],
            routers: vec![None],
            solvers: vec![Some(solver)],
            preprocess: PreprocessState::None,
            forced: BTreeMap::new(),
        })
    }

    // -- structure accessors ------------------------------------------------

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn kind(&self, n: NodeId) -> &NodeKind {
        &self.nodes[n].kind
    }

    pub fn parent(&self, n: NodeId) -> Option<NodeId> {
        self.nodes[n].parent
    }

    pub fn depth(&self, n: NodeId) -> usize {
        self.nodes[n].depth
    }

    pub fn is_leaf(&self, n: NodeId) -> bool {
        matches!(self.nodes[n].kind, NodeKind::Leaf)
    }

    pub fn children(&self, n: NodeId) -> Option<(NodeId, NodeId)> {
        match self.nodes[n].kind {
            NodeKind::Internal { left, right } => Some((left, right)),
            NodeKind::Leaf => None,
        }
    }

    pub fn edge_chain(&self, n: NodeId) -> &[ModuleInstance] {
        &self.edges[n]
    }

    pub fn router(&self, n: NodeId) -> Option<&ModuleInstance> {
        self.routers[n].as_ref()
    }

    pub fn solver(&self, n: NodeId) -> Option<&ModuleInstance> {
        self.solvers[n].as_ref()
    }

    /// Leaves in depth-first order, left subtree first.
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            match self.nodes[n].kind {
                NodeKind::Leaf => out.push(n),
                NodeKind::Internal { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        out
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves().len()
    }

    /// Nodes from the root down to `n`, inclusive.
    pub fn path_to(&self, n: NodeId) -> Vec<NodeId> {
        let mut path = vec![n];
        let mut cur = n;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Feature shape after a node's incoming transformer chain.
    pub fn shape_at(&self, n: NodeId) -> &[usize] {
        &self.edges[n].last().unwrap().output_shape
    }

    /// Number of parameterized transformers on the root path through `n`
    /// (identity and pooling pseudo-transformers do not count).
    pub fn parameterized_transformers_on_path(&self, n: NodeId) -> usize {
        self.path_to(n)
            .iter()
            .map(|&p| self.edges[p].iter().filter(|m| m.spec.has_params()).count())
            .sum()
    }

    /// Module depth used against the growth safeguard: routers plus
    /// parameterized transformers on the root path.
    pub fn module_depth(&self, n: NodeId) -> usize {
        let path = self.path_to(n);
        let routers = path.iter().filter(|&&p| self.routers[p].is_some()).count();
        routers + self.parameterized_transformers_on_path(n)
    }

    /// All module addresses in deterministic order.
    pub fn module_addrs(&self) -> Vec<ModuleAddr> {
        let mut out = Vec::new();
        for n in 0..self.nodes.len() {
            for i in 0..self.edges[n].len() {
                out.push((n, ParamRole::Edge(i)));
            }
            if self.routers[n].is_some() {
                out.push((n, ParamRole::Router));
            }
            if self.solvers[n].is_some() {
                out.push((n, ParamRole::Solver));
            }
        }
        out
    }

    pub fn module(&self, addr: ModuleAddr) -> &ModuleInstance {
        match addr.1 {
            ParamRole::Edge(i) => &self.edges[addr.0][i],
            ParamRole::Router => self.routers[addr.0].as_ref().unwrap(),
            ParamRole::Solver => self.solvers[addr.0].as_ref().unwrap(),
        }
    }

    pub fn module_mut(&mut self, addr: ModuleAddr) -> &mut ModuleInstance {
        match addr.1 {
            ParamRole::Edge(i) => &mut self.edges[addr.0][i],
            ParamRole::Router => self.routers[addr.0].as_mut().unwrap(),
            ParamRole::Solver => self.solvers[addr.0].as_mut().unwrap(),
        }
    }

    /// All parameter addresses in deterministic order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut out = Vec::new();
        for addr in self.module_addrs() {
            for idx in 0..self.module(addr).num_params_tensors() {
                out.push(ParamKey { node: addr.0, role: addr.1, idx });
            }
        }
        out
    }

    pub fn param(&self, key: ParamKey) -> &Tensor {
        self.module((key.node, key.role)).params().nth(key.idx).unwrap()
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor {
        self.module_mut((key.node, key.role)).params_mut().nth(key.idx).unwrap()
    }

    /// Sum of a simple checksum over the given modules; used by tests to
    /// verify freezing.
    pub fn checksum(&self, addrs: &[ModuleAddr]) -> f64 {
        let mut acc = 0.0;
        for &a in addrs {
            for t in self.module(a).params() {
                for (i, v) in t.data.iter().enumerate() {
                    acc += v * ((i % 97) as f64 + 1.0);
                }
            }
        }
        acc
    }

    // -- forward ------------------------------------------------------------

    fn check_raw_input(&self, x: &Tensor, op: &'static str) -> Result<bool> {
        if x.shape == self.input_shape {
            return Ok(false);
        }
        if x.rank() == self.input_shape.len() + 1 && x.shape[1..] == self.input_shape[..] {
            return Ok(true);
        }
        Err(AntError::shape(
            op,
            format!("model expects input {:?} (optionally batched), got {:?}", self.input_shape, x.shape),
        ))
    }

    fn apply_chain(&self, n: NodeId, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for m in &self.edges[n] {
            cur = m.forward_plain(&cur)?;
        }
        Ok(cur)
    }

    /// Router output for a batched feature tensor: forced value or the
    /// clamped module output, as a length-B vector.
    fn router_probs_at(&self, n: NodeId, feat: &Tensor, b: usize) -> Result<Vec<f64>> {
        if let Some(&p) = self.forced.get(&n) {
            return Ok(vec![p; b]);
        }
        let r = self.routers[n].as_ref().unwrap().router_forward(feat)?;
        Ok(r.data)
    }

    /// One traversal computing every node feature once. Subtrees behind a
    /// forced 0/1 router are skipped entirely; their leaves keep probability
    /// zero and contribute nothing to the mixture.
    pub fn eval_batch(&self, x: &Tensor) -> Result<BatchedEval> {
        Ok(self.eval_batch_capture(x, None)?.0)
    }

    /// `eval_batch` that additionally returns the feature tensor entering the
    /// given node's router/solver (after its incoming edge chain).
    pub fn eval_batch_capture(
        &self,
        x: &Tensor,
        capture: Option<NodeId>,
    ) -> Result<(BatchedEval, Option<Tensor>)> {
        let batched = self.check_raw_input(x, "eval")?;
        let xb = if batched {
            x.clone()
        } else {
            let mut shape = vec![1];
            shape.extend_from_slice(&x.shape);
            Tensor { shape, data: x.data.clone() }
        };
        let b = xb.shape[0];
        let leaves = self.leaves();
        let lpos: BTreeMap<NodeId, usize> = leaves.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let mut ev = BatchedEval {
            leaves: leaves.clone(),
            pi: Tensor::zeros(&[b, leaves.len()]),
            router_probs: BTreeMap::new(),
            node_reach: BTreeMap::new(),
            leaf_dists: BTreeMap::new(),
        };
        // mark every node unreachable by default so pruned subtrees report 0
        for n in 0..self.nodes.len() {
            ev.node_reach.insert(n, vec![0.0; b]);
        }
        let mut captured = None;
        self.eval_rec(self.root, &xb, None, b, &lpos, &mut ev, capture, &mut captured)?;
        Ok((ev, captured))
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_rec(
        &self,
        n: NodeId,
        parent_feat: &Tensor,
        reach: Option<&[f64]>,
        b: usize,
        lpos: &BTreeMap<NodeId, usize>,
        ev: &mut BatchedEval,
        capture: Option<NodeId>,
        captured: &mut Option<Tensor>,
    ) -> Result<()> {
        let feat = self.apply_chain(n, parent_feat)?;
        if capture == Some(n) {
            *captured = Some(feat.clone());
        }
        let reach_vec: Vec<f64> = match reach {
            Some(r) => r.to_vec(),
            None => vec![1.0; b],
        };
        ev.node_reach.insert(n, reach_vec.clone());
        match self.nodes[n].kind {
            NodeKind::Leaf => {
                let solver = self.solvers[n].as_ref().unwrap();
                let out = solver.forward_plain(&feat)?;
                let dist = if solver.spec.is_classifier_solver() {
                    kernels::softmax_fwd(&out)?
                } else {
                    out
                };
                let col = lpos[&n];
                let l = ev.leaves.len();
                for i in 0..b {
                    ev.pi.data[i * l + col] = reach_vec[i];
                }
                ev.leaf_dists.insert(n, dist);
            }
            NodeKind::Internal { left, right } => {
                let probs = self.router_probs_at(n, &feat, b)?;
                let forced = self.forced.get(&n).copied();
                ev.router_probs.insert(n, probs.clone());
                let go_left = forced != Some(0.0);
                let go_right = forced != Some(1.0);
                if go_left {
                    let r: Vec<f64> = reach_vec.iter().zip(&probs).map(|(a, p)| a * p).collect();
                    self.eval_rec(left, &feat, Some(&r), b, lpos, ev, capture, captured)?;
                }
                if go_right {
                    let r: Vec<f64> =
                        reach_vec.iter().zip(&probs).map(|(a, p)| a * (1.0 - p)).collect();
                    self.eval_rec(right, &feat, Some(&r), b, lpos, ev, capture, captured)?;
                }
            }
        }
        Ok(())
    }

    /// Exact mixture over leaves for a batch: [B, out].
    pub fn mixture_batch(&self, ev: &BatchedEval) -> Tensor {
        let b = ev.pi.shape[0];
        let k = self.task.output_dim();
        let l = ev.leaves.len();
        let mut out = Tensor::zeros(&[b, k]);
        for (col, leaf) in ev.leaves.iter().enumerate() {
            let Some(dist) = ev.leaf_dists.get(leaf) else { continue };
            for i in 0..b {
                let w = ev.pi.data[i * l + col];
                if w == 0.0 {
                    continue;
                }
                for j in 0..k {
                    out.data[i * k + j] += w * dist.data[i * k + j];
                }
            }
        }
        out
    }

    /// Greedy leaf choice per sample from recorded router outputs.
    pub fn greedy_leaves(&self, ev: &BatchedEval) -> Vec<NodeId> {
        let b = ev.pi.shape[0];
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut n = self.root;
            while let NodeKind::Internal { left, right } = self.nodes[n].kind {
                let p = ev.router_probs[&n][i];
                n = if p >= 0.5 { left } else { right };
            }
            out.push(n);
        }
        out
    }

    /// Leaf probabilities and cached features for a single sample.
    pub fn leaf_assignment(&self, x: &Tensor) -> Result<LeafAssignment> {
        if self.check_raw_input(x, "leaf-assignment")? {
            return Err(AntError::shape("leaf-assignment", "expects a single sample"));
        }
        let ev = self.eval_batch(x)?;
        // re-walk to capture per-node features at B=1
        let mut features = BTreeMap::new();
        let mut stack = vec![(self.root, x.clone())];
        while let Some((n, parent_feat)) = stack.pop() {
            let feat = self.apply_chain(n, &parent_feat)?;
            if let NodeKind::Internal { left, right } = self.nodes[n].kind {
                let forced = self.forced.get(&n).copied();
                if forced != Some(0.0) {
                    stack.push((left, feat.clone()));
                }
                if forced != Some(1.0) {
                    stack.push((right, feat.clone()));
                }
            }
            features.insert(n, feat);
        }
        let decisions = ev.router_probs.iter().map(|(&n, v)| (n, v[0])).collect();
        Ok(LeafAssignment {
            leaves: ev.leaves.clone(),
            pi: ev.pi.data.clone(),
            features,
            decisions,
        })
    }

    fn wrap_output(&self, row: Tensor) -> PredictiveDistribution {
        match self.task {
            TaskKind::Classification { .. } => PredictiveDistribution::Classification(row),
            TaskKind::Regression { .. } => PredictiveDistribution::Regression(row),
        }
    }

    /// Full mixture prediction for one sample.
    pub fn predict_multi_path(&self, x: &Tensor) -> Result<PredictiveDistribution> {
        if self.check_raw_input(x, "predict")? {
            return Err(AntError::shape("predict", "expects a single sample"));
        }
        let ev = self.eval_batch(x)?;
        let mix = self.mixture_batch(&ev);
        Ok(self.wrap_output(mix.unstack_row(0)))
    }

    /// Greedy traversal evaluating only the chosen path. Ties at 0.5 go left.
    pub fn predict_single_path(
        &self,
        x: &Tensor,
    ) -> Result<(PredictiveDistribution, NodeId, Vec<NodeId>)> {
        if self.check_raw_input(x, "predict")? {
            return Err(AntError::shape("predict", "expects a single sample"));
        }
        let mut n = self.root;
        let mut feat = self.apply_chain(n, x)?;
        let mut path = vec![n];
        loop {
            match self.nodes[n].kind {
                NodeKind::Leaf => {
                    let dist = self.solvers[n].as_ref().unwrap().solver_forward(&feat)?;
                    return Ok((dist, n, path));
                }
                NodeKind::Internal { left, right } => {
                    let p = self.router_probs_at(n, &feat, 1)?[0];
                    n = if p >= 0.5 { left } else { right };
                    feat = self.apply_chain(n, &feat)?;
                    path.push(n);
                }
            }
        }
    }

    /// Bernoulli routing: sample a leaf, drawing one decision per internal
    /// node along the realized path. Deterministic in the seed.
    pub fn sample_route(&self, x: &Tensor, rng_seed: u64) -> Result<NodeId> {
        if self.check_raw_input(x, "sample-route")? {
            return Err(AntError::shape("sample-route", "expects a single sample"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut n = self.root;
        let mut feat = self.apply_chain(n, x)?;
        loop {
            match self.nodes[n].kind {
                NodeKind::Leaf => return Ok(n),
                NodeKind::Internal { left, right } => {
                    let p = self.router_probs_at(n, &feat, 1)?[0];
                    let u: f64 = rng.gen();
                    n = if u < p { left } else { right };
                    feat = self.apply_chain(n, &feat)?;
                }
            }
        }
    }

    // -- growth mutations ---------------------------------------------------

    fn assert_leaf(&self, n: NodeId, op: &'static str) -> Result<()> {
        if n >= self.nodes.len() {
            return Err(AntError::Model(format!("{}: no node {}", op, n)));
        }
        if !self.is_leaf(n) {
            return Err(AntError::Model(format!("{}: node {} is not a leaf", op, n)));
        }
        Ok(())
    }

    /// Install a trained router and child solvers at `leaf`, which becomes an
    /// internal node; the two new edges carry identity transformers. All
    /// other parameters are untouched.
    pub fn split_leaf_installed(
        &self,
        leaf: NodeId,
        router: ModuleInstance,
        left_solver: ModuleInstance,
        right_solver: ModuleInstance,
    ) -> Result<AntModel> {
        self.assert_leaf(leaf, "split-leaf")?;
        let mut m = self.clone();
        let depth = m.nodes[leaf].depth;
        let shape = m.shape_at(leaf).to_vec();
        let identity = || build_module(&ModuleSpec::identity_transformer(), &shape, m.task, 0);
        let l = m.nodes.len();
        let r = l + 1;
        m.nodes.push(NodeRec { kind: NodeKind::Leaf, parent: Some(leaf), depth: depth + 1 });
        m.nodes.push(NodeRec { kind: NodeKind::Leaf, parent: Some(leaf), depth: depth + 1 });
        m.edges.push(vec![identity()?]);
        m.edges.push(vec![identity()?]);
        m.routers.push(None);
        m.routers.push(None);
        m.solvers.push(Some(left_solver));
        m.solvers.push(Some(right_solver));
        m.nodes[leaf].kind = NodeKind::Internal { left: l, right: r };
        m.routers[leaf] = Some(router);
        m.solvers[leaf] = None;
        Ok(m)
    }

    /// The split mutation with freshly initialized modules.
    pub fn split_leaf(
        &self,
        leaf: NodeId,
        router_spec: &ModuleSpec,
        solver_spec: &ModuleSpec,
        rng_seed: u64,
    ) -> Result<AntModel> {
        self.assert_leaf(leaf, "split-leaf")?;
        let shape = self.shape_at(leaf).to_vec();
        let router = build_module(router_spec, &shape, self.task, rng_seed)?;
        let ls = build_module(solver_spec, &shape, self.task, rng_seed.wrapping_add(1))?;
        let rs = build_module(solver_spec, &shape, self.task, rng_seed.wrapping_add(2))?;
        self.split_leaf_installed(leaf, router, ls, rs)
    }

    /// Whether deepening at `leaf` must append a pooling stage after the new
    /// transformer: every `d` parameterized transformers on the root path,
    /// skipped once either spatial extent is 2 or less.
    pub fn pool_after_deepen(&self, leaf: NodeId, transformer_spec: &ModuleSpec, shape_after: &[usize]) -> bool {
        let d = transformer_spec.downsample_freq;
        if d == 0 || !transformer_spec.has_params() {
            return false;
        }
        let count = self.parameterized_transformers_on_path(leaf) + 1;
        if count % d != 0 {
            return false;
        }
        shape_after.len() == 3 && shape_after[1] > 2 && shape_after[2] > 2
    }

    /// Install trained deepen modules: transformers appended to the leaf's
    /// incoming edge, fresh solver replacing the old one.
    pub fn deepen_edge_installed(
        &self,
        leaf: NodeId,
        new_transformers: Vec<ModuleInstance>,
        solver: ModuleInstance,
    ) -> Result<AntModel> {
        self.assert_leaf(leaf, "deepen-edge")?;
        if new_transformers.is_empty() {
            return Err(AntError::Model("deepen-edge: no transformer given".into()));
        }
        let mut m = self.clone();
        m.edges[leaf].extend(new_transformers);
        m.solvers[leaf] = Some(solver);
        Ok(m)
    }

    /// The deepen mutation with freshly initialized modules, honoring the
    /// downsample rule of the transformer spec.
    pub fn deepen_edge(
        &self,
        leaf: NodeId,
        transformer_spec: &ModuleSpec,
        solver_spec: &ModuleSpec,
        rng_seed: u64,
    ) -> Result<AntModel> {
        self.assert_leaf(leaf, "deepen-edge")?;
        let shape = self.shape_at(leaf).to_vec();
        let t = build_module(transformer_spec, &shape, self.task, rng_seed)?;
        let mut chain = vec![t];
        if self.pool_after_deepen(leaf, transformer_spec, &chain[0].output_shape) {
            let pool = build_module(&ModuleSpec::maxpool_transformer(), &chain[0].output_shape, self.task, 0)?;
            chain.push(pool);
        }
        let out_shape = chain.last().unwrap().output_shape.clone();
        let solver = build_module(solver_spec, &out_shape, self.task, rng_seed.wrapping_add(1))?;
        self.deepen_edge_installed(leaf, chain, solver)
    }

    // -- accounting ---------------------------------------------------------

    /// Parameters of the modules on the root path to `leaf`: edge
    /// transformers, routers passed, and the leaf solver.
    pub fn path_params(&self, leaf: NodeId) -> u64 {
        let mut total = 0u64;
        for n in self.path_to(leaf) {
            for m in &self.edges[n] {
                total += m.param_count() as u64;
            }
            if let Some(r) = &self.routers[n] {
                total += r.param_count() as u64;
            }
        }
        total + self.solvers[leaf].as_ref().map(|s| s.param_count() as u64).unwrap_or(0)
    }

    pub fn path_flops(&self, leaf: NodeId) -> u64 {
        let mut total = 0u64;
        for n in self.path_to(leaf) {
            for m in &self.edges[n] {
                total += m.flops();
            }
            if let Some(r) = &self.routers[n] {
                total += r.flops();
            }
        }
        total + self.solvers[leaf].as_ref().map(|s| s.flops()).unwrap_or(0)
    }

    pub fn total_params(&self) -> u64 {
        self.module_addrs().iter().map(|&a| self.module(a).param_count() as u64).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.module_addrs().iter().map(|&a| self.module(a).flops()).sum()
    }

    /// Parameter count: the full model, or the dataset-average over greedy
    /// single-path inference.
    pub fn count_params(&self, mode: CountMode, data: Option<&crate::data::Dataset>) -> Result<f64> {
        self.count_cost(mode, data, |m, leaf| m.path_params(leaf), |m| m.total_params())
    }

    pub fn count_flops(&self, mode: CountMode, data: Option<&crate::data::Dataset>) -> Result<f64> {
        self.count_cost(mode, data, |m, leaf| m.path_flops(leaf), |m| m.total_flops())
    }

    fn count_cost(
        &self,
        mode: CountMode,
        data: Option<&crate::data::Dataset>,
        per_leaf: impl Fn(&AntModel, NodeId) -> u64,
        total: impl Fn(&AntModel) -> u64,
    ) -> Result<f64> {
        match mode {
            CountMode::MultiPath => Ok(total(self) as f64),
            CountMode::SinglePath => {
                let data = data.ok_or_else(|| {
                    AntError::Model("single-path accounting needs a dataset".into())
                })?;
                if data.len() == 0 {
                    return Err(AntError::Model("single-path accounting needs a non-empty dataset".into()));
                }
                let costs: BTreeMap<NodeId, u64> =
                    self.leaves().into_iter().map(|l| (l, per_leaf(self, l))).collect();
                let mut acc = 0.0;
                let mut seen = 0usize;
                for chunk in data.chunks(1024) {
                    let ev = self.eval_batch(&chunk.0)?;
                    for leaf in self.greedy_leaves(&ev) {
                        acc += costs[&leaf] as f64;
                        seen += 1;
                    }
                }
                Ok(acc / seen as f64)
            }
        }
    }

    // -- pruning ------------------------------------------------------------

    /// Rebuild the tree without the given leaves. When one child of an
    /// internal node disappears, the surviving child takes the parent's
    /// place and the two incoming edges are concatenated. Ids are reassigned
    /// in depth-first order. Refuses to remove every leaf.
    pub fn pruned(&self, remove: &[NodeId]) -> Result<AntModel> {
        let leaves = self.leaves();
        for n in remove {
            if !leaves.contains(n) {
                return Err(AntError::Model(format!("prune: {} is not a leaf", n)));
            }
        }
        if remove.len() >= leaves.len() {
            return Err(AntError::Model("prune: cannot remove every leaf".into()));
        }
        let mut m = AntModel {
            task: self.task,
            input_shape: self.input_shape.clone(),
            nodes: Vec::new(),
            root: 0,
            edges: Vec::new(),
            routers: Vec::new(),
            solvers: Vec::new(),
            preprocess: self.preprocess.clone(),
            forced: BTreeMap::new(),
        };
        self.prune_rec(self.root, Vec::new(), None, remove, &mut m)?;
        Ok(m)
    }

    /// Returns the surviving subtree root at `n` copied into `m`, or None if
    /// the whole subtree is pruned. `prefix` carries merged edge transformers
    /// from collapsed ancestors.
    fn prune_rec(
        &self,
        n: NodeId,
        prefix: Vec<ModuleInstance>,
        parent: Option<NodeId>,
        remove: &[NodeId],
        m: &mut AntModel,
    ) -> Result<Option<NodeId>> {
        let mut chain = prefix;
        chain.extend(self.edges[n].iter().cloned());
        match self.nodes[n].kind {
            NodeKind::Leaf => {
                if remove.contains(&n) {
                    return Ok(None);
                }
                let id = m.nodes.len();
                let depth = parent.map(|p| m.nodes[p].depth + 1).unwrap_or(0);
                m.nodes.push(NodeRec { kind: NodeKind::Leaf, parent, depth });
                m.edges.push(chain);
                m.routers.push(None);
                m.solvers.push(self.solvers[n].clone());
                Ok(Some(id))
            }
            NodeKind::Internal { left, right } => {
                // tentatively decide which sides survive by looking at leaves
                let left_alive = self.subtree_has_survivor(left, remove);
                let right_alive = self.subtree_has_survivor(right, remove);
                match (left_alive, right_alive) {
                    (false, false) => Ok(None),
                    (true, false) => self.prune_rec(left, chain, parent, remove, m),
                    (false, true) => self.prune_rec(right, chain, parent, remove, m),
                    (true, true) => {
                        let id = m.nodes.len();
                        let depth = parent.map(|p| m.nodes[p].depth + 1).unwrap_or(0);
                        m.nodes.push(NodeRec { kind: NodeKind::Leaf, parent, depth });
                        m.edges.push(chain);
                        m.routers.push(self.routers[n].clone());
                        m.solvers.push(None);
                        let l = self.prune_rec(left, Vec::new(), Some(id), remove, m)?.unwrap();
                        let r = self.prune_rec(right, Vec::new(), Some(id), remove, m)?.unwrap();
                        m.nodes[id].kind = NodeKind::Internal { left: l, right: r };
                        Ok(Some(id))
                    }
                }
            }
        }
    }

    fn subtree_has_survivor(&self, n: NodeId, remove: &[NodeId]) -> bool {
        match self.nodes[n].kind {
            NodeKind::Leaf => !remove.contains(&n),
            NodeKind::Internal { left, right } => {
                self.subtree_has_survivor(left, remove) || self.subtree_has_survivor(right, remove)
            }
        }
    }

    /// Structural sanity check used by tests and after deserialization.
    pub fn validate(&self) -> Result<()> {
        for n in 0..self.nodes.len() {
            if self.edges[n].is_empty() {
                return Err(AntError::Model(format!("node {}: empty incoming edge", n)));
            }
            // chained shapes must agree
            let mut shape: Vec<usize> = match self.nodes[n].parent {
                Some(p) => self.shape_at(p).to_vec(),
                None => self.input_shape.clone(),
            };
            for t in &self.edges[n] {
                if t.input_shape != shape {
                    return Err(AntError::Model(format!(
                        "node {}: transformer expects {:?}, path provides {:?}",
                        n, t.input_shape, shape
                    )));
                }
                shape = t.output_shape.clone();
            }
            match self.nodes[n].kind {
                NodeKind::Leaf => {
                    if self.solvers[n].is_none() || self.routers[n].is_some() {
                        return Err(AntError::Model(format!("leaf {}: needs a solver and no router", n)));
                    }
                }
                NodeKind::Internal { left, right } => {
                    if self.routers[n].is_none() || self.solvers[n].is_some() {
                        return Err(AntError::Model(format!(
                            "internal {}: needs a router and no solver",
                            n
                        )));
                    }
                    for c in [left, right] {
                        if self.nodes[c].parent != Some(n) {
                            return Err(AntError::Model(format!("node {}: broken parent link", c)));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Raw constructor for deserialization; validates structure.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        task: TaskKind,
        input_shape: Vec<usize>,
        nodes: Vec<(NodeKind, Option<NodeId>, usize)>,
        edges: Vec<Vec<ModuleInstance>>,
        routers: Vec<Option<ModuleInstance>>,
        solvers: Vec<Option<ModuleInstance>>,
        preprocess: PreprocessState,
    ) -> Result<AntModel> {
        let nodes = nodes
            .into_iter()
            .map(|(kind, parent, depth)| NodeRec { kind, parent, depth })
            .collect();
        let m = AntModel {
            task,
            input_shape,
            nodes,
            root: 0,
            edges,
            routers,
            solvers,
            preprocess,
            forced: BTreeMap::new(),
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    MultiPath,
    SinglePath,
}

/// Build the initial root-edge chain from a transformer spec, applying the
/// same downsample rule the deepen mutation uses (the first parameterized
/// transformer counts as one).
pub fn initial_root_chain(
    spec: &ModuleSpec,
    input_shape: &[usize],
    task: TaskKind,
    rng_seed: u64,
) -> Result<Vec<ModuleInstance>> {
    let t = build_module(spec, input_shape, task, rng_seed)?;
    let mut chain = vec![t];
    let d = spec.downsample_freq;
    if d > 0 && spec.has_params() && 1 % d == 0 {
        let os = chain[0].output_shape.clone();
        if os.len() == 3 && os[1] > 2 && os[2] > 2 {
            chain.push(build_module(&ModuleSpec::maxpool_transformer(), &os, task, 0)?);
        }
    }
    Ok(chain)
}
