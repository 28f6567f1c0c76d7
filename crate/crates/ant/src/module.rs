//! Routers, transformers, and solvers built from declarative layer recipes.
//!
//! Recipe grammar (comma-separated tokens):
//!   convK-C    2D convolution, K x K kernel (odd), C output channels
//!   fcN        fully connected layer with N outputs
//!   relu tanh sigmoid gap maxpool identity
//!   lc         linear classifier head (solver only)
//!   lr         linear regressor head (solver only)
//! A dense layer on a conv-shaped input flattens it implicitly. Routers must
//! end "fc1,sigmoid"; solvers must end "lc" or "lr".

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::kernels;
use crate::tensor::Tensor;
use crate::{AntError, Result};

/// Router outputs are clamped into [CLAMP, 1-CLAMP] before entering products
/// and logs; the bound sits well below every reported tolerance.
pub const ROUTER_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleKind {
    Router,
    Transformer,
    Solver,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Classification { classes: usize },
    Regression { dim: usize },
}

impl TaskKind {
    pub fn output_dim(&self) -> usize {
        match *self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression { dim } => dim,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TaskKind::Classification { classes } => write!(f, "classification/{}", classes),
            TaskKind::Regression { dim } => write!(f, "regression/{}", dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { k: usize, c: usize },
    Fc { n: usize },
    Relu,
    Tanh,
    Sigmoid,
    Gap,
    MaxPool,
    Lc,
    Lr,
    Identity,
}

impl LayerSpec {
    fn token(&self) -> String {
        match self {
            LayerSpec::Conv { k, c } => format!("conv{}-{}", k, c),
            LayerSpec::Fc { n } => format!("fc{}", n),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Tanh => "tanh".into(),
            LayerSpec::Sigmoid => "sigmoid".into(),
            LayerSpec::Gap => "gap".into(),
            LayerSpec::MaxPool => "maxpool".into(),
            LayerSpec::Lc => "lc".into(),
            LayerSpec::Lr => "lr".into(),
            LayerSpec::Identity => "identity".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleSpec {
    pub kind: ModuleKind,
    pub layers: Vec<LayerSpec>,
    /// Downsample frequency; meaningful on transformer specs during growth.
    pub downsample_freq: usize,
}

fn parse_token(tok: &str) -> Result<LayerSpec> {
    let bad = |t: &str| AntError::Recipe(format!("unknown layer token '{}'", t));
    match tok {
        "relu" => return Ok(LayerSpec::Relu),
        "tanh" => return Ok(LayerSpec::Tanh),
        "sigmoid" => return Ok(LayerSpec::Sigmoid),
        "gap" => return Ok(LayerSpec::Gap),
        "maxpool" => return Ok(LayerSpec::MaxPool),
        "lc" => return Ok(LayerSpec::Lc),
        "lr" => return Ok(LayerSpec::Lr),
        "identity" => return Ok(LayerSpec::Identity),
        _ => {}
    }
    if let Some(rest) = tok.strip_prefix("conv") {
        let (k, c) = rest.split_once('-').ok_or_else(|| bad(tok))?;
        let k: usize = k.parse().map_err(|_| bad(tok))?;
        let c: usize = c.parse().map_err(|_| bad(tok))?;
        if k == 0 || k % 2 == 0 {
            return Err(AntError::Recipe(format!("conv kernel must be odd and positive: '{}'", tok)));
        }
        if c == 0 {
            return Err(AntError::Recipe(format!("conv channel count must be positive: '{}'", tok)));
        }
        return Ok(LayerSpec::Conv { k, c });
    }
    if let Some(rest) = tok.strip_prefix("fc") {
        let n: usize = rest.parse().map_err(|_| bad(tok))?;
        if n == 0 {
            return Err(AntError::Recipe(format!("fc width must be positive: '{}'", tok)));
        }
        return Ok(LayerSpec::Fc { n });
    }
    Err(bad(tok))
}

impl ModuleSpec {
    pub fn parse(kind: ModuleKind, recipe: &str, downsample_freq: usize) -> Result<Self> {
        let layers: Vec<LayerSpec> = recipe
            .split(',')
            .map(|t| parse_token(t.trim()))
            .collect::<Result<_>>()?;
        if layers.is_empty() {
            return Err(AntError::Recipe("empty recipe".into()));
        }
        let heads = layers.iter().filter(|l| matches!(l, LayerSpec::Lc | LayerSpec::Lr)).count();
        match kind {
            ModuleKind::Router => {
                if heads != 0 {
                    return Err(AntError::Recipe(format!("router recipe '{}' may not contain lc/lr", recipe)));
                }
                let n = layers.len();
                let ok = n >= 2
                    && layers[n - 1] == LayerSpec::Sigmoid
                    && layers[n - 2] == LayerSpec::Fc { n: 1 };
                if !ok {
                    return Err(AntError::Recipe(format!(
                        "router recipe '{}' must end with 'fc1,sigmoid'",
                        recipe
                    )));
                }
            }
            ModuleKind::Solver => {
                let last_is_head = matches!(layers.last(), Some(LayerSpec::Lc | LayerSpec::Lr));
                if heads != 1 || !last_is_head {
                    return Err(AntError::Recipe(format!(
                        "solver recipe '{}' must end with a single 'lc' or 'lr'",
                        recipe
                    )));
                }
            }
            ModuleKind::Transformer => {
                if heads != 0 {
                    return Err(AntError::Recipe(format!(
                        "transformer recipe '{}' may not contain lc/lr",
                        recipe
                    )));
                }
                if layers.contains(&LayerSpec::Identity) && layers.len() != 1 {
                    return Err(AntError::Recipe(format!(
                        "'identity' must be the whole recipe, got '{}'",
                        recipe
                    )));
                }
            }
        }
        Ok(ModuleSpec { kind, layers, downsample_freq })
    }

    pub fn identity_transformer() -> Self {
        ModuleSpec { kind: ModuleKind::Transformer, layers: vec![LayerSpec::Identity], downsample_freq: 0 }
    }

    pub fn maxpool_transformer() -> Self {
        ModuleSpec { kind: ModuleKind::Transformer, layers: vec![LayerSpec::MaxPool], downsample_freq: 0 }
    }

    pub fn recipe(&self) -> String {
        self.layers.iter().map(|l| l.token()).collect::<Vec<_>>().join(",")
    }

    /// Whether any layer carries weights.
    pub fn has_params(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Fc { .. } | LayerSpec::Lc | LayerSpec::Lr))
    }

    pub fn is_classifier_solver(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Lc))
    }
}

/// Resolved layer: spec token plus static shapes and (for weighted layers)
/// parameter tensors.
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// Dense layers flatten conv-shaped inputs first.
    pub flatten: bool,
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ModuleInstance {
    pub spec: ModuleSpec,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Predictive output of a solver: class probabilities or a regression mean.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictiveDistribution {
    Classification(Tensor),
    Regression(Tensor),
}

impl PredictiveDistribution {
    pub fn values(&self) -> &Tensor {
        match self {
            PredictiveDistribution::Classification(t) => t,
            PredictiveDistribution::Regression(t) => t,
        }
    }

    pub fn argmax(&self) -> usize {
        let v = self.values();
        let mut best = 0;
        for i in 1..v.len() {
            if v.data[i] > v.data[best] {
                best = i;
            }
        }
        best
    }
}

/// Layer-by-layer shape walk; errors name the offending layer.
fn walk_shapes(
    spec: &ModuleSpec,
    input_shape: &[usize],
    task: TaskKind,
) -> Result<Vec<(Vec<usize>, Vec<usize>, bool)>> {
    let mut cur = input_shape.to_vec();
    let mut out = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let fail = |msg: String| {
            AntError::Recipe(format!("layer {} ('{}') of '{}': {}", i + 1, l.token(), spec.recipe(), msg))
        };
        let in_shape = cur.clone();
        let mut flatten = false;
        match *l {
            LayerSpec::Conv { k, c } => {
                if cur.len() != 3 {
                    return Err(fail(format!("needs a [C,H,W] input, got {:?}", cur)));
                }
                if cur[1] < 1 || cur[2] < 1 {
                    return Err(fail(format!("degenerate spatial extent {:?}", cur)));
                }
                let _ = k;
                cur = vec![c, cur[1], cur[2]];
            }
            LayerSpec::Fc { n } => {
                flatten = cur.len() > 1;
                cur = vec![n];
            }
            LayerSpec::Lc | LayerSpec::Lr => {
                flatten = cur.len() > 1;
                cur = vec![task.output_dim()];
            }
            LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Sigmoid | LayerSpec::Identity => {}
            LayerSpec::Gap => {
                if cur.len() != 3 {
                    return Err(fail(format!("needs a [C,H,W] input, got {:?}", cur)));
                }
                cur = vec![cur[0]];
            }
            LayerSpec::MaxPool => {
                if cur.len() != 3 {
                    return Err(fail(format!("needs a [C,H,W] input, got {:?}", cur)));
                }
                if cur[1] < 2 || cur[2] < 2 {
                    return Err(fail(format!("spatial extent too small to pool: {:?}", cur)));
                }
                cur = vec![cur[0], cur[1] / 2, cur[2] / 2];
            }
        }
        out.push((in_shape, cur.clone(), flatten));
    }
    Ok(out)
}

/// Build a module from its spec: resolve shapes and initialize parameters.
/// Weights are uniform(-a, a) with a = sqrt(6/fan_in) for layers feeding a
/// ReLU and a = sqrt(6/(fan_in+fan_out)) otherwise; biases are zero, so a
/// fresh router answers 0.5 on centered input.
pub fn build_module(
    spec: &ModuleSpec,
    input_shape: &[usize],
    task: TaskKind,
    rng_seed: u64,
) -> Result<ModuleInstance> {
    let shapes = walk_shapes(spec, input_shape, task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let (in_shape, out_shape, flatten) = shapes[i].clone();
        let feeds_relu = matches!(spec.layers.get(i + 1), Some(LayerSpec::Relu));
        let (w, b) = match *l {
            LayerSpec::Conv { k, c } => {
                let cin = in_shape[0];
                let fan_in = (cin * k * k) as f64;
                let fan_out = (c * k * k) as f64;
                let a = if feeds_relu {
                    (6.0 / fan_in).sqrt()
                } else {
                    (6.0 / (fan_in + fan_out)).sqrt()
                };
                let n = c * cin * k * k;
                let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * a).collect();
                (Some(Tensor::new(vec![c, cin, k, k], data)?), Some(Tensor::zeros(&[c])))
            }
            LayerSpec::Fc { .. } | LayerSpec::Lc | LayerSpec::Lr => {
                let m: usize = in_shape.iter().product();
                let n = out_shape[0];
                let a = if feeds_relu {
                    (6.0 / m as f64).sqrt()
                } else {
                    (6.0 / (m + n) as f64).sqrt()
                };
                let data: Vec<f64> = (0..m * n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * a).collect();
                (Some(Tensor::new(vec![n, m], data)?), Some(Tensor::zeros(&[n])))
            }
            _ => (None, None),
        };
        layers.push(Layer { spec: *l, in_shape, out_shape, flatten, w, b });
    }
    let output_shape = layers.last().map(|l| l.out_shape.clone()).unwrap_or_else(|| input_shape.to_vec());
    Ok(ModuleInstance { spec: spec.clone(), input_shape: input_shape.to_vec(), output_shape, layers })
}

impl ModuleInstance {
    pub fn param_count(&self) -> usize {
        self.params().map(|t| t.len()).sum()
    }

    /// All parameter tensors in layer order, weight before bias.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn num_params_tensors(&self) -> usize {
        self.params().count()
    }

    /// FLOPs for one unbatched forward pass: multiply-accumulate counts 2,
    /// bias and activation 1 per element, pooling 1 per consumed input
    /// element. Classifier solvers include the softmax as one activation pass.
    pub fn flops(&self) -> u64 {
        let mut total: u64 = 0;
        for l in &self.layers {
            let in_elems: u64 = l.in_shape.iter().product::<usize>() as u64;
            let out_elems: u64 = l.out_shape.iter().product::<usize>() as u64;
            total += match l.spec {
                LayerSpec::Conv { k, c: _ } => {
                    let cin = l.in_shape[0] as u64;
                    out_elems * (2 * cin * (k * k) as u64 + 1)
                }
                LayerSpec::Fc { .. } | LayerSpec::Lc | LayerSpec::Lr => {
                    2 * in_elems * out_elems + out_elems
                }
                LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Sigmoid => out_elems,
                LayerSpec::Gap => in_elems,
                LayerSpec::MaxPool => out_elems * 4,
                LayerSpec::Identity => 0,
            };
        }
        if self.spec.kind == ModuleKind::Solver && self.spec.is_classifier_solver() {
            total += self.output_shape.iter().product::<usize>() as u64;
        }
        total
    }

    fn check_input(&self, x: &Tensor, op: &'static str) -> Result<bool> {
        let r = self.input_shape.len();
        if x.shape == self.input_shape {
            return Ok(false);
        }
        if x.rank() == r + 1 && x.shape[1..] == self.input_shape[..] {
            return Ok(true);
        }
        Err(AntError::shape(
            op,
            format!("module expects {:?} (optionally batched), got {:?}", self.input_shape, x.shape),
        ))
    }

    /// Plain forward without a tape; accepts a single sample or a batch.
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let batched = self.check_input(x, "module-forward")?;
        let mut cur = x.clone();
        for l in &self.layers {
            cur = apply_layer_plain(l, &cur, batched)?;
        }
        Ok(cur)
    }

    /// Forward on a tape. `params` supplies one Var per parameter tensor in
    /// the same order as `params()`; see `bind_params`.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let batched = self.check_input(tape.value(x), "module-forward")?;
        let mut cur = x;
        let mut pi = 0;
        for l in &self.layers {
            match l.spec {
                LayerSpec::Conv { .. } => {
                    let (w, b) = (params[pi], params[pi + 1]);
                    pi += 2;
                    cur = tape.conv2d(cur, w, b)?;
                }
                LayerSpec::Fc { .. } | LayerSpec::Lc | LayerSpec::Lr => {
                    let (w, b) = (params[pi], params[pi + 1]);
                    pi += 2;
                    if l.flatten {
                        cur = tape.flatten(cur, batched);
                    }
                    cur = tape.affine(cur, w, b)?;
                }
                LayerSpec::Relu => cur = tape.relu(cur),
                LayerSpec::Tanh => cur = tape.tanh(cur),
                LayerSpec::Sigmoid => cur = tape.sigmoid(cur),
                LayerSpec::Gap => cur = tape.gap(cur)?,
                LayerSpec::MaxPool => cur = tape.maxpool2x2(cur)?,
                LayerSpec::Identity => {}
            }
        }
        debug_assert_eq!(pi, self.num_params_tensors());
        Ok(cur)
    }

    /// Push this module's parameters onto a tape as leaves.
    pub fn bind_params(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Router decision: probability of the left branch, clamped away from the
    /// exact endpoints. Batched input gives one probability per row.
    /// Routing probabilities, one per sample. The raw sigmoid output is used
    /// at inference so fully polarized routers reach exactly 0 and 1; the
    /// training loss applies its own clamp where logs are taken.
    pub fn router_forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.spec.kind != ModuleKind::Router {
            return Err(AntError::shape("router-forward", "module is not a router"));
        }
        let y = self.forward_plain(x)?;
        let n = y.len();
        Ok(Tensor { shape: vec![n], data: y.data })
    }

    /// Feature transformation; the identity transformer returns its input.
    pub fn transformer_forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.spec.kind != ModuleKind::Transformer {
            return Err(AntError::shape("transformer-forward", "module is not a transformer"));
        }
        self.forward_plain(x)
    }

    /// Leaf prediction: softmax probabilities for classifiers, the raw linear
    /// map for regressors. Single-sample input only.
    pub fn solver_forward(&self, x: &Tensor) -> Result<PredictiveDistribution> {
        if self.spec.kind != ModuleKind::Solver {
            return Err(AntError::shape("solver-forward", "module is not a solver"));
        }
        let y = self.forward_plain(x)?;
        if self.spec.is_classifier_solver() {
            Ok(PredictiveDistribution::Classification(kernels::softmax_fwd(&y)?))
        } else {
            Ok(PredictiveDistribution::Regression(y))
        }
    }
}

fn apply_layer_plain(l: &Layer, x: &Tensor, batched: bool) -> Result<Tensor> {
    let promote = |t: &Tensor| -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(&t.shape);
        Tensor { shape, data: t.data.clone() }
    };
    let fix = |t: Tensor, was_single: bool| -> Tensor {
        if was_single {
            let mut t = t;
            t.shape.remove(0);
            t
        } else {
            t
        }
    };
    match l.spec {
        LayerSpec::Conv { .. } => {
            let single = !batched;
            let xin = if single { promote(x) } else { x.clone() };
            let y = kernels::conv2d_fwd(&xin, l.w.as_ref().unwrap(), l.b.as_ref().unwrap())?;
            Ok(fix(y, single))
        }
        LayerSpec::Fc { .. } | LayerSpec::Lc | LayerSpec::Lr => {
            let flat = if l.flatten {
                if batched {
                    Tensor { shape: vec![x.shape[0], x.len() / x.shape[0]], data: x.data.clone() }
                } else {
                    Tensor { shape: vec![x.len()], data: x.data.clone() }
                }
            } else {
                x.clone()
            };
            let single = !batched;
            let xin = if single { promote(&flat) } else { flat };
            let y = kernels::affine_fwd(&xin, l.w.as_ref().unwrap(), l.b.as_ref().unwrap())?;
            Ok(fix(y, single))
        }
        LayerSpec::Relu => Ok(kernels::relu_fwd(x)),
        LayerSpec::Tanh => Ok(kernels::tanh_fwd(x)),
        LayerSpec::Sigmoid => Ok(kernels::sigmoid_fwd(x)),
        LayerSpec::Gap => {
            let single = !batched;
            let xin = if single { promote(x) } else { x.clone() };
            Ok(fix(kernels::gap_fwd(&xin)?, single))
        }
        LayerSpec::MaxPool => {
            let single = !batched;
            let xin = if single { promote(x) } else { x.clone() };
            let (y, _) = kernels::maxpool_fwd(&xin)?;
            Ok(fix(y, single))
        }
        LayerSpec::Identity => Ok(x.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task10() -> TaskKind {
        TaskKind::Classification { classes: 10 }
    }

    #[test]
    fn conv_transformer_param_count() {
        let spec = ModuleSpec::parse(ModuleKind::Transformer, "conv5-40,relu", 1).unwrap();
        let m = build_module(&spec, &[1, 28, 28], task10(), 7).unwrap();
        assert_eq!(m.param_count(), 1040);
        assert_eq!(m.output_shape, vec![40, 28, 28]);
    }

    #[test]
    fn linear_regressor_param_count() {
        let spec = ModuleSpec::parse(ModuleKind::Solver, "lr", 0).unwrap();
        let m = build_module(&spec, &[21], TaskKind::Regression { dim: 7 }, 0).unwrap();
        assert_eq!(m.param_count(), 154);
    }

    #[test]
    fn sarcos_router_param_count() {
        let spec = ModuleSpec::parse(ModuleKind::Router, "fc1,sigmoid", 0).unwrap();
        let m = build_module(&spec, &[21], TaskKind::Regression { dim: 7 }, 0).unwrap();
        assert_eq!(m.param_count(), 22);
    }

    #[test]
    fn param_count_independent_of_seed() {
        let spec = ModuleSpec::parse(ModuleKind::Router, "conv5-5,relu,gap,fc64,relu,fc1,sigmoid", 0).unwrap();
        let a = build_module(&spec, &[1, 28, 28], task10(), 1).unwrap();
        let b = build_module(&spec, &[1, 28, 28], task10(), 99).unwrap();
        assert_eq!(a.param_count(), b.param_count());
    }

    #[test]
    fn affine_flops_convention() {
        let spec = ModuleSpec::parse(ModuleKind::Transformer, "fc7", 0).unwrap();
        let m = build_module(&spec, &[21], TaskKind::Regression { dim: 7 }, 0).unwrap();
        assert_eq!(m.flops(), 2 * 21 * 7 + 7);
    }

    #[test]
    fn conv_only_flops_convention() {
        let spec = ModuleSpec::parse(ModuleKind::Transformer, "conv5-40", 0).unwrap();
        let m = build_module(&spec, &[1, 28, 28], task10(), 0).unwrap();
        assert_eq!(m.flops(), 1_599_360);
    }

    #[test]
    fn identity_transformer_is_free_and_transparent() {
        let spec = ModuleSpec::identity_transformer();
        let m = build_module(&spec, &[3, 8, 8], task10(), 0).unwrap();
        assert_eq!(m.flops(), 0);
        assert_eq!(m.param_count(), 0);
        let x = Tensor::from_slice(&[3, 8, 8], &vec![0.25; 192]).unwrap();
        assert_eq!(m.transformer_forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_bias_router_answers_half_on_zero_input() {
        let spec = ModuleSpec::parse(ModuleKind::Router, "fc1,sigmoid", 0).unwrap();
        let m = build_module(&spec, &[21], TaskKind::Regression { dim: 7 }, 3).unwrap();
        let x = Tensor::zeros(&[21]);
        let p = m.router_forward(&x).unwrap();
        assert_eq!(p.data, vec![0.5]);
    }

    #[test]
    fn solver_distribution_normalizes() {
        let spec = ModuleSpec::parse(ModuleKind::Solver, "lc", 0).unwrap();
        let m = build_module(&spec, &[12], task10(), 11).unwrap();
        let x = Tensor::from_slice(&[12], &(0..12).map(|i| (i as f64) / 7.0 - 0.6).collect::<Vec<_>>()).unwrap();
        match m.solver_forward(&x).unwrap() {
            PredictiveDistribution::Classification(p) => {
                let s: f64 = p.data.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(p.data.iter().all(|&v| v >= 0.0));
            }
            _ => panic!("expected classification output"),
        }
    }

    #[test]
    fn bad_recipes_are_rejected() {
        assert!(ModuleSpec::parse(ModuleKind::Router, "fc2,sigmoid", 0).is_err());
        assert!(ModuleSpec::parse(ModuleKind::Router, "fc1", 0).is_err());
        assert!(ModuleSpec::parse(ModuleKind::Solver, "fc10", 0).is_err());
        assert!(ModuleSpec::parse(ModuleKind::Solver, "lc,relu", 0).is_err());
        assert!(ModuleSpec::parse(ModuleKind::Transformer, "conv4-10", 0).is_err());
        assert!(ModuleSpec::parse(ModuleKind::Transformer, "dense99", 0).is_err());
        let spec = ModuleSpec::parse(ModuleKind::Transformer, "conv3-4,relu", 0).unwrap();
        assert!(build_module(&spec, &[16], task10(), 0).is_err());
    }
}
