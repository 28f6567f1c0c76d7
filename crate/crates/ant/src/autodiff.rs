//! Reverse-mode differentiation on an explicit tape. Forward values are
//! computed eagerly as operations are pushed; `backward` walks the record once
//! in reverse. One training step owns one tape; tensors are immutable.
//!
//! Most operations accept either a single sample or a batch with a leading
//! sample axis; the distinction is made by rank and handled transparently.

use crate::kernels;
use crate::tensor::Tensor;
use crate::{AntError, Result};

/// The public primitive set. Every module recipe compiles to a composition of
/// these; the tape additionally records a few internal scalar/log-domain ops
/// used to assemble training objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Affine,
    Conv2D,
    ReLU,
    Tanh,
    Sigmoid,
    MaxPool2x2,
    GlobalAvgPool,
    LogSoftmax,
    Add,
    Flatten,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 10] = [
        PrimitiveKind::Affine,
        PrimitiveKind::Conv2D,
        PrimitiveKind::ReLU,
        PrimitiveKind::Tanh,
        PrimitiveKind::Sigmoid,
        PrimitiveKind::MaxPool2x2,
        PrimitiveKind::GlobalAvgPool,
        PrimitiveKind::LogSoftmax,
        PrimitiveKind::Add,
        PrimitiveKind::Flatten,
    ];
}

#[derive(Clone, Debug)]
enum TapeOp {
    Leaf,
    Affine,
    Conv2D,
    ReLU,
    Tanh,
    Sigmoid,
    MaxPool2x2,
    GlobalAvgPool,
    LogSoftmax,
    Add,
    Sub,
    Mul,
    Flatten,
    /// y = a*x + b elementwise with scalar constants.
    AffineScalar { a: f64 },
    Clamp { lo: f64, hi: f64 },
    Log,
    /// n inputs of shape [B] stacked into [B, n].
    StackCols,
    /// [B,K] -> [B], log(sum(exp(row))).
    LseRows,
    /// [B,K] -> [B], sum(row).
    SumRows,
    /// [B,K] -> [B], row i picks column idx[i].
    GatherCols { idx: Vec<usize> },
    /// [..] -> scalar mean of all elements.
    MeanAll,
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Pool(Vec<u32>),
}

struct Node {
    op: TapeOp,
    inputs: Vec<usize>,
    value: Tensor,
    aux: Aux,
    needs_grad: bool,
}

/// Variable handle: an index into one tape's record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape variable; absent entries mean "no path to the
/// loss", read back as zeros.
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }

    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Insert a leading axis of extent 1.
fn promote(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(&t.shape);
    Tensor { shape, data: t.data.clone() }
}

fn demote(mut t: Tensor) -> Tensor {
    t.shape.remove(0);
    t
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: TapeOp, inputs: Vec<usize>, value: Tensor, aux: Aux) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { op, inputs, value, aux, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(AntError::shape("leaf", "non-finite entries"));
        }
        self.nodes.push(Node {
            op: TapeOp::Leaf,
            inputs: vec![],
            value,
            aux: Aux::None,
            needs_grad: trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    // -- primitives ---------------------------------------------------------

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let single = xv.rank() == 1;
        let xin = if single { promote(xv) } else { xv.clone() };
        let y = kernels::affine_fwd(&xin, &self.nodes[w.0].value, &self.nodes[b.0].value)?;
        let y = if single { demote(y) } else { y };
        Ok(self.push(TapeOp::Affine, vec![x.0, w.0, b.0], y, Aux::None))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let single = xv.rank() == 3;
        let xin = if single { promote(xv) } else { xv.clone() };
        let y = kernels::conv2d_fwd(&xin, &self.nodes[w.0].value, &self.nodes[b.0].value)?;
        let y = if single { demote(y) } else { y };
        Ok(self.push(TapeOp::Conv2D, vec![x.0, w.0, b.0], y, Aux::None))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu_fwd(&self.nodes[x.0].value);
        self.push(TapeOp::ReLU, vec![x.0], y, Aux::None)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = kernels::tanh_fwd(&self.nodes[x.0].value);
        self.push(TapeOp::Tanh, vec![x.0], y, Aux::None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = kernels::sigmoid_fwd(&self.nodes[x.0].value);
        self.push(TapeOp::Sigmoid, vec![x.0], y, Aux::None)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let single = xv.rank() == 3;
        let xin = if single { promote(xv) } else { xv.clone() };
        let (y, arg) = kernels::maxpool_fwd(&xin)?;
        let y = if single { demote(y) } else { y };
        Ok(self.push(TapeOp::MaxPool2x2, vec![x.0], y, Aux::Pool(arg)))
    }

    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let single = xv.rank() == 3;
        let xin = if single { promote(xv) } else { xv.clone() };
        let y = kernels::gap_fwd(&xin)?;
        let y = if single { demote(y) } else { y };
        Ok(self.push(TapeOp::GlobalAvgPool, vec![x.0], y, Aux::None))
    }

    pub fn logsoftmax(&mut self, x: Var) -> Result<Var> {
        let y = kernels::logsoftmax_fwd(&self.nodes[x.0].value)?;
        Ok(self.push(TapeOp::LogSoftmax, vec![x.0], y, Aux::None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add_fwd(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(TapeOp::Add, vec![a.0, b.0], y, Aux::None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::sub_fwd(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(TapeOp::Sub, vec![a.0, b.0], y, Aux::None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::mul_fwd(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(TapeOp::Mul, vec![a.0, b.0], y, Aux::None))
    }

    /// Flatten to rank 1, or to [B, rest] when `batched`.
    pub fn flatten(&mut self, x: Var, batched: bool) -> Var {
        let xv = &self.nodes[x.0].value;
        let shape = if batched { vec![xv.shape[0], xv.len() / xv.shape[0]] } else { vec![xv.len()] };
        let y = Tensor { shape, data: xv.data.clone() };
        self.push(TapeOp::Flatten, vec![x.0], y, Aux::None)
    }

    pub fn affine_scalar(&mut self, x: Var, a: f64, b: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| a * v + b).collect();
        let y = Tensor { shape: xv.shape.clone(), data };
        self.push(TapeOp::AffineScalar { a }, vec![x.0], y, Aux::None)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| v.clamp(lo, hi)).collect();
        let y = Tensor { shape: xv.shape.clone(), data };
        self.push(TapeOp::Clamp { lo, hi }, vec![x.0], y, Aux::None)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| v.ln()).collect();
        let y = Tensor { shape: xv.shape.clone(), data };
        self.push(TapeOp::Log, vec![x.0], y, Aux::None)
    }

    /// Stack n vectors of shape [B] into [B, n].
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var> {
        if cols.is_empty() {
            return Err(AntError::shape("stack-cols", "no columns"));
        }
        let b = self.nodes[cols[0].0].value.len();
        let n = cols.len();
        let mut data = vec![0.0; b * n];
        for (j, v) in cols.iter().enumerate() {
            let cv = &self.nodes[v.0].value;
            if cv.len() != b {
                return Err(AntError::shape("stack-cols", "ragged columns"));
            }
            for i in 0..b {
                data[i * n + j] = cv.data[i];
            }
        }
        let y = Tensor { shape: vec![b, n], data };
        Ok(self.push(TapeOp::StackCols, cols.iter().map(|v| v.0).collect(), y, Aux::None))
    }

    pub fn lse_rows(&mut self, x: Var) -> Result<Var> {
        let y = kernels::lse_rows_fwd(&self.nodes[x.0].value)?;
        Ok(self.push(TapeOp::LseRows, vec![x.0], y, Aux::None))
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, k) = xv.as_matrix(xv.rank() - 1);
        let mut out = Tensor::zeros(&[r]);
        for i in 0..r {
            let mut s = 0.0;
            for v in &xv.data[i * k..(i + 1) * k] {
                s += v;
            }
            out.data[i] = s;
        }
        Ok(self.push(TapeOp::SumRows, vec![x.0], out, Aux::None))
    }

    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, k) = xv.as_matrix(xv.rank() - 1);
        if idx.len() != r {
            return Err(AntError::shape("gather-cols", format!("{} rows, {} indices", r, idx.len())));
        }
        let mut out = Tensor::zeros(&[r]);
        for i in 0..r {
            if idx[i] >= k {
                return Err(AntError::shape("gather-cols", format!("index {} out of {}", idx[i], k)));
            }
            out.data[i] = xv.data[i * k + idx[i]];
        }
        Ok(self.push(TapeOp::GatherCols { idx }, vec![x.0], out, Aux::None))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut s = 0.0;
        for v in &xv.data {
            s += v;
        }
        let y = Tensor::scalar(s / xv.len() as f64);
        self.push(TapeOp::MeanAll, vec![x.0], y, Aux::None)
    }

    /// Dispatch a public primitive: data inputs first, then parameters
    /// (Affine and Conv2D take [x, w, b]). Rejects non-finite operands.
    pub fn apply_primitive(&mut self, kind: PrimitiveKind, inputs: &[Var]) -> Result<Var> {
        let arity: usize = match kind {
            PrimitiveKind::Affine | PrimitiveKind::Conv2D => 3,
            PrimitiveKind::Add => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(AntError::shape(
                "apply-primitive",
                format!("{:?} expects {} operands, got {}", kind, arity, inputs.len()),
            ));
        }
        for v in inputs {
            if !self.nodes[v.0].value.all_finite() {
                return Err(AntError::shape("apply-primitive", format!("{:?}: non-finite operand", kind)));
            }
        }
        match kind {
            PrimitiveKind::Affine => {
                let xv = &self.nodes[inputs[0].0].value;
                if xv.rank() > 2 {
                    return Err(AntError::shape(
                        "apply-primitive",
                        format!("Affine expects rank-1 input (or batched rank-2), got {:?}", xv.shape),
                    ));
                }
                self.affine(inputs[0], inputs[1], inputs[2])
            }
            PrimitiveKind::Conv2D => self.conv2d(inputs[0], inputs[1], inputs[2]),
            PrimitiveKind::ReLU => Ok(self.relu(inputs[0])),
            PrimitiveKind::Tanh => Ok(self.tanh(inputs[0])),
            PrimitiveKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            PrimitiveKind::MaxPool2x2 => self.maxpool2x2(inputs[0]),
            PrimitiveKind::GlobalAvgPool => self.gap(inputs[0]),
            PrimitiveKind::LogSoftmax => self.logsoftmax(inputs[0]),
            PrimitiveKind::Add => self.add(inputs[0], inputs[1]),
            PrimitiveKind::Flatten => Ok(self.flatten(inputs[0], false)),
        }
    }

    // -- reverse pass -------------------------------------------------------

    /// Accumulate d(loss)/d(node) for every node on a path to the loss.
    /// The loss must be scalar (a single stored value).
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AntError::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape),
            ));
        }
        let mut g: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Tensor {
            shape: self.nodes[loss.0].value.shape.clone(),
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            if g[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let dy = g[i].take().unwrap();
            self.backprop_node(i, &dy, &mut g);
            // only leaf gradients are read back; activation gradients are
            // fully consumed here and can be freed early
            if matches!(self.nodes[i].op, TapeOp::Leaf) {
                g[i] = Some(dy);
            }
        }
        Ok(Grads { g })
    }

    fn acc(g: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
        match &mut g[idx] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, g: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let input = |j: usize| &self.nodes[node.inputs[j]].value;
        let wants = |j: usize| self.nodes[node.inputs[j]].needs_grad;
        match &node.op {
            TapeOp::Leaf => {}
            TapeOp::Affine => {
                let xv = input(0);
                let single = xv.rank() == 1;
                let xin = if single { promote(xv) } else { xv.clone() };
                let dyin = if single { promote(dy) } else { dy.clone() };
                let (dx, dw, db) = kernels::affine_bwd(&xin, input(1), &dyin);
                if wants(0) {
                    Self::acc(g, node.inputs[0], if single { demote(dx) } else { dx });
                }
                if wants(1) {
                    Self::acc(g, node.inputs[1], dw);
                }
                if wants(2) {
                    Self::acc(g, node.inputs[2], db);
                }
            }
            TapeOp::Conv2D => {
                let xv = input(0);
                let single = xv.rank() == 3;
                let xin = if single { promote(xv) } else { xv.clone() };
                let dyin = if single { promote(dy) } else { dy.clone() };
                let (dx, dw, db) = kernels::conv2d_bwd(&xin, input(1), &dyin);
                if wants(0) {
                    Self::acc(g, node.inputs[0], if single { demote(dx) } else { dx });
                }
                if wants(1) {
                    Self::acc(g, node.inputs[1], dw);
                }
                if wants(2) {
                    Self::acc(g, node.inputs[2], db);
                }
            }
            TapeOp::ReLU => Self::acc(g, node.inputs[0], kernels::relu_bwd(input(0), dy)),
            TapeOp::Tanh => Self::acc(g, node.inputs[0], kernels::tanh_bwd(&node.value, dy)),
            TapeOp::Sigmoid => Self::acc(g, node.inputs[0], kernels::sigmoid_bwd(&node.value, dy)),
            TapeOp::MaxPool2x2 => {
                let arg = match &node.aux {
                    Aux::Pool(a) => a,
                    Aux::None => unreachable!("pool node lacks argmax record"),
                };
                let xv = input(0);
                let single = xv.rank() == 3;
                let xshape: Vec<usize> = if single {
                    let mut s = vec![1];
                    s.extend_from_slice(&xv.shape);
                    s
                } else {
                    xv.shape.clone()
                };
                let dyin = if single { promote(dy) } else { dy.clone() };
                let dx = kernels::maxpool_bwd(arg, &dyin, &xshape);
                Self::acc(g, node.inputs[0], if single { demote(dx) } else { dx });
            }
            TapeOp::GlobalAvgPool => {
                let xv = input(0);
                let single = xv.rank() == 3;
                let xshape: Vec<usize> = if single {
                    let mut s = vec![1];
                    s.extend_from_slice(&xv.shape);
                    s
                } else {
                    xv.shape.clone()
                };
                let dyin = if single { promote(dy) } else { dy.clone() };
                let dx = kernels::gap_bwd(&dyin, &xshape);
                Self::acc(g, node.inputs[0], if single { demote(dx) } else { dx });
            }
            TapeOp::LogSoftmax => Self::acc(g, node.inputs[0], kernels::logsoftmax_bwd(&node.value, dy)),
            TapeOp::Add => {
                if wants(0) {
                    Self::acc(g, node.inputs[0], dy.clone());
                }
                if wants(1) {
                    Self::acc(g, node.inputs[1], dy.clone());
                }
            }
            TapeOp::Sub => {
                if wants(0) {
                    Self::acc(g, node.inputs[0], dy.clone());
                }
                if wants(1) {
                    let neg = Tensor {
                        shape: dy.shape.clone(),
                        data: dy.data.iter().map(|v| -v).collect(),
                    };
                    Self::acc(g, node.inputs[1], neg);
                }
            }
            TapeOp::Mul => {
                if wants(0) {
                    Self::acc(g, node.inputs[0], kernels::mul_fwd(dy, input(1)).unwrap());
                }
                if wants(1) {
                    Self::acc(g, node.inputs[1], kernels::mul_fwd(dy, input(0)).unwrap());
                }
            }
            TapeOp::Flatten => {
                let dx = Tensor { shape: input(0).shape.clone(), data: dy.data.clone() };
                Self::acc(g, node.inputs[0], dx);
            }
            TapeOp::AffineScalar { a } => {
                let dx = Tensor {
                    shape: dy.shape.clone(),
                    data: dy.data.iter().map(|v| a * v).collect(),
                };
                Self::acc(g, node.inputs[0], dx);
            }
            TapeOp::Clamp { lo, hi } => {
                let xv = input(0);
                let data = xv
                    .data
                    .iter()
                    .zip(&dy.data)
                    .map(|(&x, &d)| if x > *lo && x < *hi { d } else { 0.0 })
                    .collect();
                Self::acc(g, node.inputs[0], Tensor { shape: xv.shape.clone(), data });
            }
            TapeOp::Log => {
                let xv = input(0);
                let data = xv.data.iter().zip(&dy.data).map(|(&x, &d)| d / x).collect();
                Self::acc(g, node.inputs[0], Tensor { shape: xv.shape.clone(), data });
            }
            TapeOp::StackCols => {
                let n = node.inputs.len();
                let b = node.value.shape[0];
                for (j, &src) in node.inputs.iter().enumerate() {
                    if !self.nodes[src].needs_grad {
                        continue;
                    }
                    let mut col = Tensor::zeros(&[b]);
                    for i in 0..b {
                        col.data[i] = dy.data[i * n + j];
                    }
                    Self::acc(g, src, col);
                }
            }
            TapeOp::LseRows => {
                Self::acc(g, node.inputs[0], kernels::lse_rows_bwd(input(0), &node.value, dy))
            }
            TapeOp::SumRows => {
                let xv = input(0);
                let (r, k) = xv.as_matrix(xv.rank() - 1);
                let mut dx = Tensor::zeros(&xv.shape);
                for i in 0..r {
                    dx.data[i * k..(i + 1) * k].fill(dy.data[i]);
                }
                Self::acc(g, node.inputs[0], dx);
            }
            TapeOp::GatherCols { idx } => {
                let xv = input(0);
                let (_, k) = xv.as_matrix(xv.rank() - 1);
                let mut dx = Tensor::zeros(&xv.shape);
                for (i, &j) in idx.iter().enumerate() {
                    dx.data[i * k + j] = dy.data[i];
                }
                Self::acc(g, node.inputs[0], dx);
            }
            TapeOp::MeanAll => {
                let xv = input(0);
                let v = dy.data[0] / xv.len() as f64;
                let dx = Tensor { shape: xv.shape.clone(), data: vec![v; xv.len()] };
                Self::acc(g, node.inputs[0], dx);
            }
        }
    }
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued function at `point`:
/// max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(AntError::shape("grad-check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true)?;
    let loss = f(&mut tape, x)?;
    let lv = tape.value(loss);
    if lv.len() != 1 {
        return Err(AntError::shape("grad-check", format!("fn output not scalar: {:?}", lv.shape)));
    }
    if !lv.all_finite() {
        return Err(AntError::shape("grad-check", "non-finite evaluation"));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(x, &point.shape);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p.clone(), false)?;
        let l = f(&mut t, v)?;
        let out = t.value(l).item()?;
        if !out.is_finite() {
            return Err(AntError::shape("grad-check", "non-finite evaluation"));
        }
        Ok(out)
    };

    let mut max_err: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data[i];
        let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max((a - numeric).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[2], &[-1.0, 2.0]).unwrap(), true).unwrap();
        let r = tape.relu(x);
        let s = tape.mean_all(r);
        let s2 = tape.affine_scalar(s, 2.0, 0.0); // sum = 2 * mean over 2 elements
        let grads = tape.backward(s2).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn affine_grads_are_linear() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1], &[3.0]).unwrap(), false).unwrap();
        let w = tape.leaf(Tensor::from_slice(&[1, 1], &[2.0]).unwrap(), true).unwrap();
        let b = tape.leaf(Tensor::from_slice(&[1], &[1.0]).unwrap(), true).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        let s = tape.mean_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data, vec![3.0]);
        assert_eq!(grads.get(b).unwrap().data, vec![1.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_slice(&[1], &[0.0]).unwrap(), true).unwrap();
        // x = 1, so sigmoid(w * x) differentiates to sigma'(0) = 0.25 wrt w
        let s = tape.sigmoid(w);
        let out = tape.mean_all(s);
        let grads = tape.backward(out).unwrap();
        assert!((grads.get(w).unwrap().data[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let point = Tensor::from_slice(&[3], &[0.3, -0.8, 1.1]).unwrap();
        let err = grad_check(
            |t, _x| {
                let c = t.constant(Tensor::scalar(4.0))?;
                Ok(c)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_grad_checks() {
        let point = Tensor::from_slice(&[4], &[0.5, -1.25, 2.0, 0.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.mean_all(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {}", err);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[2], &[1.0, 2.0]).unwrap(), true).unwrap();
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn unreached_parameter_reads_back_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1], &[1.0]).unwrap(), true).unwrap();
        let orphan = tape.leaf(Tensor::from_slice(&[2], &[5.0, 6.0]).unwrap(), true).unwrap();
        let s = tape.mean_all(x);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(orphan).is_none());
        assert_eq!(grads.get_or_zeros(orphan, &[2]).data, vec![0.0, 0.0]);
    }
}
