//! Reverse-mode differentiation over a linear tape of recorded primitives.
//!
//! Nodes are appended in execution order, so node indices are already a
//! topological order and backward simply walks them in reverse.

use std::hash::{DefaultHasher, Hash, Hasher};

use super::conv::{self, ConvAlgo, ConvSpec};
use super::kernels::{self, BnSaved, Broadcast};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the engine. The forward value
/// is computed by the caller; the tape only stores it and calls `backward`.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Gradients with respect to each input, in the order the inputs were
    /// recorded. `None` means no contribution.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed by a training-mode batch norm, for the caller
/// to fold into running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance, the same estimate the batch was normalised with.
    pub var: Vec<f64>,
}

enum BnState {
    Train(BnSaved),
    Eval { xhat: Vec<f64>, inv_std: Vec<f64> },
}

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, state: BnState },
    Relu { x: Var },
    GlobalAvgPool { x: Var },
    Resize { x: Var },
    Concat { a: Var, b: Var },
    Add { full: Var, small: Var, kind: Broadcast },
    Mul { full: Var, small: Var, kind: Broadcast },
    Affine { x: Var, scale: f64 },
    ScaleBy { x: Var, s: Var },
    Expand { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Detached {
    Capture(Vec<Vec<f64>>),
    Replay { values: Vec<Vec<f64>>, cursor: usize },
}

pub struct Tape {
    nodes: Vec<Node>,
    algo: ConvAlgo,
    consumed: bool,
    detached: Detached,
    kinks: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            algo: ConvAlgo::Im2col,
            consumed: false,
            detached: Detached::Capture(Vec::new()),
            kinks: 0,
        }
    }

    pub fn with_algo(mut self, algo: ConvAlgo) -> Self {
        self.algo = algo;
        self
    }

    /// A tape whose [`Tape::detach`] calls return `values` in order instead of
    /// the freshly computed ones.
    pub fn replaying(values: Vec<Vec<f64>>) -> Self {
        Tape { detached: Detached::Replay { values, cursor: 0 }, ..Self::new() }
    }

    pub fn conv_algo(&self) -> ConvAlgo {
        self.algo
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Hash of every ReLU activation pattern recorded so far. Two forward
    /// passes with equal signatures took the same side of every kink.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    /// Values captured by [`Tape::detach`] on this tape.
    pub fn detached_values(&self) -> Vec<Vec<f64>> {
        match &self.detached {
            Detached::Capture(v) => v.clone(),
            Detached::Replay { values, .. } => values.clone(),
        }
    }

    /// Marks a forward quantity as a stop-gradient constant. On a capturing
    /// tape the computed value is recorded and returned; on a replaying tape
    /// the value captured by the reference pass is returned instead.
    pub fn detach(&mut self, computed: Vec<f64>) -> Vec<f64> {
        match &mut self.detached {
            Detached::Capture(v) => {
                v.push(computed.clone());
                computed
            }
            Detached::Replay { values, cursor } => {
                let out = match values.get(*cursor) {
                    Some(v) if v.len() == computed.len() => v.clone(),
                    _ => computed,
                };
                *cursor += 1;
                out
            }
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by backward; record a new forward pass".into()));
        }
        Ok(())
    }

    // ------------------------------------------------------------ primitives

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        self.check_open()?;
        let out = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec, self.algo)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        Ok(self.push(out, Op::Conv { x, w, b, spec: *spec }, ng))
    }

    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        self.check_open()?;
        let xs = self.shape(x);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let (y, state, stats) = match mode {
            BnMode::Train => {
                let (y, saved) = kernels::batchnorm_train(self.value(x), g, bt)?;
                let stats = BatchStats { mean: saved.mean.clone(), var: saved.var.clone() };
                (y, BnState::Train(saved), Some(stats))
            }
            BnMode::Eval { mean, var } => {
                let (y, xhat, inv_std) = kernels::batchnorm_eval(self.value(x), g, bt, mean, var)?;
                (y, BnState::Eval { xhat, inv_std }, None)
            }
        };
        let out = Tensor::from_vec(xs, y)?;
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok((self.push(out, Op::BatchNorm { x, gamma, beta, state }, ng), stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let input = self.value(x);
        let mut h = DefaultHasher::new();
        self.kinks.hash(&mut h);
        for chunk in input.data().chunks(64) {
            let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
            bits.hash(&mut h);
        }
        let out = Tensor::from_vec(input.shape(), kernels::relu(input.data()))?;
        self.kinks = h.finish();
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Relu { x }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let out = kernels::global_avg_pool(self.value(x))?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool { x }, ng))
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check_open()?;
        let out = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Resize { x }, ng))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        self.check_open()?;
        let (full_shape, kind, swapped) = kernels::resolve_broadcast(self.shape(a), self.shape(b))?;
        let (full, small) = if swapped { (b, a) } else { (a, b) };
        let fd = self.value(full).data();
        let sd = self.value(small).data();
        let data = fd
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let s = sd[kind.small_index(full_shape, i)];
                if mul {
                    f * s
                } else {
                    f + s
                }
            })
            .collect();
        let out = Tensor::from_vec(full_shape, data)?;
        let ng = self.any_grad(&[a, b]);
        let op = if mul { Op::Mul { full, small, kind } } else { Op::Add { full, small, kind } };
        Ok(self.push(out, op, ng))
    }

    /// Elementwise sum; `(n,c,1,1)` and `(n,1,h,w)` operands broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with the same broadcast rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// `scale * x + shift` for constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check_open()?;
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Affine { x, scale }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// Multiplies by a learnable scalar held in a `(1,1,1,1)` node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_open()?;
        if self.shape(s).numel() != 1 {
            return Err(Error::Dimension(format!("scale_by expects a scalar, got {}", self.shape(s))));
        }
        let k = self.value(s).data()[0];
        let out = self.value(x).map(|v| k * v);
        let ng = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ScaleBy { x, s }, ng))
    }

    /// Repeats a `(n,c,1,1)` vector over an `h x w` plane.
    pub fn expand_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        self.check_open()?;
        let s = self.shape(x);
        if s.h != 1 || s.w != 1 {
            return Err(Error::Dimension(format!("expand_spatial expects (n,c,1,1), got {s}")));
        }
        let mut data = Vec::with_capacity(s.n * s.c * h * w);
        for &v in self.value(x).data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let out = Tensor::from_vec([s.n, s.c, h, w], data)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Expand { x }, ng))
    }

    /// Records an externally computed node with a custom backward.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.check_open()?;
        let ng = self.any_grad(inputs);
        Ok(self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, ng))
    }

    // ------------------------------------------------------------ backward

    /// Backpropagates the sum of all elements of `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let seed = vec![1.0; self.shape(root).numel()];
        self.backward_with(&[(root, seed)])
    }

    /// Backpropagates from several nodes at once, each seeded with the given
    /// upstream gradient. Gradients land in every reached node's grad buffer.
    pub fn backward_with(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        self.check_open()?;
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.len() != self.shape(*v).numel() {
                return Err(Error::Dimension(format!(
                    "seed gradient of length {} for node of shape {}",
                    g.len(),
                    self.shape(*v)
                )));
            }
            accumulate(&mut grads, &self.nodes, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let out_shape = nodes[i].value.shape();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let cg = conv::backward(val(*x), val(*w), spec, g, out_shape, self.algo, wants(*x), wants(*w));
                if let Some(d) = cg.input {
                    accumulate(grads, nodes, *x, d);
                }
                if let Some(d) = cg.weight {
                    accumulate(grads, nodes, *w, d);
                }
                if let (Some(b), Some(d)) = (b, cg.bias) {
                    accumulate(grads, nodes, *b, d);
                }
            }
            Op::BatchNorm { x, gamma, beta, state } => {
                let gm = val(*gamma).data();
                let (dx, dg, db) = match state {
                    BnState::Train(saved) => kernels::batchnorm_train_backward(out_shape, gm, saved, g),
                    BnState::Eval { xhat, inv_std } => {
                        kernels::batchnorm_eval_backward(out_shape, gm, xhat, inv_std, g)
                    }
                };
                accumulate(grads, nodes, *x, dx);
                accumulate(grads, nodes, *gamma, dg);
                accumulate(grads, nodes, *beta, db);
            }
            Op::Relu { x } => accumulate(grads, nodes, *x, kernels::relu_backward(val(*x).data(), g)),
            Op::GlobalAvgPool { x } => {
                accumulate(grads, nodes, *x, kernels::global_avg_pool_backward(val(*x).shape(), g))
            }
            Op::Resize { x } => {
                let d = kernels::bilinear_resize_backward(val(*x).shape(), out_shape.h, out_shape.w, g);
                accumulate(grads, nodes, *x, d);
            }
            Op::Concat { a, b } => {
                let (da, db) = kernels::split_channels(g, val(*a).shape(), val(*b).shape());
                accumulate(grads, nodes, *a, da);
                accumulate(grads, nodes, *b, db);
            }
            Op::Add { full, small, kind } => {
                accumulate(grads, nodes, *full, g.to_vec());
                if wants(*small) {
                    let d = kernels::reduce_to_small(*kind, out_shape, val(*small).numel(), g);
                    accumulate(grads, nodes, *small, d);
                }
            }
            Op::Mul { full, small, kind } => {
                let fd = val(*full).data();
                let sd = val(*small).data();
                if wants(*full) {
                    let d = g.iter().enumerate().map(|(j, gv)| gv * sd[kind.small_index(out_shape, j)]).collect();
                    accumulate(grads, nodes, *full, d);
                }
                if wants(*small) {
                    let prod: Vec<f64> = g.iter().zip(fd).map(|(a, b)| a * b).collect();
                    let d = kernels::reduce_to_small(*kind, out_shape, sd.len(), &prod);
                    accumulate(grads, nodes, *small, d);
                }
            }
            Op::Affine { x, scale } => accumulate(grads, nodes, *x, g.iter().map(|v| v * scale).collect()),
            Op::ScaleBy { x, s } => {
                let k = val(*s).data()[0];
                if wants(*x) {
                    accumulate(grads, nodes, *x, g.iter().map(|v| v * k).collect());
                }
                if wants(*s) {
                    let ds = g.iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    accumulate(grads, nodes, *s, vec![ds]);
                }
            }
            Op::Expand { x } => {
                let plane = out_shape.plane();
                accumulate(grads, nodes, *x, g.chunks(plane).map(|c| c.iter().sum()).collect());
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                for (v, d) in inputs.iter().zip(op.backward(&ins, &nodes[i].value, g)) {
                    if let Some(d) = d {
                        debug_assert_eq!(d.len(), val(*v).numel(), "custom op {} gradient length", op.name());
                        accumulate(grads, nodes, *v, d);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, d: Vec<f64>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}
