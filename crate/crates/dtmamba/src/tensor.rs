//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is a dynamic tape: every forward op appends a node recording
//! its inputs, and [`Tape::backward`] walks the nodes once in reverse order,
//! accumulating gradients additively across fan-out. The graph is rebuilt on
//! every forward pass, which is what lets dropout masks and variant wiring
//! change from step to step without any notion of a static graph.
//!
//! Everything is 64-bit: acceptance rests on finite-difference checks, and
//! f64 keeps those tolerances honest. Ops validate that finite inputs produce
//! finite outputs and surface violations as errors instead of letting NaNs
//! propagate silently.

use crate::error::DtError;
use crate::Result;

/// Dense row-major f64 tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Leaf flag: when this tensor is pushed onto a tape, `true` marks it as
    /// a parameter whose gradient must be produced by `backward`.
    pub requires_grad: bool,
    /// Populated on tape leaves by `backward`; same length as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DtError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Marks this tensor as a learnable leaf when pushed onto a tape.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Extension point for ops whose forward/backward do not decompose nicely
/// into the built-in primitives (the selective scan is the one user).
///
/// The implementor computes the forward value itself and hands it to
/// [`Tape::push_custom`] together with whatever intermediates its backward
/// needs; `backward` must return one gradient buffer per input (or `None`
/// for inputs that need none), each matching that input's shape.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        out: &Tensor,
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Neg(TensorId),
    Exp(TensorId),
    Softplus(TensorId),
    Sigmoid(TensorId),
    Silu(TensorId),
    MatMul(TensorId, TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    Reshape(TensorId),
    Permute { x: TensorId, perm: Vec<usize> },
    Concat { parts: Vec<TensorId>, axis: usize },
    CausalConv1d { x: TensorId, kernel: TensorId, bias: TensorId },
    Custom { inputs: Vec<TensorId>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when any gradient can flow to a leaf through this node; ops on
    /// pure constants are skipped entirely during backward.
    needs_grad: bool,
}

/// Topologically ordered operation record. Ops only ever reference earlier
/// nodes, so a single reverse sweep visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// NumPy-style broadcast of two shapes (right-aligned; 1 stretches).
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(DtError::Shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Per-output-dim strides into a tensor of `shape` when broadcast to
/// `out_shape`: broadcast dims get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let pad = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..out_shape.len() {
        if i >= pad && shape[i - pad] != 1 {
            out[i] = s[i - pad];
        }
    }
    out
}

fn elementwise_broadcast(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape.clone(), data);
    }
    let out_shape = broadcast_shapes(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut coord = vec![0usize; out_shape.len()];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..numel {
        data.push(f(a.data[ia], b.data[ib]));
        // Odometer increment, keeping both input offsets in lockstep.
        for d in (0..out_shape.len()).rev() {
            coord[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Sums `grad` (shaped `from`) down to `to` by collapsing broadcast dims.
fn reduce_grad_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let st = broadcast_strides(to, from);
    let numel_to: usize = to.iter().product();
    let mut out = vec![0.0; numel_to];
    let mut coord = vec![0usize; from.len()];
    let mut it = 0usize;
    for &g in grad {
        out[it] += g;
        for d in (0..from.len()).rev() {
            coord[d] += 1;
            it += st[d];
            if coord[d] < from[d] {
                break;
            }
            coord[d] = 0;
            it -= st[d] * from[d];
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|.
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn add_grad(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of `id` after `backward` (None when no gradient
    /// reached it or backward has not run).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Pushes a tensor as a graph leaf. Parameters should arrive with
    /// `requires_grad` set; inputs and constants without it.
    pub fn leaf(&mut self, t: Tensor) -> Result<TensorId> {
        if !t.is_finite() {
            return Err(DtError::Numeric(
                "non-finite value in leaf tensor".into(),
            ));
        }
        let needs_grad = t.requires_grad;
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Pushes a non-learnable constant.
    pub fn constant(&mut self, t: Tensor) -> Result<TensorId> {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<TensorId> {
        if let Some(bad) = value.data.iter().position(|v| !v.is_finite()) {
            return Err(DtError::Numeric(format!(
                "non-finite value at flat index {bad} produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: fn(TensorId, TensorId) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TensorId> {
        let value = elementwise_broadcast(&self.nodes[a.0].value, &self.nodes[b.0].value, f)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op(a, b), needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    fn unary(
        &mut self,
        x: TensorId,
        op: fn(TensorId) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let data = v.data.iter().map(|&e| f(e)).collect();
        let value = Tensor::from_vec(v.shape.clone(), data)?;
        let needs = self.needs(x);
        self.push(value, op(x), needs)
    }

    pub fn neg(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, Op::Neg, |e| -e)
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, Op::Exp, f64::exp)
    }

    pub fn softplus(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, Op::Softplus, softplus)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    /// SiLU / swish: x * sigmoid(x).
    pub fn silu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, Op::Silu, |e| e * sigmoid(e))
    }

    /// Strict 2-D matrix product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != 2 || vb.shape.len() != 2 {
            return Err(DtError::Shape(format!(
                "matmul expects 2-D operands, got {:?} x {:?}",
                va.shape, vb.shape
            )));
        }
        let (m, k) = (va.shape[0], va.shape[1]);
        let (k2, n) = (vb.shape[0], vb.shape[1]);
        if k != k2 {
            return Err(DtError::Shape(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                va.shape, vb.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &va.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    let brow = &vb.data[kk * n..(kk + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    /// Sum of all elements, as a shape-[1] tensor.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Mean of all elements, as a shape-[1] tensor.
    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        if v.numel() == 0 {
            return Err(DtError::Shape("mean of empty tensor".into()));
        }
        let s: f64 = v.data.iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), needs)
    }

    /// Reinterprets the data in a new shape (same element count, no movement).
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(DtError::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                v.shape, shape
            )));
        }
        let value = Tensor::from_vec(shape, v.data.clone())?;
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    /// Permutes axes; `perm` must be a permutation of 0..rank.
    pub fn permute(&mut self, x: TensorId, perm: Vec<usize>) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let rank = v.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(DtError::Shape(format!(
                "invalid axis permutation {:?} for rank {}",
                perm, rank
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| v.shape[p]).collect();
        let in_strides = strides(&v.shape);
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel = v.numel();
        let mut data = Vec::with_capacity(numel);
        let mut coord = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..numel {
            data.push(v.data[src]);
            for d in (0..rank).rev() {
                coord[d] += 1;
                src += gather[d];
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
                src -= gather[d] * out_shape[d];
            }
        }
        let value = Tensor::from_vec(out_shape, data)?;
        let needs = self.needs(x);
        self.push(value, Op::Permute { x, perm }, needs)
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(DtError::Shape("concat of zero tensors".into()));
        }
        let first = &self.nodes[parts[0].0].value;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(DtError::Shape(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut out_shape = first.shape.clone();
        for &p in &parts[1..] {
            let v = &self.nodes[p.0].value;
            if v.shape.len() != rank
                || (0..rank).any(|d| d != axis && v.shape[d] != out_shape[d])
            {
                return Err(DtError::Shape(format!(
                    "concat shapes incompatible: {:?} vs {:?}",
                    out_shape, v.shape
                )));
            }
            out_shape[axis] += v.shape[axis];
        }
        // Copy block-wise: each tensor contributes contiguous runs of
        // shape[axis..] for every leading index.
        let lead: usize = out_shape[..axis].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for l in 0..lead {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let run: usize = v.shape[axis..].iter().product();
                data.extend_from_slice(&v.data[l * run..(l + 1) * run]);
            }
        }
        let value = Tensor::from_vec(out_shape, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::Concat { parts: parts.to_vec(), axis }, needs)
    }

    /// Depthwise causal 1-D convolution with left zero-padding.
    ///
    /// `x` is (L, d) or (rows, L, d); `kernel` is (w, d) — one column per
    /// channel; `bias` is (d). Output matches `x`:
    /// y[t, c] = bias[c] + sum_{j < w} kernel[j, c] * x[t - j, c], x[t<0] = 0,
    /// so no output element ever reads a later timestep.
    pub fn causal_conv1d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let (vx, vk, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
        );
        let (rows, l, d) = conv_dims(vx)?;
        if vk.shape.len() != 2 || vk.shape[1] != d {
            return Err(DtError::Shape(format!(
                "conv kernel must be (w, {d}), got {:?}",
                vk.shape
            )));
        }
        let w = vk.shape[0];
        if w == 0 {
            return Err(DtError::Config("conv width must be >= 1".into()));
        }
        if vb.shape != [d] {
            return Err(DtError::Shape(format!(
                "conv bias must be ({d},), got {:?}",
                vb.shape
            )));
        }
        let mut out = vec![0.0; rows * l * d];
        for r in 0..rows {
            let xr = &vx.data[r * l * d..(r + 1) * l * d];
            let or = &mut out[r * l * d..(r + 1) * l * d];
            for t in 0..l {
                let orow = &mut or[t * d..(t + 1) * d];
                orow.copy_from_slice(&vb.data);
                for j in 0..w.min(t + 1) {
                    let krow = &vk.data[j * d..(j + 1) * d];
                    let xrow = &xr[(t - j) * d..(t - j + 1) * d];
                    for ((o, &kv), &xv) in orow.iter_mut().zip(krow).zip(xrow) {
                        *o += kv * xv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(vx.shape.clone(), out)?;
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        self.push(value, Op::CausalConv1d { x, kernel, bias }, needs)
    }

    /// Appends a custom op whose forward value the caller computed.
    pub fn push_custom(
        &mut self,
        inputs: &[TensorId],
        value: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<TensorId> {
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, needs)
    }

    /// Reverse sweep from a scalar loss: populates `grad` on every
    /// reachable node that needs one (leaves keep theirs for reading).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(DtError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Take this node's accumulated gradient; all of its consumers
            // sit later on the tape and have already contributed.
            let g = match self.nodes[i].value.grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch_backward(i, &g)?;
            let keep = matches!(self.nodes[i].op, Op::Leaf) || i == loss.0;
            if keep {
                self.nodes[i].value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn dispatch_backward(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Gradients are computed from immutable reads, then accumulated;
        // two-phase so the borrow of node values ends before mutation.
        let mut contributions: Vec<(TensorId, Vec<f64>)> = Vec::new();
        {
            let node = &self.nodes[i];
            let out_shape = &node.value.shape;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for &(id, _sign) in &[(*a, 1.0), (*b, 1.0)] {
                        if self.needs(id) {
                            let gr = reduce_grad_to_shape(
                                g,
                                out_shape,
                                &self.nodes[id.0].value.shape,
                            );
                            contributions.push((id, gr));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        let gr =
                            reduce_grad_to_shape(g, out_shape, &self.nodes[a.0].value.shape);
                        contributions.push((*a, gr));
                    }
                    if self.needs(*b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        let gr = reduce_grad_to_shape(
                            &neg,
                            out_shape,
                            &self.nodes[b.0].value.shape,
                        );
                        contributions.push((*b, gr));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.needs(*a) {
                        let gb = broadcast_mul_into(g, vb, out_shape);
                        contributions.push((*a, reduce_grad_to_shape(&gb, out_shape, &va.shape)));
                    }
                    if self.needs(*b) {
                        let ga = broadcast_mul_into(g, va, out_shape);
                        contributions.push((*b, reduce_grad_to_shape(&ga, out_shape, &vb.shape)));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.needs(*a) {
                        let mut gb = broadcast_gather(vb, out_shape);
                        for (gi, d) in gb.iter_mut().zip(g) {
                            *gi = d / *gi;
                        }
                        contributions.push((*a, reduce_grad_to_shape(&gb, out_shape, &va.shape)));
                    }
                    if self.needs(*b) {
                        let ba = broadcast_gather(va, out_shape);
                        let bb = broadcast_gather(vb, out_shape);
                        let gd: Vec<f64> = g
                            .iter()
                            .zip(ba.iter().zip(&bb))
                            .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                            .collect();
                        contributions.push((*b, reduce_grad_to_shape(&gd, out_shape, &vb.shape)));
                    }
                }
                Op::Neg(x) => {
                    if self.needs(*x) {
                        contributions.push((*x, g.iter().map(|v| -v).collect()));
                    }
                }
                Op::Exp(x) => {
                    if self.needs(*x) {
                        let out = &node.value.data;
                        contributions
                            .push((*x, g.iter().zip(out).map(|(&gi, &o)| gi * o).collect()));
                    }
                }
                Op::Softplus(x) => {
                    if self.needs(*x) {
                        let xin = &self.nodes[x.0].value.data;
                        contributions.push((
                            *x,
                            g.iter()
                                .zip(xin)
                                .map(|(&gi, &xi)| gi * sigmoid(xi))
                                .collect(),
                        ));
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(*x) {
                        let out = &node.value.data;
                        contributions.push((
                            *x,
                            g.iter()
                                .zip(out)
                                .map(|(&gi, &s)| gi * s * (1.0 - s))
                                .collect(),
                        ));
                    }
                }
                Op::Silu(x) => {
                    if self.needs(*x) {
                        let xin = &self.nodes[x.0].value.data;
                        contributions.push((
                            *x,
                            g.iter()
                                .zip(xin)
                                .map(|(&gi, &xi)| {
                                    let s = sigmoid(xi);
                                    gi * s * (1.0 + xi * (1.0 - s))
                                })
                                .collect(),
                        ));
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k) = (va.shape[0], va.shape[1]);
                    let n = vb.shape[1];
                    if self.needs(*a) {
                        // dA = dY . B^T
                        let mut da = vec![0.0; m * k];
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            let darow = &mut da[i2 * k..(i2 + 1) * k];
                            for (kk, dv) in darow.iter_mut().enumerate() {
                                let brow = &vb.data[kk * n..(kk + 1) * n];
                                *dv = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            }
                        }
                        contributions.push((*a, da));
                    }
                    if self.needs(*b) {
                        // dB = A^T . dY
                        let mut db = vec![0.0; k * n];
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            let arow = &va.data[i2 * k..(i2 + 1) * k];
                            for (kk, &av) in arow.iter().enumerate() {
                                if av != 0.0 {
                                    let dbrow = &mut db[kk * n..(kk + 1) * n];
                                    for (d, &gv) in dbrow.iter_mut().zip(grow) {
                                        *d += av * gv;
                                    }
                                }
                            }
                        }
                        contributions.push((*b, db));
                    }
                }
                Op::SumAll(x) => {
                    if self.needs(*x) {
                        let n = self.nodes[x.0].value.numel();
                        contributions.push((*x, vec![g[0]; n]));
                    }
                }
                Op::MeanAll(x) => {
                    if self.needs(*x) {
                        let n = self.nodes[x.0].value.numel();
                        contributions.push((*x, vec![g[0] / n as f64; n]));
                    }
                }
                Op::Reshape(x) => {
                    if self.needs(*x) {
                        contributions.push((*x, g.to_vec()));
                    }
                }
                Op::Permute { x, perm } => {
                    if self.needs(*x) {
                        // Scatter back through the inverse permutation.
                        let vin = &self.nodes[x.0].value;
                        let in_strides = strides(&vin.shape);
                        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                        let mut gx = vec![0.0; vin.numel()];
                        let mut coord = vec![0usize; out_shape.len()];
                        let mut src = 0usize;
                        for &gv in g {
                            gx[src] = gv;
                            for d in (0..out_shape.len()).rev() {
                                coord[d] += 1;
                                src += gather[d];
                                if coord[d] < out_shape[d] {
                                    break;
                                }
                                coord[d] = 0;
                                src -= gather[d] * out_shape[d];
                            }
                        }
                        contributions.push((*x, gx));
                    }
                }
                Op::Concat { parts, axis } => {
                    let lead: usize = out_shape[..*axis].iter().product();
                    let out_run: usize = out_shape[*axis..].iter().product();
                    let mut offset = 0usize;
                    for &p in parts {
                        let v = &self.nodes[p.0].value;
                        let run: usize = v.shape[*axis..].iter().product();
                        if self.needs(p) {
                            let mut gp = Vec::with_capacity(v.numel());
                            for l2 in 0..lead {
                                let at = l2 * out_run + offset;
                                gp.extend_from_slice(&g[at..at + run]);
                            }
                            contributions.push((p, gp));
                        }
                        offset += run;
                    }
                }
                Op::CausalConv1d { x, kernel, bias } => {
                    let (vx, vk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
                    let (rows, l, d) = conv_dims(vx).expect("checked at forward");
                    let w = vk.shape[0];
                    if self.needs(*x) {
                        let mut gx = vec![0.0; vx.numel()];
                        for r in 0..rows {
                            let gr = &g[r * l * d..(r + 1) * l * d];
                            let gxr = &mut gx[r * l * d..(r + 1) * l * d];
                            for t in 0..l {
                                let grow = &gr[t * d..(t + 1) * d];
                                for j in 0..w.min(t + 1) {
                                    let krow = &vk.data[j * d..(j + 1) * d];
                                    let xrow = &mut gxr[(t - j) * d..(t - j + 1) * d];
                                    for ((o, &kv), &gv) in
                                        xrow.iter_mut().zip(krow).zip(grow)
                                    {
                                        *o += kv * gv;
                                    }
                                }
                            }
                        }
                        contributions.push((*x, gx));
                    }
                    if self.needs(*kernel) {
                        let mut gk = vec![0.0; vk.numel()];
                        for r in 0..rows {
                            let gr = &g[r * l * d..(r + 1) * l * d];
                            let xr = &vx.data[r * l * d..(r + 1) * l * d];
                            for t in 0..l {
                                let grow = &gr[t * d..(t + 1) * d];
                                for j in 0..w.min(t + 1) {
                                    let krow = &mut gk[j * d..(j + 1) * d];
                                    let xrow = &xr[(t - j) * d..(t - j + 1) * d];
                                    for ((o, &xv), &gv) in
                                        krow.iter_mut().zip(xrow).zip(grow)
                                    {
                                        *o += xv * gv;
                                    }
                                }
                            }
                        }
                        contributions.push((*kernel, gk));
                    }
                    if self.needs(*bias) {
                        let mut gb = vec![0.0; d];
                        for rt in 0..rows * l {
                            let grow = &g[rt * d..(rt + 1) * d];
                            for (o, &gv) in gb.iter_mut().zip(grow) {
                                *o += gv;
                            }
                        }
                        contributions.push((*bias, gb));
                    }
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor> =
                        inputs.iter().map(|&t| &self.nodes[t.0].value).collect();
                    let grads = op.backward(g, &vals, &node.value);
                    assert_eq!(
                        grads.len(),
                        inputs.len(),
                        "custom op {} returned wrong gradient count",
                        op.name()
                    );
                    for (&inp, gr) in inputs.iter().zip(grads) {
                        if let Some(gr) = gr {
                            if self.needs(inp) {
                                contributions.push((inp, gr));
                            }
                        }
                    }
                }
            }
        }
        for (id, delta) in contributions {
            debug_assert_eq!(delta.len(), self.nodes[id.0].value.numel());
            add_grad(&mut self.nodes[id.0].value.grad, &delta);
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Exp(..) => "exp",
        Op::Softplus(..) => "softplus",
        Op::Sigmoid(..) => "sigmoid",
        Op::Silu(..) => "silu",
        Op::MatMul(..) => "matmul",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::Concat { .. } => "concat",
        Op::CausalConv1d { .. } => "causal_conv1d",
        Op::Custom { op, .. } => op.name(),
    }
}

/// Interprets a conv input as (rows, L, d): 2-D means a single row.
fn conv_dims(v: &Tensor) -> Result<(usize, usize, usize)> {
    match v.shape() {
        [l, d] => Ok((1, *l, *d)),
        [rows, l, d] => Ok((*rows, *l, *d)),
        s => Err(DtError::Shape(format!(
            "causal_conv1d expects (L,d) or (rows,L,d), got {s:?}"
        ))),
    }
}

/// g * v with v broadcast to `out_shape` (used by Mul backward).
fn broadcast_mul_into(g: &[f64], v: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let gathered = broadcast_gather(v, out_shape);
    g.iter().zip(&gathered).map(|(&a, &b)| a * b).collect()
}

/// Materializes `v` broadcast to `out_shape`.
fn broadcast_gather(v: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if v.shape() == out_shape {
        return v.data().to_vec();
    }
    let sv = broadcast_strides(v.shape(), out_shape);
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coord = vec![0usize; out_shape.len()];
    let mut iv = 0usize;
    for _ in 0..numel {
        out.push(v.data()[iv]);
        for d in (0..out_shape.len()).rev() {
            coord[d] += 1;
            iv += sv[d];
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
            iv -= sv[d] * out_shape[d];
        }
    }
    out
}
