use std::cell::{Ref, RefCell};
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use super::conv::{self, ConvDims};
use super::{numel, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Identifies a parameter tensor across forward passes: `group` names the
/// owning network, `index` the tensor within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: u16,
    pub index: u32,
}

impl ParamKey {
    pub const fn new(group: u16, index: u32) -> Self {
        Self { group, index }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Neg,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamKey),
    Binary(BinaryOp, usize, usize),
    Unary(UnaryOp, usize),
    Affine { x: usize, scale: T },
    Clamp { x: usize, lo: T, hi: T },
    MatMul(usize, usize),
    Conv { x: usize, k: usize, dims: ConvDims },
    Deconv { x: usize, k: usize, dims: ConvDims },
    Reshape(usize),
    Narrow { x: usize, axis: usize, start: usize, len: usize },
    Sum(usize),
    Mean(usize),
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive operations for one forward/backward pass.
///
/// Parameters enter through [`Tape::param`]. Only keys whose group is being
/// tracked (all groups by default) and whose tensor `requires_grad` become
/// differentiable; everything else is a constant on this tape.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    tracked: Option<Vec<u16>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tracked: None,
        }
    }

    /// A tape on which only parameters of the listed groups receive gradient.
    pub fn tracking(groups: &[u16]) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tracked: Some(groups.to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, data, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A constant input.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Var<'_, T>> {
        if shape.is_empty() || numel(&shape) != data.len() {
            return dim_err(format!("shape {shape:?} does not hold {} values", data.len()));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    /// Registers a parameter. The same key may be registered more than once
    /// per tape; gradients of all registrations are summed.
    pub fn param(&self, key: ParamKey, t: &Tensor<T>) -> Var<'_, T> {
        let tracked = self.tracked.as_ref().is_none_or(|g| g.contains(&key.group));
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(key),
            tracked && t.requires_grad(),
        )
    }

    /// Generic entry point for the elementwise family.
    pub fn elementwise<'t>(
        &'t self,
        op: ElementwiseKind,
        a: Var<'t, T>,
        b: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        match (op, b) {
            (ElementwiseKind::Binary(k), Some(b)) => a.binary(k, b),
            (ElementwiseKind::Unary(k), None) => a.unary(k),
            (ElementwiseKind::Binary(k), None) => Err(Error::Contract(format!("{k:?} needs two operands"))),
            (ElementwiseKind::Unary(k), Some(_)) => Err(Error::Contract(format!("{k:?} takes one operand"))),
        }
    }

    /// Hash of every piecewise-linear branch taken (relu sign, leaky-relu
    /// sign, clamp region). Two forward passes with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for (i, node) in nodes.iter().enumerate() {
            match &node.op {
                Op::Unary(UnaryOp::Relu | UnaryOp::LeakyRelu(_), x) => {
                    i.hash(&mut h);
                    for v in &nodes[*x].data {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    i.hash(&mut h);
                    for v in &nodes[*x].data {
                        let region: u8 = if *v < *lo { 0 } else if *v > *hi { 2 } else { 1 };
                        region.hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut params: BTreeMap<ParamKey, Vec<T>> = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let (Op::Param(key), Some(g)) = (&node.op, grads[id].as_ref()) {
                match params.get_mut(key) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += *v),
                    None => {
                        params.insert(*key, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
        None => *slot = Some(g),
    }
}

/// For each element of `a_shape`, the flat index of the broadcast operand.
fn broadcast_index(a_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let nd = a_shape.len();
    let off = nd - b_shape.len();
    let mut bstride = vec![0usize; nd];
    let mut s = 1;
    for i in (0..b_shape.len()).rev() {
        if b_shape[i] != 1 {
            bstride[off + i] = s;
        }
        s *= b_shape[i];
    }
    let total = numel(a_shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(cur);
        for d in (0..nd).rev() {
            idx[d] += 1;
            cur += bstride[d];
            if idx[d] < a_shape[d] {
                break;
            }
            cur -= bstride[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len()
        && b
            .iter()
            .rev()
            .zip(a.iter().rev())
            .all(|(&bd, &ad)| bd == ad || bd == 1)
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Binary(kind, a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let same = na.shape == nb.shape;
            let map = (!same).then(|| broadcast_index(&na.shape, &nb.shape));
            let bi = |i: usize| map.as_ref().map_or(i, |m| m[i]);
            if na.needs_grad {
                let ga: Vec<T> = match kind {
                    BinaryOp::Add => g.to_vec(),
                    BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => g.iter().enumerate().map(|(i, v)| *v * nb.data[bi(i)]).collect(),
                    BinaryOp::Div => g.iter().enumerate().map(|(i, v)| *v / nb.data[bi(i)]).collect(),
                };
                add_into(&mut grads[*a], ga);
            }
            if nb.needs_grad {
                let mut gb = vec![T::zero(); nb.data.len()];
                for (i, v) in g.iter().enumerate() {
                    let j = bi(i);
                    gb[j] += match kind {
                        BinaryOp::Add => *v,
                        BinaryOp::Sub => -*v,
                        BinaryOp::Mul => *v * na.data[i],
                        BinaryOp::Div => {
                            let d = nb.data[j];
                            -*v * na.data[i] / (d * d)
                        }
                    };
                }
                add_into(&mut grads[*b], gb);
            }
        }
        Op::Unary(kind, x) => {
            let nx = &nodes[*x];
            if !nx.needs_grad {
                return;
            }
            let xs = &nx.data;
            let ys = &node.data;
            let two = T::lit(2.0);
            let gx: Vec<T> = (0..g.len())
                .map(|i| {
                    let d = match kind {
                        UnaryOp::Exp => ys[i],
                        UnaryOp::Log => T::one() / xs[i],
                        UnaryOp::Tanh => T::one() - ys[i] * ys[i],
                        UnaryOp::Relu => {
                            if xs[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::LeakyRelu(alpha) => {
                            if xs[i] > T::zero() {
                                T::one()
                            } else {
                                T::lit(*alpha)
                            }
                        }
                        UnaryOp::Sigmoid => ys[i] * (T::one() - ys[i]),
                        UnaryOp::Neg => -T::one(),
                        UnaryOp::Square => two * xs[i],
                        UnaryOp::Sqrt => T::one() / (two * ys[i]),
                    };
                    g[i] * d
                })
                .collect();
            add_into(&mut grads[*x], gx);
        }
        Op::Affine { x, scale } => {
            if nodes[*x].needs_grad {
                add_into(&mut grads[*x], g.iter().map(|v| *v * *scale).collect());
            }
        }
        Op::Clamp { x, lo, hi } => {
            let nx = &nodes[*x];
            if nx.needs_grad {
                let gx = g
                    .iter()
                    .zip(&nx.data)
                    .map(|(v, xv)| if *xv < *lo || *xv > *hi { T::zero() } else { *v })
                    .collect();
                add_into(&mut grads[*x], gx);
            }
        }
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            if na.needs_grad {
                // dA = dC · B^T
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, n as isize, 1, &nb.data, 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                add_into(&mut grads[*a], ga);
            }
            if nb.needs_grad {
                // dB = A^T · dC
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, &na.data, 1, k as isize, g, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                add_into(&mut grads[*b], gb);
            }
        }
        Op::Conv { x, k, dims } => {
            let (nx, nk) = (&nodes[*x], &nodes[*k]);
            let (dx, dk) = conv::conv_backward(&nx.data, &nk.data, g, dims, nx.needs_grad, nk.needs_grad);
            if let Some(dx) = dx {
                add_into(&mut grads[*x], dx);
            }
            if let Some(dk) = dk {
                add_into(&mut grads[*k], dk);
            }
        }
        Op::Deconv { x, k, dims } => {
            let (nx, nk) = (&nodes[*x], &nodes[*k]);
            let (dx, dk) = conv::deconv_backward(&nx.data, &nk.data, g, dims, nx.needs_grad, nk.needs_grad);
            if let Some(dx) = dx {
                add_into(&mut grads[*x], dx);
            }
            if let Some(dk) = dk {
                add_into(&mut grads[*k], dk);
            }
        }
        Op::Reshape(x) => {
            if nodes[*x].needs_grad {
                add_into(&mut grads[*x], g.to_vec());
            }
        }
        Op::Narrow { x, axis, start, len } => {
            let nx = &nodes[*x];
            if nx.needs_grad {
                let (outer, full, inner) = split_axis(&nx.shape, *axis);
                let mut gx = vec![T::zero(); nx.data.len()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                    dst.copy_from_slice(src);
                }
                add_into(&mut grads[*x], gx);
            }
        }
        Op::Sum(x) => {
            let nx = &nodes[*x];
            if nx.needs_grad {
                add_into(&mut grads[*x], vec![g[0]; nx.data.len()]);
            }
        }
        Op::Mean(x) => {
            let nx = &nodes[*x];
            if nx.needs_grad {
                let v = g[0] / T::lit(nx.data.len() as f64);
                add_into(&mut grads[*x], vec![v; nx.data.len()]);
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().data.len()
    }

    /// Borrow of the forward value.
    pub fn data(&self) -> Ref<'t, [T]> {
        Ref::map(self.node(), |n| n.data.as_slice())
    }

    /// Owned copy of the forward value as a constant tensor.
    pub fn value(&self) -> Tensor<T> {
        let n = self.node();
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape nodes hold consistent shapes")
    }

    /// First element; meant for scalar results.
    pub fn item(&self) -> T {
        self.node().data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// A constant copy that cuts the gradient path.
    pub fn detach(&self) -> Var<'t, T> {
        let (shape, data) = {
            let n = self.node();
            (n.shape.clone(), n.data.clone())
        };
        self.tape.push(shape, data, Op::Leaf, false)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    pub fn binary(self, kind: BinaryOp, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&b)?;
        let (shape, data, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[b.id]);
            if !broadcastable(&na.shape, &nb.shape) {
                return dim_err(format!(
                    "{kind:?}: shape {:?} does not broadcast to {:?}",
                    nb.shape, na.shape
                ));
            }
            if kind == BinaryOp::Div && nb.data.iter().any(|v| *v == T::zero()) {
                return Err(Error::Domain("division by zero".into()));
            }
            let f = |x: T, y: T| match kind {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
            };
            let data: Vec<T> = if na.shape == nb.shape {
                na.data.iter().zip(&nb.data).map(|(x, y)| f(*x, *y)).collect()
            } else if nb.data.len() == 1 {
                let y = nb.data[0];
                na.data.iter().map(|x| f(*x, y)).collect()
            } else {
                let map = broadcast_index(&na.shape, &nb.shape);
                na.data.iter().zip(map).map(|(x, j)| f(*x, nb.data[j])).collect()
            };
            (na.shape.clone(), data, na.needs_grad || nb.needs_grad)
        };
        Ok(self.tape.push(shape, data, Op::Binary(kind, self.id, b.id), needs))
    }

    pub fn add(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Add, b)
    }

    pub fn sub(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Sub, b)
    }

    pub fn mul(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Mul, b)
    }

    pub fn div(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Div, b)
    }

    pub fn unary(self, kind: UnaryOp) -> Result<Var<'t, T>> {
        let (shape, data, needs) = {
            let n = self.node();
            match kind {
                UnaryOp::Log => {
                    if let Some(v) = n.data.iter().find(|v| !(**v > T::zero())) {
                        return Err(Error::Domain(format!("log of non-positive value {v}")));
                    }
                }
                UnaryOp::Sqrt => {
                    if let Some(v) = n.data.iter().find(|v| !(**v >= T::zero())) {
                        return Err(Error::Domain(format!("sqrt of negative value {v}")));
                    }
                }
                _ => {}
            }
            let data: Vec<T> = n
                .data
                .iter()
                .map(|&x| match kind {
                    UnaryOp::Exp => x.exp(),
                    UnaryOp::Log => x.ln(),
                    UnaryOp::Tanh => x.tanh(),
                    UnaryOp::Relu => {
                        if x > T::zero() {
                            x
                        } else {
                            T::zero()
                        }
                    }
                    UnaryOp::LeakyRelu(a) => {
                        if x > T::zero() {
                            x
                        } else {
                            x * T::lit(a)
                        }
                    }
                    UnaryOp::Sigmoid => {
                        if x >= T::zero() {
                            T::one() / (T::one() + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (T::one() + e)
                        }
                    }
                    UnaryOp::Neg => -x,
                    UnaryOp::Square => x * x,
                    UnaryOp::Sqrt => x.sqrt(),
                })
                .collect();
            (n.shape.clone(), data, n.needs_grad)
        };
        Ok(self.tape.push(shape, data, Op::Unary(kind, self.id), needs))
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Log)
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Relu)
    }

    pub fn leaky_relu(self, alpha: f64) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::LeakyRelu(alpha))
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Neg)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Square)
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Sqrt)
    }

    /// `scale · x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t, T> {
        let (s, b) = (T::lit(scale), T::lit(shift));
        let (shape, data, needs) = {
            let n = self.node();
            (n.shape.clone(), n.data.iter().map(|x| *x * s + b).collect(), n.needs_grad)
        };
        self.tape.push(shape, data, Op::Affine { x: self.id, scale: s }, needs)
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        self.affine(s, 0.0)
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let (shape, data, needs) = {
            let n = self.node();
            (n.shape.clone(), n.data.iter().map(|x| x.max(lo).min(hi)).collect(), n.needs_grad)
        };
        self.tape.push(shape, data, Op::Clamp { x: self.id, lo, hi }, needs)
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&b)?;
        let (shape, data, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[b.id]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return dim_err(format!("matmul of {:?} and {:?}", na.shape, nb.shape));
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, &na.data, k as isize, 1, &nb.data, n as isize, 1, T::zero(), &mut out, n as isize, 1);
            (vec![m, n], out, na.needs_grad || nb.needs_grad)
        };
        Ok(self.tape.push(shape, data, Op::MatMul(self.id, b.id), needs))
    }

    /// Cross-correlation of `[N, C, H, W]` with `[O, C, k, k]`.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.same_tape(&kernel)?;
        let (shape, data, needs, dims) = {
            let nodes = self.tape.nodes.borrow();
            let (nx, nk) = (&nodes[self.id], &nodes[kernel.id]);
            let (dims, shape) = conv::conv_dims(&nx.shape, &nk.shape, stride, pad)?;
            let data = conv::conv_forward(&nx.data, &nk.data, &dims);
            (shape, data, nx.needs_grad || nk.needs_grad, dims)
        };
        Ok(self.tape.push(shape, data, Op::Conv { x: self.id, k: kernel.id, dims }, needs))
    }

    /// Transposed convolution of `[N, C_in, H, W]` with `[C_in, C_out, k, k]`.
    pub fn deconv2d(self, kernel: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.same_tape(&kernel)?;
        let (shape, data, needs, dims) = {
            let nodes = self.tape.nodes.borrow();
            let (nx, nk) = (&nodes[self.id], &nodes[kernel.id]);
            let (dims, shape) = conv::deconv_dims(&nx.shape, &nk.shape, stride, pad)?;
            let data = conv::deconv_forward(&nx.data, &nk.data, &dims);
            (shape, data, nx.needs_grad || nk.needs_grad, dims)
        };
        Ok(self.tape.push(shape, data, Op::Deconv { x: self.id, k: kernel.id, dims }, needs))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let (data, needs) = {
            let n = self.node();
            if numel(shape) != n.data.len() || shape.contains(&0) {
                return dim_err(format!("cannot reshape {:?} into {shape:?}", n.shape));
            }
            (n.data.clone(), n.needs_grad)
        };
        Ok(self.tape.push(shape.to_vec(), data, Op::Reshape(self.id), needs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (shape, data, needs) = {
            let n = self.node();
            if axis >= n.shape.len() || len == 0 || start + len > n.shape[axis] {
                return dim_err(format!("narrow({axis}, {start}, {len}) of {:?}", n.shape));
            }
            let (outer, full, inner) = split_axis(&n.shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&n.data[(o * full + start) * inner..(o * full + start + len) * inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = len;
            (shape, data, n.needs_grad)
        };
        Ok(self.tape.push(shape, data, Op::Narrow { x: self.id, axis, start, len }, needs))
    }

    pub fn sum(self) -> Var<'t, T> {
        let (v, needs) = {
            let n = self.node();
            (n.data.iter().copied().sum::<T>(), n.needs_grad)
        };
        self.tape.push(vec![1], vec![v], Op::Sum(self.id), needs)
    }

    pub fn mean(self) -> Var<'t, T> {
        let (v, needs) = {
            let n = self.node();
            (n.data.iter().copied().sum::<T>() / T::lit(n.data.len() as f64), n.needs_grad)
        };
        self.tape.push(vec![1], vec![v], Op::Mean(self.id), needs)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar = f32> {
    nodes: Vec<Option<Vec<T>>>,
    params: BTreeMap<ParamKey, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// d loss / d var, or `None` when no gradient reached it.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.nodes.get(v.id).and_then(|g| g.as_deref())
    }

    /// Summed gradient over every registration of `key`.
    pub fn param(&self, key: ParamKey) -> Option<&[T]> {
        self.params.get(&key).map(|g| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamKey, &[T])> {
        self.params.iter().map(|(k, g)| (*k, g.as_slice()))
    }

    /// Groups that received any gradient.
    pub fn groups(&self) -> Vec<u16> {
        let mut g: Vec<u16> = self.params.keys().map(|k| k.group).collect();
        g.dedup();
        g
    }
}
