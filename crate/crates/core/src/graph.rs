//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value computed in one forward pass. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and [`Graph::backward`] simply walks it in reverse. Leaves are
//! inserted with [`Graph::param`] (tracked) or [`Graph::constant`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gemm;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dAttrs {
    pub const SAME_3X3: Self = Self { stride: 1, pad: 1 };
    pub const POINTWISE: Self = Self { stride: 1, pad: 0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolAttrs {
    pub kernel: usize,
    pub stride: usize,
}

/// The primitive operation set. Attributes travel with the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive<T> {
    /// Inputs `x: Cin×H×W`, `w: Cout×Cin×kh×kw` and an optional bias `b: Cout`.
    Conv2d(Conv2dAttrs),
    MaxPool2d(PoolAttrs),
    /// `C×H×W -> C`
    GlobalAvgPool,
    /// `m×k · k×n`
    Matmul,
    /// Two-dimensional transpose.
    Transpose,
    Reshape(Vec<usize>),
    Add,
    Sub,
    Mul,
    /// Multiply by a constant.
    Scale(T),
    /// `s · x` where `s` is a single-element variable.
    ScalarMul,
    Relu,
    Sigmoid,
    Softmax { axis: usize },
    Log,
    ClampMin(T),
    Sum,
    Mean,
    /// Row normalization of a clamped, group-masked square matrix:
    /// `D_ij = [P_ij]₊·S_ij / max(Σ_j [P_ij]₊·S_ij, eps)` with
    /// `S_ij = 1(g_i == g_j)`. `groups = None` means `S ≡ 1`.
    MaskedRowNormalize { groups: Option<Vec<bool>>, eps: T },
}

impl<T> Primitive<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d(_) => "conv2d",
            Primitive::MaxPool2d(_) => "maxpool2d",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Matmul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::ScalarMul => "scalar_mul",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax { .. } => "softmax",
            Primitive::Log => "log",
            Primitive::ClampMin(_) => "clamp_min",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::MaskedRowNormalize { .. } => "masked_row_normalize",
        }
    }
}

enum Saved<T> {
    None,
    Cols(Vec<T>),
    Argmax(Vec<usize>),
    RowMass(Vec<T>),
}

struct Node<T> {
    prim: Option<Primitive<T>>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
    saved: Saved<T>,
}

/// One forward pass worth of recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    kink: Option<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            kink: None,
        }
    }

    /// A graph that fingerprints which side of every non-smooth point
    /// (ReLU, clamp, max-pool argmax) each element falls on. Used by the
    /// finite-difference checker to skip coordinates that straddle a kink.
    pub fn with_kink_tracking() -> Self {
        Self {
            kink: Some(FNV_OFFSET),
            ..Self::new()
        }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kink
    }

    fn mix(&mut self, v: u64) {
        if let Some(h) = self.kink.as_mut() {
            *h = (*h ^ v).wrapping_mul(FNV_PRIME);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(None, Vec::new(), value, requires_grad, Saved::None)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(
        &mut self,
        prim: Option<Primitive<T>>,
        inputs: Vec<usize>,
        value: Tensor<T>,
        requires_grad: bool,
        saved: Saved<T>,
    ) -> Var {
        self.nodes.push(Node {
            prim,
            inputs,
            value,
            requires_grad,
            saved,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    /// Applies `prim` to `inputs` and records the result.
    pub fn apply(&mut self, prim: Primitive<T>, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let arity = match prim {
            Primitive::Conv2d(_) => {
                if inputs.len() == 2 || inputs.len() == 3 {
                    inputs.len()
                } else {
                    3
                }
            }
            Primitive::Matmul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::ScalarMul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Arity {
                primitive: prim.name(),
                expected: arity,
                got: inputs.len(),
            });
        }
        let (value, saved) = self.forward(&prim, inputs)?;
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite {
                op: prim.name(),
                index,
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            Some(prim),
            inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
            saved,
        ))
    }

    fn forward(&mut self, prim: &Primitive<T>, inputs: &[Var]) -> Result<(Tensor<T>, Saved<T>)> {
        let x = &self.nodes[inputs[0].0].value;
        let name = prim.name();
        let out = match prim {
            Primitive::Conv2d(attrs) => {
                let w = &self.nodes[inputs[1].0].value;
                let b = inputs.get(2).map(|v| &self.nodes[v.0].value);
                let (y, cols) = conv2d_forward(x, w, b, *attrs)?;
                (y, Saved::Cols(cols))
            }
            Primitive::MaxPool2d(attrs) => {
                let (y, arg) = maxpool_forward(x, *attrs)?;
                if self.kink.is_some() {
                    for &a in &arg {
                        self.mix(a as u64);
                    }
                }
                (y, Saved::Argmax(arg))
            }
            Primitive::GlobalAvgPool => {
                let (c, plane) = chw(name, x)?;
                let inv = T::one() / T::of(plane as f64);
                let data = (0..c)
                    .map(|ch| x.data()[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>() * inv)
                    .collect();
                (Tensor::new(&[c], data)?, Saved::None)
            }
            Primitive::Matmul => {
                let b = &self.nodes[inputs[1].0].value;
                let (m, k, n) = matmul_dims(x, b)?;
                let mut out = vec![T::zero(); m * n];
                gemm::mm(m, k, n, x.data(), b.data(), &mut out);
                (Tensor::new(&[m, n], out)?, Saved::None)
            }
            Primitive::Transpose => {
                let (r, c) = mat_dims(name, x)?;
                (Tensor::new(&[c, r], transpose(r, c, x.data()))?, Saved::None)
            }
            Primitive::Reshape(shape) => (x.clone().reshape(shape)?, Saved::None),
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let b = &self.nodes[inputs[1].0].value;
                if x.shape() != b.shape() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let f: fn(T, T) -> T = match prim {
                    Primitive::Add => |a, b| a + b,
                    Primitive::Sub => |a, b| a - b,
                    _ => |a, b| a * b,
                };
                let data = x.data().iter().zip(b.data()).map(|(&a, &b)| f(a, b)).collect();
                (Tensor::new(x.shape(), data)?, Saved::None)
            }
            Primitive::Scale(c) => (x.map(|v| v * *c), Saved::None),
            Primitive::ScalarMul => {
                if !x.is_scalar() {
                    return Err(Error::InvalidShape {
                        op: name,
                        shape: x.shape().to_vec(),
                        reason: "first operand must hold a single element",
                    });
                }
                let s = x.item();
                (self.nodes[inputs[1].0].value.map(|v| s * v), Saved::None)
            }
            Primitive::Relu => {
                let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
                if self.kink.is_some() {
                    let bits: Vec<u64> = x.data().iter().map(|&v| (v > T::zero()) as u64).collect();
                    bits.into_iter().for_each(|b| self.mix(b));
                }
                (y, Saved::None)
            }
            Primitive::Sigmoid => (x.map(sigmoid), Saved::None),
            Primitive::Softmax { axis } => (softmax(x, *axis)?, Saved::None),
            Primitive::Log => {
                if let Some((index, &v)) = x.data().iter().enumerate().find(|(_, &v)| v <= T::zero()) {
                    return Err(Error::LogDomain {
                        index,
                        value: v.as_f64(),
                    });
                }
                (x.map(|v| v.ln()), Saved::None)
            }
            Primitive::ClampMin(floor) => {
                let floor = *floor;
                let y = x.map(|v| if v > floor { v } else { floor });
                if self.kink.is_some() {
                    let bits: Vec<u64> = x.data().iter().map(|&v| (v > floor) as u64).collect();
                    bits.into_iter().for_each(|b| self.mix(b));
                }
                (y, Saved::None)
            }
            Primitive::Sum => (Tensor::scalar(x.sum()), Saved::None),
            Primitive::Mean => (Tensor::scalar(x.sum() / T::of(x.len() as f64)), Saved::None),
            Primitive::MaskedRowNormalize { groups, eps } => {
                let (n, c) = mat_dims(name, x)?;
                if n != c {
                    return Err(Error::InvalidShape {
                        op: name,
                        shape: x.shape().to_vec(),
                        reason: "matrix must be square",
                    });
                }
                if let Some(g) = groups {
                    if g.len() != n {
                        return Err(Error::ShapeMismatch {
                            op: name,
                            lhs: x.shape().to_vec(),
                            rhs: vec![g.len()],
                        });
                    }
                }
                let (y, mass) = masked_row_normalize(x.data(), n, groups.as_deref(), *eps);
                if self.kink.is_some() {
                    let bits: Vec<u64> = x
                        .data()
                        .iter()
                        .map(|&v| (v > T::zero()) as u64)
                        .chain(mass.iter().map(|&m| (m > *eps) as u64))
                        .collect();
                    bits.into_iter().for_each(|b| self.mix(b));
                }
                (Tensor::new(&[n, n], y)?, Saved::RowMass(mass))
            }
        };
        Ok(out)
    }

    /// Reverse-mode sweep from a single-element `loss`. Gradients accumulate
    /// on every node that requires them; afterwards [`Graph::grad`] returns
    /// `∂loss/∂leaf` for each tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if node.prim.is_none() || !node.requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backward_node(&self.nodes, &mut self.grads, i, &g);
        }
        Ok(())
    }

    // Typed conveniences over `apply`.

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: Conv2dAttrs) -> Result<Var> {
        match b {
            Some(b) => self.apply(Primitive::Conv2d(attrs), &[x, w, b]),
            None => self.apply(Primitive::Conv2d(attrs), &[x, w]),
        }
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.apply(Primitive::MaxPool2d(PoolAttrs { kernel, stride }), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        self.apply(Primitive::ScalarMul, &[s, x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn clamp_min(&mut self, x: Var, floor: T) -> Result<Var> {
        self.apply(Primitive::ClampMin(floor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn masked_row_normalize(&mut self, p: Var, groups: Option<Vec<bool>>, eps: T) -> Result<Var> {
        self.apply(Primitive::MaskedRowNormalize { groups, eps }, &[p])
    }
}

/// Zero-initialized gradient buffer for input `j`, or `None` when `j` does
/// not need a gradient.
fn buf<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    j: usize,
) -> Option<&'a mut [T]> {
    if !nodes[j].requires_grad {
        return None;
    }
    Some(
        grads[j]
            .get_or_insert_with(|| Tensor::zeros(nodes[j].value.shape()))
            .data_mut(),
    )
}

fn backward_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], i: usize, g: &Tensor<T>) {
    let node = &nodes[i];
    let ins = &node.inputs;
    let x = &nodes[ins[0]].value;
    let gd = g.data();
    let prim = node.prim.as_ref().expect("leaf nodes have no backward");
    match prim {
        Primitive::Conv2d(attrs) => {
            let w = &nodes[ins[1]].value;
            let Saved::Cols(cols) = &node.saved else { unreachable!() };
            let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            let krows = cin * kh * kw;
            let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
            let p = ho * wo;
            if let Some(gw) = buf(nodes, grads, ins[1]) {
                gemm::mm_nt(cout, p, krows, gd, cols, gw);
            }
            if let Some(&bi) = ins.get(2) {
                if let Some(gb) = buf(nodes, grads, bi) {
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        *gbo += gd[o * p..(o + 1) * p].iter().copied().sum::<T>();
                    }
                }
            }
            if nodes[ins[0]].requires_grad {
                let mut gcols = vec![T::zero(); krows * p];
                gemm::mm_tn(krows, cout, p, w.data(), gd, &mut gcols);
                let gx = buf(nodes, grads, ins[0]).expect("checked");
                col2im(&gcols, x.shape(), kh, kw, *attrs, ho, wo, gx);
            }
        }
        Primitive::MaxPool2d(_) => {
            let Saved::Argmax(arg) = &node.saved else { unreachable!() };
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                for (&a, &gv) in arg.iter().zip(gd) {
                    gx[a] += gv;
                }
            }
        }
        Primitive::GlobalAvgPool => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                let plane = x.shape()[1] * x.shape()[2];
                let inv = T::one() / T::of(plane as f64);
                for (c, &gv) in gd.iter().enumerate() {
                    for v in &mut gx[c * plane..(c + 1) * plane] {
                        *v += gv * inv;
                    }
                }
            }
        }
        Primitive::Matmul => {
            let b = &nodes[ins[1]].value;
            let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
            if let Some(ga) = buf(nodes, grads, ins[0]) {
                gemm::mm_nt(m, n, k, gd, b.data(), ga);
            }
            if let Some(gb) = buf(nodes, grads, ins[1]) {
                gemm::mm_tn(k, m, n, x.data(), gd, gb);
            }
        }
        Primitive::Transpose => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                for (a, b) in gx.iter_mut().zip(transpose(c, r, gd)) {
                    *a += b;
                }
            }
        }
        Primitive::Reshape(_) => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                add_into(gx, gd);
            }
        }
        Primitive::Add => {
            if let Some(ga) = buf(nodes, grads, ins[0]) {
                add_into(ga, gd);
            }
            if let Some(gb) = buf(nodes, grads, ins[1]) {
                add_into(gb, gd);
            }
        }
        Primitive::Sub => {
            if let Some(ga) = buf(nodes, grads, ins[0]) {
                add_into(ga, gd);
            }
            if let Some(gb) = buf(nodes, grads, ins[1]) {
                for (a, &v) in gb.iter_mut().zip(gd) {
                    *a -= v;
                }
            }
        }
        Primitive::Mul => {
            let b = &nodes[ins[1]].value;
            if let Some(ga) = buf(nodes, grads, ins[0]) {
                for ((a, &v), &bv) in ga.iter_mut().zip(gd).zip(b.data()) {
                    *a += v * bv;
                }
            }
            if let Some(gb) = buf(nodes, grads, ins[1]) {
                for ((a, &v), &xv) in gb.iter_mut().zip(gd).zip(x.data()) {
                    *a += v * xv;
                }
            }
        }
        Primitive::Scale(c) => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                for (a, &v) in gx.iter_mut().zip(gd) {
                    *a += v * *c;
                }
            }
        }
        Primitive::ScalarMul => {
            let s = x.item();
            let rhs = &nodes[ins[1]].value;
            if let Some(gs) = buf(nodes, grads, ins[0]) {
                gs[0] += gemm::dot(gd, rhs.data());
            }
            if let Some(gx) = buf(nodes, grads, ins[1]) {
                for (a, &v) in gx.iter_mut().zip(gd) {
                    *a += v * s;
                }
            }
        }
        Primitive::Relu => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                for ((a, &v), &xv) in gx.iter_mut().zip(gd).zip(x.data()) {
                    if xv > T::zero() {
                        *a += v;
                    }
                }
            }
        }
        Primitive::Sigmoid => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                for ((a, &v), &y) in gx.iter_mut().zip(gd).zip(node.value.data()) {
                    *a += v * y * (T::one() - y);
                }
            }
        }
        Primitive::Softmax { axis } => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let y = node.value.data();
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + r;
                        let dotp: T = (0..len).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] += y[at(k)] * (gd[at(k)] - dotp);
                        }
                    }
                }
            }
        }
        Primitive::Log => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                for ((a, &v), &xv) in gx.iter_mut().zip(gd).zip(x.data()) {
                    *a += v / xv;
                }
            }
        }
        Primitive::ClampMin(floor) => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                for ((a, &v), &xv) in gx.iter_mut().zip(gd).zip(x.data()) {
                    if xv > *floor {
                        *a += v;
                    }
                }
            }
        }
        Primitive::Sum => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                let gv = gd[0];
                gx.iter_mut().for_each(|a| *a += gv);
            }
        }
        Primitive::Mean => {
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                let gv = gd[0] / T::of(x.len() as f64);
                gx.iter_mut().for_each(|a| *a += gv);
            }
        }
        Primitive::MaskedRowNormalize { groups, eps } => {
            let Saved::RowMass(mass) = &node.saved else { unreachable!() };
            if let Some(gx) = buf(nodes, grads, ins[0]) {
                let n = mass.len();
                let y = node.value.data();
                let p = x.data();
                for i in 0..n {
                    let row = i * n..(i + 1) * n;
                    let m = mass[i];
                    let denom = if m > *eps { m } else { *eps };
                    // d/dP of a/denom; the denominator only depends on P when m > eps.
                    let corr = if m > *eps {
                        gemm::dot(&gd[row.clone()], &y[row.clone()])
                    } else {
                        T::zero()
                    };
                    for j in 0..n {
                        let same = groups.as_ref().map_or(true, |g| g[i] == g[j]);
                        if same && p[i * n + j] > T::zero() {
                            gx[i * n + j] += (gd[i * n + j] - corr) / denom;
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn chw<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.ndim() != 3 {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected C×H×W",
        });
    }
    Ok((x.shape()[0], x.shape()[1] * x.shape()[2]))
}

fn mat_dims<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.ndim() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected a matrix",
        });
    }
    Ok((x.shape()[0], x.shape()[1]))
}

fn matmul_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

pub(crate) fn transpose<T: Real>(r: usize, c: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// `(outer, len, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::InvalidShape {
            op: "softmax",
            shape: x.shape().to_vec(),
            reason: "axis out of range",
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |k: usize| (o * len + k) * inner + r;
            let mx = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..len {
                let e = (xd[at(k)] - mx).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn conv_out_dim(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || size + 2 * pad < k {
        return Err(Error::InvalidShape {
            op,
            shape: vec![size, k, stride, pad],
            reason: "window larger than padded input or zero stride",
        });
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    attrs: Conv2dAttrs,
) -> Result<(Tensor<T>, Vec<T>)> {
    if x.ndim() != 3 || w.ndim() != 4 || w.shape()[1] != x.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let ho = conv_out_dim("conv2d", h, kh, attrs.stride, attrs.pad)?;
    let wo = conv_out_dim("conv2d", wd, kw, attrs.stride, attrs.pad)?;
    let p = ho * wo;
    let krows = cin * kh * kw;
    let mut cols = vec![T::zero(); krows * p];
    let xd = x.data();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * attrs.stride + ky) as isize - attrs.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (c * h + iy as usize) * wd;
                    for ox in 0..wo {
                        let ix = (ox * attrs.stride + kx) as isize - attrs.pad as isize;
                        if ix >= 0 && ix < wd as isize {
                            cols[row + oy * wo + ox] = xd[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![T::zero(); cout * p];
    if let Some(b) = b {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bv);
        }
    }
    gemm::mm(cout, krows, p, w.data(), &cols, &mut out);
    Ok((Tensor::new(&[cout, ho, wo], out)?, cols))
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    gcols: &[T],
    xshape: &[usize],
    kh: usize,
    kw: usize,
    attrs: Conv2dAttrs,
    ho: usize,
    wo: usize,
    gx: &mut [T],
) {
    let (cin, h, wd) = (xshape[0], xshape[1], xshape[2]);
    let p = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * attrs.stride + ky) as isize - attrs.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * wd;
                    for ox in 0..wo {
                        let ix = (ox * attrs.stride + kx) as isize - attrs.pad as isize;
                        if ix >= 0 && ix < wd as isize {
                            gx[dst + ix as usize] += gcols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn maxpool_forward<T: Real>(x: &Tensor<T>, attrs: PoolAttrs) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, _) = chw("maxpool2d", x)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if attrs.kernel == 0 {
        return Err(Error::InvalidShape {
            op: "maxpool2d",
            shape: x.shape().to_vec(),
            reason: "kernel must be positive",
        });
    }
    let ho = conv_out_dim("maxpool2d", h, attrs.kernel, attrs.stride, 0)?;
    let wo = conv_out_dim("maxpool2d", w, attrs.kernel, attrs.stride, 0)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = usize::MAX;
                for ky in 0..attrs.kernel {
                    for kx in 0..attrs.kernel {
                        let idx = (ch * h + oy * attrs.stride + ky) * w + ox * attrs.stride + kx;
                        if best == usize::MAX || xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, ho, wo], out)?, arg))
}

/// Forward pass of the masked row normalization; also returns the per-row
/// masked mass `Σ_j [P_ij]₊·S_ij`.
pub(crate) fn masked_row_normalize<T: Real>(
    p: &[T],
    n: usize,
    groups: Option<&[bool]>,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); n * n];
    let mut mass = vec![T::zero(); n];
    for i in 0..n {
        let row = &mut out[i * n..(i + 1) * n];
        let mut total = T::zero();
        for j in 0..n {
            let same = groups.map_or(true, |g| g[i] == g[j]);
            let v = p[i * n + j];
            if same && v > T::zero() {
                row[j] = v;
                total += v;
            }
        }
        mass[i] = total;
        let denom = if total > eps { total } else { eps };
        row.iter_mut().for_each(|v| *v /= denom);
    }
    (out, mass)
}
