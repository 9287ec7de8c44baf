use std::collections::HashMap;

use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `[m, k] x [k, n]`; a rank-1 rhs is treated as `n = 1`.
    MatMul { lhs: Var, rhs: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    AvgPool2d { input: Var, geom: PoolGeom },
    Reshape(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanAxis0 { input: Var, rows: usize },
    Norm(Var),
    Softmax { input: Var, temperature: f64 },
    Stack(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis0 { .. } => "mean_axis0",
            Op::Norm(..) => "l2_norm",
            Op::Softmax { .. } => "softmax",
            Op::Stack(..) => "stack",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    /// Some leaf below this node requires a gradient.
    needs_grad: bool,
    /// Leaf created from a tensor with `requires_grad`.
    tracked: bool,
}

/// Define-by-run computation record. Every primitive is evaluated eagerly
/// and appended in topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the primitives recorded so far, in recording order.
    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).map(|n| n.op.name())
    }

    /// Records a leaf; gradients are returned for it when the tensor
    /// carries `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: tracked,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: false,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<T>, inputs: &[Var]) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            tracked: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (self.numel(a), self.numel(b));
        let shape = if sa == sb || nb == 1 {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else {
            let op = Op::Binary(kind, a, b).name();
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        };
        let n = na.max(nb);
        let (va, vb) = (self.value(a), self.value(b));
        let value = (0..n)
            .map(|i| {
                let x = va[if na == 1 { 0 } else { i }];
                let y = vb[if nb == 1 { 0 } else { i }];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        self.push(Op::Binary(kind, a, b), shape, value, &[a, b])
    }

    /// Elementwise sum; a single-element operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f: T = c(factor);
        let value = self.value(a).iter().map(|&x| x * f).collect();
        self.push(Op::Scale(a, factor), self.shape(a).to_vec(), value, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let o: T = c(offset);
        let value = self.value(a).iter().map(|&x| x + o).collect();
        self.push(Op::AddScalar(a), self.shape(a).to_vec(), value, &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]` or `[m, k] x [k] -> [m]`.
    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (n, out_shape) = match sb.as_slice() {
            [kk] if *kk == k => (1, vec![m]),
            [kk, n] if *kk == k => (*n, vec![m, *n]),
            _ => return Err(mismatch()),
        };
        let value = kernels::matmul(self.value(lhs), self.value(rhs), m, k, n);
        self.push(Op::MatMul { lhs, rhs, m, k, n }, out_shape, value, &[lhs, rhs])
    }

    /// Valid (unpadded) 2-D cross-correlation. `input` is `[C, H, W]`,
    /// `weight` is `[O, C, kh, kw]`, `bias` is `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        let bad = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: si.clone(),
            rhs: sw.clone(),
        };
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || stride.0 == 0 || stride.1 == 0 {
            return Err(bad());
        }
        if sw[2] > si[1] || sw[3] > si[2] {
            return Err(bad());
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![sw[0]],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            in_c: si[0],
            in_h: si[1],
            in_w: si[2],
            out_c: sw[0],
            k_h: sw[2],
            k_w: sw[3],
            s_h: stride.0,
            s_w: stride.1,
        };
        let value = kernels::conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        let shape = vec![geom.out_c, geom.out_h(), geom.out_w()];
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(Op::Conv2d { input, weight, bias, geom }, shape, value, &inputs)
    }

    /// Average pooling over `[C, H, W]` without padding.
    pub fn avg_pool2d(
        &mut self,
        input: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if si.len() != 3
            || kernel.0 == 0
            || kernel.1 == 0
            || stride.0 == 0
            || stride.1 == 0
            || kernel.0 > si[1]
            || kernel.1 > si[2]
        {
            return Err(TensorError::ShapeMismatch {
                op: "avg_pool2d",
                lhs: si,
                rhs: vec![kernel.0, kernel.1],
            });
        }
        let geom = PoolGeom {
            c: si[0],
            in_h: si[1],
            in_w: si[2],
            k_h: kernel.0,
            k_w: kernel.1,
            s_h: stride.0,
            s_w: stride.1,
        };
        let value = kernels::avg_pool_forward(&geom, self.value(input));
        let shape = vec![geom.c, geom.out_h(), geom.out_w()];
        self.push(Op::AvgPool2d { input, geom }, shape, value, &[input])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty() || shape.iter().product::<usize>() != self.numel(a) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        self.push(Op::Reshape(a), shape.to_vec(), value, &[a])
    }

    /// Flattens to rank 1.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.numel(a);
        self.reshape(a, &[n])
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(op, self.shape(a).to_vec(), value, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu(a), a, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp(a), a, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log(a), a, |x| x.ln())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Abs(a), a, |x| x.abs())
    }

    /// `max(x, floor)` elementwise.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let f: T = c(floor);
        self.unary(Op::ClampMin(a, floor), a, |x| if x > f { x } else { f })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push(Op::Sum(a), vec![1], vec![s], &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.numel(a);
        let s: T = self.value(a).iter().copied().sum();
        let m = s / T::from_usize(n).unwrap();
        self.push(Op::Mean(a), vec![1], vec![m], &[a])
    }

    /// Mean over the leading axis: `[n, ...] -> [...]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_axis0",
                lhs: shape,
                rhs: vec![],
            });
        }
        let rows = shape[0];
        let width = self.numel(a) / rows;
        let src = self.value(a);
        let mut acc = vec![T::zero(); width];
        for r in 0..rows {
            for (d, &s) in acc.iter_mut().zip(&src[r * width..(r + 1) * width]) {
                *d = *d + s;
            }
        }
        let inv = T::from_usize(rows).unwrap();
        let value = acc.into_iter().map(|v| v / inv).collect();
        self.push(Op::MeanAxis0 { input: a, rows }, shape[1..].to_vec(), value, &[a])
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).iter().map(|&x| x * x).sum();
        self.push(Op::Norm(a), vec![1], vec![s.sqrt()], &[a])
    }

    /// `softmax(a / temperature)` over all elements.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || temperature.is_nan() {
            return Err(TensorError::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let t: T = c(temperature);
        let src = self.value(a);
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = src.iter().map(|&x| ((x - max) / t).exp()).collect();
        let z: T = exps.iter().copied().sum();
        let value = exps.into_iter().map(|e| e / z).collect();
        self.push(Op::Softmax { input: a, temperature }, self.shape(a).to_vec(), value, &[a])
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(f) => *f,
            None => return Err(TensorError::InvalidArgument("stack of zero tensors".into())),
        };
        let inner = self.shape(first).to_vec();
        let mut value = Vec::with_capacity(parts.len() * self.numel(first));
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: inner,
                    rhs: self.shape(p).to_vec(),
                });
            }
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        self.push(Op::Stack(parts.to_vec()), shape, value, parts)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.numel(output) != 1 {
            return Err(TensorError::NotScalar(self.shape(output).to_vec()));
        }
        self.backward_with_seed(output, &Tensor::filled(self.shape(output), T::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`).
    pub fn backward_with_seed(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if node.tracked {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                let t = Tensor::new(node.shape.clone(), data).expect("gradient shape");
                out.insert(i, t);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (va.len(), vb.len());
                let at = |v: &[T], n: usize, k: usize| v[if n == 1 { 0 } else { k }];
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gk,
                            Binary::Mul => gk * at(vb, nb, k),
                            Binary::Div => gk / at(vb, nb, k),
                        };
                        let j = if na == 1 { 0 } else { k };
                        ga[j] = ga[j] + d;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * at(va, na, k),
                            Binary::Div => {
                                let y = at(vb, nb, k);
                                -gk * at(va, na, k) / (y * y)
                            }
                        };
                        let j = if nb == 1 { 0 } else { k };
                        gb[j] = gb[j] + d;
                    }
                }
            }
            Op::Scale(a, f) => {
                let f: T = c(*f);
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &gk)| *d = *d + gk * f);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &gk)| *d = *d + gk);
                }
            }
            Op::MatMul { lhs, rhs, m, k, n } => {
                let (va, vb) = (self.value(*lhs), self.value(*rhs));
                if let Some(ga) = self.slot(grads, *lhs) {
                    kernels::matmul_grad_lhs(g, vb, ga, *m, *k, *n);
                }
                if let Some(gb) = self.slot(grads, *rhs) {
                    kernels::matmul_grad_rhs(va, g, gb, *m, *k, *n);
                }
            }
            Op::Conv2d { input, weight, bias, geom } => {
                if let Some(gx) = self.slot(grads, *input) {
                    kernels::conv2d_grad_input(geom, self.value(*weight), g, gx);
                }
                if let Some(gw) = self.slot(grads, *weight) {
                    kernels::conv2d_grad_weight(geom, self.value(*input), g, gw);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(grads, *b) {
                        kernels::conv2d_grad_bias(geom, g, gb);
                    }
                }
            }
            Op::AvgPool2d { input, geom } => {
                if let Some(gx) = self.slot(grads, *input) {
                    kernels::avg_pool_backward(geom, g, gx);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gk), &x) in ga.iter_mut().zip(g).zip(va) {
                        if x > T::zero() {
                            *d = *d + gk;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gk), &yk) in ga.iter_mut().zip(g).zip(y) {
                        *d = *d + gk * yk;
                    }
                }
            }
            Op::Log(a) => {
                let va = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gk), &x) in ga.iter_mut().zip(g).zip(va) {
                        *d = *d + gk / x;
                    }
                }
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gk), &x) in ga.iter_mut().zip(g).zip(va) {
                        if x > T::zero() {
                            *d = *d + gk;
                        } else if x < T::zero() {
                            *d = *d - gk;
                        }
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let f: T = c(*floor);
                let va = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gk), &x) in ga.iter_mut().zip(g).zip(va) {
                        if x > f {
                            *d = *d + gk;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let share = g[0] / T::from_usize(ga.len()).unwrap();
                    ga.iter_mut().for_each(|d| *d = *d + share);
                }
            }
            Op::MeanAxis0 { input, rows } => {
                if let Some(ga) = self.slot(grads, *input) {
                    let width = g.len();
                    let inv = T::from_usize(*rows).unwrap();
                    for r in 0..*rows {
                        for (d, &gk) in ga[r * width..(r + 1) * width].iter_mut().zip(g) {
                            *d = *d + gk / inv;
                        }
                    }
                }
            }
            Op::Norm(a) => {
                let va = self.value(*a);
                let norm = node.value[0];
                if let Some(ga) = self.slot(grads, *a) {
                    if norm > T::zero() {
                        let s = g[0] / norm;
                        for (d, &x) in ga.iter_mut().zip(va) {
                            *d = *d + s * x;
                        }
                    }
                }
            }
            Op::Softmax { input, temperature } => {
                let y = &node.value;
                let t: T = c(*temperature);
                if let Some(ga) = self.slot(grads, *input) {
                    let dot: T = g.iter().zip(y).map(|(&gk, &yk)| gk * yk).sum();
                    for ((d, &gk), &yk) in ga.iter_mut().zip(g).zip(y) {
                        *d = *d + yk * (gk - dot) / t;
                    }
                }
            }
            Op::Stack(parts) => {
                let width = g.len() / parts.len();
                for (r, p) in parts.iter().enumerate() {
                    if let Some(gp) = self.slot(grads, *p) {
                        for (d, &gk) in gp.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                            *d = *d + gk;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the tracked leaves reachable from a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.leaf(&Tensor::vector(v.to_vec()).with_grad())
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.constant(&Tensor::vector(vec![3.0, 4.0]));
        let y = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn relu_and_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let p = g.constant(&Tensor::vector(vec![2.0, 4.0, 6.0]));
        let m = g.mean(p).unwrap();
        assert_eq!(g.scalar(m), 4.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap().with_grad());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.shape(), &[2, 3]);
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::scalar(3.0).with_grad());
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::<f64>::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let y = g.exp(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut g = Graph::<f64>::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = vec_leaf(&mut g, &[0.0]);
        assert_eq!(g.log(a), Err(TensorError::NonFinite { op: "log" }));
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut g = Graph::<f64>::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        let s = g.leaf(&Tensor::scalar(2.0).with_grad());
        let y = g.mul(a, s).unwrap();
        let out = g.sum(y).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn untracked_leaf_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        let b = vec_leaf(&mut g, &[3.0, 4.0]);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn conv_output_geometry() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::zeros(&[1, 4, 64]));
        let w = g.constant(&Tensor::zeros(&[8, 1, 1, 9]));
        let y = g.conv2d(x, w, None, (1, 1)).unwrap();
        assert_eq!(g.shape(y), &[8, 4, 56]);
        let p = g.avg_pool2d(y, (1, 8), (1, 4)).unwrap();
        assert_eq!(g.shape(p), &[8, 4, 13]);
    }
}
