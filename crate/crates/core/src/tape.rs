//! Reverse-mode automatic differentiation over a recording tape.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. `backward` replays the tape in reverse, accumulating
//! vector-Jacobian products in recording order, which makes gradients
//! bit-reproducible across runs of the same program.
//!
//! The op set is exactly what the encoders need: dense matrix products
//! (plain and batched), explicit reshapes/permutes/broadcasts, reductions,
//! and the handful of nonlinearities (leaky ReLU, sigmoid, absolute value,
//! clamped log, softmax, vector squashing). Binary elementwise ops require
//! identical shapes; callers broadcast explicitly.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, strides_of, Tensor};

/// Norms below this are treated as exactly zero by `squash_last` (output and
/// gradient both zero), the continuous extension of the squashing function.
const SQUASH_ZERO: f64 = 1e-30;

/// Handle to a node on a specific tape. Indices are only meaningful for the
/// tape that produced them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Bmm(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Broadcast(usize),
    SumAxis(usize, usize),
    SumAll(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Abs(usize),
    LnClamped(usize, f64),
    Softmax(usize, usize),
    SquashLast(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Broadcast(..) => "broadcast",
            Op::SumAxis(..) => "sum_axis",
            Op::SumAll(..) => "sum_all",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::LnClamped(..) => "ln_clamped",
            Op::Softmax(..) => "softmax",
            Op::SquashLast(..) => "squash_last",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// Set for named leaves (parameters); used in diagnostics.
    name: Option<String>,
}

/// Gradients produced by one `backward` pass, indexed by tape node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like `of`, but materializes an all-zero tensor for untouched nodes.
    pub fn of_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.of(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// New differentiable leaf (a parameter or an input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf carrying a name for diagnostics.
    pub fn leaf_named(&mut self, value: Tensor, name: impl Into<String>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    /// Constant input; identical to `leaf` but reads better at call sites.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    /// Copies the value of `x` onto a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.leaf(value)
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a.0, b.0)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a.0, b.0)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| -x).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Neg(a.0))
    }

    /// Multiplication by a host constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a.0, factor))
    }

    /// `(m,k) @ (k,n) -> (m,n)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn(
            out.data_mut(),
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
        );
        Ok(self.push(out, Op::Matmul(a.0, b.0)))
    }

    /// Batched matrix product `(B,m,k) @ (B,k,n) -> (B,m,n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(&[batch, m, n]);
        for i in 0..batch {
            matmul_nn(
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(out, Op::Bmm(a.0, b.0)))
    }

    /// Reorders axes; `perm[j]` names the source axis placed at position `j`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape();
        check_permutation(perm, shape.len())?;
        let dst_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = Tensor::zeros(&dst_shape);
        permute_apply(
            out.data_mut(),
            self.value(a).data(),
            shape,
            perm,
            false,
        );
        Ok(self.push(out, Op::Permute(a.0, perm.to_vec())))
    }

    /// Same elements under a new shape (row-major order preserved).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a.0)))
    }

    /// Expands size-1 axes of `a` to `target` (ranks must match).
    pub fn broadcast_to(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        let src = self.value(a).shape();
        if src.len() != target.len()
            || src
                .iter()
                .zip(target)
                .any(|(&s, &d)| s != d && s != 1)
        {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: src.to_vec(),
                rhs: target.to_vec(),
            });
        }
        let mut out = Tensor::zeros(target);
        broadcast_apply(out.data_mut(), self.value(a).data(), src, target);
        Ok(self.push(out, Op::Broadcast(a.0)))
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "sum_axis: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let mut dst_shape = shape.to_vec();
        dst_shape.remove(axis);
        let mut out = Tensor::zeros(&dst_shape);
        {
            let src = self.value(a).data();
            let dst = out.data_mut();
            for o in 0..outer {
                for k in 0..len {
                    let s = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                    let d = &mut dst[o * inner..(o + 1) * inner];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv += sv;
                    }
                }
            }
        }
        Ok(self.push(out, Op::SumAxis(a.0, axis)))
    }

    /// Sums every element into a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(a.0))
    }

    /// `x` for positive inputs, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::LeakyRelu(a.0, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Sigmoid(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.abs()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Abs(a.0))
    }

    /// `ln(max(x, floor))`; the floor keeps logs of near-zero probabilities finite.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        if !(floor > 0.0) {
            return Err(Error::Contract(format!(
                "ln_clamped: floor must be positive, got {floor}"
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.max(floor).ln())
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::LnClamped(a.0, floor)))
    }

    /// Softmax along `axis`, computed with max subtraction for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = Tensor::zeros(&shape);
        {
            let src = self.value(a).data();
            let dst = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for k in 0..len {
                        max = max.max(src[base + k * inner]);
                    }
                    let mut sum = 0.0;
                    for k in 0..len {
                        let e = (src[base + k * inner] - max).exp();
                        dst[base + k * inner] = e;
                        sum += e;
                    }
                    for k in 0..len {
                        dst[base + k * inner] /= sum;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Softmax(a.0, axis)))
    }

    /// Norm-dependent shrinkage of each vector along the last axis:
    /// `y = x * |x| / (1 + |x|^2)`, which keeps `|y| < 1`. The zero vector
    /// maps to zero with zero gradient.
    pub fn squash_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::Contract(
                "squash_last: needs at least one axis".into(),
            ));
        }
        let d = shape[shape.len() - 1];
        let mut out = Tensor::zeros(&shape);
        {
            let src = self.value(a).data();
            let dst = out.data_mut();
            for (srow, drow) in src.chunks_exact(d).zip(dst.chunks_exact_mut(d)) {
                let n2: f64 = srow.iter().map(|x| x * x).sum();
                let n = n2.sqrt();
                if n > SQUASH_ZERO {
                    let k = n / (1.0 + n2);
                    for (dv, sv) in drow.iter_mut().zip(srow) {
                        *dv = sv * k;
                    }
                }
            }
        }
        Ok(self.push(out, Op::SquashLast(a.0)))
    }

    /// Reverse pass from a rank-0 loss node. Returns per-node gradients;
    /// leaves that no path reached simply have none recorded.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if !self.value(loss).shape().is_empty() {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, found shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    /// Accumulates the vector-Jacobian product of node `i` into its parents.
    fn apply_vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let acc = |idx: usize, grads: &mut [Option<Tensor>], f: &mut dyn FnMut(&mut [f64])| {
            let shape = self.nodes[idx].value.shape().to_vec();
            let slot = grads[idx].get_or_insert_with(|| Tensor::zeros(&shape));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, grads, &mut |d| axpy(d, g.data(), 1.0));
                acc(*b, grads, &mut |d| axpy(d, g.data(), 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &mut |d| axpy(d, g.data(), 1.0));
                acc(*b, grads, &mut |d| axpy(d, g.data(), -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(*a, grads, &mut |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g.data()).zip(bv) {
                        *dv += gv * xv;
                    }
                });
                acc(*b, grads, &mut |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g.data()).zip(av) {
                        *dv += gv * xv;
                    }
                });
            }
            Op::Neg(a) => acc(*a, grads, &mut |d| axpy(d, g.data(), -1.0)),
            Op::Scale(a, factor) => {
                let f = *factor;
                acc(*a, grads, &mut |d| axpy(d, g.data(), f));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                // dA = g @ B^T, dB = A^T @ g
                acc(*a, grads, &mut |d| matmul_nt(d, g.data(), bv, m, n, k));
                acc(*b, grads, &mut |d| matmul_tn(d, av, g.data(), m, k, n));
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(*a, grads, &mut |d| {
                    for i in 0..batch {
                        matmul_nt(
                            &mut d[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, grads, &mut |d| {
                    for i in 0..batch {
                        matmul_tn(
                            &mut d[i * k * n..(i + 1) * k * n],
                            &av[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Permute(a, perm) => {
                // The gradient flows back through the inverse permutation,
                // which is the same mapping applied in accumulate mode.
                let src_shape = self.nodes[*a].value.shape().to_vec();
                let inverse = invert_permutation(perm);
                let dst_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
                acc(*a, grads, &mut |d| {
                    permute_apply(d, g.data(), &dst_shape, &inverse, true);
                });
            }
            Op::Reshape(a) => {
                acc(*a, grads, &mut |d| axpy(d, g.data(), 1.0));
            }
            Op::Broadcast(a) => {
                let src_shape = self.nodes[*a].value.shape().to_vec();
                let dst_shape = node.value.shape().to_vec();
                acc(*a, grads, &mut |d| {
                    broadcast_fold(d, g.data(), &src_shape, &dst_shape);
                });
            }
            Op::SumAxis(a, axis) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                acc(*a, grads, &mut |d| {
                    for o in 0..outer {
                        let grow = &g.data()[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            let drow = &mut d[(o * len + k) * inner..(o * len + k + 1) * inner];
                            axpy(drow, grow, 1.0);
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                acc(*a, grads, &mut |d| {
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let xv = self.nodes[*a].value.data();
                let s = *slope;
                acc(*a, grads, &mut |d| {
                    for ((dv, gv), x) in d.iter_mut().zip(g.data()).zip(xv) {
                        *dv += gv * if *x > 0.0 { 1.0 } else { s };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                acc(*a, grads, &mut |d| {
                    for ((dv, gv), y) in d.iter_mut().zip(g.data()).zip(yv) {
                        *dv += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Abs(a) => {
                let xv = self.nodes[*a].value.data();
                acc(*a, grads, &mut |d| {
                    for ((dv, gv), x) in d.iter_mut().zip(g.data()).zip(xv) {
                        *dv += gv * if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::LnClamped(a, floor) => {
                let xv = self.nodes[*a].value.data();
                let fl = *floor;
                acc(*a, grads, &mut |d| {
                    for ((dv, gv), x) in d.iter_mut().zip(g.data()).zip(xv) {
                        if *x > fl {
                            *dv += gv / x;
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let shape = node.value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let yv = node.value.data();
                acc(*a, grads, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for k in 0..len {
                                let idx = base + k * inner;
                                dot += g.data()[idx] * yv[idx];
                            }
                            for k in 0..len {
                                let idx = base + k * inner;
                                d[idx] += yv[idx] * (g.data()[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::SquashLast(a) => {
                let xv = self.nodes[*a].value.data();
                let dlen = *node.value.shape().last().expect("rank >= 1");
                acc(*a, grads, &mut |d| {
                    for ((drow, grow), xrow) in d
                        .chunks_exact_mut(dlen)
                        .zip(g.data().chunks_exact(dlen))
                        .zip(xv.chunks_exact(dlen))
                    {
                        let n2: f64 = xrow.iter().map(|x| x * x).sum();
                        let n = n2.sqrt();
                        if n <= SQUASH_ZERO {
                            continue;
                        }
                        let k1 = n / (1.0 + n2);
                        let k2 = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2) * n);
                        let gx: f64 = grow.iter().zip(xrow).map(|(gv, x)| gv * x).sum();
                        for ((dv, gv), x) in drow.iter_mut().zip(grow).zip(xrow) {
                            *dv += gv * k1 + x * gx * k2;
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// First node (in recording order) whose value is not finite, reported
    /// as `(index, op name, optional leaf name, shape)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str, Option<&str>, &[usize])> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                None
            } else {
                Some((i, n.op.name(), n.name.as_deref(), n.value.shape()))
            }
        })
    }
}

fn axpy(dst: &mut [f64], src: &[f64], factor: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// Splits a shape at `axis` into `(outer, len, inner)` extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_permutation(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Contract(format!(
            "permute: {perm:?} is not a permutation of 0..{rank}"
        )));
    }
    Ok(())
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// Walks all rows (every axis but the last) of `dst_shape`, handing the
/// callback the destination row index and the source offset accumulated
/// from `sstrides_outer` (one stride per outer axis, zero for broadcast
/// axes).
fn for_each_row(
    dst_shape: &[usize],
    sstrides_outer: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let rank = dst_shape.len();
    let outer: usize = dst_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut src_off = 0usize;
    for row in 0..outer {
        f(row, src_off);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            src_off += sstrides_outer[ax];
            if idx[ax] < dst_shape[ax] {
                break;
            }
            src_off -= sstrides_outer[ax] * dst_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Copies (or accumulates) `src` into `dst` with axes reordered by `perm`.
fn permute_apply(dst: &mut [f64], src: &[f64], src_shape: &[usize], perm: &[usize], accumulate: bool) {
    let rank = perm.len();
    if rank <= 1 {
        if accumulate {
            axpy(dst, src, 1.0);
        } else {
            dst.copy_from_slice(src);
        }
        return;
    }
    let sstr = strides_of(src_shape);
    let dst_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let strides_for_dst: Vec<usize> = perm.iter().map(|&p| sstr[p]).collect();
    let inner = dst_shape[rank - 1];
    let inner_stride = strides_for_dst[rank - 1];
    for_each_row(&dst_shape, &strides_for_dst[..rank - 1], |row, soff| {
        let drow = &mut dst[row * inner..(row + 1) * inner];
        if inner_stride == 1 {
            let srow = &src[soff..soff + inner];
            if accumulate {
                axpy(drow, srow, 1.0);
            } else {
                drow.copy_from_slice(srow);
            }
        } else {
            for (j, dv) in drow.iter_mut().enumerate() {
                let sv = src[soff + j * inner_stride];
                if accumulate {
                    *dv += sv;
                } else {
                    *dv = sv;
                }
            }
        }
    });
}

/// Broadcast strides: zero on axes where the source extent is one.
fn bcast_strides(src_shape: &[usize]) -> Vec<usize> {
    let sstr = strides_of(src_shape);
    src_shape
        .iter()
        .zip(&sstr)
        .map(|(&dim, &st)| if dim == 1 { 0 } else { st })
        .collect()
}

fn broadcast_apply(dst: &mut [f64], src: &[f64], src_shape: &[usize], dst_shape: &[usize]) {
    let rank = dst_shape.len();
    if rank == 0 {
        dst[0] = src[0];
        return;
    }
    let strides = bcast_strides(src_shape);
    let inner = dst_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    for_each_row(dst_shape, &strides[..rank - 1], |row, soff| {
        let drow = &mut dst[row * inner..(row + 1) * inner];
        if inner_stride == 0 {
            drow.fill(src[soff]);
        } else {
            drow.copy_from_slice(&src[soff..soff + inner]);
        }
    });
}

/// Transpose of `broadcast_apply`: folds the expanded gradient back onto the
/// source shape by summing over broadcast axes.
fn broadcast_fold(src_grad: &mut [f64], dst_grad: &[f64], src_shape: &[usize], dst_shape: &[usize]) {
    let rank = dst_shape.len();
    if rank == 0 {
        src_grad[0] += dst_grad[0];
        return;
    }
    let strides = bcast_strides(src_shape);
    let inner = dst_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    for_each_row(dst_shape, &strides[..rank - 1], |row, soff| {
        let grow = &dst_grad[row * inner..(row + 1) * inner];
        if inner_stride == 0 {
            src_grad[soff] += grow.iter().sum::<f64>();
        } else {
            axpy(&mut src_grad[soff..soff + inner], grow, 1.0);
        }
    });
}
