//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records primitive tensor ops in an append-only tape; inputs of
//! node `i` always have ids `< i`, so one reverse sweep over the tape visits
//! each node exactly once. Forward values are computed eagerly and checked
//! for finiteness at every op boundary.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::{ensure_finite, Tensor};

/// Index of a node in the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// How the right operand of `add` is broadcast over the left.
#[derive(Clone, Copy, Debug, PartialEq)]
enum AddMode {
    Same,
    /// rhs is `[k]`, lhs has trailing dimension `k`.
    LastDim,
    /// rhs is `[c]`, lhs is `[n, c, h, w]`.
    Channel,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Input,
    Add(AddMode),
    Mul,
    MatMul,
    Conv2d,
    Relu,
    Abs,
    Mean,
    Reshape,
    SoftmaxCrossEntropy { labels: Vec<usize> },
}

struct Node<S> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<S>,
}

/// Append-only tape of primitive ops.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradients produced by [`Graph::backward`].
///
/// Leaves that the root does not depend on get zero gradients.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the sweep root with respect to `id`, if one was produced.
    /// Always `Some` for leaves.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Records a differentiable parameter leaf.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Records a constant input (no gradient is collected for it).
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value });
        id
    }

    fn checked(&mut self, op_name: &'static str, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<S>) -> Result<NodeId> {
        ensure_finite(op_name, &data)?;
        Ok(self.push(op, inputs, Tensor::from_parts(shape, data)))
    }

    /// Element-wise addition. The right operand may also be a vector that is
    /// broadcast over the trailing dimension, or over the channel axis of a
    /// 4-d tensor (the two cases bias terms need).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let mode = if sa == sb {
            AddMode::Same
        } else if sb.len() == 1 && !sa.is_empty() && *sa.last().unwrap() == sb[0] {
            AddMode::LastDim
        } else if sb.len() == 1 && sa.len() == 4 && sa[1] == sb[0] {
            AddMode::Channel
        } else {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("lhs {sa:?} rhs {sb:?}"),
            });
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<S> = match mode {
            AddMode::Same => da.iter().zip(db).map(|(&x, &y)| x + y).collect(),
            AddMode::LastDim => {
                let k = db.len();
                da.iter().enumerate().map(|(i, &x)| x + db[i % k]).collect()
            }
            AddMode::Channel => {
                let (c, hw) = (sa[1], sa[2] * sa[3]);
                da.iter()
                    .enumerate()
                    .map(|(i, &x)| x + db[(i / hw) % c])
                    .collect()
            }
        };
        self.checked("add", Op::Add(mode), vec![a, b], sa, data)
    }

    /// Element-wise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("lhs {sa:?} rhs {sb:?}"),
            });
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.checked("mul", Op::Mul, vec![a, b], sa, data)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("lhs {sa:?} rhs {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for l in 0..k {
                let ail = da[i * k + l];
                for j in 0..n {
                    data[i * n + j] += ail * db[l * n + j];
                }
            }
        }
        self.checked("matmul", Op::MatMul, vec![a, b], vec![m, n], data)
    }

    /// 2-d convolution, valid padding, stride 1.
    /// Input `[n, c_in, h, w]`, kernel `[c_out, c_in, kh, kw]`,
    /// output `[n, c_out, h-kh+1, w-kw+1]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (sx, sk) = (self.value(x).shape().to_vec(), self.value(kernel).shape().to_vec());
        let ok = sx.len() == 4 && sk.len() == 4 && sx[1] == sk[1] && sk[2] <= sx[2] && sk[3] <= sx[3];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {sx:?} kernel {sk:?}"),
            });
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let (dx, dk) = (self.value(x).data(), self.value(kernel).data());
        let mut data = vec![S::zero(); n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = S::zero();
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let xi = ((b * cin + ci) * h + oy + ky) * w + ox + kx;
                                    let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                    acc += dx[xi] * dk[ki];
                                }
                            }
                        }
                        data[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        self.checked("conv2d", Op::Conv2d, vec![x, kernel], vec![n, cout, oh, ow], data)
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        self.checked("relu", Op::Relu, vec![x], shape, data)
    }

    /// Element-wise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let data: Vec<S> = self.value(x).data().iter().map(|&v| v.abs()).collect();
        self.checked("abs", Op::Abs, vec![x], shape, data)
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        let sum: S = self.value(x).data().iter().copied().sum();
        let data = vec![sum / cast::<S>(n as f64)];
        self.checked("mean", Op::Mean, vec![x], vec![], data)
    }

    /// Shape-only view with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let want: usize = shape.iter().product();
        if want != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.value(x).shape(), shape),
            });
        }
        let data = self.value(x).data().to_vec();
        self.checked("reshape", Op::Reshape, vec![x], shape, data)
    }

    /// Per-sample softmax cross-entropy.
    ///
    /// Logits `[n, c]` with `n` labels produce per-sample losses `[n]`;
    /// 1-d logits `[c]` with one label produce a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.value(logits).shape().to_vec();
        let (n, c, out_shape) = match s.len() {
            1 => (1usize, s[0], vec![]),
            2 => (s[0], s[1], vec![s[0]]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    detail: format!("logits {s:?} must be 1-d or 2-d"),
                })
            }
        };
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{n} samples but {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let d = self.value(logits).data();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let row = &d[i * c..(i + 1) * c];
            data.push(log_sum_exp(row) - row[labels[i]]);
        }
        self.checked(
            "softmax_cross_entropy",
            Op::SoftmaxCrossEntropy { labels: labels.to_vec() },
            vec![logits],
            out_shape,
            data,
        )
    }

    /// Reverse sweep from a scalar root; returns one gradient per reached
    /// node, with zeros materialized for unreached leaves. The graph itself
    /// is unchanged.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        if !self.value(root).is_scalar() && self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("root must be scalar, shape is {:?}", self.value(root).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let dz = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &dz, &mut grads);
            grads[i] = Some(dz);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(d) => Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d)),
                None if matches!(self.nodes[i].op, Op::Leaf) => {
                    Some(Tensor::zeros(self.nodes[i].value.shape().to_vec()))
                }
                None => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    /// Adds the vector-Jacobian product of node `i` into its inputs' buffers.
    fn accumulate(&self, i: usize, dz: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        macro_rules! slot {
            ($id:expr) => {{
                let id: NodeId = $id;
                let len = self.nodes[id.0].value.len();
                grads[id.0].get_or_insert_with(|| vec![S::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf | Op::Input => {}
            Op::Add(mode) => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                {
                    let ga = slot!(a);
                    for (g, &d) in ga.iter_mut().zip(dz) {
                        *g += d;
                    }
                }
                let gb = slot!(b);
                match mode {
                    AddMode::Same => {
                        for (g, &d) in gb.iter_mut().zip(dz) {
                            *g += d;
                        }
                    }
                    AddMode::LastDim => {
                        let k = gb.len();
                        for (j, &d) in dz.iter().enumerate() {
                            gb[j % k] += d;
                        }
                    }
                    AddMode::Channel => {
                        let s = node.value.shape();
                        let (c, hw) = (s[1], s[2] * s[3]);
                        for (j, &d) in dz.iter().enumerate() {
                            gb[(j / hw) % c] += d;
                        }
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (da, db) = (self.nodes[a.0].value.data().to_vec(), self.nodes[b.0].value.data().to_vec());
                {
                    let ga = slot!(a);
                    for ((g, &d), &bv) in ga.iter_mut().zip(dz).zip(&db) {
                        *g += d * bv;
                    }
                }
                let gb = slot!(b);
                for ((g, &d), &av) in gb.iter_mut().zip(dz).zip(&da) {
                    *g += d * av;
                }
            }
            Op::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da = self.nodes[a.0].value.data().to_vec();
                let db = self.nodes[b.0].value.data().to_vec();
                {
                    // dA = dZ · Bᵀ
                    let ga = slot!(a);
                    for i in 0..m {
                        for j in 0..n {
                            let d = dz[i * n + j];
                            for l in 0..k {
                                ga[i * k + l] += d * db[l * n + j];
                            }
                        }
                    }
                }
                // dB = Aᵀ · dZ
                let gb = slot!(b);
                for l in 0..k {
                    for i in 0..m {
                        let av = da[i * k + l];
                        for j in 0..n {
                            gb[l * n + j] += av * dz[i * n + j];
                        }
                    }
                }
            }
            Op::Conv2d => {
                let (x, kern) = (node.inputs[0], node.inputs[1]);
                let sx = self.nodes[x.0].value.shape().to_vec();
                let sk = self.nodes[kern.0].value.shape().to_vec();
                let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let dx_val = self.nodes[x.0].value.data().to_vec();
                let dk_val = self.nodes[kern.0].value.data().to_vec();
                {
                    let gx = slot!(x);
                    for b in 0..n {
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let d = dz[((b * cout + co) * oh + oy) * ow + ox];
                                    for ci in 0..cin {
                                        for ky in 0..kh {
                                            for kx in 0..kw {
                                                let xi = ((b * cin + ci) * h + oy + ky) * w + ox + kx;
                                                let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                                gx[xi] += d * dk_val[ki];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let gk = slot!(kern);
                for b in 0..n {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let d = dz[((b * cout + co) * oh + oy) * ow + ox];
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let xi = ((b * cin + ci) * h + oy + ky) * w + ox + kx;
                                            let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                            gk[ki] += d * dx_val[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                let dx = self.nodes[x.0].value.data().to_vec();
                let gx = slot!(x);
                for ((g, &d), &xv) in gx.iter_mut().zip(dz).zip(&dx) {
                    if xv > S::zero() {
                        *g += d;
                    }
                }
            }
            Op::Abs => {
                let x = node.inputs[0];
                let dx = self.nodes[x.0].value.data().to_vec();
                let gx = slot!(x);
                for ((g, &d), &xv) in gx.iter_mut().zip(dz).zip(&dx) {
                    if xv > S::zero() {
                        *g += d;
                    } else if xv < S::zero() {
                        *g -= d;
                    }
                }
            }
            Op::Mean => {
                let x = node.inputs[0];
                let n = cast::<S>(self.nodes[x.0].value.len() as f64);
                let d = dz[0] / n;
                let gx = slot!(x);
                for g in gx.iter_mut() {
                    *g += d;
                }
            }
            Op::Reshape => {
                let x = node.inputs[0];
                let gx = slot!(x);
                for (g, &d) in gx.iter_mut().zip(dz) {
                    *g += d;
                }
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let x = node.inputs[0];
                let dx = self.nodes[x.0].value.data().to_vec();
                let c = dx.len() / labels.len();
                let gx = slot!(x);
                for (i, &y) in labels.iter().enumerate() {
                    let row = &dx[i * c..(i + 1) * c];
                    let lse = log_sum_exp(row);
                    let d = dz[i];
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        let indicator = if j == y { S::one() } else { S::zero() };
                        gx[i * c + j] += d * (p - indicator);
                    }
                }
            }
        }
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}

/// Central-difference gradient estimate, one coordinate at a time.
///
/// Kept independent of the tape so it can serve as an oracle for
/// [`Graph::backward`].
pub fn finite_difference_gradient<S, F>(mut loss_fn: F, w: &[S], step: S) -> Result<Vec<S>>
where
    S: Scalar,
    F: FnMut(&[S]) -> Result<S>,
{
    if step <= S::zero() {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = w.to_vec();
    let two = cast::<S>(2.0);
    let mut grad = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        probe[i] = w[i] + step;
        let hi = loss_fn(&probe)?;
        probe[i] = w[i] - step;
        let lo = loss_fn(&probe)?;
        probe[i] = w[i];
        grad.push((hi - lo) / (two * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_matches_definition() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_of_1x1_matrices_is_scalar_product() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 1], &[3.0]));
        let b = g.leaf(t(&[1, 1], &[4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[12.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut g = Graph::new();
        let logits = g.leaf(t(&[2], &[0.0, 0.0]));
        let l = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn backward_of_constant_root_gives_zero_leaf_gradients() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let c = g.input(Tensor::scalar(7.0).unwrap());
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let m = g.mean(sq).unwrap(); // (w1² + w2²)/2
        let grads = g.backward(m).unwrap();
        // d mean(w²)/dw = w; scale by 2 to get the plain sum of squares.
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.relu(w).unwrap();
        assert!(matches!(g.backward(y), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn toy_loss_gradient_matches_hand_differentiation() {
        // L(w) = |w1·relu(w2) − 0.04| at (0.2, 0.05); inside the region
        // w1·w2 < 0.04 the loss is 0.04 − w1·w2 with gradient (−w2, −w1).
        let mut g = Graph::<f64>::new();
        let w1 = g.leaf(Tensor::scalar(0.2).unwrap());
        let w2 = g.leaf(Tensor::scalar(0.05).unwrap());
        let r = g.relu(w2).unwrap();
        let prod = g.mul(w1, r).unwrap();
        let c = g.input(Tensor::scalar(-0.04).unwrap());
        let shifted = g.add(prod, c).unwrap();
        let loss = g.abs(shifted).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.wrt(w1).unwrap().item().unwrap() - (-0.05)).abs() < 1e-15);
        assert!((grads.wrt(w2).unwrap().item().unwrap() - (-0.2)).abs() < 1e-15);
    }

    #[test]
    fn conv2d_output_shape_follows_valid_arithmetic() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 5, 4], (0..20).map(|i| i as f64 * 0.1).collect()).unwrap());
        let k = g.leaf(Tensor::new(vec![2, 1, 3, 2], vec![0.1; 12]).unwrap());
        let y = g.conv2d(x, k).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 3, 3]);
    }

    #[test]
    fn shape_mismatch_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 3], &[0.0; 6]));
        let b = g.leaf(t(&[2, 3], &[0.0; 6]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn finite_difference_on_quadratic() {
        // f(w) = w², central differences are exact for quadratics.
        let f = |w: &[f64]| Ok(w[0] * w[0]);
        let g = finite_difference_gradient(f, &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn finite_difference_of_constant_is_zero() {
        let f = |_: &[f64]| Ok(1.25);
        let g = finite_difference_gradient(f, &[0.3, -0.7], 1e-6).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn finite_difference_toy_loss() {
        let f = |w: &[f64]| {
            let mut g = Graph::new();
            let w1 = g.leaf(Tensor::scalar(w[0])?);
            let w2 = g.leaf(Tensor::scalar(w[1])?);
            let r = g.relu(w2)?;
            let prod = g.mul(w1, r)?;
            let c = g.input(Tensor::scalar(-0.04)?);
            let shifted = g.add(prod, c)?;
            let loss = g.abs(shifted)?;
            g.value(loss).item()
        };
        let grad = finite_difference_gradient(f, &[0.2, 0.05], 1e-6).unwrap();
        assert!((grad[0] - (-0.05)).abs() < 1e-6);
        assert!((grad[1] - (-0.2)).abs() < 1e-6);
    }

    #[test]
    fn finite_difference_rejects_non_positive_step() {
        let f = |w: &[f64]| Ok(w[0]);
        assert!(finite_difference_gradient(f, &[1.0], 0.0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let a = g.leaf(t(&[2, 2], &[0.3, -1.7, 2.9, 0.4]));
            let b = g.leaf(t(&[2, 2], &[1.1, 0.2, -0.6, 0.9]));
            let m = g.matmul(a, b).unwrap();
            let r = g.relu(m).unwrap();
            let s = g.mean(r).unwrap();
            g.value(s).item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
