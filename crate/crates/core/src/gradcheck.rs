//! Randomized gradient checking.
//!
//! Builds random compositions of the tape primitives, keeps ReLU/abs inputs
//! away from their kinks, and compares the reverse sweep against central
//! finite differences. Used by the test suites; the finite-difference side
//! never touches the reverse sweep it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{finite_difference_gradient, Graph, NodeId};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug)]
enum ProgOp {
    Add(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Conv2d(usize, usize),
    Relu(usize),
    Abs(usize),
    Reshape(usize, Vec<usize>),
    Mean(usize),
    SoftmaxCe(usize, Vec<usize>),
}

/// A replayable random composition of primitives ending in a scalar.
pub struct RandomProgram<S> {
    leaf_shapes: Vec<Vec<usize>>,
    leaf_values: Vec<S>,
    ops: Vec<ProgOp>,
}

impl<S: Scalar> RandomProgram<S> {
    /// Deterministically generates a program for the seed, re-rolling until
    /// every ReLU/abs input stays at least `1e-3` away from zero.
    pub fn generate(seed: u64) -> Self {
        let mut attempt = seed;
        loop {
            let p = Self::generate_once(attempt);
            if p.kink_margin(&p.leaf_values).map(|m| m >= cast::<S>(KINK_MARGIN)).unwrap_or(false) {
                return p;
            }
            attempt = attempt.wrapping_add(0x9e37_79b9_7f4a_7c15);
        }
    }

    fn generate_once(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let mut leaf_shapes: Vec<Vec<usize>> = Vec::new();
        let mut leaf_values: Vec<S> = Vec::new();
        let mut ops: Vec<ProgOp> = Vec::new();

        let new_leaf = |shape: Vec<usize>,
                            rng: &mut ChaCha8Rng,
                            shapes: &mut Vec<Vec<usize>>,
                            leaf_shapes: &mut Vec<Vec<usize>>,
                            leaf_values: &mut Vec<S>|
         -> usize {
            let n: usize = shape.iter().product();
            for _ in 0..n {
                // Magnitude in [0.1, 1.1) with random sign keeps values away
                // from zero and overflow alike.
                let mag = 0.1 + rng.random::<f64>();
                let sgn = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
                leaf_values.push(cast::<S>(sgn * mag));
            }
            leaf_shapes.push(shape.clone());
            shapes.push(shape);
            shapes.len() - 1
        };

        // Root leaf the op chain grows from.
        let start_shape = match rng.random_range(0..3) {
            0 => vec![rng.random_range(2..5usize)],
            1 => vec![rng.random_range(2..4usize), rng.random_range(2..4usize)],
            _ => vec![1, rng.random_range(1..3usize), 4, 4],
        };
        let mut cur = new_leaf(start_shape, &mut rng, &mut shapes, &mut leaf_shapes, &mut leaf_values);

        let n_ops = rng.random_range(3..8usize);
        for _ in 0..n_ops {
            let cur_shape = shapes[cur].clone();
            let choice = rng.random_range(0..8u32);
            cur = match choice {
                0 => {
                    let other = new_leaf(cur_shape, &mut rng, &mut shapes, &mut leaf_shapes, &mut leaf_values);
                    ops.push(ProgOp::Add(cur, other));
                    shapes.push(shapes[cur].clone());
                    shapes.len() - 1
                }
                1 => {
                    let other = new_leaf(cur_shape, &mut rng, &mut shapes, &mut leaf_shapes, &mut leaf_values);
                    ops.push(ProgOp::Mul(cur, other));
                    shapes.push(shapes[cur].clone());
                    shapes.len() - 1
                }
                2 => {
                    ops.push(ProgOp::Relu(cur));
                    shapes.push(shapes[cur].clone());
                    shapes.len() - 1
                }
                3 => {
                    ops.push(ProgOp::Abs(cur));
                    shapes.push(shapes[cur].clone());
                    shapes.len() - 1
                }
                4 => {
                    // Flatten, occasionally refold into [2, len/2].
                    let len: usize = cur_shape.iter().product();
                    let shape = if len % 2 == 0 && rng.random::<f64>() < 0.5 {
                        vec![2, len / 2]
                    } else {
                        vec![len]
                    };
                    ops.push(ProgOp::Reshape(cur, shape.clone()));
                    shapes.push(shape);
                    shapes.len() - 1
                }
                5 if cur_shape.len() == 2 => {
                    let (m, k) = (cur_shape[0], cur_shape[1]);
                    let n = rng.random_range(2..4usize);
                    let rhs = new_leaf(vec![k, n], &mut rng, &mut shapes, &mut leaf_shapes, &mut leaf_values);
                    ops.push(ProgOp::MatMul(cur, rhs));
                    shapes.push(vec![m, n]);
                    shapes.len() - 1
                }
                6 if cur_shape.len() == 4 && cur_shape[2] >= 2 && cur_shape[3] >= 2 => {
                    let (cin, h, w) = (cur_shape[1], cur_shape[2], cur_shape[3]);
                    let kk = rng.random_range(1..=2usize.min(h).min(w));
                    let cout = rng.random_range(1..3usize);
                    let kernel =
                        new_leaf(vec![cout, cin, kk, kk], &mut rng, &mut shapes, &mut leaf_shapes, &mut leaf_values);
                    ops.push(ProgOp::Conv2d(cur, kernel));
                    shapes.push(vec![cur_shape[0], cout, h - kk + 1, w - kk + 1]);
                    shapes.len() - 1
                }
                7 if cur_shape.len() == 2 => {
                    let (n, c) = (cur_shape[0], cur_shape[1]);
                    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
                    ops.push(ProgOp::SoftmaxCe(cur, labels));
                    shapes.push(vec![n]);
                    shapes.len() - 1
                }
                _ => cur, // infeasible pick, try another op
            };
        }
        if !shapes[cur].is_empty() {
            ops.push(ProgOp::Mean(cur));
        }
        RandomProgram { leaf_shapes, leaf_values, ops }
    }

    pub fn leaf_values(&self) -> &[S] {
        &self.leaf_values
    }

    fn build(&self, leaf_values: &[S]) -> Result<(Graph<S>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let mut slots: Vec<NodeId> = Vec::new();
        let mut offset = 0;
        for shape in &self.leaf_shapes {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), leaf_values[offset..offset + n].to_vec())?;
            slots.push(g.leaf(t));
            offset += n;
        }
        let leaves = slots.clone();
        for op in &self.ops {
            let id = match op {
                ProgOp::Add(a, b) => g.add(slots[*a], slots[*b])?,
                ProgOp::Mul(a, b) => g.mul(slots[*a], slots[*b])?,
                ProgOp::MatMul(a, b) => g.matmul(slots[*a], slots[*b])?,
                ProgOp::Conv2d(a, b) => g.conv2d(slots[*a], slots[*b])?,
                ProgOp::Relu(a) => g.relu(slots[*a])?,
                ProgOp::Abs(a) => g.abs(slots[*a])?,
                ProgOp::Reshape(a, shape) => g.reshape(slots[*a], shape.clone())?,
                ProgOp::Mean(a) => g.mean(slots[*a])?,
                ProgOp::SoftmaxCe(a, labels) => g.softmax_cross_entropy(slots[*a], labels)?,
            };
            slots.push(id);
        }
        let root = *slots.last().expect("program has at least one node");
        Ok((g, leaves, root))
    }

    /// Scalar value of the program at the given leaf values.
    pub fn eval(&self, leaf_values: &[S]) -> Result<S> {
        let (g, _, root) = self.build(leaf_values)?;
        g.value(root).item()
    }

    /// Smallest |input| seen at any ReLU/abs site (infinity if there are
    /// none). Slot indices and tape node ids coincide by construction.
    fn kink_margin(&self, leaf_values: &[S]) -> Result<S> {
        let (g, _, _) = self.build(leaf_values)?;
        let mut margin = S::infinity();
        for op in &self.ops {
            if let ProgOp::Relu(a) | ProgOp::Abs(a) = op {
                for &v in g.value(NodeId(*a)).data() {
                    margin = margin.min(v.abs());
                }
            }
        }
        Ok(margin)
    }

    /// Reverse-sweep gradient of the scalar output with respect to every
    /// leaf coordinate, concatenated in leaf order.
    pub fn autodiff_gradient(&self) -> Result<Vec<S>> {
        let (g, leaves, root) = self.build(&self.leaf_values)?;
        let grads = g.backward(root)?;
        let mut out = Vec::with_capacity(self.leaf_values.len());
        for leaf in leaves {
            out.extend_from_slice(grads.wrt(leaf).expect("leaf gradient").data());
        }
        Ok(out)
    }

    /// Central-difference gradient of the same scalar.
    pub fn numeric_gradient(&self, step: S) -> Result<Vec<S>> {
        finite_difference_gradient(|v| self.eval(v), &self.leaf_values, step)
    }
}

/// Runs one random composition and returns the worst relative error between
/// the reverse sweep and finite differences, `|ad - fd| / max(1, |fd|)`.
pub fn check_random_composition<S: Scalar>(seed: u64) -> Result<S> {
    let program: RandomProgram<S> = RandomProgram::generate(seed);
    let ad = program.autodiff_gradient()?;
    let fd = program.numeric_gradient(cast::<S>(1e-6))?;
    if ad.len() != fd.len() {
        return Err(Error::invalid("gradient length mismatch"));
    }
    let mut worst = S::zero();
    for (&a, &n) in ad.iter().zip(&fd) {
        let rel = (a - n).abs() / n.abs().max(S::one());
        worst = worst.max(rel);
    }
    Ok(worst)
}
