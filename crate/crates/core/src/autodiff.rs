//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding the
//! op kind, its input node ids and the eagerly computed output value, so
//! topological order holds by construction. [`Tape::backward`] walks the
//! list in reverse and accumulates gradients into every node reachable from
//! a `requires_grad` leaf. Repeated backward calls accumulate until
//! [`Tape::reset_grads`] is called.
//!
//! The op set is exactly what the networks in this crate need: dense-layer
//! arithmetic, pointwise math, reductions, row gathering/concatenation for
//! pair sampling, a stable softmax cross-entropy, the gradient-reversal
//! node and a critic-input-gradient-norm op (see below). Gaussian sampling
//! for the reparameterization trick needs no dedicated op: the noise enters
//! as a constant leaf and flows through ordinary arithmetic.
//!
//! Every op validates shapes and errors on non-finite outputs; tensors on
//! the tape are finite by construction.
//!
//! # The gradient-penalty op
//!
//! Training a Wasserstein critic with a gradient penalty needs
//! d/dθ of ‖∇ₓ critic(x)‖₂, a gradient-of-gradient term. Rather than
//! general second-order support, [`Tape::critic_grad_norm`] handles the one
//! shape the critic takes — a two-hidden-layer relu MLP with a linear scalar
//! head. For such a network ∇ₓ critic(x) = W₁·(m₁ ⊙ W₂·(m₂ ⊙ w₃)) with relu
//! masks m₁, m₂ that are locally constant, so the second derivative
//! structure is closed-form: the op's backward distributes gradients to the
//! weight matrices directly (masks treated as constants, which is exact
//! almost everywhere; biases and the interpolates themselves receive zero).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Matmul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Scale(Var, F),
    AddScalar(Var, F),
    Clamp(Var, F, F),
    Sum(Var),
    Mean(Var),
    RowNorm(Var),
    Concat(Var, Var),
    GatherRows(Var, Vec<usize>),
    PairDistances {
        f: Var,
        ia: Vec<usize>,
        ib: Vec<usize>,
    },
    Softmax(Var),
    CrossEntropyWithLogits(Var, Vec<usize>),
    Grl(Var, F),
    CriticGradNorm {
        x: Var,
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
        w3: Var,
    },
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    requires_grad: bool,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf: gradient is accumulated into its buffer on backward.
    pub fn param(&mut self, value: &Tensor<F>) -> Var {
        self.push(Op::Leaf, value.clone(), true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears every gradient buffer, keeping values intact.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn finish(&mut self, op: Op<F>, opname: &'static str, value: Tensor<F>, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: opname });
        }
        Ok(self.push(op, value, rg))
    }

    // ----- dense-layer arithmetic -----

    /// `(n x k) @ (k x m)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} @ {:?}", va.shape(), vb.shape()),
            ));
        }
        let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = matmul_raw(va.data(), vb.data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.finish(Op::Matmul(a, b), "matmul", Tensor::from_parts(vec![n, m], out), rg)
    }

    /// Adds a length-`d` bias vector to every row of an `n x d` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vx.shape().len() != 2 || vb.shape().len() != 1 || vx.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", vx.shape(), vb.shape()),
            ));
        }
        let d = vb.shape()[0];
        let data: Vec<F> = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % d])
            .collect();
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(b);
        self.finish(Op::AddBias(x, b), "add_bias", Tensor::from_parts(shape, data), rg)
    }

    // ----- elementwise binary -----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        opname: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                opname,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data: Vec<F> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.finish(op, opname, Tensor::from_parts(shape, data), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    // ----- elementwise unary -----

    fn unary(&mut self, a: Var, opname: &'static str, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let va = self.value(a);
        let data: Vec<F> = va.data().iter().map(|&x| f(x)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        self.finish(op, opname, Tensor::from_parts(shape, data), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(F::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "log", |x| x.ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sqrt", |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        self.unary(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a, c))
    }

    /// Clamp with pass-through gradient strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Result<Var> {
        self.unary(a, "clamp", |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: F = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.finish(Op::Sum(a), "sum", Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s: F = va.data().iter().copied().sum();
        let m = s / F::from_usize_(va.len());
        let rg = self.rg(a);
        self.finish(Op::Mean(a), "mean", Tensor::scalar(m), rg)
    }

    /// Euclidean norm of each row: `n x d -> n x 1`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::shape("row_norm", format!("{:?}", va.shape())));
        }
        let n = va.nrows();
        let data: Vec<F> = (0..n)
            .map(|i| va.row(i).iter().map(|&x| x * x).sum::<F>().sqrt())
            .collect();
        let rg = self.rg(a);
        self.finish(Op::RowNorm(a), "row_norm", Tensor::from_parts(vec![n, 1], data), rg)
    }

    // ----- batch-axis structure -----

    /// Concatenates two matrices along the batch (row) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(Error::shape(
                "concat",
                format!("{:?} | {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let shape = vec![va.shape()[0] + vb.shape()[0], va.shape()[1]];
        let rg = self.rg(a) || self.rg(b);
        self.finish(Op::Concat(a, b), "concat", Tensor::from_parts(shape, data), rg)
    }

    /// Selects rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", va.shape())));
        }
        let n = va.nrows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("index {} >= {}", bad, n)));
        }
        let out = va.select_rows(&idx);
        let rg = self.rg(a);
        self.finish(Op::GatherRows(a, idx), "gather_rows", out, rg)
    }

    /// Euclidean distances ‖F[ia[k]] − F[ib[k]]‖₂ as a `n_pairs x 1`
    /// column. Equivalent to gather/sub/row_norm but in one op, since pair
    /// counts dwarf every other tensor in a training step.
    pub fn pair_distances(&mut self, f: Var, ia: Vec<usize>, ib: Vec<usize>) -> Result<Var> {
        let vf = self.value(f);
        if vf.shape().len() != 2 {
            return Err(Error::shape("pair_distances", format!("{:?}", vf.shape())));
        }
        if ia.len() != ib.len() {
            return Err(Error::shape("pair_distances", "index lists differ in length"));
        }
        let n = vf.nrows();
        if ia.iter().chain(&ib).any(|&i| i >= n) {
            return Err(Error::shape("pair_distances", format!("index out of range 0..{n}")));
        }
        let data: Vec<F> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| vf.row_distance(i, j))
            .collect();
        let m = data.len();
        let rg = self.rg(f);
        self.finish(
            Op::PairDistances { f, ia, ib },
            "pair_distances",
            Tensor::from_parts(vec![m, 1], data),
            rg,
        )
    }

    // ----- classifier heads -----

    /// Row-wise softmax with the usual max-shift for stability.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::shape("softmax", format!("{:?}", va.shape())));
        }
        let (n, d) = (va.nrows(), va.ncols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = va.row(i);
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = row.iter().map(|&x| (x - mx).exp()).collect();
            let s: F = exps.iter().copied().sum();
            data.extend(exps.into_iter().map(|e| e / s));
        }
        let rg = self.rg(a);
        self.finish(Op::Softmax(a), "softmax", Tensor::from_parts(vec![n, d], data), rg)
    }

    /// Mean categorical cross-entropy straight from logits (log-sum-exp form).
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 || vl.nrows() != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, {} labels", vl.shape(), labels.len()),
            ));
        }
        let d = vl.ncols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= d) {
            return Err(Error::shape("cross_entropy", format!("label {} >= {}", bad, d)));
        }
        let n = vl.nrows();
        let mut total = F::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = vl.row(i);
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<F>().ln();
            total += lse - row[label];
        }
        let loss = total / F::from_usize_(n);
        let rg = self.rg(logits);
        self.finish(
            Op::CrossEntropyWithLogits(logits, labels),
            "cross_entropy",
            Tensor::scalar(loss),
            rg,
        )
    }

    // ----- adversarial plumbing -----

    /// Gradient-reversal node: identity forward, `-alpha` times the incoming
    /// gradient backward.
    pub fn gradient_reversal(&mut self, x: Var, alpha: F) -> Result<Var> {
        if alpha <= F::zero() {
            return Err(Error::Config(format!(
                "gradient reversal weight must be positive, got {alpha}"
            )));
        }
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.finish(Op::Grl(x, alpha), "gradient_reversal", value, rg)
    }

    /// Per-sample norm of the critic's input gradient, ‖∇ₓ critic(x)‖₂, for a
    /// relu MLP critic `x -> relu(x·W1+b1) -> relu(·W2+b2) -> ·w3 (+ b3)`.
    ///
    /// Output is `n x 1`. Backward sends gradients to `w1`, `w2`, `w3` only:
    /// biases and `x` enter the input gradient solely through the relu masks,
    /// whose derivative vanishes almost everywhere.
    pub fn critic_grad_norm(
        &mut self,
        x: Var,
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
        w3: Var,
    ) -> Result<Var> {
        let shapes = (
            self.value(x).shape().to_vec(),
            self.value(w1).shape().to_vec(),
            self.value(w2).shape().to_vec(),
            self.value(w3).shape().to_vec(),
        );
        let ok = shapes.0.len() == 2
            && shapes.1.len() == 2
            && shapes.2.len() == 2
            && shapes.3.len() == 2
            && shapes.0[1] == shapes.1[0]
            && shapes.1[1] == shapes.2[0]
            && shapes.2[1] == shapes.3[0]
            && shapes.3[1] == 1
            && self.value(b1).shape() == [shapes.1[1]]
            && self.value(b2).shape() == [shapes.2[1]];
        if !ok {
            return Err(Error::shape(
                "critic_grad_norm",
                format!(
                    "x {:?}, w1 {:?}, w2 {:?}, w3 {:?}",
                    shapes.0, shapes.1, shapes.2, shapes.3
                ),
            ));
        }
        let norms = self.critic_input_grads(x, w1, b1, w2, b2, w3).1;
        let n = self.value(x).nrows();
        let rg = self.rg(w1) || self.rg(w2) || self.rg(w3);
        self.finish(
            Op::CriticGradNorm { x, w1, b1, w2, b2, w3 },
            "critic_grad_norm",
            Tensor::from_parts(vec![n, 1], norms),
            rg,
        )
    }

    /// Shared forward for [`Self::critic_grad_norm`]: per-sample input
    /// gradients (row-major `n x d_in`) and their norms.
    fn critic_input_grads(
        &self,
        x: Var,
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
        w3: Var,
    ) -> (Vec<F>, Vec<F>) {
        let (vx, vw1, vb1) = (self.value(x), self.value(w1), self.value(b1));
        let (vw2, vb2, vw3) = (self.value(w2), self.value(b2), self.value(w3));
        let (n, din) = (vx.nrows(), vx.ncols());
        let h1 = vw1.shape()[1];
        let h2 = vw2.shape()[1];
        let mut grads = vec![F::zero(); n * din];
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let xi = vx.row(i);
            // forward pre-activations for the relu masks
            let mut z1 = vb1.data().to_vec();
            for (l, &xv) in xi.iter().enumerate() {
                for j in 0..h1 {
                    z1[j] += xv * vw1.data()[l * h1 + j];
                }
            }
            let a1: Vec<F> = z1.iter().map(|&z| z.max(F::zero())).collect();
            let mut z2 = vb2.data().to_vec();
            for (j, &av) in a1.iter().enumerate() {
                if av > F::zero() {
                    for k in 0..h2 {
                        z2[k] += av * vw2.data()[j * h2 + k];
                    }
                }
            }
            // t2 = m2 .* w3 ; t1 = m1 .* (W2 t2) ; g = W1 t1
            let t2: Vec<F> = (0..h2)
                .map(|k| {
                    if z2[k] > F::zero() {
                        vw3.data()[k]
                    } else {
                        F::zero()
                    }
                })
                .collect();
            let mut t1 = vec![F::zero(); h1];
            for j in 0..h1 {
                if z1[j] > F::zero() {
                    let mut s = F::zero();
                    for k in 0..h2 {
                        s += vw2.data()[j * h2 + k] * t2[k];
                    }
                    t1[j] = s;
                }
            }
            let gi = &mut grads[i * din..(i + 1) * din];
            for (l, g) in gi.iter_mut().enumerate() {
                let mut s = F::zero();
                for j in 0..h1 {
                    s += vw1.data()[l * h1 + j] * t1[j];
                }
                *g = s;
            }
            norms.push(gi.iter().map(|&g| g * g).sum::<F>().sqrt());
        }
        (grads, norms)
    }

    // ----- backward -----

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
    /// across repeated calls; interior gradients are transient per sweep,
    /// so each backward contributes exactly one chain-rule pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.accumulate(loss, &[F::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            let upstream = if is_leaf {
                continue;
            } else {
                self.nodes[i].grad.take().unwrap().data().to_vec()
            };
            let op = self.nodes[i].op.clone();
            self.step_backward(i, &op, &upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[F]) {
        let node = &mut self.nodes[v.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        for (g, &c) in grad.data_mut().iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Adds `contribution` into `v`'s grad only if `v` is on a grad path.
    fn accumulate_if_needed(&mut self, v: Var, contribution: &[F]) {
        if self.rg(v) {
            self.accumulate(v, contribution);
        }
    }

    fn step_backward(&mut self, node_id: usize, op: &Op<F>, upstream: &[F]) {
        match *op {
            Op::Leaf => {}

            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(a) {
                    // dA = dOut @ B^T
                    let vb_data = self.value(b).data().to_vec();
                    let mut ga = vec![F::zero(); n * k];
                    for i in 0..n {
                        for p in 0..m {
                            let u = upstream[i * m + p];
                            if u != F::zero() {
                                for j in 0..k {
                                    ga[i * k + j] += u * vb_data[j * m + p];
                                }
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                }
                if self.rg(b) {
                    // dB = A^T @ dOut
                    let va_data = self.value(a).data().to_vec();
                    let mut gb = vec![F::zero(); k * m];
                    for i in 0..n {
                        for j in 0..k {
                            let av = va_data[i * k + j];
                            if av != F::zero() {
                                for p in 0..m {
                                    gb[j * m + p] += av * upstream[i * m + p];
                                }
                            }
                        }
                    }
                    self.accumulate(b, &gb);
                }
            }

            Op::AddBias(x, b) => {
                let d = self.value(b).len();
                self.accumulate_if_needed(x, upstream);
                if self.rg(b) {
                    let mut gb = vec![F::zero(); d];
                    for (i, &u) in upstream.iter().enumerate() {
                        gb[i % d] += u;
                    }
                    self.accumulate(b, &gb);
                }
            }

            Op::Add(a, b) => {
                self.accumulate_if_needed(a, upstream);
                self.accumulate_if_needed(b, upstream);
            }

            Op::Sub(a, b) => {
                self.accumulate_if_needed(a, upstream);
                if self.rg(b) {
                    let neg: Vec<F> = upstream.iter().map(|&u| -u).collect();
                    self.accumulate(b, &neg);
                }
            }

            Op::Mul(a, b) => {
                if self.rg(a) {
                    let vb = self.value(b).data().to_vec();
                    let g: Vec<F> = upstream.iter().zip(&vb).map(|(&u, &y)| u * y).collect();
                    self.accumulate(a, &g);
                }
                if self.rg(b) {
                    let va = self.value(a).data().to_vec();
                    let g: Vec<F> = upstream.iter().zip(&va).map(|(&u, &x)| u * x).collect();
                    self.accumulate(b, &g);
                }
            }

            Op::Div(a, b) => {
                if self.rg(a) {
                    let vb = self.value(b).data().to_vec();
                    let g: Vec<F> = upstream.iter().zip(&vb).map(|(&u, &y)| u / y).collect();
                    self.accumulate(a, &g);
                }
                if self.rg(b) {
                    let va = self.value(a).data().to_vec();
                    let vb = self.value(b).data().to_vec();
                    let g: Vec<F> = upstream
                        .iter()
                        .zip(va.iter().zip(&vb))
                        .map(|(&u, (&x, &y))| -u * x / (y * y))
                        .collect();
                    self.accumulate(b, &g);
                }
            }

            Op::Relu(a) => {
                if self.rg(a) {
                    let va = self.value(a).data().to_vec();
                    let g: Vec<F> = upstream
                        .iter()
                        .zip(&va)
                        .map(|(&u, &x)| if x > F::zero() { u } else { F::zero() })
                        .collect();
                    self.accumulate(a, &g);
                }
            }

            Op::Exp(a) => {
                if self.rg(a) {
                    let out = self.nodes[node_id].value.data().to_vec();
                    let g: Vec<F> = upstream.iter().zip(&out).map(|(&u, &e)| u * e).collect();
                    self.accumulate(a, &g);
                }
            }

            Op::Log(a) => {
                if self.rg(a) {
                    let va = self.value(a).data().to_vec();
                    let g: Vec<F> = upstream.iter().zip(&va).map(|(&u, &x)| u / x).collect();
                    self.accumulate(a, &g);
                }
            }

            Op::Square(a) => {
                if self.rg(a) {
                    let va = self.value(a).data().to_vec();
                    let two = F::cast(2.0);
                    let g: Vec<F> = upstream.iter().zip(&va).map(|(&u, &x)| u * two * x).collect();
                    self.accumulate(a, &g);
                }
            }

            Op::Sqrt(a) => {
                if self.rg(a) {
                    let out = self.nodes[node_id].value.data().to_vec();
                    let half = F::cast(0.5);
                    let g: Vec<F> = upstream.iter().zip(&out).map(|(&u, &s)| u * half / s).collect();
                    self.accumulate(a, &g);
                }
            }

            Op::Scale(a, c) => {
                if self.rg(a) {
                    let g: Vec<F> = upstream.iter().map(|&u| u * c).collect();
                    self.accumulate(a, &g);
                }
            }

            Op::AddScalar(a, _) => {
                self.accumulate_if_needed(a, upstream);
            }

            Op::Clamp(a, lo, hi) => {
                if self.rg(a) {
                    let va = self.value(a).data().to_vec();
                    let g: Vec<F> = upstream
                        .iter()
                        .zip(&va)
                        .map(|(&u, &x)| if x > lo && x < hi { u } else { F::zero() })
                        .collect();
                    self.accumulate(a, &g);
                }
            }

            Op::Sum(a) => {
                if self.rg(a) {
                    let u = upstream[0];
                    let g = vec![u; self.value(a).len()];
                    self.accumulate(a, &g);
                }
            }

            Op::Mean(a) => {
                if self.rg(a) {
                    let n = self.value(a).len();
                    let u = upstream[0] / F::from_usize_(n);
                    let g = vec![u; n];
                    self.accumulate(a, &g);
                }
            }

            Op::RowNorm(a) => {
                if self.rg(a) {
                    let va = self.value(a);
                    let (n, d) = (va.nrows(), va.ncols());
                    let out = self.nodes[node_id].value.data().to_vec();
                    let va_data = va.data().to_vec();
                    let mut g = vec![F::zero(); n * d];
                    for i in 0..n {
                        // d‖x‖/dx = x/‖x‖; zero rows get zero subgradient
                        if out[i] > F::zero() {
                            let s = upstream[i] / out[i];
                            for j in 0..d {
                                g[i * d + j] = s * va_data[i * d + j];
                            }
                        }
                    }
                    self.accumulate(a, &g);
                }
            }

            Op::Concat(a, b) => {
                let na = self.value(a).len();
                if self.rg(a) {
                    self.accumulate(a, &upstream[..na]);
                }
                if self.rg(b) {
                    self.accumulate(b, &upstream[na..]);
                }
            }

            Op::GatherRows(a, ref idx) => {
                if self.rg(a) {
                    let va = self.value(a);
                    let (n, d) = (va.nrows(), va.ncols());
                    let mut g = vec![F::zero(); n * d];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            g[i * d + j] += upstream[k * d + j];
                        }
                    }
                    self.accumulate(a, &g);
                }
            }

            Op::PairDistances { f, ref ia, ref ib } => {
                if self.rg(f) {
                    let vf = self.value(f);
                    let (n, d) = (vf.nrows(), vf.ncols());
                    let dists = self.nodes[node_id].value.data().to_vec();
                    let vf_data = vf.data().to_vec();
                    let mut g = vec![F::zero(); n * d];
                    for (k, (&i, &j)) in ia.iter().zip(ib).enumerate() {
                        // d‖x_i - x_j‖/dx_i = (x_i - x_j)/dist; zero distance
                        // contributes a zero subgradient
                        if dists[k] > F::zero() {
                            let s = upstream[k] / dists[k];
                            for c in 0..d {
                                let diff = vf_data[i * d + c] - vf_data[j * d + c];
                                g[i * d + c] += s * diff;
                                g[j * d + c] -= s * diff;
                            }
                        }
                    }
                    self.accumulate(f, &g);
                }
            }

            Op::Softmax(a) => {
                if self.rg(a) {
                    let out = self.nodes[node_id].value.clone();
                    let (n, d) = (out.nrows(), out.ncols());
                    let mut g = vec![F::zero(); n * d];
                    for i in 0..n {
                        let s = out.row(i);
                        let u = &upstream[i * d..(i + 1) * d];
                        let dot: F = s.iter().zip(u).map(|(&sv, &uv)| sv * uv).sum();
                        for j in 0..d {
                            g[i * d + j] = s[j] * (u[j] - dot);
                        }
                    }
                    self.accumulate(a, &g);
                }
            }

            Op::CrossEntropyWithLogits(logits, ref labels) => {
                if self.rg(logits) {
                    let vl = self.value(logits);
                    let (n, d) = (vl.nrows(), vl.ncols());
                    let u = upstream[0] / F::from_usize_(n);
                    let mut g = vec![F::zero(); n * d];
                    for i in 0..n {
                        let row = vl.row(i);
                        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                        let exps: Vec<F> = row.iter().map(|&x| (x - mx).exp()).collect();
                        let sum: F = exps.iter().copied().sum();
                        for j in 0..d {
                            let p = exps[j] / sum;
                            let y = if j == labels[i] { F::one() } else { F::zero() };
                            g[i * d + j] = u * (p - y);
                        }
                    }
                    self.accumulate(logits, &g);
                }
            }

            Op::Grl(x, alpha) => {
                if self.rg(x) {
                    let g: Vec<F> = upstream.iter().map(|&u| -alpha * u).collect();
                    self.accumulate(x, &g);
                }
            }

            Op::CriticGradNorm { x, w1, b1, w2, b2, w3 } => {
                let (grads, norms) = self.critic_input_grads(x, w1, b1, w2, b2, w3);
                let (vx, vw1) = (self.value(x), self.value(w1));
                let (n, din) = (vx.nrows(), vx.ncols());
                let h1 = vw1.shape()[1];
                let h2 = self.value(w2).shape()[1];
                let vw1_data = vw1.data().to_vec();
                let vw2_data = self.value(w2).data().to_vec();
                let vw3_data = self.value(w3).data().to_vec();
                let (vb1, vb2) = (self.value(b1).data().to_vec(), self.value(b2).data().to_vec());
                let vx_data = vx.data().to_vec();
                let mut gw1 = vec![F::zero(); din * h1];
                let mut gw2 = vec![F::zero(); h1 * h2];
                let mut gw3 = vec![F::zero(); h2];
                for i in 0..n {
                    if norms[i] <= F::zero() {
                        continue;
                    }
                    // recompute masks and the intermediate products
                    let xi = &vx_data[i * din..(i + 1) * din];
                    let mut z1 = vb1.clone();
                    for (l, &xv) in xi.iter().enumerate() {
                        for j in 0..h1 {
                            z1[j] += xv * vw1_data[l * h1 + j];
                        }
                    }
                    let mut z2 = vb2.clone();
                    for j in 0..h1 {
                        let a = z1[j].max(F::zero());
                        if a > F::zero() {
                            for k in 0..h2 {
                                z2[k] += a * vw2_data[j * h2 + k];
                            }
                        }
                    }
                    let t2: Vec<F> = (0..h2)
                        .map(|k| if z2[k] > F::zero() { vw3_data[k] } else { F::zero() })
                        .collect();
                    let mut t1 = vec![F::zero(); h1];
                    for j in 0..h1 {
                        if z1[j] > F::zero() {
                            let mut s = F::zero();
                            for k in 0..h2 {
                                s += vw2_data[j * h2 + k] * t2[k];
                            }
                            t1[j] = s;
                        }
                    }
                    // q = upstream * g / ‖g‖, then push back through the
                    // multilinear form g = W1 (m1 .* (W2 (m2 .* w3)))
                    let gi = &grads[i * din..(i + 1) * din];
                    let coef = upstream[i] / norms[i];
                    let q: Vec<F> = gi.iter().map(|&g| g * coef).collect();
                    let mut r1 = vec![F::zero(); h1];
                    for l in 0..din {
                        for j in 0..h1 {
                            gw1[l * h1 + j] += q[l] * t1[j];
                            r1[j] += vw1_data[l * h1 + j] * q[l];
                        }
                    }
                    let mut r2 = vec![F::zero(); h2];
                    for j in 0..h1 {
                        if z1[j] > F::zero() {
                            for k in 0..h2 {
                                gw2[j * h2 + k] += r1[j] * t2[k];
                                r2[k] += vw2_data[j * h2 + k] * r1[j];
                            }
                        }
                    }
                    for k in 0..h2 {
                        if z2[k] > F::zero() {
                            gw3[k] += r2[k];
                        }
                    }
                }
                self.accumulate_if_needed(w1, &gw1);
                self.accumulate_if_needed(w2, &gw2);
                self.accumulate_if_needed(w3, &gw3);
            }
        }
    }
}

fn matmul_raw<F: Scalar>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        for j in 0..k {
            let av = a[i * k + j];
            if av != F::zero() {
                let brow = &b[j * m..(j + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn relu_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity_preserves_vector() {
        let mut tape = Tape::new();
        let eye = t2(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let i = tape.leaf(eye);
        for v in [[0.5, -2.0, 7.25], [1e-3, 3.0, -0.1]] {
            let col = tape.leaf(Tensor::new(vec![3, 1], v.to_vec()).unwrap());
            let out = tape.matmul(i, col).unwrap();
            assert_eq!(tape.value(out).data(), &v);
        }
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![0.0, 0.0]]));
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 2.0]);
        tape.reset_grads();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn grl_forward_identity_backward_negates() {
        let mut tape = Tape::new();
        let input = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let w = tape.param(&input);
        let r = tape.gradient_reversal(w, 1.0).unwrap();
        assert_eq!(tape.value(r).data(), input.data());
        let loss = tape.sum(r).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn grl_backward_scales_by_alpha() {
        for alpha in [0.2, 1.0] {
            let mut tape = Tape::new();
            let w = tape.param(&Tensor::new(vec![3], vec![0.3, 0.7, -1.0]).unwrap());
            let r = tape.gradient_reversal(w, alpha).unwrap();
            let loss = tape.sum(r).unwrap();
            tape.backward(loss).unwrap();
            for &g in tape.grad(w).unwrap().data() {
                assert_relative_eq!(g, -alpha, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn grl_rejects_non_positive_alpha() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::new(vec![1], vec![1.0]).unwrap());
        assert!(tape.gradient_reversal(w, 0.0).is_err());
    }

    #[test]
    fn division_by_zero_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(matches!(tape.div(a, b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gather_rows_backward_scatter_adds() {
        let mut tape = Tape::new();
        let w = tape.param(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let g = tape.gather_rows(w, vec![0, 0, 1]).unwrap();
        let loss = tape.sum(g).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t2(&[vec![0.0, 0.0], vec![3.0, 3.0]]));
        let ce = tape.cross_entropy_with_logits(logits, vec![0, 1]).unwrap();
        assert_relative_eq!(tape.value(ce).item(), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    /// Central finite differences on a scalar-valued tape program.
    fn fd_check(build: impl Fn(&mut Tape<f64>, &Tensor<f64>) -> Var, w0: Tensor<f64>) {
        let mut tape = Tape::new();
        let w = tape.param(&w0);
        let loss = build(&mut tape, &w0);
        // the builder is expected to have used `w` as node 0
        assert_eq!(w, Var(0));
        tape.backward(loss).unwrap();
        let analytic = tape.grad(w).unwrap().clone();
        let h = 1e-5;
        for i in 0..w0.len() {
            let mut wp = w0.clone();
            wp.data_mut()[i] += h;
            let mut tp = Tape::new();
            tp.param(&wp);
            let lp = build(&mut tp, &wp);
            let fp = tp.value(lp).item();
            let mut wm = w0.clone();
            wm.data_mut()[i] -= h;
            let mut tm = Tape::new();
            tm.param(&wm);
            let lm = build(&mut tm, &wm);
            let fm = tm.value(lm).item();
            let numeric = (fp - fm) / (2.0 * h);
            let denom = numeric.abs().max(analytic.data()[i].abs()).max(1e-8);
            assert!(
                (numeric - analytic.data()[i]).abs() / denom < 1e-4,
                "param {i}: analytic {} vs numeric {}",
                analytic.data()[i],
                numeric
            );
        }
    }

    #[test]
    fn finite_difference_composite_ops() {
        // mean(square(softmax(relu(w)·M + b))) exercises most of the op set
        let w0 = Tensor::from_rows(&[vec![0.3, -0.7, 1.2], vec![0.9, 0.11, -0.45]]).unwrap();
        fd_check(
            |tape, _| {
                let w = Var(0);
                let m = tape.leaf(
                    Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![-0.75, 1.5]]).unwrap(),
                );
                let b = tape.leaf(Tensor::new(vec![2], vec![0.2, -0.4]).unwrap());
                let h = tape.relu(w).unwrap();
                let z = tape.matmul(h, m).unwrap();
                let z = tape.add_bias(z, b).unwrap();
                let s = tape.softmax(z).unwrap();
                let q = tape.square(s).unwrap();
                tape.mean(q).unwrap()
            },
            w0,
        );
    }

    #[test]
    fn pair_distances_match_the_unfused_chain() {
        let f0 = Tensor::from_rows(&[
            vec![0.4, -1.0, 0.3],
            vec![1.2, 0.5, -0.7],
            vec![-0.2, 0.9, 1.1],
        ])
        .unwrap();
        let (ia, ib) = (vec![0usize, 0, 1], vec![1usize, 2, 2]);
        // fused op
        let mut t1 = Tape::new();
        let w1 = t1.param(&f0);
        let d1 = t1.pair_distances(w1, ia.clone(), ib.clone()).unwrap();
        let s1 = t1.sum(d1).unwrap();
        t1.backward(s1).unwrap();
        // gather / sub / row_norm chain
        let mut t2 = Tape::new();
        let w2 = t2.param(&f0);
        let ga = t2.gather_rows(w2, ia).unwrap();
        let gb = t2.gather_rows(w2, ib).unwrap();
        let diff = t2.sub(ga, gb).unwrap();
        let d2 = t2.row_norm(diff).unwrap();
        let s2 = t2.sum(d2).unwrap();
        t2.backward(s2).unwrap();
        assert_eq!(t1.value(d1).data(), t2.value(d2).data());
        for (a, b) in t1.grad(w1).unwrap().data().iter().zip(t2.grad(w2).unwrap().data()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn finite_difference_row_norm_and_exp_log() {
        let w0 = Tensor::from_rows(&[vec![1.3, -0.7], vec![0.4, 2.2]]).unwrap();
        fd_check(
            |tape, _| {
                let w = Var(0);
                let n = tape.row_norm(w).unwrap();
                let e = tape.exp(n).unwrap();
                let l = tape.log(e).unwrap();
                let sq = tape.sqrt(l).unwrap();
                tape.sum(sq).unwrap()
            },
            w0,
        );
    }
}
