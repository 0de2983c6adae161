//! Reverse-mode differentiation on a tensor-valued tape.
//!
//! Nodes are appended in creation order, so the tape is topologically sorted
//! by construction and backward is a single reverse sweep. Sampled noise
//! (Gumbel perturbations, Gaussian epsilons) is stored inside the op that
//! consumes it and treated as a constant: gradients are pathwise.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_in_place, matmul_into, softmax_in_place, Real, Tensor};

/// Lower clamp on stored log-variances wherever they are exponentiated.
pub const LOG_VAR_FLOOR: f64 = -20.0;

/// Probability floor used by cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Tags for the elementary ops accepted by [`Tape::record`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpTag {
    Add,
    Sub,
    Mul,
    MatMul,
    Exp,
    Log,
    Tanh,
    Relu,
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul { a: usize, b: usize, n: usize, k: usize, m: usize },
    Reshape(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    SoftmaxGroups { x: usize, group: usize },
    LogSoftmaxGroups { x: usize, group: usize },
    GumbelSoftmax { x: usize, group: usize, tau: T },
    GaussianReparam { mu: usize, log_var: usize, eps: Vec<T> },
    GaussianKlMc { w: usize, mu: usize, log_var: usize },
    CrossEntropy { probs: usize, targets: Vec<usize> },
    SquaredError { pred: usize, target: Vec<T> },
    Gather { x: usize, group: usize, indices: Vec<usize> },
    Concat(Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
}

#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf. Never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v).expect("var from this tape");
        &self.nodes[v.index].value
    }

    /// Gradient of the last `backward` loss with respect to `v`; zeros for
    /// constants and for nodes the loss does not depend on.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.index];
        let is_detached_leaf = matches!(node.op, Op::Leaf) && !node.trainable;
        match (&self.grads.get(v.index), is_detached_leaf) {
            (Some(Some(g)), false) => Tensor::new(node.value.shape(), g.clone()).expect("grad shape"),
            _ => Tensor::zeros(node.value.shape()),
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} belongs to tape {}, not tape {}",
                v.index, v.tape, self.id
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        self.check(x)?;
        let rg = self.rg(x.index);
        Ok(self.push(value, op, rg, false))
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a.index]
            .value
            .zip_map(&self.nodes[b.index].value, name, f)?;
        let rg = self.rg(a.index) || self.rg(b.index);
        Ok(self.push(value, op, rg, false))
    }

    /// Record an elementary op by tag, computing and storing its forward value.
    pub fn record(&mut self, tag: OpTag, inputs: &[Var]) -> Result<Var> {
        let arity = match tag {
            OpTag::Add | OpTag::Sub | OpTag::Mul | OpTag::MatMul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Graph(format!("{tag:?} takes {arity} inputs, got {}", inputs.len())));
        }
        match tag {
            OpTag::Add => self.add(inputs[0], inputs[1]),
            OpTag::Sub => self.sub(inputs[0], inputs[1]),
            OpTag::Mul => self.mul(inputs[0], inputs[1]),
            OpTag::MatMul => self.matmul(inputs[0], inputs[1]),
            OpTag::Exp => self.exp(inputs[0]),
            OpTag::Log => self.log(inputs[0]),
            OpTag::Tanh => self.tanh(inputs[0]),
            OpTag::Relu => self.relu(inputs[0]),
            OpTag::Sum => self.sum(inputs[0]),
            OpTag::Mean => self.mean(inputs[0]),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a.index, b.index))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a.index, b.index))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a.index, b.index))
    }

    /// `[n × m] + [m]`, the bias row added to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check(a)?;
        self.check(bias)?;
        let av = &self.nodes[a.index].value;
        let bv = &self.nodes[bias.index].value;
        let m = bv.len();
        if av.rank() != 2 || av.shape()[1] != m {
            return Err(Error::dim("add_bias", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a.index) || self.rg(bias.index);
        Ok(self.push(value, Op::AddBias(a.index, bias.index), rg, false))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.index].value.scale(c);
        self.unary(x, value, Op::Scale(x.index, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.index].value.map(|v| v + c);
        self.unary(x, value, Op::AddScalar(x.index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let av = &self.nodes[a.index].value;
        let bv = &self.nodes[b.index].value;
        let value = crate::tensor::matmul(av, bv)?;
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let rg = self.rg(a.index) || self.rg(b.index);
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.index,
                b: b.index,
                n,
                k,
                m,
            },
            rg,
            false,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.index].value.clone().reshape(shape)?;
        self.unary(x, value, Op::Reshape(x.index))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.index].value.map(|v| v.exp());
        self.unary(x, value, Op::Exp(x.index))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.index].value.map(|v| v.ln());
        self.unary(x, value, Op::Log(x.index))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.index].value.map(|v| v.tanh());
        self.unary(x, value, Op::Tanh(x.index))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.index].value.map(|v| v.max(T::zero()));
        self.unary(x, value, Op::Relu(x.index))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.nodes[x.index].value.sum());
        self.unary(x, value, Op::Sum(x.index))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.nodes[x.index].value.mean());
        self.unary(x, value, Op::Mean(x.index))
    }

    fn check_groups(&self, x: Var, group: usize, op: &'static str) -> Result<()> {
        self.check(x)?;
        let shape = self.nodes[x.index].value.shape();
        if group == 0 || !self.nodes[x.index].value.len().is_multiple_of(group) {
            return Err(Error::dim(op, shape, &[group]));
        }
        Ok(())
    }

    /// Softmax over consecutive groups of `group` entries.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        self.check_groups(x, group, "softmax_groups")?;
        let mut value = self.nodes[x.index].value.clone();
        value.data_mut().chunks_mut(group).for_each(softmax_in_place);
        self.unary(x, value, Op::SoftmaxGroups { x: x.index, group })
    }

    pub fn log_softmax_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        self.check_groups(x, group, "log_softmax_groups")?;
        let mut value = self.nodes[x.index].value.clone();
        value.data_mut().chunks_mut(group).for_each(log_softmax_in_place);
        self.unary(x, value, Op::LogSoftmaxGroups { x: x.index, group })
    }

    /// Concrete relaxation: per group, `softmax((x + gumbel) / tau)`.
    pub fn gumbel_softmax(&mut self, x: Var, gumbel: &Tensor<T>, group: usize, tau: T) -> Result<Var> {
        self.check_groups(x, group, "gumbel_softmax")?;
        if tau.is_nan() || tau <= T::zero() {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let xv = &self.nodes[x.index].value;
        if gumbel.len() != xv.len() {
            return Err(Error::dim("gumbel_softmax", xv.shape(), gumbel.shape()));
        }
        let data: Vec<T> = xv
            .data()
            .iter()
            .zip(gumbel.data())
            .map(|(&l, &g)| (l + g) / tau)
            .collect();
        let mut value = Tensor::new(xv.shape(), data)?;
        value.data_mut().chunks_mut(group).for_each(softmax_in_place);
        self.unary(x, value, Op::GumbelSoftmax { x: x.index, group, tau })
    }

    /// `mu + exp(0.5 · max(log_var, floor)) ⊙ eps`.
    pub fn gaussian_reparam(&mut self, mu: Var, log_var: Var, eps: &Tensor<T>) -> Result<Var> {
        self.check(mu)?;
        self.check(log_var)?;
        let muv = &self.nodes[mu.index].value;
        let lvv = &self.nodes[log_var.index].value;
        if muv.shape() != lvv.shape() || muv.len() != eps.len() {
            return Err(Error::dim("gaussian_reparam", muv.shape(), lvv.shape()));
        }
        let floor = T::lit(LOG_VAR_FLOOR);
        let half = T::lit(0.5);
        let data = muv
            .data()
            .iter()
            .zip(lvv.data())
            .zip(eps.data())
            .map(|((&m, &lv), &e)| m + (half * lv.max(floor)).exp() * e)
            .collect();
        let value = Tensor::new(muv.shape(), data)?;
        let rg = self.rg(mu.index) || self.rg(log_var.index);
        Ok(self.push(
            value,
            Op::GaussianReparam {
                mu: mu.index,
                log_var: log_var.index,
                eps: eps.data().to_vec(),
            },
            rg,
            false,
        ))
    }

    /// Single-sample `Σ [log N(w; mu, σ²) − log N(w; 0, 1)]`.
    pub fn gaussian_kl_mc(&mut self, w: Var, mu: Var, log_var: Var) -> Result<Var> {
        for v in [w, mu, log_var] {
            self.check(v)?;
        }
        let wv = &self.nodes[w.index].value;
        let muv = &self.nodes[mu.index].value;
        let lvv = &self.nodes[log_var.index].value;
        if wv.shape() != muv.shape() || muv.shape() != lvv.shape() {
            return Err(Error::dim("gaussian_kl_mc", wv.shape(), muv.shape()));
        }
        let total = gaussian_log_ratio(wv.data(), muv.data(), lvv.data());
        let rg = self.rg(w.index) || self.rg(mu.index) || self.rg(log_var.index);
        Ok(self.push(
            Tensor::scalar(total),
            Op::GaussianKlMc {
                w: w.index,
                mu: mu.index,
                log_var: log_var.index,
            },
            rg,
            false,
        ))
    }

    /// Mean over rows of `−log max(p[row, target], floor)`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        self.check(probs)?;
        let pv = &self.nodes[probs.index].value;
        if pv.rank() != 2 || pv.shape()[0] != targets.len() {
            return Err(Error::dim("cross_entropy", pv.shape(), &[targets.len()]));
        }
        let classes = pv.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index {
                index: bad,
                len: classes,
            });
        }
        let floor = T::lit(PROB_FLOOR);
        let n = T::from_usize(targets.len()).expect("count");
        let total: T = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -pv.data()[r * classes + t].max(floor).ln())
            .sum();
        self.unary(
            probs,
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                probs: probs.index,
                targets: targets.to_vec(),
            },
        )
    }

    /// `mean((pred − target)²)` against a constant target.
    pub fn squared_error(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.check(pred)?;
        let pv = &self.nodes[pred.index].value;
        if pv.len() != target.len() {
            return Err(Error::dim("squared_error", pv.shape(), target.shape()));
        }
        let mse = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / T::from_usize(pv.len()).expect("count");
        self.unary(
            pred,
            Tensor::scalar(mse),
            Op::SquaredError {
                pred: pred.index,
                target: target.data().to_vec(),
            },
        )
    }

    /// Pick one entry per group: `out[r] = x[r · group + indices[r]]`.
    pub fn gather(&mut self, x: Var, group: usize, indices: &[usize]) -> Result<Var> {
        self.check_groups(x, group, "gather")?;
        let xv = &self.nodes[x.index].value;
        if xv.len() / group != indices.len() {
            return Err(Error::dim("gather", xv.shape(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= group) {
            return Err(Error::Index { index: bad, len: group });
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| xv.data()[r * group + i])
            .collect();
        let value = Tensor::from_vec(data);
        self.unary(
            x,
            value,
            Op::Gather {
                x: x.index,
                group,
                indices: indices.to_vec(),
            },
        )
    }

    /// Flat concatenation into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Graph("concat of nothing".into()));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            self.check(p)?;
            data.extend_from_slice(self.nodes[p.index].value.data());
            rg |= self.rg(p.index);
        }
        let value = Tensor::from_vec(data);
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.index).collect()), rg, false))
    }

    /// Populate gradients of `loss` with respect to every node. Gradients are
    /// reset on entry, so calling this twice gives the same result.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.index].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.index] = Some(vec![T::one()]);

        for i in (0..=loss.index).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, contribution: impl FnOnce(&mut [T])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.len();
        let slot = self.grads[target].get_or_insert_with(|| vec![T::zero(); len]);
        contribution(slot);
    }

    fn accumulate_elementwise(&mut self, target: usize, f: impl Fn(usize) -> T) {
        self.accumulate(target, |acc| {
            for (k, a) in acc.iter_mut().enumerate() {
                *a = *a + f(k);
            }
        });
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Detach the node's op so the borrow checker lets us read other nodes.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate_elementwise(a, |k| g[k]);
                self.accumulate_elementwise(b, |k| g[k]);
            }
            &Op::Sub(a, b) => {
                self.accumulate_elementwise(a, |k| g[k]);
                self.accumulate_elementwise(b, |k| -g[k]);
            }
            &Op::Mul(a, b) => {
                let av = self.nodes[a].value.data().to_vec();
                let bv = self.nodes[b].value.data().to_vec();
                self.accumulate_elementwise(a, |k| g[k] * bv[k]);
                self.accumulate_elementwise(b, |k| g[k] * av[k]);
            }
            &Op::AddBias(a, b) => {
                self.accumulate_elementwise(a, |k| g[k]);
                let m = self.nodes[b].value.len();
                self.accumulate(b, |acc| {
                    for row in g.chunks(m) {
                        for (a, &gv) in acc.iter_mut().zip(row) {
                            *a = *a + gv;
                        }
                    }
                });
            }
            &Op::Scale(x, c) => self.accumulate_elementwise(x, |k| g[k] * c),
            &Op::AddScalar(x) | &Op::Reshape(x) => self.accumulate_elementwise(x, |k| g[k]),
            &Op::MatMul { a, b, n, k, m } => {
                if self.nodes[a].requires_grad {
                    // dA = G · Bᵀ
                    let bv = self.nodes[b].value.data().to_vec();
                    self.accumulate(a, |acc| {
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for p in 0..k {
                                let brow = &bv[p * m..(p + 1) * m];
                                let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                                acc[r * k + p] = acc[r * k + p] + dot;
                            }
                        }
                    });
                }
                if self.nodes[b].requires_grad {
                    // dB = Aᵀ · G
                    let av = self.nodes[a].value.data().to_vec();
                    self.accumulate(b, |acc| {
                        let mut at = vec![T::zero(); k * n];
                        for r in 0..n {
                            for p in 0..k {
                                at[p * n + r] = av[r * k + p];
                            }
                        }
                        matmul_into(&at, g, acc, k, n, m);
                    });
                }
            }
            &Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate_elementwise(x, |k| g[k] * y[k]);
            }
            &Op::Log(x) => {
                let xv = self.nodes[x].value.data().to_vec();
                self.accumulate_elementwise(x, |k| g[k] / xv[k]);
            }
            &Op::Tanh(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate_elementwise(x, |k| g[k] * (T::one() - y[k] * y[k]));
            }
            &Op::Relu(x) => {
                let xv = self.nodes[x].value.data().to_vec();
                self.accumulate_elementwise(x, |k| if xv[k] > T::zero() { g[k] } else { T::zero() });
            }
            &Op::Sum(x) => self.accumulate_elementwise(x, |_| g[0]),
            &Op::Mean(x) => {
                let n = T::from_usize(self.nodes[x].value.len()).expect("count");
                self.accumulate_elementwise(x, |_| g[0] / n);
            }
            &Op::SoftmaxGroups { x, group } => {
                let dx = softmax_backward(self.nodes[i].value.data(), g, group, T::one());
                self.accumulate_elementwise(x, |k| dx[k]);
            }
            &Op::GumbelSoftmax { x, group, tau } => {
                let dx = softmax_backward(self.nodes[i].value.data(), g, group, T::one() / tau);
                self.accumulate_elementwise(x, |k| dx[k]);
            }
            &Op::LogSoftmaxGroups { x, group } => {
                let y = self.nodes[i].value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((yc, gc), dc) in y.chunks(group).zip(g.chunks(group)).zip(dx.chunks_mut(group)) {
                    let gs: T = gc.iter().copied().sum();
                    for ((d, &yv), &gv) in dc.iter_mut().zip(yc).zip(gc) {
                        *d = gv - yv.exp() * gs;
                    }
                }
                self.accumulate_elementwise(x, |k| dx[k]);
            }
            Op::GaussianReparam { mu, log_var, eps } => {
                let (mu, log_var) = (*mu, *log_var);
                self.accumulate_elementwise(mu, |k| g[k]);
                let lv = self.nodes[log_var].value.data().to_vec();
                let floor = T::lit(LOG_VAR_FLOOR);
                let half = T::lit(0.5);
                self.accumulate_elementwise(log_var, |k| {
                    if lv[k] > floor {
                        g[k] * eps[k] * half * (half * lv[k]).exp()
                    } else {
                        T::zero()
                    }
                });
            }
            &Op::GaussianKlMc { w, mu, log_var } => {
                let wv = self.nodes[w].value.data().to_vec();
                let muv = self.nodes[mu].value.data().to_vec();
                let lv = self.nodes[log_var].value.data().to_vec();
                let floor = T::lit(LOG_VAR_FLOOR);
                let half = T::lit(0.5);
                let inv_var: Vec<T> = lv.iter().map(|&l| (-l.max(floor)).exp()).collect();
                let s = g[0];
                self.accumulate_elementwise(w, |k| s * (wv[k] - (wv[k] - muv[k]) * inv_var[k]));
                self.accumulate_elementwise(mu, |k| s * (wv[k] - muv[k]) * inv_var[k]);
                self.accumulate_elementwise(log_var, |k| {
                    if lv[k] > floor {
                        let d = wv[k] - muv[k];
                        s * half * (d * d * inv_var[k] - T::one())
                    } else {
                        T::zero()
                    }
                });
            }
            Op::CrossEntropy { probs, targets } => {
                let probs = *probs;
                let classes = self.nodes[probs].value.shape()[1];
                let pv = self.nodes[probs].value.data().to_vec();
                let floor = T::lit(PROB_FLOOR);
                let n = T::from_usize(targets.len()).expect("count");
                self.accumulate(probs, |acc| {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = pv[r * classes + t];
                        if p > floor {
                            acc[r * classes + t] = acc[r * classes + t] - g[0] / (n * p);
                        }
                    }
                });
            }
            Op::SquaredError { pred, target } => {
                let pred = *pred;
                let pv = self.nodes[pred].value.data().to_vec();
                let scale = T::lit(2.0) * g[0] / T::from_usize(pv.len()).expect("count");
                self.accumulate_elementwise(pred, |k| scale * (pv[k] - target[k]));
            }
            Op::Gather { x, group, indices } => {
                let (x, group) = (*x, *group);
                self.accumulate(x, |acc| {
                    for (r, &idx) in indices.iter().enumerate() {
                        acc[r * group + idx] = acc[r * group + idx] + g[r];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    let slice = &g[offset..offset + len];
                    self.accumulate_elementwise(p, |k| slice[k]);
                    offset += len;
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn softmax_backward<T: Real>(y: &[T], g: &[T], group: usize, scale: T) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yc, gc), dc) in y.chunks(group).zip(g.chunks(group)).zip(dx.chunks_mut(group)) {
        let dot: T = yc.iter().zip(gc).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dc.iter_mut().zip(yc).zip(gc) {
            *d = scale * yv * (gv - dot);
        }
    }
    dx
}

/// `Σ [log N(w; mu, exp(lv)) − log N(w; 0, 1)]` with the log-variance floor.
pub(crate) fn gaussian_log_ratio<T: Real>(w: &[T], mu: &[T], log_var: &[T]) -> T {
    let floor = T::lit(LOG_VAR_FLOOR);
    let half = T::lit(0.5);
    w.iter()
        .zip(mu)
        .zip(log_var)
        .map(|((&wv, &m), &lv)| {
            let lv = lv.max(floor);
            let d = wv - m;
            -half * lv - half * d * d * (-lv).exp() + half * wv * wv
        })
        .sum()
}

/// Compare reverse-mode gradients of `f` against central finite
/// differences. Returns `max |analytic − numeric| / max(1, |numeric|)` over
/// every parameter entry.
///
/// `f` must be deterministic: any noise it draws has to come from a stream
/// it re-creates on every call.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for p in 0..params.len() {
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[p].data()[k] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient error at param {p}[{k}]")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn record_add_value() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::scalar(1.0));
        let b = tape.param(Tensor::scalar(2.0));
        let c = tape.record(OpTag::Add, &[a, b]).unwrap();
        assert_eq!(tape.value(c).item(), 3.0);
    }

    #[test]
    fn square_chain() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.record(OpTag::Mul, &[x, x]).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).item(), 6.0);
    }

    #[test]
    fn constant_leaf_has_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.param(t(&[2], &[0.5, 0.5]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(c).data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(w).data(), &[1.0, 2.0]);
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn saturated_cross_entropy_has_tiny_grad() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.param(t(&[1, 3], &[30.0, 0.0, 0.0]));
        let p = tape.softmax_groups(logits, 3).unwrap();
        let ce = tape.cross_entropy(p, &[0]).unwrap();
        tape.backward(ce).unwrap();
        let g = tape.grad(logits);
        assert!(g.data().iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn foreign_var_is_graph_error() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.param(Tensor::scalar(1.0));
        let y = b.param(Tensor::scalar(1.0));
        assert!(matches!(b.add(x, y), Err(Error::Graph(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_is_idempotent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let first = tape.grad(x);
        tape.backward(s).unwrap();
        assert_eq!(first, tape.grad(x));
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(
            |tape, v| {
                let y = tape.mul(v[0], v[0])?;
                tape.sum(y)
            },
            &[Tensor::scalar(3.0)],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn grad_check_constant() {
        let err = grad_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(4.0))),
            &[Tensor::scalar(3.0)],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    // One check per op in the supported set.
    #[test]
    fn every_op_matches_finite_differences() {
        let a = t(&[2, 3], &[0.3, -0.7, 1.1, 0.2, 0.9, -0.4]);
        let b = t(&[3, 2], &[0.5, -0.1, 0.8, 0.3, -0.6, 0.4]);
        let pos = t(&[2, 3], &[0.3, 0.7, 1.1, 0.2, 0.9, 0.4]);
        let mut rng = RngStream::new(3, 3);
        let gumbel: Tensor<f64> = rng.sample_gumbel(6);
        let eps: Tensor<f64> = rng.sample_std_normal(6);
        let target = t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);

        type Case = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
        let weights = t(&[2, 3], &[0.4, -1.2, 0.7, 2.0, 0.1, -0.3]);
        let wvar = weights.clone();
        let cases: Vec<(&str, Vec<Tensor<f64>>, Case)> = vec![
            ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| {
                let m = t.matmul(v[0], v[1])?;
                let m2 = t.mul(m, m)?;
                t.sum(m2)
            })),
            ("add_sub_mul", vec![a.clone(), pos.clone()], Box::new(|t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[0])?;
                let p = t.mul(d, v[0])?;
                t.sum(p)
            })),
            ("exp_log", vec![pos.clone()], Box::new(|t, v| {
                let e = t.exp(v[0])?;
                let l = t.log(v[0])?;
                let p = t.mul(e, l)?;
                t.mean(p)
            })),
            ("tanh_relu", vec![a.clone()], Box::new(|t, v| {
                let h = t.tanh(v[0])?;
                let r = t.relu(v[0])?;
                let p = t.mul(h, r)?;
                t.sum(p)
            })),
            ("softmax_log_softmax", vec![a.clone()], Box::new(move |t, v| {
                let s = t.softmax_groups(v[0], 3)?;
                let ls = t.log_softmax_groups(v[0], 3)?;
                let w = t.constant(wvar.clone());
                let p = t.mul(s, w)?;
                let q = t.mul(ls, p)?;
                t.sum(q)
            })),
            ("gumbel_softmax", vec![a.clone()], Box::new(move |t, v| {
                let s = t.gumbel_softmax(v[0], &gumbel, 3, 0.67)?;
                let w = t.constant(weights.clone());
                let p = t.mul(s, w)?;
                t.sum(p)
            })),
            ("reparam_and_kl", vec![a.clone(), b.clone().reshape(&[2, 3]).unwrap()], Box::new(move |t, v| {
                let w = t.gaussian_reparam(v[0], v[1], &eps)?;
                let kl = t.gaussian_kl_mc(w, v[0], v[1])?;
                let w2 = t.mul(w, w)?;
                let s = t.sum(w2)?;
                t.add(kl, s)
            })),
            ("cross_entropy", vec![a.clone()], Box::new(|t, v| {
                let p = t.softmax_groups(v[0], 3)?;
                t.cross_entropy(p, &[2, 0])
            })),
            ("squared_error_bias", vec![a.clone(), t(&[3], &[0.1, -0.2, 0.3])], Box::new(move |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                t.squared_error(y, &target)
            })),
            ("gather_concat_scale", vec![a.clone(), pos.clone()], Box::new(|t, v| {
                let g = t.gather(v[0], 3, &[1, 2])?;
                let c = t.concat(&[g, v[1]])?;
                let c2 = t.mul(c, c)?;
                let s = t.scale(c2, 0.5)?;
                let s = t.add_scalar(s, 1.0)?;
                let r = t.reshape(s, &[8])?;
                t.sum(r)
            })),
        ];
        for (name, params, f) in cases {
            let err = grad_check(f, &params, 1e-4).unwrap();
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }
}
