//! Eager reverse-mode differentiation over a closed set of primitives.
//!
//! Every primitive computes its value when it is recorded, so "forward" is
//! simply building the tape. `backward` replays the record in reverse index
//! order, which is a reverse topological order because a node can only refer
//! to nodes recorded before it.

use std::borrow::Cow;
use std::collections::HashMap;

use super::{DenseArray, Gradients, ParamStore, TensorError};

/// Handle to a value slot on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    SoftmaxCrossEntropy { logits: Var, label: usize },
    KlDivergence { logits: Var, target: Vec<f64> },
    SquaredDiffSum(Var, Var),
    Pow(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::KlDivergence { .. } => "kl_divergence",
            Op::SquaredDiffSum(..) => "squared_diff_sum",
            Op::Pow(..) => "pow",
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, DenseArray>,
}

/// Record of primitive operations. Parameters and constants may be borrowed
/// for the tape's lifetime instead of copied.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<String, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(sum(exp(logits)))`, stabilised.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &DenseArray {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Cow<'a, DenseArray>) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(op.name()));
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(op: &'static str, a: &DenseArray, b: &DenseArray) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
    }

    /// Owned input value; receives no gradient.
    pub fn input(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value: Cow::Owned(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed constant; receives no gradient.
    pub fn constant(&mut self, value: &'a DenseArray) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value: Cow::Borrowed(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter borrowed from `store`. Repeated requests for the
    /// same name return the same slot so gradients accumulate in one place.
    pub fn param(&mut self, store: &'a ParamStore, name: &str) -> Result<Var, TensorError> {
        if let Some(&var) = self.params.get(name) {
            return Ok(var);
        }
        let value = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        self.nodes.push(Node {
            op: Op::Param(name.to_string()),
            value: Cow::Borrowed(value),
        });
        let var = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    /// `[m, k] x [k, n] -> [m, n]` or `[m, k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2]) if k == k2 => {
                let ad = av.data();
                let bd = bv.data();
                let data: Vec<f64> = (0..m)
                    .map(|i| {
                        let row = &ad[i * k..(i + 1) * k];
                        row.iter().zip(bd).map(|(x, y)| x * y).sum()
                    })
                    .collect();
                DenseArray::from_parts_unchecked(vec![m], data)
            }
            (&[m, k], &[k2, n]) if k == k2 => {
                let ad = av.data();
                let bd = bv.data();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = ad[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        let brow = &bd[p * n..(p + 1) * n];
                        let orow = &mut data[i * n..(i + 1) * n];
                        for (o, y) in orow.iter_mut().zip(brow) {
                            *o += x * y;
                        }
                    }
                }
                DenseArray::from_parts_unchecked(vec![m, n], data)
            }
            _ => return Err(Self::shape_err("matmul", av, bv)),
        };
        self.push(Op::MatMul(a, b), Cow::Owned(out))
    }

    fn zip_same(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Self::shape_err(op.name(), av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = DenseArray::from_parts_unchecked(av.shape().to_vec(), data);
        self.push(op, Cow::Owned(out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = DenseArray::from_parts_unchecked(av.shape().to_vec(), data);
        self.push(op, Cow::Owned(out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.map(Op::Scale(a, factor), a, |x| x * factor)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(Op::Sigmoid(a), a, sigmoid)
    }

    /// Elementwise `x^p`. Fractional exponents require non-negative inputs.
    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        if exponent.fract() != 0.0 && av.data().iter().any(|&x| x < 0.0) {
            return Err(TensorError::Domain {
                op: "pow",
                detail: format!("negative base with exponent {exponent}"),
            });
        }
        self.map(Op::Pow(a, exponent), a, |x| x.powf(exponent))
    }

    /// Concatenation of 1-D arrays.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Domain {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: v.shape().to_vec(),
                    rhs: vec![],
                });
            }
            data.extend_from_slice(v.data());
        }
        let out = DenseArray::from_parts_unchecked(vec![data.len()], data);
        self.push(Op::Concat(parts.to_vec()), Cow::Owned(out))
    }

    /// Contiguous window `[start, start + len)` of a 1-D array.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let v = self.value(src);
        if v.shape().len() != 1 || len == 0 || start + len > v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                lhs: v.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = DenseArray::from_parts_unchecked(vec![len], v.data()[start..start + len].to_vec());
        self.push(Op::Slice { src, start }, Cow::Owned(out))
    }

    /// `-log softmax(logits)[label]` as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let v = self.value(logits);
        if v.shape().len() != 1 || label >= v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![label],
            });
        }
        let loss = log_sum_exp(v.data()) - v.data()[label];
        self.push(
            Op::SoftmaxCrossEntropy { logits, label },
            Cow::Owned(DenseArray::scalar(loss)),
        )
    }

    /// `KL(target || softmax(logits))` as a scalar. `target` is a fixed
    /// probability vector and receives no gradient.
    pub fn kl_divergence(&mut self, target: &[f64], logits: Var) -> Result<Var, TensorError> {
        let v = self.value(logits);
        if v.shape() != [target.len()] {
            return Err(TensorError::ShapeMismatch {
                op: "kl_divergence",
                lhs: v.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let lse = log_sum_exp(v.data());
        let kl: f64 = target
            .iter()
            .zip(v.data())
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, &l)| p * (p.ln() - (l - lse)))
            .sum();
        self.push(
            Op::KlDivergence {
                logits,
                target: target.to_vec(),
            },
            Cow::Owned(DenseArray::scalar(kl)),
        )
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn squared_diff_sum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Self::shape_err("squared_diff_sum", av, bv));
        }
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Op::SquaredDiffSum(a, b), Cow::Owned(DenseArray::scalar(s)))
    }

    /// Sum of scalar slots, folded left to right.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var, TensorError> {
        let (&first, rest) = terms.split_first().ok_or(TensorError::Domain {
            op: "add",
            detail: "empty sum".into(),
        })?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse pass from `output`, which must hold a single value, seeded with
    /// `output_grad`. The result has an entry for every parameter in `store`;
    /// parameters the tape never touched get zero arrays.
    pub fn backward(&self, output: Var, output_grad: f64, store: &ParamStore) -> Result<Gradients, TensorError> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(TensorError::NoForward);
        }
        if self.value(output).len() != 1 {
            return Err(TensorError::NonScalarOutput(self.value(output).shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![output_grad]);
        let mut result = Gradients::zeros_like(store);

        fn acc(grads: &mut [Option<Vec<f64>>], var: Var, len: usize, f: impl Fn(usize) -> f64) {
            match &mut grads[var.0] {
                Some(g) => {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += f(i);
                    }
                }
                slot @ None => *slot = Some((0..len).map(f).collect()),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    let slot = result
                        .get_mut(name)
                        .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
                    for (s, gi) in slot.data_mut().iter_mut().zip(&g) {
                        *s += gi;
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ad = av.data();
                    let bd = bv.data();
                    match (av.shape(), bv.shape()) {
                        (&[m, k], &[_]) => {
                            acc(&mut grads, *a, m * k, |i| g[i / k] * bd[i % k]);
                            acc(&mut grads, *b, k, |j| (0..m).map(|i| ad[i * k + j] * g[i]).sum());
                        }
                        (&[m, k], &[_, n]) => {
                            // dA = dC B^T, dB = A^T dC
                            acc(&mut grads, *a, m * k, |idx| {
                                let (i, p) = (idx / k, idx % k);
                                (0..n).map(|j| g[i * n + j] * bd[p * n + j]).sum()
                            });
                            acc(&mut grads, *b, k * n, |idx| {
                                let (p, j) = (idx / n, idx % n);
                                (0..m).map(|i| ad[i * k + p] * g[i * n + j]).sum()
                            });
                        }
                        _ => unreachable!("matmul shapes validated at record time"),
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.len(), |i| g[i]);
                    acc(&mut grads, *b, g.len(), |i| g[i]);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.len(), |i| g[i]);
                    acc(&mut grads, *b, g.len(), |i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let ad = self.value(*a).data();
                    let bd = self.value(*b).data();
                    acc(&mut grads, *a, g.len(), |i| g[i] * bd[i]);
                    acc(&mut grads, *b, g.len(), |i| g[i] * ad[i]);
                }
                Op::Scale(a, factor) => acc(&mut grads, *a, g.len(), |i| g[i] * factor),
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(&mut grads, *a, g.len(), |i| g[i] * (1.0 - y[i] * y[i]));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(&mut grads, *a, g.len(), |i| g[i] * y[i] * (1.0 - y[i]));
                }
                Op::Pow(a, p) => {
                    let x = self.value(*a).data();
                    // x^p has an infinite slope at 0 for p < 1; use the zero subgradient.
                    acc(&mut grads, *a, g.len(), |i| {
                        if x[i] == 0.0 && *p < 1.0 {
                            0.0
                        } else {
                            g[i] * p * x[i].powf(p - 1.0)
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        acc(&mut grads, p, len, |i| g[offset + i]);
                        offset += len;
                    }
                }
                Op::Slice { src, start } => {
                    let len = self.value(*src).len();
                    let (start, glen) = (*start, g.len());
                    acc(&mut grads, *src, len, |i| {
                        if i >= start && i < start + glen {
                            g[i - start]
                        } else {
                            0.0
                        }
                    });
                }
                Op::SoftmaxCrossEntropy { logits, label } => {
                    let probs = softmax(self.value(*logits).data());
                    acc(&mut grads, *logits, probs.len(), |i| {
                        g[0] * (probs[i] - if i == *label { 1.0 } else { 0.0 })
                    });
                }
                Op::KlDivergence { logits, target } => {
                    let probs = softmax(self.value(*logits).data());
                    acc(&mut grads, *logits, probs.len(), |i| g[0] * (probs[i] - target[i]));
                }
                Op::SquaredDiffSum(a, b) => {
                    let ad = self.value(*a).data();
                    let bd = self.value(*b).data();
                    acc(&mut grads, *a, ad.len(), |i| g[0] * 2.0 * (ad[i] - bd[i]));
                    acc(&mut grads, *b, bd.len(), |i| -g[0] * 2.0 * (ad[i] - bd[i]));
                }
            }
        }
        Ok(result)
    }
}
