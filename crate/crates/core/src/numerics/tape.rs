//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records one forward pass. Each op stores its output value and
//! whatever it needs for the backward sweep; [`Tape::backward`] walks the
//! nodes in reverse and returns the gradients of every leaf that requires
//! them. Nodes whose inputs are all frozen are never visited, so frozen
//! weights cost no gradient work.

use std::collections::HashMap;

use super::linalg::{gemm, MatRef};
use super::tensor::{ParamKey, ParamStore, Tensor};
use super::Scalar;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a batched multi-head attention call. Rows of the query input
/// are `batch × q_len`, rows of key/value inputs are `batch × kv_len`, and
/// the feature dimension is split evenly across `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub causal: bool,
}

/// A user-defined differentiable op.
pub trait CustomOp<T>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// `None` means the op contributes nothing to that input.
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Relu { a: Var },
    AddBias { x: Var, b: Var, cols: usize },
    MulCols { x: Var, v: Var, cols: usize },
    Sum { a: Var },
    Mean { a: Var },
    Gather { table: Var, ids: Vec<usize>, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, shape: AttentionShape, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, classes: usize, probs: Vec<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    key: Option<ParamKey>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        [] => (1, 1),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies the node value out as a tensor (without gradient state).
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            key: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Leaf copied from a free-standing tensor; its `requires_grad` flag decides
    /// whether gradients are collected.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(shape.to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Leaf bound to a registry entry so [`Gradients::apply`] can route its gradient.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let t = store.get(index);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad());
        self.nodes[v.0].key = Some(store.key(index));
        v
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        if k != k2 || self.shape(a).len() > 2 || self.shape(b).len() > 2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, n),
            T::zero(),
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the shape of a linear layer with weight `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a));
        let (n, k2) = dims2(self.shape(b));
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), n, k).t(),
            T::zero(),
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b, m, k, n }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (rows, cols) = dims2(self.shape(a));
        let src = self.value(a);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let ng = self.ng(a);
        self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, ng))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, T::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, T::ln, Op::Log { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    /// Adds the vector `b[cols]` to every row of `x[rows×cols]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = dims2(self.shape(x));
        if self.value(b).len() != cols {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, b, cols }, ng))
    }

    /// Multiplies column `j` of `x[rows×cols]` by `v[j]`.
    pub fn mul_cols(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, cols) = dims2(self.shape(x));
        if self.value(v).len() != cols {
            return Err(Error::Dimension {
                op: "mul_cols",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let scale = self.value(v);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(scale).map(|(&a, &s)| a * s))
            .collect();
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulCols { x, v, cols }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s: T = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s / n], Op::Mean { a }, ng)
    }

    /// Selects rows of `table[rows×cols]` by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                limit: rows,
            });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                cols,
            },
            ng,
        ))
    }

    /// Layer normalization over the last dimension with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let n = T::from_usize(cols).unwrap();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.value(x).chunks(cols) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention for all batches and heads at once.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let (qr, d) = dims2(self.shape(q));
        let (kr, dk) = dims2(self.shape(k));
        let (vr, dv) = dims2(self.shape(v));
        let AttentionShape {
            batch,
            heads,
            q_len,
            kv_len,
            causal,
        } = shape;
        let bad = qr != batch * q_len
            || kr != batch * kv_len
            || vr != kr
            || dk != d
            || dv != d
            || heads == 0
            || d % heads != 0
            || (causal && q_len != kv_len);
        if bad {
            return Err(Error::Dimension {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * q_len * kv_len];
        let mut out = vec![T::zero(); qr * d];
        let mut scores = vec![T::zero(); kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qi = &qv[(b * q_len + i) * d + off..][..dh];
                    let visible = if causal { i + 1 } else { kv_len };
                    let mut mx = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate().take(visible) {
                        let kj = &kv[(b * kv_len + j) * d + off..][..dh];
                        let dot: T = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                        *s = dot * scale;
                        if *s > mx {
                            mx = *s;
                        }
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut().take(visible) {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let prow = &mut probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                    let orow = &mut out[(b * q_len + i) * d + off..][..dh];
                    for j in 0..visible {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vj = &vv[(b * kv_len + j) * d + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            vec![qr, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = dims2(self.shape(logits));
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index {
                what: "cross-entropy target",
                index: bad,
                limit: classes,
            });
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut total = T::zero();
        for (row, &t) in self.value(logits).chunks(classes).zip(targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&x| (x - mx).exp() / z));
        }
        let loss = total / T::from_usize(rows).unwrap();
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                classes,
                probs,
            },
            ng,
        ))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: &[usize],
        value: Vec<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Dimension {
                op: "custom",
                lhs: shape.to_vec(),
                rhs: vec![value.len()],
            });
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            shape.to_vec(),
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            by_var: HashMap::new(),
            keyed: Vec::new(),
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    if let Some(key) = node.key {
                        out.keyed.push((key, idx));
                    }
                    out.by_var.insert(idx, g);
                    continue;
                }
                _ => self.propagate(idx, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    gemm(
                        T::one(),
                        MatRef::new(g, m, n),
                        MatRef::new(self.value(b), k, n).t(),
                        T::one(),
                        ga,
                    );
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(
                        T::one(),
                        MatRef::new(self.value(a), m, k).t(),
                        MatRef::new(g, m, n),
                        T::one(),
                        gb,
                    );
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    gemm(
                        T::one(),
                        MatRef::new(g, m, n),
                        MatRef::new(self.value(b), n, k),
                        T::one(),
                        ga,
                    );
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(
                        T::one(),
                        MatRef::new(g, m, n).t(),
                        MatRef::new(self.value(a), m, k),
                        T::one(),
                        gb,
                    );
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(s, &x)| *s += x);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(s, &x)| *s += x);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(s, &x)| *s -= x);
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = self.slot(grads, a) {
                    let bv = self.value(b);
                    for ((s, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *s += x * y;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    let av = self.value(a);
                    for ((s, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *s += x * y;
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(s, &x)| *s += x * c);
                }
            }
            &Op::AddScalar { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(s, &x)| *s += x);
                }
            }
            &Op::Exp { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((s, &x), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *s += x * y;
                    }
                }
            }
            &Op::Log { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    let av = self.value(a);
                    for ((s, &x), &y) in ga.iter_mut().zip(g).zip(av) {
                        *s += x / y;
                    }
                }
            }
            &Op::Relu { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    let av = self.value(a);
                    for ((s, &x), &y) in ga.iter_mut().zip(g).zip(av) {
                        if y > T::zero() {
                            *s += x;
                        }
                    }
                }
            }
            &Op::AddBias { x, b, cols } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
                }
                if let Some(gb) = self.slot(grads, b) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                }
            }
            &Op::MulCols { x, v, cols } => {
                if let Some(gx) = self.slot(grads, x) {
                    let sv = self.value(v);
                    for (grow, gi) in gx.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((s, &d), &c) in grow.iter_mut().zip(gi).zip(sv) {
                            *s += d * c;
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, v) {
                    let xv = self.value(x);
                    for (xrow, gi) in xv.chunks(cols).zip(g.chunks(cols)) {
                        for ((s, &d), &a) in gv.iter_mut().zip(gi).zip(xrow) {
                            *s += d * a;
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            &Op::Mean { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    let n = T::from_usize(ga.len()).unwrap();
                    ga.iter_mut().for_each(|s| *s += g[0] / n);
                }
            }
            Op::Gather { table, ids, cols } => {
                let cols = *cols;
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        let dst = &mut gt[i * cols..(i + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(s, &v)| *s += v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            } => {
                let cols = *cols;
                let gam = self.value(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gi, hi) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((s, &d), &h) in gg.iter_mut().zip(gi).zip(hi) {
                            *s += d * h;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gi in g.chunks(cols) {
                        gb.iter_mut().zip(gi).for_each(|(s, &d)| *s += d);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = T::from_usize(cols).unwrap();
                    for (r, (gi, hi)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..cols {
                            let dh = gi[j] * gam[j];
                            sum_d += dh;
                            sum_dh += dh * hi[j];
                        }
                        let k = inv_std[r] / n;
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let dh = gi[j] * gam[j];
                            dst[j] += k * (n * dh - sum_d - hi[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                classes,
                probs,
            } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let rows = targets.len();
                    let w = g[0] / T::from_usize(rows).unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        let base = r * classes;
                        for c in 0..*classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            gl[base + c] += w * (probs[base + c] - onehot);
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&[T]> = inputs.iter().map(|&v| self.value(v)).collect();
                let contribs = op.backward(&vals, &node.value, g);
                for (&inp, c) in inputs.iter().zip(contribs) {
                    if let (Some(c), Some(slot)) = (c, self.slot(grads, inp)) {
                        slot.iter_mut().zip(&c).for_each(|(s, &x)| *s += x);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (_, d) = dims2(self.shape(q));
        let AttentionShape {
            batch,
            heads,
            q_len,
            kv_len,
            causal,
        } = shape;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = self.ng(q).then(|| vec![T::zero(); qv.len()]);
        let mut dk = self.ng(k).then(|| vec![T::zero(); kv.len()]);
        let mut dv = self.ng(v).then(|| vec![T::zero(); vv.len()]);
        let mut ds = vec![T::zero(); kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let visible = if causal { i + 1 } else { kv_len };
                    let prow = &probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                    let gi = &g[(b * q_len + i) * d + off..][..dh];
                    let mut dot = T::zero();
                    for j in 0..visible {
                        let vj = &vv[(b * kv_len + j) * d + off..][..dh];
                        let dp: T = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        ds[j] = dp;
                        dot += dp * prow[j];
                        if let Some(dv) = dv.as_mut() {
                            let dst = &mut dv[(b * kv_len + j) * d + off..][..dh];
                            dst.iter_mut().zip(gi).for_each(|(s, &x)| *s += prow[j] * x);
                        }
                    }
                    for j in 0..visible {
                        ds[j] = prow[j] * (ds[j] - dot) * scale;
                    }
                    let qi = &qv[(b * q_len + i) * d + off..][..dh];
                    if let Some(dq) = dq.as_mut() {
                        let dst = &mut dq[(b * q_len + i) * d + off..][..dh];
                        for j in 0..visible {
                            let kj = &kv[(b * kv_len + j) * d + off..][..dh];
                            dst.iter_mut().zip(kj).for_each(|(s, &x)| *s += ds[j] * x);
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        for j in 0..visible {
                            let dst = &mut dk[(b * kv_len + j) * d + off..][..dh];
                            dst.iter_mut().zip(qi).for_each(|(s, &x)| *s += ds[j] * x);
                        }
                    }
                }
            }
        }
        for (var, contrib) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(c), Some(slot)) = (contrib, self.slot(grads, var)) {
                slot.iter_mut().zip(&c).for_each(|(s, &x)| *s += x);
            }
        }
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    by_var: HashMap<usize, Vec<T>>,
    keyed: Vec<(ParamKey, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if it did not require one or was unreachable.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.by_var.get(&v.0).map(Vec::as_slice)
    }

    /// Accumulates registry-bound leaf gradients into their tensors' grad buffers.
    pub fn apply(&self, stores: &mut [&mut ParamStore<T>]) {
        for &(key, var) in &self.keyed {
            if let Some(store) = stores.iter_mut().find(|s| s.group() == key.group) {
                let t = store.get_mut(key.index);
                if t.requires_grad() {
                    t.accumulate_grad(&self.by_var[&var]);
                }
            }
        }
    }
}
