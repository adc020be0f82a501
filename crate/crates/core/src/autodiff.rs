//! Eager tape for reverse-mode differentiation.
//!
//! Every operation evaluates immediately and appends a node holding its
//! output plus whatever the backward rule needs. Nodes can only reference
//! earlier nodes, so the tape is always in topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is deliberately absent apart from [`Graph::add_bias`] (last
//! dimension) and the constant scale/shift of [`Graph::affine`]. Shape
//! changes such as [`Graph::repeat`] or [`Graph::stack`] are explicit nodes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Role of a parameter, used to decide which tensors the L2 penalty covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named trainable tensors of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape())?;
        let id = self.params.len();
        self.params.push(Parameter {
            name: name.to_owned(),
            kind,
            value,
            grad,
        });
        self.by_name.insert(name.to_owned(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the parameter gradients found in `grads` to the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let dst = self.params[id.0].grad.data_mut();
            for (d, &s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.sum_squares().as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { a: Var, scale: T },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    Sum(Var),
    Mean(Var),
    AddBias { a: Var, bias: Var },
    MaskedFill { a: Var, keep: Vec<bool> },
    Transpose(Var),
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    Pick { a: Var, ids: Vec<usize> },
    Repeat { a: Var, n: usize },
    Stack(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

// out[m, n] += a[m, k] * b[k, n]
fn mm_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

// out[m, k] += g[m, n] * b[k, n]^T
fn mm_bt_acc<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + kk] += acc;
        }
    }
}

// out[k, n] += a[m, k]^T * g[m, n]
fn mm_at_acc<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, value)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Op::Param(id), store.get(id).value.clone());
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() == 3 && sb.len() == 3 {
            return self.batch_matmul(a, b);
        }
        let k = sa.last().copied().unwrap_or(0);
        let ok = !sa.is_empty()
            && match sb.len() {
                1 => sb[0] == k,
                2 => sb[0] == k,
                _ => false,
            };
        if !ok {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let m = self.value(a).len() / k;
        let mut out = vec![T::zero(); m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let mut shape = sa[..sa.len() - 1].to_vec();
        if sb.len() == 2 {
            shape.push(n);
        }
        Ok(self.push(Op::MatMul { a, b }, Tensor::from_parts(shape, out)))
    }

    fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            mm_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(
            Op::BatchMatMul { a, b },
            Tensor::from_parts(vec![bt, m, n], out),
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// `a * scale + shift` with constant scalars.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let v = self.value(a).map(|x| x * scale + shift);
        self.push(Op::Affine { a, scale }, v)
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Var {
        self.affine(a, scale, T::zero())
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::one())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(Op::Log(a), v)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(Op::Softmax(a), v)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            log_softmax_in_place(row);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(Op::LogSoftmax(a), v)
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Tensor("concat of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in inputs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Op::Concat(inputs.to_vec()), Tensor::from_parts(shape, out)))
    }

    /// `a[..., start..start + len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let d = x.last_dim();
        if x.rank() == 0 || len == 0 || start + len > d {
            return Err(Error::shape("slice", x.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Op::Slice { a, start }, Tensor::from_parts(shape, out)))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum();
        let n: T = lit(x.len() as f64);
        self.push(Op::Mean(a), Tensor::scalar(s / n))
    }

    /// Adds a `[d]` bias to every row of a `[..., d]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rank() != 1 || x.rank() == 0 || x.last_dim() != b.len() {
            return Err(Error::shape("add_bias", x.shape(), b.shape()));
        }
        let d = b.len();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(Op::AddBias { a, bias }, v))
    }

    /// Replaces entries whose `mask` value is zero with `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &Tensor<T>, fill: T) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != mask.shape() {
            return Err(Error::shape("masked_fill", x.shape(), mask.shape()));
        }
        let keep: Vec<bool> = mask.data().iter().map(|&m| m != T::zero()).collect();
        let out = x
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(Op::MaskedFill { a, keep }, v))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Row lookup: `table[ids[i], :]` for each `i`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::shape("gather", t.shape(), &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.shape()[0]) {
            return Err(Error::Tensor(format!(
                "gather: id {bad} out of range for table with {} rows",
                t.shape()[0]
            )));
        }
        let d = t.shape()[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            v,
        ))
    }

    /// `a[b, ids[b]]` for a `[batch, n]` tensor, giving `[batch]`.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || x.shape()[0] != ids.len() {
            return Err(Error::shape("pick", x.shape(), &[ids.len()]));
        }
        let n = x.shape()[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Tensor(format!("pick: index {bad} out of range {n}")));
        }
        let out = ids.iter().enumerate().map(|(b, &i)| x.data()[b * n + i]).collect();
        let v = Tensor::from_parts(vec![ids.len()], out);
        Ok(self.push(
            Op::Pick {
                a,
                ids: ids.to_vec(),
            },
            v,
        ))
    }

    /// `[b, d]` to `[b, n, d]` by repeating each row `n` times.
    pub fn repeat(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || n == 0 {
            return Err(Error::shape("repeat", x.shape(), &[n]));
        }
        let (b, d) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(b * n * d);
        for r in 0..b {
            for _ in 0..n {
                out.extend_from_slice(x.row(r));
            }
        }
        let v = Tensor::from_parts(vec![b, n, d], out);
        Ok(self.push(Op::Repeat { a, n }, v))
    }

    /// Stacks `l` tensors of shape `[b, d]` into `[b, l, d]`.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Tensor("stack of nothing".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 {
            return Err(Error::shape("stack", &s0, &[inputs.len()]));
        }
        for &v in inputs {
            if self.shape(v) != s0.as_slice() {
                return Err(Error::shape("stack", &s0, self.shape(v)));
            }
        }
        let (b, d, l) = (s0[0], s0[1], inputs.len());
        let mut out = Vec::with_capacity(b * l * d);
        for r in 0..b {
            for &v in inputs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let v = Tensor::from_parts(vec![b, l, d], out);
        Ok(self.push(Op::Stack(inputs.to_vec()), v))
    }

    /// Standardizes each row over the last dimension, then applies
    /// `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if xv.rank() == 0 || d < 2 {
            return Err(Error::Tensor(format!(
                "layer_norm needs a feature dimension of at least 2, got {:?}",
                xv.shape()
            )));
        }
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let dn: T = lit(d as f64);
        let mut normed = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let n = (v - mu) * inv;
                normed.push(n);
                out.push(gv.data()[j] * n + bv.data()[j]);
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            v,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.last_dim();
                let m = av.len() / k;
                let n = if bv.rank() == 2 { bv.shape()[1] } else { 1 };
                mm_bt_acc(g, bv.data(), m, n, k, slot(grads, *a, av.len()));
                mm_at_acc(av.data(), g, m, k, n, slot(grads, *b, bv.len()));
            }
            Op::BatchMatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bt, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                {
                    let ga = slot(grads, *a, av.len());
                    for i in 0..bt {
                        mm_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                let gb = slot(grads, *b, bv.len());
                for i in 0..bt {
                    mm_at_acc(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                for (d, &s) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for ((d, &s), &o) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                    *d += s * o;
                }
                for ((d, &s), &o) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                    *d += s * o;
                }
            }
            Op::Affine { a, scale } => {
                for (d, &s) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s * *scale;
                }
            }
            Op::Tanh(a) => {
                for ((d, &s), &yv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *d += s * (T::one() - yv * yv);
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &s), &yv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *d += s * yv * (T::one() - yv);
                }
            }
            Op::Exp(a) => {
                for ((d, &s), &yv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *d += s * yv;
                }
            }
            Op::Log(a) => {
                let xv = self.value(*a).data();
                for ((d, &s), &x) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(xv) {
                    *d += s / x;
                }
            }
            Op::Softmax(a) => {
                let dim = node.value.last_dim();
                let ga = slot(grads, *a, g.len());
                for ((drow, grow), yrow) in ga.chunks_mut(dim).zip(g.chunks(dim)).zip(y.chunks(dim))
                {
                    let dot: T = grow.iter().zip(yrow).map(|(&p, &q)| p * q).sum();
                    for ((d, &s), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (s - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let dim = node.value.last_dim();
                let ga = slot(grads, *a, g.len());
                for ((drow, grow), yrow) in ga.chunks_mut(dim).zip(g.chunks(dim)).zip(y.chunks(dim))
                {
                    let total: T = grow.iter().copied().sum();
                    for ((d, &s), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += s - yv.exp() * total;
                    }
                }
            }
            Op::Concat(inputs) => {
                let dim = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &v in inputs {
                    let w = self.value(v).last_dim();
                    let gv = slot(grads, v, rows * w);
                    for r in 0..rows {
                        add_into(
                            &mut gv[r * w..(r + 1) * w],
                            &g[r * dim + offset..r * dim + offset + w],
                        );
                    }
                    offset += w;
                }
            }
            Op::Slice { a, start } => {
                let w = node.value.last_dim();
                let xv = self.value(*a);
                let d = xv.last_dim();
                let ga = slot(grads, *a, xv.len());
                for r in 0..xv.rows() {
                    add_into(&mut ga[r * d + start..r * d + start + w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                for d in slot(grads, *a, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let s = g[0] / lit::<T>(n as f64);
                for d in slot(grads, *a, n).iter_mut() {
                    *d += s;
                }
            }
            Op::AddBias { a, bias } => {
                add_into(slot(grads, *a, g.len()), g);
                let d = self.value(*bias).len();
                let gb = slot(grads, *bias, d);
                for row in g.chunks(d) {
                    add_into(gb, row);
                }
            }
            Op::MaskedFill { a, keep } => {
                for ((d, &s), &k) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(keep) {
                    if k {
                        *d += s;
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let ga = slot(grads, *a, g.len());
                // node is [r, c]; input is [c, r]
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let gt = slot(grads, *table, tv.len());
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
            Op::Pick { a, ids } => {
                let xv = self.value(*a);
                let n = xv.shape()[1];
                let ga = slot(grads, *a, xv.len());
                for (b, &i) in ids.iter().enumerate() {
                    ga[b * n + i] += g[b];
                }
            }
            Op::Repeat { a, n } => {
                let xv = self.value(*a);
                let d = xv.shape()[1];
                let ga = slot(grads, *a, xv.len());
                for r in 0..xv.shape()[0] {
                    for i in 0..*n {
                        let off = (r * n + i) * d;
                        add_into(&mut ga[r * d..(r + 1) * d], &g[off..off + d]);
                    }
                }
            }
            Op::Stack(inputs) => {
                let (b, l, d) = (
                    node.value.shape()[0],
                    node.value.shape()[1],
                    node.value.shape()[2],
                );
                for (t, &v) in inputs.iter().enumerate() {
                    let gv = slot(grads, v, b * d);
                    for r in 0..b {
                        let off = (r * l + t) * d;
                        add_into(&mut gv[r * d..(r + 1) * d], &g[off..off + d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gainv = self.value(*gain).data();
                {
                    let gg = slot(grads, *gain, d);
                    for (grow, nrow) in g.chunks(d).zip(normed.chunks(d)) {
                        for ((o, &s), &nv) in gg.iter_mut().zip(grow).zip(nrow) {
                            *o += s * nv;
                        }
                    }
                }
                {
                    let gb = slot(grads, *bias, d);
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                let dn: T = lit(d as f64);
                let gx = slot(grads, *x, g.len());
                let mut dxhat = vec![T::zero(); d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let nrow = &normed[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxhat[j] = grow[j] * gainv[j];
                    }
                    let s1: T = dxhat.iter().copied().sum();
                    let s2: T = dxhat.iter().zip(nrow).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        gx[r * d + j] += inv / dn * (dn * dxhat[j] - s1 - nrow[j] * s2);
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node, or `None` when the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf reached by the sweep.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_shape_rule() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2, 3]).unwrap());
        let b = g.constant(Tensor::ones(&[3, 4]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
        let err = g.matmul(b, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[3, 4]"), "{err}");
    }

    #[test]
    fn matmul_vector_rhs_drops_dim() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(vec![2, 2, 3], &[1., 2., 3., 4., 5., 6., 1., 1., 1., 0., 0., 1.]));
        let v = g.constant(t(vec![3], &[1., 0., 2.]));
        let c = g.matmul(a, v).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.value(c).data(), &[7., 16., 3., 2.]);
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[3]).unwrap());
        let s = g.softmax(z);
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(vec![2, 3], &[0.3, -1.2, 2.5, 10., 11., 9.]));
        let xs = g.affine(x, 1.0, 7.25);
        let (a, b) = (g.softmax(x), g.softmax(xs));
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
        for r in 0..2 {
            let total: f64 = g.value(a).row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_sum_wx_is_outer_product() {
        // loss = sum(W x) with W 2x2 and x fixed, so dW[i, j] = x[j]
        // (x is a row vector here: loss = sum(x W), dW[i, j] = x[i]).
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("W", ParamKind::Weight, t(vec![2, 2], &[0.5, -1.0, 2.0, 0.25]))
            .unwrap();
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], &[3.0, -4.0]));
        let wv = g.param(&store, w);
        let y = g.matmul(x, wv).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads);
        assert_eq!(store.get(w).grad.data(), &[3.0, 3.0, -4.0, -4.0]);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("W", ParamKind::Weight, Tensor::ones(&[2]).unwrap()).unwrap();
        let u = store.add("U", ParamKind::Weight, Tensor::ones(&[2]).unwrap()).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let _unused = g.param(&store, u);
        let loss = g.sum(wv);
        let grads = g.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&grads);
        assert_eq!(store.get(u).grad.data(), &[0.0, 0.0]);
        assert_eq!(store.get(w).grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2]).unwrap());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn masked_fill_all_ones_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(vec![2, 2], &[1., -2., 3., 4.]));
        let y = g.masked_fill(x, &Tensor::ones(&[2, 2]).unwrap(), -1e9).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("W", ParamKind::Weight, t(vec![2, 3], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]))
            .unwrap();
        let run = |store: &mut ParamStore<f64>| {
            store.zero_grad();
            let mut g = Graph::new();
            let x = g.constant(t(vec![1, 2], &[1.0, 2.0]));
            let wv = g.param(store, w);
            let y = g.matmul(x, wv).unwrap();
            let s = g.softmax(y);
            let l = g.log(s);
            let loss = g.mean(l);
            let grads = g.backward(loss).unwrap();
            store.accumulate(&grads);
            store.get(w).grad.clone()
        };
        let a = run(&mut store);
        let b = run(&mut store);
        assert_eq!(a.data(), b.data());
    }
}
