//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! Each entry keeps its output value and whatever the backward rule needs.
//! [`Tape::backward`] walks the entries in reverse and returns gradients for
//! every node that depends on a `requires_grad` leaf.
//!
//! Broadcasting is never implicit: the only mixed-shape operations are the
//! explicitly named ones (`add_bias`, `scale_rows`, scalar operands).

use crate::error::{mismatch, TensorError};
use crate::tensor::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Tanh,
    Exp,
    Log,
}

/// Second argument of a pointwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    None,
    Scalar(f64),
    Tensor(Var),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar { x: Var, s: Var },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    AddBias { x: Var, b: Var },
    ScaleRows { x: Var, s: Var },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of one forward computation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not require one.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`; zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, node_op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        check_finite(op, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op,
                shape: s.to_vec(),
                detail: "expected a matrix".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt { a, b, m, k, n },
            &[a, b],
        )
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, node: Op, f: impl Fn(T, T) -> T) -> Result<Var, TensorError> {
        self.same_shape(op, a, b)?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(op, value, node, &[a, b])
    }

    fn unary(&mut self, op: &'static str, a: Var, node: Op, f: impl Fn(T) -> T) -> Result<Var, TensorError> {
        let value = self.value(a).map(f);
        self.push(op, value, node, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let sv: T = c(s);
        self.unary("scale", a, Op::Scale(a, s), |x| x * sv)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let sv: T = c(s);
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + sv)
    }

    /// `x * s` where `s` is a recorded one-element tensor.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if !self.value(s).is_scalar() {
            return Err(TensorError::NotScalar(self.shape(s).to_vec()));
        }
        let sv = self.value(s).item();
        let out = self.unary("mul_scalar", x, Op::MulScalarVar { x, s }, |v| v * sv)?;
        // `unary` only saw `x` as an input.
        self.nodes[out.0].requires_grad = self.nodes[x.0].requires_grad || self.nodes[s.0].requires_grad;
        Ok(out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("relu", a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("tanh", a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", a, Op::Sigmoid(a), |x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= T::zero()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {:?}", bad),
            });
        }
        self.unary("log", a, Op::Log(a), |x| x.ln())
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    /// Dispatches a pointwise kind. Binary kinds take a same-shape tensor or a scalar.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, operand: Operand) -> Result<Var, TensorError> {
        use Elementwise::*;
        match (kind, operand) {
            (Add, Operand::Tensor(b)) => self.add(a, b),
            (Sub, Operand::Tensor(b)) => self.sub(a, b),
            (Mul, Operand::Tensor(b)) => self.mul(a, b),
            (Add, Operand::Scalar(s)) => self.add_scalar(a, s),
            (Sub, Operand::Scalar(s)) => self.add_scalar(a, -s),
            (Mul | Scale, Operand::Scalar(s)) => self.scale(a, s),
            (Relu, Operand::None) => self.relu(a),
            (Tanh, Operand::None) => self.tanh(a),
            (Exp, Operand::None) => self.exp(a),
            (Log, Operand::None) => self.log(a),
            (kind, operand) => Err(TensorError::Domain {
                op: "elementwise",
                detail: format!("{kind:?} does not accept operand {operand:?}"),
            }),
        }
    }

    /// Adds `b[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (_, n) = self.matrix_dims(x, "add_bias")?;
        if self.value(b).len() != n {
            return Err(mismatch("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("add_bias", value, Op::AddBias { x, b }, &[x, b])
    }

    /// Multiplies row `i` of `x[m×n]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "scale_rows")?;
        if self.value(s).len() != m {
            return Err(mismatch("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for (row, &f) in data.chunks_mut(n).zip(&sv) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("scale_rows", value, Op::ScaleRows { x, s }, &[x, s])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, n) = self.matrix_dims(a, "softmax_rows")?;
        let value = softmax_rows_value(self.value(a), n);
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, n) = self.matrix_dims(a, "log_softmax_rows")?;
        let av = self.value(a);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("log_softmax_rows", value, Op::LogSoftmaxRows(a), &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                detail: format!("axis {axis} out of range"),
            });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: vec![m, n],
                detail: format!("columns {start}..{}", start + len),
            });
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "transpose")?;
        let data = kernels::transpose(self.value(x).data(), m, n);
        self.push("transpose", Tensor::from_parts(vec![n, m], data), Op::Transpose(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / c(v.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums each row of `x[m×n]` into a length-`m` vector.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let (_, n) = self.matrix_dims(x, "row_sum")?;
        let data: Vec<T> = self.value(x).data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        self.push("row_sum", Tensor::vector(data), Op::RowSum(x), &[x])
    }

    /// Scales each row to unit L2 norm. A zero row is a domain error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (_, n) = self.matrix_dims(x, "normalize_rows")?;
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in data.chunks_mut(n) {
            let nrm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if nrm < 1e-12 {
                return Err(TensorError::Domain {
                    op: "normalize_rows",
                    detail: "row with zero norm".into(),
                });
            }
            let inv: T = c(1.0 / nrm);
            row.iter_mut().for_each(|v| *v *= inv);
            norms.push(nrm);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("normalize_rows", value, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, _) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Domain {
                op: "gather_rows",
                detail: format!("index {bad} out of {rows} rows"),
            });
        }
        let value = self.value(table).select_rows(ids);
        self.push("gather_rows", value, Op::GatherRows { table, ids: ids.to_vec() }, &[table])
    }

    /// Picks element `cols[i]` from row `i` of `x[m×n]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "pick")?;
        if cols.len() != m || cols.iter().any(|&j| j >= n) {
            return Err(mismatch("pick", &[m, n], &[cols.len()]));
        }
        let xv = self.value(x);
        let data = cols.iter().enumerate().map(|(i, &j)| xv.get2(i, j)).collect();
        self.push("pick", Tensor::vector(data), Op::Pick { x, cols: cols.to_vec() }, &[x])
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(loss.0));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut g: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.backward_node(i, &gout, &mut g);
            g[i] = Some(gout);
        }

        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = g
            .into_iter()
            .zip(&self.nodes)
            .map(|(gi, n)| {
                if !n.requires_grad {
                    return None;
                }
                Some(match gi {
                    Some(d) => Tensor::from_parts(n.value.shape().to_vec(), d),
                    None => Tensor::zeros(n.value.shape().to_vec()),
                })
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, g: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let slot = g[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn add_into(&self, g: &mut [Option<Vec<T>>], v: Var, contrib: &[T]) {
        self.accumulate(g, v, |s| s.iter_mut().zip(contrib).for_each(|(a, &b)| *a += b));
    }

    fn backward_node(&self, i: usize, gout: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let da = kernels::matmul_nt(gout, self.value(b).data(), m, n, k);
                    self.add_into(g, a, &da);
                }
                if self.wants(b) {
                    let db = kernels::matmul_tn(self.value(a).data(), gout, m, k, n);
                    self.add_into(g, b, &db);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if self.wants(a) {
                    let da = kernels::matmul_nn(gout, self.value(b).data(), m, n, k);
                    self.add_into(g, a, &da);
                }
                if self.wants(b) {
                    let db = kernels::matmul_tn(gout, self.value(a).data(), m, n, k);
                    self.add_into(g, b, &db);
                }
            }
            &Op::Add(a, b) => {
                self.add_into(g, a, gout);
                self.add_into(g, b, gout);
            }
            &Op::Sub(a, b) => {
                self.add_into(g, a, gout);
                self.accumulate(g, b, |s| s.iter_mut().zip(gout).for_each(|(x, &d)| *x -= d));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(g, a, |s| s.iter_mut().zip(gout).zip(bv).for_each(|((x, &d), &y)| *x += d * y));
                self.accumulate(g, b, |s| s.iter_mut().zip(gout).zip(av).for_each(|((x, &d), &y)| *x += d * y));
            }
            &Op::Scale(a, f) => {
                let f: T = c(f);
                self.accumulate(g, a, |s| s.iter_mut().zip(gout).for_each(|(x, &d)| *x += d * f));
            }
            &Op::AddScalar(a) => self.add_into(g, a, gout),
            &Op::MulScalarVar { x, s } => {
                let sv = self.value(s).item();
                self.accumulate(g, x, |acc| acc.iter_mut().zip(gout).for_each(|(v, &d)| *v += d * sv));
                let xv = self.value(x).data();
                let ds: T = gout.iter().zip(xv).map(|(&d, &v)| d * v).sum();
                self.accumulate(g, s, |acc| acc[0] += ds);
            }
            &Op::Relu(a) => {
                let av = self.value(a).data();
                self.accumulate(g, a, |s| {
                    s.iter_mut().zip(gout).zip(av).for_each(|((x, &d), &v)| {
                        if v > T::zero() {
                            *x += d
                        }
                    })
                });
            }
            &Op::Tanh(a) => self.accumulate(g, a, |s| {
                s.iter_mut()
                    .zip(gout)
                    .zip(out)
                    .for_each(|((x, &d), &y)| *x += d * (T::one() - y * y))
            }),
            &Op::Sigmoid(a) => self.accumulate(g, a, |s| {
                s.iter_mut()
                    .zip(gout)
                    .zip(out)
                    .for_each(|((x, &d), &y)| *x += d * y * (T::one() - y))
            }),
            &Op::Exp(a) => self.accumulate(g, a, |s| s.iter_mut().zip(gout).zip(out).for_each(|((x, &d), &y)| *x += d * y)),
            &Op::Log(a) => {
                let av = self.value(a).data();
                self.accumulate(g, a, |s| s.iter_mut().zip(gout).zip(av).for_each(|((x, &d), &v)| *x += d / v));
            }
            &Op::Square(a) => {
                let av = self.value(a).data();
                let two: T = c(2.0);
                self.accumulate(g, a, |s| s.iter_mut().zip(gout).zip(av).for_each(|((x, &d), &v)| *x += two * d * v));
            }
            &Op::AddBias { x, b } => {
                self.add_into(g, x, gout);
                let n = self.value(b).len();
                self.accumulate(g, b, |s| {
                    for row in gout.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(x, &d)| *x += d);
                    }
                });
            }
            &Op::ScaleRows { x, s } => {
                let n = self.value(x).cols();
                let sv = self.value(s).data();
                let xv = self.value(x).data();
                self.accumulate(g, x, |acc| {
                    for ((arow, grow), &f) in acc.chunks_mut(n).zip(gout.chunks(n)).zip(sv) {
                        arow.iter_mut().zip(grow).for_each(|(a, &d)| *a += d * f);
                    }
                });
                self.accumulate(g, s, |acc| {
                    for ((a, grow), xrow) in acc.iter_mut().zip(gout.chunks(n)).zip(xv.chunks(n)) {
                        *a += grow.iter().zip(xrow).map(|(&d, &v)| d * v).sum::<T>();
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                self.accumulate(g, a, |acc| {
                    for ((arow, grow), yrow) in acc.chunks_mut(n).zip(gout.chunks(n)).zip(out.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                        for ((a, &d), &y) in arow.iter_mut().zip(grow).zip(yrow) {
                            *a += y * (d - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmaxRows(a) => {
                let n = node.value.cols();
                self.accumulate(g, a, |acc| {
                    for ((arow, grow), yrow) in acc.chunks_mut(n).zip(gout.chunks(n)).zip(out.chunks(n)) {
                        let gs: T = grow.iter().copied().sum();
                        for ((a, &d), &y) in arow.iter_mut().zip(grow).zip(yrow) {
                            *a += d - y.exp() * gs;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.accumulate(g, p, |acc| {
                        for o in 0..outer {
                            let src = &gout[o * row + offset..o * row + offset + chunk];
                            acc[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(a, &d)| *a += d);
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::SliceCols { x, start } => {
                let n = self.value(x).cols();
                let len = node.value.cols();
                self.accumulate(g, x, |acc| {
                    for (arow, grow) in acc.chunks_mut(n).zip(gout.chunks(len)) {
                        arow[start..start + len].iter_mut().zip(grow).for_each(|(a, &d)| *a += d);
                    }
                });
            }
            &Op::Reshape(x) => self.add_into(g, x, gout),
            &Op::Transpose(x) => {
                let s = node.value.shape();
                let back = kernels::transpose(gout, s[0], s[1]);
                self.add_into(g, x, &back);
            }
            &Op::Sum(x) => {
                let d = gout[0];
                self.accumulate(g, x, |acc| acc.iter_mut().for_each(|a| *a += d));
            }
            &Op::Mean(x) => {
                let d = gout[0] / c(self.value(x).len() as f64);
                self.accumulate(g, x, |acc| acc.iter_mut().for_each(|a| *a += d));
            }
            &Op::RowSum(x) => {
                let n = self.value(x).cols();
                self.accumulate(g, x, |acc| {
                    for (arow, &d) in acc.chunks_mut(n).zip(gout) {
                        arow.iter_mut().for_each(|a| *a += d);
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.value.cols();
                self.accumulate(g, *x, |acc| {
                    for (((arow, grow), yrow), &nrm) in acc.chunks_mut(n).zip(gout.chunks(n)).zip(out.chunks(n)).zip(norms) {
                        let dot: T = grow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                        let inv: T = c(1.0 / nrm);
                        for ((a, &d), &y) in arow.iter_mut().zip(grow).zip(yrow) {
                            *a += (d - y * dot) * inv;
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let n = node.value.cols();
                self.accumulate(g, *table, |acc| {
                    for (&id, grow) in ids.iter().zip(gout.chunks(n)) {
                        acc[id * n..(id + 1) * n].iter_mut().zip(grow).for_each(|(a, &d)| *a += d);
                    }
                });
            }
            Op::Pick { x, cols } => {
                let n = self.value(*x).cols();
                self.accumulate(g, *x, |acc| {
                    for (i, (&j, &d)) in cols.iter().zip(gout).enumerate() {
                        acc[i * n + j] += d;
                    }
                });
            }
        }
    }
}

/// Row-wise softmax of a matrix value, outside any tape.
pub fn softmax_rows_value<T: Scalar>(a: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut data = a.data().to_vec();
    for row in data.chunks_mut(n) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Tensor::from_parts(a.shape().to_vec(), data)
}
