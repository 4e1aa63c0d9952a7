//! Reverse-mode differentiation over a fixed set of dense primitives.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! parameter or variable.

use std::collections::HashMap;

use super::params::{ParamGrads, ParamId, ParameterStore};
use super::tensor::Tensor2;
use super::KernelError;
use crate::num::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Behaviour of a masked softmax row in which every entry is masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyRow {
    /// Reject the row.
    Error,
    /// Emit an all-zero row (no message).
    Zero,
}

#[derive(Debug)]
enum Op<S> {
    Constant,
    Variable,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    MulConst(Var, Tensor2<S>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Softmax(Var, Vec<bool>),
    LogSoftmaxSelect(Var, Vec<bool>, Vec<usize>, Tensor2<S>),
    Relu(Var),
    Tanh(Var),
    MeanRows(Var),
    SumRows(Var),
    SumAll(Var),
    InstanceNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor2<S>,
        inv_std: Vec<S>,
    },
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor2<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor2<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor2<S>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor2<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Input that is not differentiated.
    pub fn constant(&mut self, value: Tensor2<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Free input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor2<S>) -> Var {
        self.push(value, Op::Variable, true)
    }

    /// Node holding parameter `id`; repeated requests reuse the same node.
    pub fn param(&mut self, store: &ParameterStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(&[a]);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        if self.shape(a) != self.shape(b) {
            return Err(KernelError::shape("add", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds the `1 x c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, KernelError> {
        let (rows, cols) = self.shape(a);
        if self.shape(bias) != (1, cols) {
            return Err(KernelError::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(a).clone();
        for r in 0..rows {
            for (x, &y) in value.row_mut(r).iter_mut().zip(&b) {
                *x = *x + y;
            }
        }
        let ng = self.needs(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.needs(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Element-wise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor2<S>) -> Result<Var, KernelError> {
        if self.shape(a) != c.shape() {
            return Err(KernelError::shape("mul_const", self.shape(a), c.shape()));
        }
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::MulConst(a, c), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(KernelError::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(KernelError::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let rows = if cols == 0 {
            parts.iter().map(|&p| self.shape(p).0).sum()
        } else {
            rows
        };
        let value = Tensor2::from_vec(rows, cols, data)?;
        let ng = self.needs(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, KernelError> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(KernelError::shape("slice_cols", (rows, cols), (start, len)));
        }
        let src = self.value(a);
        let value = Tensor2::from_fn(rows, len, |r, c| src.get(r, start + c));
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, KernelError> {
        if rows * cols != self.value(a).len() {
            return Err(KernelError::shape("reshape", self.shape(a), (rows, cols)));
        }
        let value = Tensor2::from_vec(rows, cols, self.value(a).data().to_vec())?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Row-wise softmax over entries whose `mask` is true; masked entries get
    /// probability exactly 0.
    pub fn softmax_masked(
        &mut self,
        a: Var,
        mask: &[bool],
        empty: EmptyRow,
    ) -> Result<Var, KernelError> {
        let (rows, cols) = self.shape(a);
        if mask.len() != rows * cols {
            return Err(KernelError::shape("softmax_masked", (rows, cols), (mask.len(), 1)));
        }
        let x = self.value(a);
        let mut value = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            let row = x.row(r);
            let Some(max) = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .reduce(S::max)
            else {
                match empty {
                    EmptyRow::Error => return Err(KernelError::EmptyMaskedRow { row: r }),
                    EmptyRow::Zero => continue,
                }
            };
            let mut total = S::zero();
            let out = value.row_mut(r);
            for c in 0..cols {
                if m[c] {
                    let e = (row[c] - max).exp();
                    out[c] = e;
                    total = total + e;
                }
            }
            for c in 0..cols {
                if m[c] {
                    out[c] = out[c] / total;
                }
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax(a, mask.to_vec()), ng))
    }

    /// Log-probability of `pick[r]` under the masked softmax of row `r`;
    /// returns an `r x 1` column.
    pub fn log_softmax_select(
        &mut self,
        a: Var,
        mask: &[bool],
        pick: &[usize],
    ) -> Result<Var, KernelError> {
        let (rows, cols) = self.shape(a);
        if mask.len() != rows * cols || pick.len() != rows {
            return Err(KernelError::shape("log_softmax_select", (rows, cols), (mask.len(), pick.len())));
        }
        let x = self.value(a);
        let mut probs = Tensor2::zeros(rows, cols);
        let mut value = Tensor2::zeros(rows, 1);
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            if pick[r] >= cols || !m[pick[r]] {
                return Err(KernelError::MaskedSelection { row: r, col: pick[r] });
            }
            let row = x.row(r);
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .reduce(S::max)
                .expect("picked entry is unmasked");
            let mut total = S::zero();
            for c in 0..cols {
                if m[c] {
                    total = total + (row[c] - max).exp();
                }
            }
            let log_total = total.ln() + max;
            for c in 0..cols {
                if m[c] {
                    probs.set(r, c, (row[c] - log_total).exp());
                }
            }
            value.set(r, 0, row[pick[r]] - log_total);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(
            value,
            Op::LogSoftmaxSelect(a, mask.to_vec(), pick.to_vec(), probs),
            ng,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(S::zero()));
        let ng = self.needs(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.needs(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let x = self.value(a);
        let inv = S::one() / S::of(rows.max(1) as f64);
        let value = Tensor2::from_fn(1, cols, |_, c| {
            (0..rows).fold(S::zero(), |acc, r| acc + x.get(r, c)) * inv
        });
        let ng = self.needs(&[a]);
        self.push(value, Op::MeanRows(a), ng)
    }

    /// Column sums, `1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let x = self.value(a);
        let value = Tensor2::from_fn(1, cols, |_, c| {
            (0..rows).fold(S::zero(), |acc, r| acc + x.get(r, c))
        });
        let ng = self.needs(&[a]);
        self.push(value, Op::SumRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor2::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Per-column standardisation over rows followed by a learned affine map.
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var, KernelError> {
        let (rows, cols) = self.shape(x);
        if self.shape(gain) != (1, cols) || self.shape(bias) != (1, cols) {
            return Err(KernelError::shape("instance_norm", (rows, cols), self.shape(gain)));
        }
        let xv = self.value(x);
        let n = S::of(rows.max(1) as f64);
        let mut normalized = Tensor2::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(cols);
        for c in 0..cols {
            let mean = (0..rows).fold(S::zero(), |a, r| a + xv.get(r, c)) / n;
            let var = (0..rows).fold(S::zero(), |a, r| {
                let d = xv.get(r, c) - mean;
                a + d * d
            }) / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for r in 0..rows {
                normalized.set(r, c, (xv.get(r, c) - mean) * is);
            }
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let value = Tensor2::from_fn(rows, cols, |r, c| normalized.get(r, c) * g.get(0, c) + b.get(0, c));
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, KernelError> {
        let (n, cols) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(KernelError::shape("gather_rows", (n, cols), (bad, 0)));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(x.row(r));
        }
        let value = Tensor2::from_vec(rows.len(), cols, data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), ng))
    }

    /// Gradient of the `1 x 1` node `root`, scaled by `seed`, with respect to
    /// every differentiable node.
    pub fn backward(&self, root: Var, seed: S) -> Result<Gradients<S>, KernelError> {
        if self.shape(root) != (1, 1) {
            return Err(KernelError::shape("backward", self.shape(root), (1, 1)));
        }
        let mut grads: Vec<Option<Tensor2<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor2::scalar(seed));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds the parameter gradients into `out`.
    pub fn backward_into(&self, root: Var, seed: S, out: &mut ParamGrads<S>) -> Result<(), KernelError> {
        let grads = self.backward(root, seed)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                out.accumulate(id, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor2<S>, grads: &mut [Option<Tensor2<S>>]) {
        let mut send = |v: Var, delta: Tensor2<S>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Variable | Op::Param => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].needs_grad {
                    send(*a, g.matmul_t(bv).expect("shapes recorded"));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, av.t_matmul(g).expect("shapes recorded"));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone());
                let (rows, cols) = g.shape();
                let db = Tensor2::from_fn(1, cols, |_, c| {
                    (0..rows).fold(S::zero(), |acc, r| acc + g.get(r, c))
                });
                send(*bias, db);
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * *s)),
            Op::MulConst(a, c) => send(*a, g.zip_map(c, |x, y| x * y)),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    send(p, Tensor2::from_fn(rows, cols, |r, c| g.get(r, c0 + c)));
                    c0 += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    send(p, Tensor2::from_fn(rows, cols, |r, c| g.get(r0 + r, c)));
                    r0 += rows;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let len = g.cols();
                send(
                    *a,
                    Tensor2::from_fn(rows, cols, |r, c| {
                        if c >= *start && c < start + len {
                            g.get(r, c - start)
                        } else {
                            S::zero()
                        }
                    }),
                );
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                send(*a, Tensor2::from_vec(rows, cols, g.data().to_vec()).expect("same length"));
            }
            Op::Softmax(a, mask) => {
                let y = &node.value;
                let (rows, cols) = y.shape();
                let mut dx = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    let dot = (0..cols).fold(S::zero(), |acc, c| acc + y.get(r, c) * g.get(r, c));
                    for c in 0..cols {
                        if mask[r * cols + c] {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                send(*a, dx);
            }
            Op::LogSoftmaxSelect(a, mask, pick, probs) => {
                let (rows, cols) = probs.shape();
                let mut dx = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.get(r, 0);
                    for c in 0..cols {
                        if mask[r * cols + c] {
                            let ind = if c == pick[r] { S::one() } else { S::zero() };
                            dx.set(r, c, gr * (ind - probs.get(r, c)));
                        }
                    }
                }
                send(*a, dx);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, x.zip_map(g, |xi, gi| if xi > S::zero() { gi } else { S::zero() }));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                send(*a, y.zip_map(g, |yi, gi| gi * (S::one() - yi * yi)));
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let inv = S::one() / S::of(rows.max(1) as f64);
                send(*a, Tensor2::from_fn(rows, cols, |_, c| g.get(0, c) * inv));
            }
            Op::SumRows(a) => {
                let (rows, cols) = self.shape(*a);
                send(*a, Tensor2::from_fn(rows, cols, |_, c| g.get(0, c)));
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                send(*a, Tensor2::filled(rows, cols, g.get(0, 0)));
            }
            Op::InstanceNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = normalized.shape();
                let gv = self.value(*gain);
                let n = S::of(rows.max(1) as f64);
                let mut dgain = Tensor2::zeros(1, cols);
                let mut dbias = Tensor2::zeros(1, cols);
                let mut dx = Tensor2::zeros(rows, cols);
                for c in 0..cols {
                    let mut sum_d = S::zero();
                    let mut sum_dn = S::zero();
                    for r in 0..rows {
                        let gy = g.get(r, c);
                        dgain.set(0, c, dgain.get(0, c) + gy * normalized.get(r, c));
                        dbias.set(0, c, dbias.get(0, c) + gy);
                        let dn = gy * gv.get(0, c);
                        sum_d = sum_d + dn;
                        sum_dn = sum_dn + dn * normalized.get(r, c);
                    }
                    for r in 0..rows {
                        let dn = g.get(r, c) * gv.get(0, c);
                        let v = inv_std[c] / n * (n * dn - sum_d - normalized.get(r, c) * sum_dn);
                        dx.set(r, c, v);
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::GatherRows(a, rows) => {
                let (n, cols) = self.shape(*a);
                let mut dx = Tensor2::zeros(n, cols);
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        dx.set(r, c, dx.get(r, c) + g.get(i, c));
                    }
                }
                send(*a, dx);
            }
        }
    }
}
