use std::collections::HashMap;

use super::kernels;
use super::{Real, Tensor, TensorId};
use crate::error::{ensure, Error, Result};

/// Epsilon inside the square root of row-wise RMS and layer normalization.
pub const RMS_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    RmsNorm(Var, Vec<f64>),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    StraightThrough(Var),
    CrossEntropy(Var, Vec<usize>),
    Entropy(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
}

/// Records primitives as they execute and replays them backward.
///
/// Nodes are appended in execution order, which is a topological order, so
/// the backward pass is a single reverse sweep. Leaves bound from tensors
/// with `requires_grad` are memoized by [`TensorId`]: binding the same
/// parameter twice yields the same node and its gradient accumulates.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<TensorId, Var>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Whether any tracked leaf feeds `v`.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Binds a tensor as a leaf. Tensors with `requires_grad` become tracked
    /// leaves; the rest are recorded as constants.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.leaves.get(&t.id()) {
            return v;
        }
        let tracked = t.requires_grad();
        let value = Tensor::from_parts(t.shape().to_vec(), t.values().to_vec());
        let op = if tracked { Op::Leaf } else { Op::Constant };
        let v = self.push(value, op, tracked);
        self.leaves.insert(t.id(), v);
        v
    }

    /// Records an untracked value.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_values());
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        ensure!(s.len() == 2, "{what} expects a matrix, got shape {s:?}");
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        ensure!(k == k2, "matmul inner dimensions differ: {m}×{k} · {k2}×{n}");
        let out = kernels::matmul(self.value(a).values(), self.value(b).values(), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let out = kernels::transpose(self.value(a).values(), r, c);
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), tracked))
    }

    fn elementwise2(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor<T>> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{what} shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let va = self.value(a).values();
        let vb = self.value(b).values();
        let out = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| T::from_f64(f(x.as_f64(), y.as_f64())))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise2(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise2(a, b, "subtract", |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row")?;
        ensure!(
            self.value(bias).numel() == n,
            "add_row bias has {} entries, matrix has {n} columns",
            self.value(bias).numel()
        );
        let b = self.value(bias).values();
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o = *o + bj;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(x, bias), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        ensure!(c.is_finite(), "scale factor must be finite");
        let out = self
            .value(x)
            .values()
            .iter()
            .map(|&v| T::from_f64(v.as_f64() * c))
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), tracked))
    }

    pub fn rms_normalize(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "rowwise_rms_normalize")?;
        let (out, inv) = kernels::rms_normalize(self.value(x).values(), n, RMS_EPS);
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::RmsNorm(x, inv), tracked))
    }

    pub fn layer_normalize(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "rowwise_layer_normalize")?;
        let (out, inv) = kernels::layer_normalize(self.value(x).values(), n, RMS_EPS);
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::LayerNorm(x, inv), tracked))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "softmax_rows")?;
        let out = kernels::softmax_rows(self.value(x).values(), n);
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Softmax(x), tracked))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        ensure!(v.values().iter().all(|&e| e > T::zero()), "log of a non-positive entry");
        let out = v.values().iter().map(|&e| e.ln()).collect();
        let shape = v.shape().to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Log(x), tracked))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out: Vec<T> = v.values().iter().map(|&e| e.exp()).collect();
        ensure!(out.iter().all(|e| e.is_finite()), "exp overflowed");
        let shape = v.shape().to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Exp(x), tracked))
    }

    /// Smooth positive-part nonlinearity `x·sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = v
            .values()
            .iter()
            .map(|&e| {
                let e = e.as_f64();
                T::from_f64(e * kernels::sigmoid(e))
            })
            .collect();
        let shape = v.shape().to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Silu(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).values().iter().map(|v| v.as_f64()).sum();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: f64 = v.values().iter().map(|v| v.as_f64()).sum::<f64>() / v.numel() as f64;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Mean(x), tracked))
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mean_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            "mean_squared_error shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let va = self.value(a).values();
        let vb = self.value(b).values();
        let s = kernels::squared_distance(va, vb) / va.len() as f64;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Mse(a, b), tracked))
    }

    /// Selects rows of a matrix; gradients scatter-add back.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "gather_rows")?;
        ensure!(!indices.is_empty(), "gather_rows needs at least one index");
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), n], out),
            Op::Gather(x, indices.to_vec()),
            tracked,
        ))
    }

    /// Untracked `indices.len() × n` one-hot matrix.
    pub fn one_hot_rows(&mut self, indices: &[usize], n: usize) -> Result<Var> {
        ensure!(!indices.is_empty() && n > 0, "one_hot_rows needs indices and n > 0");
        let mut out = vec![T::zero(); indices.len() * n];
        for (r, &i) in indices.iter().enumerate() {
            ensure!(i < n, "one_hot_rows index {i} out of range for {n} classes");
            out[r * n + i] = T::one();
        }
        Ok(self.push(Tensor::from_parts(vec![indices.len(), n], out), Op::Constant, false))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_rows needs at least one part");
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let joined = Tensor::concat_rows(&refs)?;
        let value = Tensor::from_parts(joined.shape().to_vec(), joined.into_values());
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Copies the value with no path back to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::from_parts(v.shape().to_vec(), v.values().to_vec());
        self.push(value, Op::Constant, false)
    }

    /// Forward value of `z`, backward identity into `f`; `z` gets nothing.
    pub fn straight_through(&mut self, f: Var, z: Var) -> Result<Var> {
        ensure!(
            self.shape(f) == self.shape(z),
            "straight_through shape mismatch: {:?} vs {:?}",
            self.shape(f),
            self.shape(z)
        );
        let v = self.value(z);
        let value = Tensor::from_parts(v.shape().to_vec(), v.values().to_vec());
        let tracked = self.tracked(f);
        Ok(self.push(value, Op::StraightThrough(f), tracked))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(logits, "cross_entropy_rows")?;
        ensure!(
            targets.len() == m,
            "cross_entropy_rows needs {m} targets, got {}",
            targets.len()
        );
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::contract(format!("target {bad} outside vocabulary of {n}")));
        }
        let x = self.value(logits).values();
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -kernels::log_softmax_row(&x[i * n..(i + 1) * n])[t])
            .sum();
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(total / m as f64)),
            Op::CrossEntropy(logits, targets.to_vec()),
            tracked,
        ))
    }

    /// Mean per-row entropy minus entropy of the mean row, for a row-stochastic
    /// matrix. `0·log 0` is taken as 0.
    pub fn entropy_penalty(&mut self, p: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(p, "entropy_penalty")?;
        let v = self.value(p).values();
        ensure!(
            v.iter().all(|&e| e >= T::zero()),
            "entropy penalty needs non-negative probabilities"
        );
        let mut marginal = vec![0.0f64; n];
        let mut row_entropy = 0.0f64;
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let s: f64 = row.iter().map(|e| e.as_f64()).sum();
            ensure!((s - 1.0).abs() <= 1e-5, "row {i} sums to {s}, expected 1");
            for (j, &e) in row.iter().enumerate() {
                let e = e.as_f64();
                marginal[j] += e;
                if e > 0.0 {
                    row_entropy -= e * e.ln();
                }
            }
        }
        let mf = m as f64;
        let batch_entropy: f64 = marginal
            .iter()
            .map(|&q| q / mf)
            .filter(|&q| q > 0.0)
            .map(|q| -q * q.ln())
            .sum();
        let value = row_entropy / mf - batch_entropy;
        let tracked = self.tracked(p);
        Ok(self.push(Tensor::scalar(T::from_f64(value)), Op::Entropy(p), tracked))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        ensure!(
            !self.backward_done,
            "backward already ran on this tape; call clear_grads first"
        );
        ensure!(
            self.value(output).is_scalar(),
            "backward needs a scalar output, got shape {:?}",
            self.shape(output)
        );
        ensure!(self.tracked(output), "backward on an output with no tracked inputs");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Drops gradients so `backward` may run again.
    pub fn clear_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the leaf bound from `t`, if any.
    pub fn grad_of(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.leaves.get(&t.id()).and_then(|&v| self.grad(v))
    }

    /// Adds this tape's gradient for `t` into `t`'s gradient slot.
    pub fn accumulate_into(&self, t: &mut Tensor<T>) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        let g = self.grad_of(t).map(|g| g.to_vec());
        match g {
            Some(g) => t.accumulate_grad(&g),
            None => Ok(()),
        }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.values();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).cols();
                if self.tracked(*a) {
                    let bt = kernels::transpose(self.value(*b).values(), k, n);
                    let da = kernels::matmul(g, &bt, m, n, k);
                    self.add_grad(grads, *a, &da);
                }
                if self.tracked(*b) {
                    let at = kernels::transpose(self.value(*a).values(), m, k);
                    let db = kernels::matmul(&at, g, k, m, n);
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims(self.value(*a));
                let da = kernels::transpose(g, c, r);
                self.add_grad(grads, *a, &da);
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g);
                self.add_grad(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g);
                if self.tracked(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.add_grad(grads, *b, &neg);
                }
            }
            Op::AddRow(x, bias) => {
                self.add_grad(grads, *x, g);
                if self.tracked(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v.as_f64();
                        }
                    }
                    let db: Vec<T> = db.into_iter().map(T::from_f64).collect();
                    self.add_grad(grads, *bias, &db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<T> = g.iter().map(|&v| T::from_f64(v.as_f64() * c)).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::RmsNorm(x, inv) => {
                let n = node.value.cols();
                let xv = self.value(*x).values();
                let mut dx = vec![T::zero(); g.len()];
                for (i, &r_inv) in inv.iter().enumerate() {
                    let span = i * n..(i + 1) * n;
                    let (gr, xr) = (&g[span.clone()], &xv[span.clone()]);
                    let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    let coef = gx * r_inv.powi(3) / n as f64;
                    for ((d, &gj), &xj) in dx[span].iter_mut().zip(gr).zip(xr) {
                        *d = T::from_f64(gj.as_f64() * r_inv - xj.as_f64() * coef);
                    }
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::LayerNorm(x, inv) => {
                let n = node.value.cols();
                let mut dx = vec![T::zero(); g.len()];
                for (i, &s_inv) in inv.iter().enumerate() {
                    let span = i * n..(i + 1) * n;
                    let (gr, yr) = (&g[span.clone()], &out[span.clone()]);
                    let g_mean = gr.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / n as f64;
                    for ((d, &gj), &yj) in dx[span].iter_mut().zip(gr).zip(yr) {
                        *d = T::from_f64(s_inv * (gj.as_f64() - g_mean - yj.as_f64() * gy_mean));
                    }
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let mut dx = vec![T::zero(); g.len()];
                for ((d, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    for ((dj, &gj), &yj) in d.iter_mut().zip(gr).zip(yr) {
                        *dj = T::from_f64(yj.as_f64() * (gj.as_f64() - dot));
                    }
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::Log(x) => {
                let xv = self.value(*x).values();
                let dx: Vec<T> = g.iter().zip(xv).map(|(&gj, &xj)| gj / xj).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::Exp(x) => {
                let dx: Vec<T> = g.iter().zip(out).map(|(&gj, &yj)| gj * yj).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).values();
                let dx: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gj, &xj)| {
                        let x = xj.as_f64();
                        let s = kernels::sigmoid(x);
                        T::from_f64(gj.as_f64() * (s + x * s * (1.0 - s)))
                    })
                    .collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.add_grad(grads, *x, &dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let dx = vec![T::from_f64(g[0].as_f64() / n as f64); n];
                self.add_grad(grads, *x, &dx);
            }
            Op::Mse(a, b) => {
                let va = self.value(*a).values();
                let vb = self.value(*b).values();
                let c = 2.0 * g[0].as_f64() / va.len() as f64;
                let da: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| T::from_f64(c * (x.as_f64() - y.as_f64())))
                    .collect();
                if self.tracked(*b) {
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    self.add_grad(grads, *b, &db);
                }
                self.add_grad(grads, *a, &da);
            }
            Op::Gather(x, indices) => {
                let (m, n) = dims(self.value(*x));
                let mut dx = vec![0.0f64; m * n];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &v) in dx[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *d += v.as_f64();
                    }
                }
                let dx: Vec<T> = dx.into_iter().map(T::from_f64).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.add_grad(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::StraightThrough(f) => self.add_grad(grads, *f, g),
            Op::CrossEntropy(logits, targets) => {
                let (m, n) = dims(self.value(*logits));
                let x = self.value(*logits).values();
                let scale = g[0].as_f64() / m as f64;
                let mut dx = vec![T::zero(); m * n];
                for (i, &t) in targets.iter().enumerate() {
                    let lsm = kernels::log_softmax_row(&x[i * n..(i + 1) * n]);
                    for (j, l) in lsm.into_iter().enumerate() {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        dx[i * n + j] = T::from_f64(scale * (l.exp() - indicator));
                    }
                }
                self.add_grad(grads, *logits, &dx);
            }
            Op::Entropy(p) => {
                let (m, n) = dims(self.value(*p));
                let v = self.value(*p).values();
                let mut marginal = vec![0.0f64; n];
                for row in v.chunks(n) {
                    for (q, &e) in marginal.iter_mut().zip(row) {
                        *q += e.as_f64();
                    }
                }
                let mf = m as f64;
                let log_q: Vec<f64> = marginal.iter().map(|&q| (q / mf).max(1e-30).ln()).collect();
                let scale = g[0].as_f64() / mf;
                let dx: Vec<T> = v
                    .iter()
                    .enumerate()
                    .map(|(k, &e)| {
                        let log_p = e.as_f64().max(1e-30).ln();
                        T::from_f64(scale * (log_q[k % n] - log_p))
                    })
                    .collect();
                self.add_grad(grads, *p, &dx);
            }
        }
    }

    fn add_grad(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

fn dims<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.5]);
    }

    #[test]
    fn rms_normalize_three_four() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let y = tape.rms_normalize(x).unwrap();
        let r = (12.5f64 + 1e-6).sqrt();
        let got = tape.value(y).values();
        assert!((got[0] as f64 - 3.0 / r).abs() < 1e-6);
        assert!((got[1] as f64 - 4.0 / r).abs() < 1e-6);
        assert!((got[0] - 0.8485).abs() < 1e-4 && (got[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(tape.matmul(a, b).is_err());
        let c = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.add(a, c).is_err());
        assert!(tape.softmax_rows(c).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::<f32>::zeros(vec![3, 2]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn mse_against_zero() {
        let x = Tensor::new(vec![1], vec![2.0f32]).unwrap().with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let z = tape.constant(Tensor::zeros(vec![1]));
        let l = tape.mean_squared_error(v, z).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 4.0);
        assert_eq!(tape.grad(v).unwrap(), &[4.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(vec![3, 5], 1.0, &mut rng).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let y = tape.softmax_rows(v).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn backward_contracts() {
        let x = Tensor::<f32>::zeros(vec![2]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert!(tape.backward(v).is_err(), "non-scalar output");
        let s = tape.sum(v).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err(), "second backward without reset");
        tape.clear_grads();
        tape.backward(s).unwrap();

        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::zeros(vec![2]));
        let s = tape.sum(c).unwrap();
        assert!(tape.backward(s).is_err(), "tape-free output");
    }

    #[test]
    fn shared_leaf_accumulates() {
        let x = Tensor::new(vec![1], vec![3.0f32]).unwrap().with_requires_grad(true);
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.leaf(&x);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let s = tape.sum(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), &[2.0]);
    }

    #[test]
    fn straight_through_routes_identity() {
        let f = Tensor::new(vec![1], vec![0.2f32]).unwrap().with_requires_grad(true);
        let z = Tensor::new(vec![1], vec![1.0f32]).unwrap().with_requires_grad(true);
        let mut tape = Tape::new();
        let fv = tape.leaf(&f);
        let zv = tape.leaf(&z);
        let q = tape.straight_through(fv, zv).unwrap();
        assert_eq!(tape.value(q).values(), &[1.0]);
        let zero = tape.constant(Tensor::zeros(vec![1]));
        let l = tape.mean_squared_error(q, zero).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(fv).unwrap(), &[2.0]);
        assert!(tape.grad(zv).is_none());
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::full(vec![4], 0.3);
        let err = finite_difference_check(
            |tape, v| {
                let z = tape.scale(v, 0.0)?;
                tape.sum(z)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8);
    }
}
