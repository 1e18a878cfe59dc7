use super::element::{gemm, Layout};
use super::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, k: T },
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    InterleaveRows(Vec<Var>),
    Sum(Var),
    WeightedSum { x: Var, w: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Recording,
    Consumed,
}

/// Ordered record of a forward pass.
///
/// Nodes are appended as operations run, so every operation's inputs precede
/// it. [`Tape::backward`] walks the record in reverse once; afterwards the
/// backward rules are dropped and a second call fails with
/// [`TensorError::StaleTape`]. Leaf gradients stay readable.
#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    state: State,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let numel: usize = shape.iter().product();
    (numel / cols.max(1), cols)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            state: State::Recording,
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.state = State::Recording;
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

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Without a gradient path the backward rule is never needed.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "{op} expects a 2-D operand, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m x k] · b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            &mut out,
            false,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                b_transposed: false,
            },
            &[a, b],
        ))
    }

    /// `a[m x k] · b[n x k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_bt", a)?;
        let (n, k2) = self.dims2("matmul_bt", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Transposed,
            &mut out,
            false,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                b_transposed: true,
            },
            &[a, b],
        ))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias` (length = last dim of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(bias).numel() != cols {
            return Err(self.mismatch("add_row", x, bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(cols) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::from_f64(k);
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|e| *e *= k);
        self.push(v, Op::Scale { x, k }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|e| *e = gelu(*e));
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|e| *e = e.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let cols = v.cols();
        for row in v.data_mut().chunks_mut(cols) {
            softmax_row(row, cols);
        }
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Row-wise softmax of a square score matrix where entry `(i, j)` with
    /// `j > i` is masked out. Masked entries come out exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("causal_softmax", x)?;
        if r != c {
            return Err(TensorError::Invalid(format!(
                "causal_softmax expects a square matrix, got [{r}, {c}]"
            )));
        }
        let mut v = self.value(x).clone();
        for (i, row) in v.data_mut().chunks_mut(c).enumerate() {
            softmax_row(row, i + 1);
        }
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length = last dim).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gain).numel() != cols {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).numel() != cols {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().map(|e| e.as_f64()).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|e| {
                    let d = e.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, e) in row.iter_mut().enumerate() {
                let xhat = T::from_f64((e.as_f64() - mean) * rstd);
                *e = xhat * g[j] + b[j];
            }
            means.push(T::from_f64(mean));
            rstds.push(T::from_f64(rstd));
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, bias],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(TensorError::Invalid(format!(
                "slice_cols {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let v = Tensor::new([rows, len], data)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (rows, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new([rows, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let (_, cols) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new([rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows by index (repeats allowed). Also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if idx.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no indices".into()));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, rows });
            }
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let v = Tensor::new([idx.len(), cols], data)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Interleaves equally shaped `[T x C]` parts row by row:
    /// `p0[0], p1[0], .., p0[1], p1[1], ..`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("interleave_rows of nothing".into()))?;
        let (rows, cols) = self.dims2("interleave_rows", first)?;
        for &p in parts {
            if self.shape(p) != self.shape(first) {
                return Err(self.mismatch("interleave_rows", first, p));
            }
        }
        let mut data = Vec::with_capacity(rows * cols * parts.len());
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(&self.value(p).data()[r * cols..(r + 1) * cols]);
            }
        }
        let v = Tensor::new([rows * parts.len(), cols], data)?;
        Ok(self.push(v, Op::InterleaveRows(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: &[T]) -> Result<Var> {
        if w.len() != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![w.len()],
            });
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(w)
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w: w.to_vec() }, &[x]))
    }

    /// Mean next-token cross entropy of `logits[N x V]` against `targets[N]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(TensorError::IndexOutOfRange { index: t, rows: v });
            }
            softmax_row(row, v);
            loss -= row[t].as_f64().max(1e-300).ln();
        }
        let value = Tensor::scalar(T::from_f64(loss / n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into every
    /// gradient-tracking node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.state == State::Consumed {
            return Err(TensorError::StaleTape);
        }
        if !self.grad_enabled {
            return Err(TensorError::GradDisabled);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.state = State::Consumed;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &dy);
            self.nodes[i].grad = Some(dy);
        }
        // Clear the record; leaves keep their gradients.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Leaf;
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(node.grad.get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&mut self, i: usize, op: &Op<T>, dy: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = self.value(Var(i)).cols();
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let ga = self.acc(*a).unwrap();
                    if *b_transposed {
                        // dA = dC · B, B is n x k
                        gemm(m, n, k, dy, Layout::Normal, &bv, Layout::Normal, ga, true);
                    } else {
                        // dA = dC · Bᵀ, B is k x n
                        gemm(m, n, k, dy, Layout::Normal, &bv, Layout::Transposed, ga, true);
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data().to_vec();
                    let gb = self.acc(*b).unwrap();
                    if *b_transposed {
                        // dB = dCᵀ · A
                        gemm(n, m, k, dy, Layout::Transposed, &av, Layout::Normal, gb, true);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, &av, Layout::Transposed, dy, Layout::Normal, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    self.acc_scaled(v, dy, sign);
                }
            }
            Op::Sub(a, b) => {
                self.acc_scaled(*a, dy, 1.0);
                self.acc_scaled(*b, dy, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    let bv = self.value(b).data().to_vec();
                    let ga = self.acc(a).unwrap();
                    for ((g, &d), &y) in ga.iter_mut().zip(dy).zip(&bv) {
                        *g += d * y;
                    }
                }
                if self.requires_grad(b) {
                    let av = self.value(a).data().to_vec();
                    let gb = self.acc(b).unwrap();
                    for ((g, &d), &x) in gb.iter_mut().zip(dy).zip(&av) {
                        *g += d * x;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                self.acc_scaled(*x, dy, 1.0);
                if let Some(gb) = self.acc(*bias) {
                    let cols = gb.len();
                    for row in dy.chunks(cols) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Scale { x, k } => {
                let k = *k;
                if let Some(g) = self.acc(*x) {
                    for (g, &d) in g.iter_mut().zip(dy) {
                        *g += d * k;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x).data().to_vec();
                    let g = self.acc(*x).unwrap();
                    for ((g, &d), &xx) in g.iter_mut().zip(dy).zip(&xv) {
                        *g += d * gelu_grad(xx);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.requires_grad(*x) {
                    let yv = self.value(Var(i)).data().to_vec();
                    let g = self.acc(*x).unwrap();
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(&yv) {
                        *g += d * (T::one() - y * y);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.requires_grad(*x) {
                    let yv = self.value(Var(i)).data().to_vec();
                    let cols = self.value(Var(i)).cols();
                    let g = self.acc(*x).unwrap();
                    for ((gr, dr), yr) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(yv.chunks(cols)) {
                        let dot: T = dr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                        for ((g, &d), &y) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += y * (d - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let cols = self.value(*x).cols();
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gain).data().to_vec();
                let xhat = |r: usize, j: usize| (xv[r * cols + j] - mean[r]) * rstd[r];
                if let Some(gg) = self.acc(*gain) {
                    for (r, dr) in dy.chunks(cols).enumerate() {
                        for (j, &d) in dr.iter().enumerate() {
                            gg[j] += d * xhat(r, j);
                        }
                    }
                }
                if let Some(gb) = self.acc(*bias) {
                    for dr in dy.chunks(cols) {
                        for (g, &d) in gb.iter_mut().zip(dr) {
                            *g += d;
                        }
                    }
                }
                if let Some(gx) = self.acc(*x) {
                    let n = T::from_f64(cols as f64);
                    for (r, dr) in dy.chunks(cols).enumerate() {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..cols {
                            let dxh = dr[j] * gv[j];
                            sum_d += dxh;
                            sum_dx += dxh * xhat(r, j);
                        }
                        let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
                        for j in 0..cols {
                            let dxh = dr[j] * gv[j];
                            gx[r * cols + j] += rstd[r] * (dxh - mean_d - xhat(r, j) * mean_dx);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                let len = self.value(Var(i)).cols();
                let cols = self.value(*x).cols();
                if let Some(g) = self.acc(*x) {
                    for (r, dr) in dy.chunks(len).enumerate() {
                        for (o, &d) in g[r * cols + start..r * cols + start + len].iter_mut().zip(dr) {
                            *o += d;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.value(Var(i)).cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(g) = self.acc(p) {
                        for (r, gr) in g.chunks_mut(w).enumerate() {
                            for (o, &d) in gr.iter_mut().zip(&dy[r * total + offset..r * total + offset + w]) {
                                *o += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(g) = self.acc(p) {
                        for (o, &d) in g.iter_mut().zip(&dy[offset..offset + n]) {
                            *o += d;
                        }
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = self.value(*x).cols();
                if let Some(g) = self.acc(*x) {
                    for (&r, dr) in idx.iter().zip(dy.chunks(cols)) {
                        for (o, &d) in g[r * cols..(r + 1) * cols].iter_mut().zip(dr) {
                            *o += d;
                        }
                    }
                }
            }
            Op::InterleaveRows(parts) => {
                let k = parts.len();
                let cols = self.value(Var(i)).cols();
                for (pi, &p) in parts.iter().enumerate() {
                    if let Some(g) = self.acc(p) {
                        for (r, gr) in g.chunks_mut(cols).enumerate() {
                            let src = (r * k + pi) * cols;
                            for (o, &d) in gr.iter_mut().zip(&dy[src..src + cols]) {
                                *o += d;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let d = dy[0];
                if let Some(g) = self.acc(*x) {
                    g.iter_mut().for_each(|o| *o += d);
                }
            }
            Op::WeightedSum { x, w } => {
                let d = dy[0];
                if let Some(g) = self.acc(*x) {
                    for (o, &ww) in g.iter_mut().zip(w) {
                        *o += d * ww;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let scale = dy[0] / T::from_f64(targets.len() as f64);
                if let Some(g) = self.acc(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            g[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn acc_scaled(&mut self, v: Var, dy: &[T], sign: f64) {
        let s = T::from_f64(sign);
        if let Some(g) = self.acc(v) {
            for (o, &d) in g.iter_mut().zip(dy) {
                *o += d * s;
            }
        }
    }
}

/// In-place softmax of `row[..valid]`; entries at and after `valid` become 0.
fn softmax_row<T: Element>(row: &mut [T], valid: usize) {
    let max = row[..valid]
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for e in &mut row[..valid] {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in &mut row[..valid] {
        *e = *e / sum;
    }
    for e in &mut row[valid..] {
        *e = T::zero();
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::from_f64(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
