use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{NumericsError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    ClampMin(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherCols(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::ClampMin(..) => "clamp_min",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherCols(..) => "gather_cols",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    label: Option<String>,
}

/// Define-by-run computation graph.
///
/// Every operation evaluates eagerly and records itself, so building the
/// graph *is* the forward pass. All values are matrices; scalars are 1×1.
/// Any operation whose result contains NaN or ±Inf fails with
/// [`NumericsError::NonFinite`] instead of recording the node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Reverse-mode gradients of one scalar output.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.rank() == 2 {
        t
    } else {
        let shape = vec![t.rows(), t.cols()];
        let shape = if t.rank() == 1 { vec![1, t.len()] } else { shape };
        t.reshaped(shape).expect("same element count")
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Constant leaf. Rank-1 tensors become row vectors.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, Op::Input, None)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, Op::Param, None)
    }

    pub fn named_param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        self.push_leaf(t, Op::Param, Some(name.into()))
    }

    pub fn constant(&mut self, v: f64) -> Var {
        self.input(Tensor::scalar(v))
    }

    fn push_leaf(&mut self, t: Tensor, op: Op, label: Option<String>) -> Var {
        let needs_grad = matches!(op, Op::Param);
        self.nodes.push(Node { value: as_matrix(t), op, needs_grad, label });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: (usize, usize), data: Vec<f64>, inputs: &[Var]) -> Result<Var, NumericsError> {
        let node = self.nodes.len();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { node, op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::from_parts_unchecked(vec![shape.0, shape.1], data);
        self.nodes.push(Node { value, op, needs_grad, label: None });
        Ok(Var(node))
    }

    fn mismatch(&self, op: &'static str, detail: String) -> NumericsError {
        NumericsError::ShapeMismatch { node: self.nodes.len(), op, detail }
    }

    fn describe(&self, v: Var) -> String {
        let n = &self.nodes[v.0];
        match &n.label {
            Some(l) => format!("{l}{:?}", n.value.shape()),
            None => format!("#{}{:?}", v.0, n.value.shape()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", format!("{} x {}", self.describe(a), self.describe(b))));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), (m, n), out, &[a, b])
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op.name(), format!("{} vs {}", self.describe(a), self.describe(b))));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a);
        self.push(op, shape, out, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn zip_row(&mut self, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, NumericsError> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(self.mismatch(op.name(), format!("{} vs row {}", self.describe(a), self.describe(row))));
        }
        let r = self.value(row).data();
        let mut out = Vec::with_capacity(m * n);
        for chunk in self.value(a).data().chunks_exact(n) {
            out.extend(chunk.iter().zip(r).map(|(&x, &y)| f(x, y)));
        }
        self.push(op, (m, n), out, &[a, row])
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.zip_row(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// Multiplies every row of an m×n matrix elementwise by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.zip_row(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, NumericsError> {
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a);
        self.push(op, shape, out, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.map(a, Op::Shift(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map(a, Op::Abs(a), f64::abs)
    }

    /// `max(a, floor)` elementwise; the gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, NumericsError> {
        self.map(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(self.mismatch("concat_cols", "no inputs".into()));
        };
        let m = self.shape(first).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != m) {
            return Err(self.mismatch("concat_cols", format!("{} has != {m} rows", self.describe(bad))));
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), (m, n), out, parts)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.shape(a);
        if start >= end || end > n {
            return Err(self.mismatch("slice_cols", format!("{start}..{end} of {}", self.describe(a))));
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&self.value(a).row(i)[start..end]);
        }
        self.push(Op::SliceCols(a, start), (m, end - start), out, &[a])
    }

    /// Selects (possibly repeated) columns by index.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (m, n) = self.shape(a);
        if idx.is_empty() || idx.iter().any(|&j| j >= n) {
            return Err(self.mismatch("gather_cols", format!("indices {idx:?} of {}", self.describe(a))));
        }
        let mut out = Vec::with_capacity(m * idx.len());
        for i in 0..m {
            let row = self.value(a).row(i);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        self.push(Op::GatherCols(a, idx.to_vec()), (m, idx.len()), out, &[a])
    }

    /// Row-major reinterpretation with the same number of entries.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.shape(a);
        if m * n != rows * cols {
            return Err(self.mismatch("reshape", format!("{} to [{rows}, {cols}]", self.describe(a))));
        }
        let out = self.value(a).data().to_vec();
        self.push(Op::Reshape(a), (rows, cols), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), (1, 1), vec![s], &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::MeanAll(a), (1, 1), vec![s], &[a])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients, NumericsError> {
        let out_val = self.value(out);
        if out_val.len() != 1 {
            return Err(NumericsError::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.nodes[i].op, Op::Param))
                    .map(|d| Tensor::from_parts_unchecked(self.nodes[i].value.shape().to_vec(), d))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Gradients of a scalar output for each listed leaf; leaves the output
    /// does not depend on get an exact zero tensor.
    pub fn gradients(&self, out: Var, params: &[Var]) -> Result<Vec<Tensor>, NumericsError> {
        let g = self.backward(out)?;
        Ok(params
            .iter()
            .map(|&p| g.get(p).cloned().unwrap_or_else(|| Tensor::zeros_like(self.value(p))))
            .collect())
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |da| gemm_nt_acc(g, bv, da, m, n, k));
                self.accumulate(grads, *b, |db| gemm_tn_acc(av, g, db, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| zip3(d, g, bv, |g, b| g * b));
                self.accumulate(grads, *b, |d| zip3(d, g, av, |g, a| g * a));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| zip3(d, g, bv, |g, b| g / b));
                self.accumulate(grads, *b, |d| {
                    for ((d, &g), (&a, &b)) in d.iter_mut().zip(g).zip(av.iter().zip(bv)) {
                        *d -= g * a / (b * b);
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.shape(*a).1;
                self.accumulate(grads, *a, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *row, |d| {
                    for chunk in g.chunks_exact(n) {
                        axpy(d, chunk, 1.0);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = self.shape(*a).1;
                let (av, rv) = (self.value(*a).data(), self.value(*row).data());
                self.accumulate(grads, *a, |d| {
                    for (dc, gc) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        zip3(dc, gc, rv, |g, r| g * r);
                    }
                });
                self.accumulate(grads, *row, |d| {
                    for (gc, ac) in g.chunks_exact(n).zip(av.chunks_exact(n)) {
                        zip3(d, gc, ac, |g, a| g * a);
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |d| axpy(d, g, *c)),
            Op::Shift(a) | Op::Reshape(a) => self.accumulate(grads, *a, |d| axpy(d, g, 1.0)),
            Op::Tanh(a) => self.accumulate(grads, *a, |d| zip3(d, g, y.data(), |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |d| zip3(d, g, y.data(), |g, y| g * y * (1.0 - y))),
            Op::Exp(a) => self.accumulate(grads, *a, |d| zip3(d, g, y.data(), |g, y| g * y)),
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| zip3(d, g, av, |g, x| g / x));
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| zip3(d, g, av, |g, x| 2.0 * g * x));
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    zip3(d, g, av, |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                });
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| zip3(d, g, av, |g, x| if x > *floor { g } else { 0.0 }));
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (y.rows(), y.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.accumulate(grads, p, |d| {
                        for i in 0..m {
                            axpy(&mut d[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.shape(*a).1;
                let w = y.cols();
                self.accumulate(grads, *a, |d| {
                    for (i, gc) in g.chunks_exact(w).enumerate() {
                        axpy(&mut d[i * n + start..i * n + start + w], gc, 1.0);
                    }
                });
            }
            Op::GatherCols(a, idx) => {
                let n = self.shape(*a).1;
                self.accumulate(grads, *a, |d| {
                    for (i, gc) in g.chunks_exact(idx.len()).enumerate() {
                        for (&j, &gv) in idx.iter().zip(gc) {
                            d[i * n + j] += gv;
                        }
                    }
                });
            }
            Op::SumAll(a) => self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::MeanAll(a) => {
                let scale = g[0] / self.value(*a).len() as f64;
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += scale));
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(d: &mut [f64], x: &[f64], alpha: f64) {
    for (d, &x) in d.iter_mut().zip(x) {
        *d += alpha * x;
    }
}

fn zip3(d: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &o) in d.iter_mut().zip(g).zip(other) {
        *d += f(g, o);
    }
}
