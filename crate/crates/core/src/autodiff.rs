//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes that do not
//! depend on a trainable leaf are treated as constants and skipped during the
//! backward sweep, so a frozen sub-network costs only its forward pass.

use std::collections::BTreeMap;

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type CustomBackward<T> = Box<dyn Fn(&Matrix<T>, &[&Matrix<T>]) -> Vec<Option<Matrix<T>>>>;

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    DivScalar(Var, Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T: Scalar> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const L2_NORM_EPS: f64 = 1e-12;

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let x3 = x * x * x;
    let inner = k * (x + a * x3);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = k * (T::one() + T::c(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Put every tensor of `params` on the tape; `trainable` decides which
    /// ones collect gradients.
    pub fn bind(&mut self, params: &ParamSet<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut map = BTreeMap::new();
        for (name, value) in params.iter() {
            let rg = trainable(name);
            let v = self.leaf(value.clone(), rg);
            if rg {
                self.params.push((name.to_string(), v));
            }
            map.insert(name.to_string(), v);
        }
        Bound { vars: map }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a 1×C row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        let rdata = r.data().to_vec();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&rdata) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Multiplies every row of `a` elementwise by the 1×C row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).data().to_vec();
        assert_eq!(self.value(row).rows(), 1);
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.len());
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Divides `a` by the 1×1 node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let d = self.value(s).item();
        let value = self.value(a).map(|x| x / d);
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::DivScalar(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Row-wise layer normalization with learned 1×C gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let eps = T::c(LAYER_NORM_EPS);
        let cf = T::from_usize(c).expect("width");
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[(i, j)] = h;
                out[(i, j)] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let eps = T::c(L2_NORM_EPS);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = (xv.row(i).iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(n);
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormRows { x, norms }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(av.rows(), len);
        for i in 0..av.rows() {
            out.row_mut(i).copy_from_slice(&av.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let out = Matrix::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Sum of several 1×1 nodes.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// An operation with a hand-written vector-Jacobian product. `backward`
    /// receives the output gradient and the input values and returns one
    /// optional gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Matrix<T>,
        backward: impl Fn(&Matrix<T>, &[&Matrix<T>]) -> Vec<Option<Matrix<T>>> + 'static,
    ) -> Var {
        let rg = inputs.iter().any(|&p| self.rg(p));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            rg,
        )
    }

    /// Reverse sweep from a 1×1 `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of the bound trainable parameters, by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Matrix<T>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(self.value(*v).rows(), self.value(*v).cols()));
                (name.clone(), g)
            })
            .collect()
    }

    fn send(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if self.rg(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.send(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.send(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.send(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.send(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.send(grads, *a, g.clone());
                if self.rg(*row) {
                    self.send(grads, *row, column_sums(g));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.send(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.rg(*b) {
                    self.send(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, &b) in ga.row_mut(i).iter_mut().zip(r.data()) {
                            *x *= b;
                        }
                    }
                    self.send(grads, *a, ga);
                }
                if self.rg(*row) {
                    self.send(grads, *row, column_sums(&hadamard(g, self.value(*a))));
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, g.scale(*s)),
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item();
                if self.rg(*a) {
                    self.send(grads, *a, g.map(|x| x / d));
                }
                if self.rg(*s) {
                    let gs = -crate::tensor::dot(g.data(), self.value(*a).data()) / (d * d);
                    self.send(grads, *s, Matrix::scalar(gs));
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| gi * gelu_parts(x).1)
                    .collect();
                self.send(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                    .collect();
                self.send(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Sigmoid(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gi, &y)| gi * y * (T::one() - y))
                    .collect();
                self.send(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, c) = g.shape();
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    self.send(grads, *gain, column_sums(&hadamard(g, xhat)));
                }
                if self.rg(*bias) {
                    self.send(grads, *bias, column_sums(g));
                }
                if self.rg(*x) {
                    let cf = T::from_usize(c).expect("width");
                    let mut gx = Matrix::zeros(n, c);
                    for i in 0..n {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let out = gx.row_mut(i);
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            out[j] = rstd[i] * (d - sum_d / cf - hr[j] * sum_dh / cf);
                        }
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let s = crate::tensor::dot(yr, gr);
                    for (o, (&yy, &gg)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yy * (gg - s);
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::L2NormRows { x, norms } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let n = norms[i];
                    let xr = xv.row(i);
                    let gr = g.row(i);
                    let xg = crate::tensor::dot(xr, gr);
                    let n3 = n * n * n;
                    for (o, (&xx, &gg)) in gx.row_mut(i).iter_mut().zip(xr.iter().zip(gr)) {
                        *o = gg / n - xx * xg / n3;
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let len = g.cols();
                for i in 0..g.rows() {
                    ga.row_mut(i)[*start..*start + len].copy_from_slice(g.row(i));
                }
                self.send(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let c = av.cols();
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                self.send(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Matrix::zeros(g.rows(), pc);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                        }
                        self.send(grads, p, gp);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.rg(p) {
                        let gp = Matrix::from_vec(pr, c, g.data()[off * c..(off + pr) * c].to_vec());
                        self.send(grads, p, gp);
                    }
                    off += pr;
                }
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.send(grads, *a, Matrix::filled(av.rows(), av.cols(), g.item()));
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Matrix<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let outs = backward(g, &values);
                for (&v, gi) in inputs.iter().zip(outs) {
                    if let Some(gi) = gi {
                        self.send(grads, v, gi);
                    }
                }
            }
        }
    }
}

/// Name → node lookup for the parameters bound on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

fn hadamard<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}
