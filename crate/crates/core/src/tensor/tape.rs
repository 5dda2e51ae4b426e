use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Which entries of a square score matrix may be attended to.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// Row `i` sees columns `0..=i`.
    Causal,
    /// Row-major `allowed[i * n + j]`; every row must allow at least one column.
    Explicit(Vec<bool>),
}

impl Mask {
    fn allows(&self, n: usize, i: usize, j: usize) -> bool {
        match self {
            Mask::Causal => j <= i,
            Mask::Explicit(a) => a[i * n + j],
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Embedding { table: Var, indices: Vec<usize> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    Gelu(Var),
    Sin(Var),
    Exp(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Pinball { q: Var, target: f64, taus: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one reverse pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients for every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches node"),
            None => {
                let len = shape.iter().product();
                Tensor::new(shape, vec![0.0; len]).expect("zero gradient")
            }
        }
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// `c = a · b` (+ `beta · c`) with optional logical transposes; `a` is
/// `[m, k]` and `b` is `[k, n]` after transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices cover exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tape {
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    /// `[m, k] · [n, k]ᵀ -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", Tensor::matrix(c, r, out)?, Op::Transpose(a), rg)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, kind: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(op, t, kind, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, op: &'static str, x: Var, b: Var, kind: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        let bt = self.value(b);
        if bt.len() != c || bt.rows() != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(x).to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let xs = self.value(x).data();
        let bs = bt.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(xs[i * c + j], bs[j]));
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(b);
        self.push(op, t, kind, rg)
    }

    /// `[n, m] + [1, m]` with the row added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        self.row_broadcast("add_row", x, b, Op::AddRow(x, b), |a, b| a + b)
    }

    /// `[n, m] * [1, m]` elementwise per row.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var, TensorError> {
        self.row_broadcast("mul_row", x, g, Op::MulRow(x, g), |a, b| a * b)
    }

    fn map(&mut self, op: &'static str, x: Var, kind: Op, f: impl Fn(f64) -> f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(op, t, kind, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, TensorError> {
        self.map("scale", x, Op::Scale(x, s), |v| v * s)
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.map("offset", x, Op::Offset(x), |v| v + c)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map("gelu", x, Op::Gelu(x), gelu)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map("sin", x, Op::Sin(x), f64::sin)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map("softplus", x, Op::Softplus(x), softplus)
    }

    /// Rows of `table` gathered by `indices`: `[V, d] -> [len, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.dims2(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(TensorError::OutOfRange {
                    op: "embedding",
                    index: i,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::matrix(indices.len(), d, out)?;
        let rg = self.rg(table);
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        self.push("layer_norm", t, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Row-wise softmax of a square score matrix; masked entries are
    /// exactly zero and never enter the normalizer.
    pub fn softmax_masked(&mut self, x: Var, mask: Mask) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_masked",
                left: self.shape(x).to_vec(),
                right: vec![r, r],
            });
        }
        if let Mask::Explicit(a) = &mask {
            if a.len() != r * c {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_masked",
                    left: self.shape(x).to_vec(),
                    right: vec![a.len()],
                });
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let mut m = f64::NEG_INFINITY;
            for j in 0..c {
                if mask.allows(c, i, j) {
                    m = m.max(src[i * c + j]);
                }
            }
            if m == f64::NEG_INFINITY {
                return Err(TensorError::NonFinite { op: "softmax_masked" });
            }
            let mut s = 0.0;
            for j in 0..c {
                if mask.allows(c, i, j) {
                    let e = (src[i * c + j] - m).exp();
                    out[i * c + j] = e;
                    s += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        let rg = self.rg(x);
        self.push("softmax_masked", t, Op::Softmax(x), rg)
    }

    /// The causal (lower-triangular) special case of [`Tape::softmax_masked`].
    pub fn softmax_causal_masked(&mut self, x: Var) -> Result<Var, TensorError> {
        self.softmax_masked(x, Mask::Causal)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let r = self.dims2(parts[0]).0;
        for &p in parts {
            if self.dims2(p).0 != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims2(p).1;
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let c = self.dims2(parts[0]).1;
        for &p in parts {
            if self.dims2(p).1 != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c.max(1);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", Tensor::matrix(r, c, out)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        if start > end || end > c {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: end,
                bound: c,
            });
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.rg(x);
        self.push("slice_cols", Tensor::matrix(r, w, out)?, Op::SliceCols { x, start }, rg)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        if start > end || end > r {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: end,
                bound: r,
            });
        }
        let out = self.value(x).data()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        self.push("slice_rows", Tensor::matrix(end - start, c, out)?, Op::SliceRows { x, start }, rg)
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Unweighted sum over levels of `tau * max(0, y - q) + (1 - tau) * max(0, q - y)`.
    ///
    /// At a zero residual the subgradient takes the `tau - 1` branch, i.e.
    /// `d/dq = 1 - tau`.
    pub fn pinball(&mut self, q: Var, target: f64, taus: &[f64]) -> Result<Var, TensorError> {
        let qs = self.value(q).data();
        if qs.len() != taus.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pinball",
                left: self.shape(q).to_vec(),
                right: vec![taus.len()],
            });
        }
        let loss = qs
            .iter()
            .zip(taus)
            .map(|(&qk, &tau)| tau * (target - qk).max(0.0) + (1.0 - tau) * (qk - target).max(0.0))
            .sum();
        let rg = self.rg(q);
        self.push(
            "pinball",
            Tensor::scalar(loss),
            Op::Pinball {
                q,
                target,
                taus: taus.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar loss. A tape supports one reverse pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        if !lt.item().is_finite() {
            return Err(TensorError::NonFiniteLoss);
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // accumulate into an input's gradient buffer when it needs one
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                let bd = val(*b).data();
                let ad = val(*a).data();
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                acc(*a, &mut |buf| gemm(m, n, k, g, false, bd, true, buf, 1.0));
                acc(*b, &mut |buf| gemm(k, m, n, ad, true, g, false, buf, 1.0));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                let bd = val(*b).data();
                let ad = val(*a).data();
                // C = A Bᵀ: dA = dC · B, dB = dCᵀ · A
                acc(*a, &mut |buf| gemm(m, n, k, g, false, bd, false, buf, 1.0));
                acc(*b, &mut |buf| gemm(n, m, k, g, true, ad, false, buf, 1.0));
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                let c = val(*x).cols();
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                acc(*b, &mut |buf| {
                    for (i, d) in g.iter().enumerate() {
                        buf[i % c] += d;
                    }
                });
            }
            Op::MulRow(x, w) => {
                let c = val(*x).cols();
                let (xd, wd) = (val(*x).data(), val(*w).data());
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * wd[i % c];
                    }
                });
                acc(*w, &mut |buf| {
                    for (i, d) in g.iter().enumerate() {
                        buf[i % c] += d * xd[i];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += d * s)),
            Op::Offset(x) => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += d)),
            Op::Embedding { table, indices } => {
                let d = val(*table).cols();
                acc(*table, &mut |buf| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            buf[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |buf| {
                    for (i, inv) in inv_std.iter().enumerate() {
                        let gy = &g[i * c..(i + 1) * c];
                        let yy = &y[i * c..(i + 1) * c];
                        let mg = gy.iter().sum::<f64>() / c as f64;
                        let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            buf[i * c + j] += inv * (gy[j] - mg - yy[j] * mgy);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |buf| {
                    for i in 0..node.value.rows() {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            // masked entries have y = 0 and receive nothing
                            buf[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * gelu_grad(xd[i]);
                    }
                });
            }
            Op::Sin(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * xd[i].cos();
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
            Op::Softplus(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * sigmoid(xd[i]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc(p, &mut |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |buf| {
                        for j in 0..len {
                            buf[j] += g[off + j];
                        }
                    });
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                let r = node.value.rows();
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        for j in 0..w {
                            buf[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                acc(*x, &mut |buf| {
                    for (j, d) in g.iter().enumerate() {
                        buf[start * c + j] += d;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Pinball { q, target, taus } => {
                let qd = val(*q).data();
                acc(*q, &mut |buf| {
                    for k in 0..buf.len() {
                        let r = target - qd[k];
                        let dr = if r > 0.0 { taus[k] } else { taus[k] - 1.0 };
                        buf[k] -= g[0] * dr;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(3));
        let a = t.constant(m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = t.matmul(i, a).unwrap();
        assert_eq!(t.value(c), t.value(a));
    }

    #[test]
    fn shape_mismatch_names_both() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn softmax_first_row_attends_to_itself() {
        let mut t = Tape::new();
        let s = t.constant(m(3, 3, &[0.3, 9.0, -2.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
        let p = t.softmax_causal_masked(s).unwrap();
        let v = t.value(p);
        assert_eq!(v.get(0, 0), 1.0);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        for i in 0..3 {
            let s: f64 = (0..3).map(|j| v.get(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 4, &[3.7; 4]));
        let y = t.layer_norm(x, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn linear_gradient_is_input() {
        let mut t = Tape::new();
        let w = t.param(m(1, 3, &[0.5, -1.0, 2.0]));
        let x = t.constant(m(1, 3, &[4.0, 5.0, 6.0]));
        let p = t.mul(w, x).unwrap();
        let l = t.sum(p).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).data(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn square_gradient() {
        // (w - 3)^2 at w = 5 -> 2 (w - 3) = 4
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(5.0));
        let d = t.offset(w, -3.0).unwrap();
        let sq = t.mul(d, d).unwrap();
        let g = t.backward(sq).unwrap();
        assert_eq!(g.get(w).item(), 4.0);
    }

    #[test]
    fn second_backward_errors() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(1.0));
        let l = t.scale(w, 2.0).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.backward(l).unwrap_err(), TensorError::AlreadyBackpropagated);
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut t = Tape::new();
        let w = t.param(Tensor::zeros(2, 2));
        assert_eq!(t.backward(w).unwrap_err(), TensorError::NotScalar(vec![2, 2]));
    }

    #[test]
    fn non_finite_is_a_hard_error() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(1000.0));
        assert_eq!(t.exp(w).unwrap_err(), TensorError::NonFinite { op: "exp" });
    }

    #[test]
    fn pinball_kink_takes_tau_minus_one_branch() {
        let mut t = Tape::new();
        let q = t.param(Tensor::row(vec![10.0, 10.0]));
        let l = t.pinball(q, 10.0, &[0.25, 0.9]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let g = t.backward(l).unwrap();
        let gd = g.get(q);
        assert!((gd.data()[0] - 0.75).abs() < 1e-15);
        assert!((gd.data()[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_explicit() {
        let mut t = Tape::new();
        let s = t.param(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let p = t
            .softmax_masked(s, Mask::Explicit(vec![false, true, true, true]))
            .unwrap();
        assert_eq!(t.value(p).get(0, 0), 0.0);
        assert_eq!(t.value(p).get(0, 1), 1.0);
        let err = t.softmax_masked(s, Mask::Explicit(vec![false, false, true, true]));
        assert!(err.is_err());
    }

    #[test]
    fn deterministic_forward_backward() {
        let run = || {
            let mut t = Tape::new();
            let a = t.param(m(2, 3, &[0.1, 0.2, -0.3, 0.4, 0.5, 0.6]));
            let b = t.param(m(3, 2, &[1.0, -1.0, 0.5, 0.25, 2.0, 0.0]));
            let c = t.matmul(a, b).unwrap();
            let d = t.gelu(c).unwrap();
            let l = t.sum(d).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).item().to_bits(), g.get(a).into_data(), g.get(b).into_data())
        };
        assert_eq!(run(), run());
    }
}
