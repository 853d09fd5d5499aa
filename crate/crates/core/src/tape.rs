//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every primitive executes eagerly and records one node. Nodes are appended
//! in forward order, so replaying them back to front visits the graph in
//! exact reverse topological order. A tape is built per training step and
//! consumed by a single [`Tape::backward`] call; a second call is an error.
//!
//! All reductions run in a fixed serial order, so a fixed seed gives
//! bit-identical forward values and gradients across runs in one process.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Lincomb { a: Var, b: Var, ca: T, cb: T },
    MulElem { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddRowBroadcast { a: Var, row: Var },
    AddToRow { a: Var, idx: usize, v: Var },
    Transpose { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, eps: T },
    Gelu { a: Var },
    Row { a: Var, idx: usize },
    SliceCols { a: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Sum { a: Var },
    Mean { a: Var },
    SoftCrossEntropy { logits: Var, targets: Var },
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf. Data is copied; the `requires_grad` flag
    /// decides whether backward will produce a gradient for it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("constant data length {}", data.len()),
            });
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node holds a consistent shape")
    }

    /// Gradient of the last backward pass, if the node participated.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // Outputs must stay finite whenever the inputs were finite. Only checked
    // in debug builds; skipping non-finite inputs keeps the divergence guard
    // reachable instead of panicking inside an op.
    #[cfg(debug_assertions)]
    fn check_finite(&self, inputs: &[Var], out: Var) {
        let inputs_finite = inputs
            .iter()
            .all(|v| self.nodes[v.0].data.iter().all(|x| x.is_finite()));
        if inputs_finite {
            assert!(
                self.nodes[out.0].data.iter().all(|x| x.is_finite()),
                "non-finite output from finite inputs at node {}",
                out.0
            );
        }
    }

    #[cfg(not(debug_assertions))]
    fn check_finite(&self, _inputs: &[Var], _out: Var) {}

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let out = self.push(
            Op::Matmul { a, b },
            vec![m, n],
            data,
            self.requires(a) || self.requires(b),
        );
        self.check_finite(&[a, b], out);
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        let out = self.push(Op::Add { a, b }, shape, data, rg);
        self.check_finite(&[a, b], out);
        Ok(out)
    }

    /// ca·a + cb·b, elementwise over identical shapes.
    pub fn lincomb(&mut self, ca: T, a: Var, cb: T, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "lincomb",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| ca * x + cb * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        let out = self.push(Op::Lincomb { a, b, ca, cb }, shape, data, rg);
        self.check_finite(&[a, b], out);
        Ok(out)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul_elem",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        let out = self.push(Op::MulElem { a, b }, shape, data, rg);
        self.check_finite(&[a, b], out);
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data: Vec<T> = self.value(a).iter().map(|&x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        let out = self.push(Op::Scale { a, c }, shape, data, rg);
        self.check_finite(&[a], out);
        Ok(out)
    }

    /// [R×C] matrix plus a length-C vector added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "add_row_broadcast")?;
        if self.shape(row) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let mut data = self.value(a).to_vec();
        let rv = self.value(row).to_vec();
        for i in 0..r {
            for (d, &v) in data[i * c..(i + 1) * c].iter_mut().zip(&rv) {
                *d += v;
            }
        }
        let rg = self.requires(a) || self.requires(row);
        let out = self.push(Op::AddRowBroadcast { a, row }, vec![r, c], data, rg);
        self.check_finite(&[a, row], out);
        Ok(out)
    }

    /// Copy of `a` with `v` (length C) added to row `idx` only.
    pub fn add_to_row(&mut self, a: Var, idx: usize, v: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "add_to_row")?;
        if idx >= r {
            return Err(Error::IndexOutOfRange { index: idx, len: r });
        }
        if self.shape(v) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_to_row",
                left: self.shape(a).to_vec(),
                right: self.shape(v).to_vec(),
            });
        }
        let mut data = self.value(a).to_vec();
        let vv = self.value(v).to_vec();
        for (d, &x) in data[idx * c..(idx + 1) * c].iter_mut().zip(&vv) {
            *d += x;
        }
        let rg = self.requires(a) || self.requires(v);
        let out = self.push(Op::AddToRow { a, idx, v }, vec![r, c], data, rg);
        self.check_finite(&[a, v], out);
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let data = transpose_raw(self.value(a), r, c);
        let rg = self.requires(a);
        let out = self.push(Op::Transpose { a }, vec![c, r], data, rg);
        Ok(out)
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "softmax_rows")?;
        let x = self.value(a);
        let mut data = vec![T::ZERO; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let out = &mut data[i * c..(i + 1) * c];
            softmax_into(row, out);
        }
        let rg = self.requires(a);
        let out = self.push(Op::SoftmaxRows { a }, vec![r, c], data, rg);
        self.check_finite(&[a], out);
        Ok(out)
    }

    /// Per-row normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims2(a, "layer_norm")?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(gain).to_vec(),
                right: vec![c],
            });
        }
        if !(eps > T::ZERO) {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let x = self.value(a);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut data = vec![T::ZERO; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.requires(a) || self.requires(gain) || self.requires(bias);
        let out = self.push(Op::LayerNorm { a, gain, bias, eps }, vec![r, c], data, rg);
        self.check_finite(&[a, gain, bias], out);
        Ok(out)
    }

    /// GELU, tanh approximation:
    /// 0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³))).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<T> = self.value(a).iter().map(|&x| gelu_value(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        let out = self.push(Op::Gelu { a }, shape, data, rg);
        self.check_finite(&[a], out);
        Ok(out)
    }

    /// Extract row `idx` of a matrix as a [1×C] matrix.
    pub fn row(&mut self, a: Var, idx: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "row")?;
        if idx >= r {
            return Err(Error::IndexOutOfRange { index: idx, len: r });
        }
        let data = self.value(a)[idx * c..(idx + 1) * c].to_vec();
        let rg = self.requires(a);
        Ok(self.push(Op::Row { a, idx }, vec![1, c], data, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: c,
            });
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let rg = self.requires(a);
        Ok(self.push(Op::SliceCols { a, start, len }, vec![r, len], data, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total = 0usize;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p)[1];
                data.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![r, total],
            data,
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut total = 0usize;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += pr;
        }
        let mut data = Vec::with_capacity(total * c);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            vec![total, c],
            data,
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::ZERO;
        for &x in self.value(a) {
            acc += x;
        }
        let rg = self.requires(a);
        Ok(self.push(Op::Sum { a }, vec![1], vec![acc], rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let mut acc = T::ZERO;
        for &x in self.value(a) {
            acc += x;
        }
        let v = acc / T::from_f64(n as f64);
        let rg = self.requires(a);
        Ok(self.push(Op::Mean { a }, vec![1], vec![v], rg))
    }

    /// Mean over rows of −Σ_c t_c · log softmax(z)_c. Targets must be a
    /// constant whose rows sum to 1 within 1e-4.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (r, c) = self.dims2(logits, "soft_cross_entropy")?;
        if self.shape(targets) != [r, c] {
            return Err(Error::ShapeMismatch {
                op: "soft_cross_entropy",
                left: self.shape(logits).to_vec(),
                right: self.shape(targets).to_vec(),
            });
        }
        if self.requires(targets) {
            return Err(Error::InvalidArgument(
                "soft_cross_entropy targets must be constant".into(),
            ));
        }
        let t = self.value(targets);
        for i in 0..r {
            let mut s = 0.0f64;
            for j in 0..c {
                s += t[i * c + j].to_f64();
            }
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!(
                    "soft_cross_entropy target row {i} sums to {s}, expected 1"
                )));
            }
        }
        let z = self.value(logits);
        let mut acc = T::ZERO;
        for i in 0..r {
            let zrow = &z[i * c..(i + 1) * c];
            let trow = &t[i * c..(i + 1) * c];
            let lse = log_sum_exp(zrow);
            let mut row_loss = T::ZERO;
            for j in 0..c {
                row_loss += trow[j] * (lse - zrow[j]);
            }
            acc += row_loss;
        }
        let v = acc / T::from_f64(r as f64);
        let rg = self.requires(logits);
        let out = self.push(Op::SoftCrossEntropy { logits, targets }, vec![1], vec![v], rg);
        self.check_finite(&[logits, targets], out);
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// `requires_grad` node reachable from the loss; requires-grad leaves
    /// that did not participate hold zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(vec![T::ZERO; n.data.len()])
                } else {
                    None
                }
            })
            .collect();
        if self.grads[loss.0].is_none() {
            // Loss does not depend on any trainable leaf; nothing to do.
            return Ok(());
        }
        self.grads[loss.0].as_mut().unwrap()[0] = T::ONE;

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let dy = self.grads[i].take().unwrap();
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: &[T]) {
        if let Some(g) = self.grads[v.0].as_mut() {
            for (gi, &d) in g.iter_mut().zip(delta) {
                *gi += d;
            }
        }
    }

    fn accum_at(&mut self, v: Var, offset: usize, delta: &[T]) {
        if let Some(g) = self.grads[v.0].as_mut() {
            for (gi, &d) in g[offset..offset + delta.len()].iter_mut().zip(delta) {
                *gi += d;
            }
        }
    }

    fn backprop_node(&mut self, i: usize, dy: &[T]) {
        // Ops only reference earlier nodes, so reads below never alias dy.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a.0].shape[0];
                let k = self.nodes[a.0].shape[1];
                let n = self.nodes[b.0].shape[1];
                if self.grads[a.0].is_some() {
                    let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                    let da = matmul_raw(dy, &bt, m, n, k);
                    self.accum(a, &da);
                }
                if self.grads[b.0].is_some() {
                    let adata = &self.nodes[a.0].data;
                    let mut db = vec![T::ZERO; k * n];
                    for r in 0..m {
                        for kk in 0..k {
                            let aik = adata[r * k + kk];
                            let dst = &mut db[kk * n..(kk + 1) * n];
                            let src = &dy[r * n..(r + 1) * n];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += aik * s;
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, dy);
                self.accum(b, dy);
            }
            Op::Lincomb { a, b, ca, cb } => {
                let (a, b, ca, cb) = (*a, *b, *ca, *cb);
                let da: Vec<T> = dy.iter().map(|&d| ca * d).collect();
                let db: Vec<T> = dy.iter().map(|&d| cb * d).collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::MulElem { a, b } => {
                let (a, b) = (*a, *b);
                if self.grads[a.0].is_some() {
                    let da: Vec<T> = dy
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&d, &x)| d * x)
                        .collect();
                    self.accum(a, &da);
                }
                if self.grads[b.0].is_some() {
                    let db: Vec<T> = dy
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&d, &x)| d * x)
                        .collect();
                    self.accum(b, &db);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<T> = dy.iter().map(|&d| c * d).collect();
                self.accum(a, &da);
            }
            Op::AddRowBroadcast { a, row } => {
                let (a, row) = (*a, *row);
                self.accum(a, dy);
                if self.grads[row.0].is_some() {
                    let c = self.nodes[row.0].data.len();
                    let r = dy.len() / c;
                    let mut dr = vec![T::ZERO; c];
                    for i in 0..r {
                        for j in 0..c {
                            dr[j] += dy[i * c + j];
                        }
                    }
                    self.accum(row, &dr);
                }
            }
            Op::AddToRow { a, idx, v } => {
                let (a, idx, v) = (*a, *idx, *v);
                self.accum(a, dy);
                if self.grads[v.0].is_some() {
                    let c = self.nodes[v.0].data.len();
                    let dv = dy[idx * c..(idx + 1) * c].to_vec();
                    self.accum(v, &dv);
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                let r = self.nodes[a.0].shape[0];
                let c = self.nodes[a.0].shape[1];
                // dy has shape [c, r]; transpose it back.
                let da = transpose_raw(dy, c, r);
                self.accum(a, &da);
            }
            Op::SoftmaxRows { a } => {
                let a = *a;
                if self.grads[a.0].is_none() {
                    return;
                }
                let c = self.nodes[i].shape[1];
                let r = self.nodes[i].shape[0];
                let p = &self.nodes[i].data;
                let mut da = vec![T::ZERO; r * c];
                for rr in 0..r {
                    let prow = &p[rr * c..(rr + 1) * c];
                    let dyrow = &dy[rr * c..(rr + 1) * c];
                    let mut dot = T::ZERO;
                    for j in 0..c {
                        dot += prow[j] * dyrow[j];
                    }
                    for j in 0..c {
                        da[rr * c + j] = prow[j] * (dyrow[j] - dot);
                    }
                }
                self.accum(a, &da);
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let (a, gain, bias, eps) = (*a, *gain, *bias, *eps);
                let r = self.nodes[i].shape[0];
                let c = self.nodes[i].shape[1];
                let x = &self.nodes[a.0].data;
                let g = &self.nodes[gain.0].data;
                let inv_c = T::ONE / T::from_f64(c as f64);
                let mut da = vec![T::ZERO; r * c];
                let mut dgain = vec![T::ZERO; c];
                let mut dbias = vec![T::ZERO; c];
                for rr in 0..r {
                    let xrow = &x[rr * c..(rr + 1) * c];
                    let dyrow = &dy[rr * c..(rr + 1) * c];
                    let (mean, inv_std) = row_moments(xrow, eps);
                    let mut mean_gd = T::ZERO;
                    let mut mean_gdy = T::ZERO;
                    let mut yhat = vec![T::ZERO; c];
                    for j in 0..c {
                        yhat[j] = (xrow[j] - mean) * inv_std;
                        let gd = g[j] * dyrow[j];
                        mean_gd += gd;
                        mean_gdy += gd * yhat[j];
                        dgain[j] += dyrow[j] * yhat[j];
                        dbias[j] += dyrow[j];
                    }
                    mean_gd *= inv_c;
                    mean_gdy *= inv_c;
                    for j in 0..c {
                        let gd = g[j] * dyrow[j];
                        da[rr * c + j] = (gd - mean_gd - yhat[j] * mean_gdy) * inv_std;
                    }
                }
                self.accum(a, &da);
                self.accum(gain, &dgain);
                self.accum(bias, &dbias);
            }
            Op::Gelu { a } => {
                let a = *a;
                if self.grads[a.0].is_none() {
                    return;
                }
                let da: Vec<T> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| gelu_derivative(x) * d)
                    .collect();
                self.accum(a, &da);
            }
            Op::Row { a, idx } => {
                let (a, idx) = (*a, *idx);
                self.accum_at(a, idx * dy.len(), dy);
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                if self.grads[a.0].is_none() {
                    return;
                }
                let c = self.nodes[a.0].shape[1];
                let r = self.nodes[a.0].shape[0];
                let mut da = vec![T::ZERO; r * c];
                for rr in 0..r {
                    for j in 0..len {
                        da[rr * c + start + j] = dy[rr * len + j];
                    }
                }
                self.accum(a, &da);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let r = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut offset = 0usize;
                for p in parts {
                    let pc = self.nodes[p.0].shape[1];
                    if self.grads[p.0].is_some() {
                        let mut dp = vec![T::ZERO; r * pc];
                        for rr in 0..r {
                            dp[rr * pc..(rr + 1) * pc]
                                .copy_from_slice(&dy[rr * total + offset..rr * total + offset + pc]);
                        }
                        self.accum(p, &dp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0usize;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    if self.grads[p.0].is_some() {
                        let dp = dy[offset..offset + len].to_vec();
                        self.accum(p, &dp);
                    }
                    offset += len;
                }
            }
            Op::Sum { a } => {
                let a = *a;
                if self.grads[a.0].is_none() {
                    return;
                }
                let da = vec![dy[0]; self.nodes[a.0].data.len()];
                self.accum(a, &da);
            }
            Op::Mean { a } => {
                let a = *a;
                if self.grads[a.0].is_none() {
                    return;
                }
                let n = self.nodes[a.0].data.len();
                let da = vec![dy[0] / T::from_f64(n as f64); n];
                self.accum(a, &da);
            }
            Op::SoftCrossEntropy { logits, targets } => {
                let (logits, targets) = (*logits, *targets);
                if self.grads[logits.0].is_none() {
                    return;
                }
                let r = self.nodes[logits.0].shape[0];
                let c = self.nodes[logits.0].shape[1];
                let z = &self.nodes[logits.0].data;
                let t = &self.nodes[targets.0].data;
                let scale = dy[0] / T::from_f64(r as f64);
                let mut dz = vec![T::ZERO; r * c];
                let mut prow = vec![T::ZERO; c];
                for rr in 0..r {
                    softmax_into(&z[rr * c..(rr + 1) * c], &mut prow);
                    for j in 0..c {
                        dz[rr * c + j] = (prow[j] - t[rr * c + j]) * scale;
                    }
                }
                self.accum(logits, &dz);
            }
        }
    }
}

// ── shared kernels ─────────────────────────────────────────────────────

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

fn transpose_raw<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut max = row[0];
    for &x in row {
        max = max.maximum(x);
    }
    let mut denom = T::ZERO;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut max = row[0];
    for &x in row {
        max = max.maximum(x);
    }
    let mut acc = T::ZERO;
    for &x in row {
        acc += (x - max).exp();
    }
    max + acc.ln()
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::ZERO;
    for &x in row {
        mean += x;
    }
    mean = mean / n;
    let mut var = T::ZERO;
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    var = var / n;
    (mean, T::ONE / (var + eps).sqrt())
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_SQRT_2_OVER_PI);
    let c1 = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_SQRT_2_OVER_PI);
    let c1 = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c0 * (T::ONE + three * c1 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        // [[1,2],[3,4]] × [[5,6],[7,8]] worked by hand:
        // [1·5+2·7, 1·6+2·8; 3·5+4·7, 3·6+4·8] = [[19,22],[43,50]]
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&t2(2, 3, &[0.0; 6]));
        let b = tape.leaf(&t2(2, 3, &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(2, 2, &[0.0, 0.0, (2.0f32).ln(), 0.0]));
        let p = tape.softmax_rows(x).unwrap();
        let v = tape.value(p);
        assert!((v[0] - 0.5).abs() < 1e-6 && (v[1] - 0.5).abs() < 1e-6);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-6, "{}", v[2]);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_large_entries_no_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(1, 2, &[1000.0, 0.0]));
        let p = tape.softmax_rows(x).unwrap();
        let v = tape.value(p);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-6 && v[1] < 1e-6);
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let gain = tape.leaf(&Tensor::ones(&[2]));
        let bias = tape.leaf(&Tensor::zeros(&[2]));
        // constant row: eps keeps it finite and the output is the bias
        let c = tape.leaf(&t2(1, 2, &[3.0, 3.0]));
        let y = tape.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-6));
        // [1,-1]: zero mean, unit std
        let x = tape.leaf(&t2(1, 2, &[1.0, -1.0]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0).abs() < 1e-2 && (v[1] + 1.0).abs() < 1e-2);
        // zero gain broadcasts bias
        let g0 = tape.leaf(&Tensor::zeros(&[2]));
        let bias2 = tape.leaf(&Tensor::from_vec(vec![2], vec![0.5, -0.5]).unwrap());
        let y = tape.layer_norm(x, g0, bias2, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.5, -0.5]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            &Tensor::from_vec(vec![1, 3], vec![1.0, -2.0, 3.0])
                .unwrap()
                .with_grad(),
        );
        let sq = tape.mul_elem(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_cross_entropy_is_p_minus_y() {
        let mut tape = Tape::new();
        let z = tape.leaf(
            &Tensor::from_vec(vec![1, 3], vec![0.3, -0.7, 1.1])
                .unwrap()
                .with_grad(),
        );
        let t = tape
            .constant(vec![1, 3], vec![0.0, 1.0, 0.0])
            .unwrap();
        let loss = tape.soft_cross_entropy(z, t).unwrap();
        tape.backward(loss).unwrap();
        let mut p = vec![0.0f32; 3];
        softmax_into(&[0.3, -0.7, 1.1], &mut p);
        let g = tape.grad(z).unwrap();
        for j in 0..3 {
            let expect = p[j] - [0.0, 1.0, 0.0][j];
            assert!((g[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1], vec![2.0]).unwrap().with_grad());
        let unused = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap().with_grad());
        let loss = tape.mul_elem(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0f32).with_grad());
        let loss = tape.mul_elem(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0f32, 2.0]).unwrap().with_grad());
        let y = tape.mul_elem(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn tape_is_linear_in_the_loss() {
        // backward of (l1 + l2) equals backward of l1 plus backward of l2
        let xs = Tensor::from_vec(vec![1, 4], vec![0.5, -1.5, 2.0, 0.25])
            .unwrap()
            .with_grad();
        let build = |which: u8| -> Vec<f32> {
            let mut tape = Tape::new();
            let x = tape.leaf(&xs);
            let sq = tape.mul_elem(x, x).unwrap();
            let l1 = tape.sum(sq).unwrap();
            let g = tape.gelu(x).unwrap();
            let l2 = tape.mean(g).unwrap();
            let loss = match which {
                0 => tape.add(l1, l2).unwrap(),
                1 => l1,
                _ => l2,
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let combined = build(0);
        let g1 = build(1);
        let g2 = build(2);
        for j in 0..4 {
            assert!((combined[j] - (g1[j] + g2[j])).abs() < 1e-6);
        }
    }
}
