//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value produced during one forward
//! pass. In recording mode each node also keeps what its adjoint needs;
//! [`Tape::backward`] walks the nodes from the loss back to the first leaf.
//! Nodes whose inputs never touch a trainable parameter are skipped.

use super::params::{ParamId, ParamStore};
use super::tensor::{check_shape, numel};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Record,
    Inference,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    ClampMin(Var, f64),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    batch: usize,
    seq: usize,
    heads: usize,
    width: usize,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {shape:?}"))),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c[m×n] (+)= a · b` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe in-bounds views of the given slices, checked by callers.
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

impl Tape {
    /// A tape that records adjoint information.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Record,
        }
    }

    /// A tape that only evaluates; `backward` on it always fails.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Inference,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.mode == Mode::Record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold valid shapes")
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.mode == Mode::Record && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        check_shape("constant", shape, values.len())?;
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    /// Input whose gradient is wanted even though it is not a stored parameter.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let rec = self.mode == Mode::Record;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            op: Op::Leaf,
            needs_grad: rec,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bring a stored parameter onto the tape. Gradients flow back to it only when it is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let needs = self.mode == Mode::Record && t.is_trainable();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            op: if needs { Op::Param(id) } else { Op::Leaf },
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: [{m}x{k}] · [{k2}x{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            &mut out,
            false,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`; the layout of weights stored as `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_t", self.shape(a))?;
        let (n, k2) = dims2("matmul_t", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("inner dimensions differ: [{m}x{k}] · [{n}x{k2}]ᵀ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (1, k as isize),
            &mut out,
            false,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), needs))
    }

    /// `x[r×c] + bias[c]`, the bias repeated on every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = dims2("add_row", self.shape(x))?;
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for rows of width {c}", self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let needs = self.needs(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), needs)
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v.max(floor)).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::ClampMin(x, floor), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape("reshape", shape, self.value(x).len())?;
        let out = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), needs))
    }

    /// Row-wise layer normalisation over the last dimension of a matrix.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (r, c) = dims2("layer_norm", self.shape(x))?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {c}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(vec![r, c], out, op, needs))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let xs = self.value(x);
        if xs.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical("softmax input contains NaN".into()));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| xs[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (xs[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, needs))
    }

    /// Log-softmax over the rows of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = dims2("log_softmax", self.shape(x))?;
        let xs = self.value(x);
        if xs.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical("log_softmax input contains NaN".into()));
        }
        let out = xs
            .chunks(c)
            .flat_map(|row| {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                row.iter().map(move |v| v - lse)
            })
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x), needs))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", format!("{sa:?} ++ {sb:?} along axis {axis}")));
        }
        let (outer, la, inner) = split_axis(&sa, axis);
        let lb = sb[axis];
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            out.extend_from_slice(&va[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&vb[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Concat { a, b, axis }, needs))
    }

    /// Select rows of a matrix (repeats allowed). The adjoint scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2("gather_rows", self.shape(x))?;
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("row index {bad} out of range for {r} rows")));
        }
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        let xs = self.value(x);
        let out = idx.iter().flat_map(|&i| xs[i * c..(i + 1) * c].iter().copied()).collect();
        let needs = self.needs(&[x]);
        let op = Op::GatherRows {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(vec![idx.len(), c], out, op, needs))
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let rows = self.shape(table)[0];
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {rows}")));
        }
        self.gather_rows(table, ids)
    }

    /// One element per row: `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2("pick", self.shape(x))?;
        if idx.len() != r {
            return Err(Error::shape("pick", format!("{} indices for {r} rows", idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::invalid(format!("column {bad} out of range for width {c}")));
        }
        let xs = self.value(x);
        let out = idx.iter().enumerate().map(|(i, &j)| xs[i * c + j]).collect();
        let needs = self.needs(&[x]);
        let op = Op::Pick {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(vec![r], out, op, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), needs)
    }

    /// Sum over the columns of each row: `[r×c] -> [r]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("row_sum", self.shape(x))?;
        let out = self.value(x).chunks(c).map(|row| row.iter().sum()).collect();
        let needs = self.needs(&[x]);
        Ok(self.push(vec![r], out, Op::RowSum(x), needs))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[batch·seq, width]`; head `h` owns columns
    /// `h·dh .. (h+1)·dh`. `key_mask[b·seq + j]` admits key `j` of sequence `b`.
    /// Every sequence must admit at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (rows, width) = dims2("attention", self.shape(q))?;
        if self.shape(k) != [rows, width] || self.shape(v) != [rows, width] {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if batch == 0 || rows % batch != 0 || heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{rows} rows, width {width} cannot split into batch {batch}, heads {heads}"),
            ));
        }
        if key_mask.len() != rows {
            return Err(Error::shape("attention", format!("mask of {} for {rows} rows", key_mask.len())));
        }
        let seq = rows / batch;
        if key_mask.chunks(seq).any(|m| !m.iter().any(|&x| x)) {
            return Err(Error::invalid("attention mask admits no key for some sequence"));
        }
        let geom = AttnGeom {
            batch,
            seq,
            heads,
            width,
        };
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * width + col..][..dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if mask[j] {
                            let kj = &ks[(b * seq + j) * width + col..][..dh];
                            let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                            scores[j] = s;
                            mx = mx.max(s);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut z = 0.0;
                    for j in 0..seq {
                        if mask[j] {
                            let e = (scores[j] - mx).exp();
                            p[j] = e;
                            z += e;
                        }
                    }
                    let o = &mut out[(b * seq + i) * width + col..][..dh];
                    for j in 0..seq {
                        if mask[j] {
                            p[j] /= z;
                            let vj = &vs[(b * seq + j) * width + col..][..dh];
                            o.iter_mut().zip(vj).for_each(|(o, v)| *o += p[j] * v);
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            geom,
            mask: if needs { key_mask.to_vec() } else { Vec::new() },
            probs: if needs { probs } else { Vec::new() },
        };
        Ok(self.push(vec![rows, width], out, op, needs))
    }

    fn check_loss(&self, loss: Var) -> Result<()> {
        if self.mode != Mode::Record {
            return Err(Error::invalid("backward on an inference tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        Ok(())
    }

    /// Adjoints of every node with respect to `loss`. Nodes that do not
    /// depend on a trainable parameter or marked input get `None`.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        self.check_loss(loss)?;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Accumulate `∂loss/∂p` into every trainable parameter that reached the loss.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        // Adds into an input's adjoint buffer, allocating on first touch.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let n_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, (n as isize, 1), self.value(*b), (1, n as isize), ga, true);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a), (1, k as isize), g, (n as isize, 1), gb, true);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if wants(*a) {
                    // dA = dC · B
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, (n as isize, 1), self.value(*b), (k as isize, 1), ga, true);
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    let gb = slot(grads, *b, n * k);
                    gemm(n, m, k, g, (1, n as isize), self.value(*a), (k as isize, 1), gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(grads, v, g.len()).iter_mut().zip(g).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if wants(*bias) {
                    let c = n_of(*bias);
                    let gb = slot(grads, *bias, c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(s, d)| *s += c * d);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * gelu_grad(xv[i]);
                }
            }
            Op::ClampMin(x, floor) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > *floor {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Reshape(x) => {
                slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(s, d)| *s += d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = n_of(*gain);
                let r = g.len() / c;
                let gv = self.value(*gain);
                if wants(*gain) {
                    let gg = slot(grads, *gain, c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, *x, r * c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let h = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] * (dxhat[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let gx = slot(grads, *x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.shape[1];
                let y = &node.value;
                let gx = slot(grads, *x, g.len());
                for (i, row) in g.chunks(c).enumerate() {
                    let s: f64 = row.iter().sum();
                    for j in 0..c {
                        gx[i * c + j] += row[j] - y[i * c + j].exp() * s;
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let (outer, la, inner) = split_axis(self.shape(*a), *axis);
                let lb = self.shape(*b)[*axis];
                let (na, nb) = (la * inner, lb * inner);
                if wants(*a) {
                    let ga = slot(grads, *a, outer * na);
                    for o in 0..outer {
                        let src = &g[o * (na + nb)..][..na];
                        ga[o * na..][..na].iter_mut().zip(src).for_each(|(s, d)| *s += d);
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, outer * nb);
                    for o in 0..outer {
                        let src = &g[o * (na + nb) + na..][..nb];
                        gb[o * nb..][..nb].iter_mut().zip(src).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.shape[1];
                let gx = slot(grads, *x, n_of(*x));
                for (o, &i) in idx.iter().enumerate() {
                    gx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[o * c..(o + 1) * c])
                        .for_each(|(s, d)| *s += d);
                }
            }
            Op::Pick { x, idx } => {
                let c = self.shape(*x)[1];
                let gx = slot(grads, *x, n_of(*x));
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * c + j] += g[i];
                }
            }
            Op::Sum(x) => {
                slot(grads, *x, n_of(*x)).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Mean(x) => {
                let n = n_of(*x);
                let d = g[0] / n as f64;
                slot(grads, *x, n).iter_mut().for_each(|s| *s += d);
            }
            Op::RowSum(x) => {
                let c = self.shape(*x)[1];
                let gx = slot(grads, *x, n_of(*x));
                for (i, row) in gx.chunks_mut(c).enumerate() {
                    row.iter_mut().for_each(|s| *s += g[i]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *geom, mask, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        mask: &[bool],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttnGeom {
            batch,
            seq,
            heads,
            width,
        } = geom;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = batch * seq * width;
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; n];
        let mut gk = vec![0.0; n];
        let mut gv = vec![0.0; n];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            let m = &mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let go = &g[(b * seq + i) * width + col..][..dh];
                    let mut dot = 0.0;
                    for j in 0..seq {
                        if m[j] {
                            let vj = &vs[(b * seq + j) * width + col..][..dh];
                            dp[j] = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                            dot += p[j] * dp[j];
                            let gvj = &mut gv[(b * seq + j) * width + col..][..dh];
                            gvj.iter_mut().zip(go).for_each(|(s, d)| *s += p[j] * d);
                        }
                    }
                    let qi = &qs[(b * seq + i) * width + col..][..dh];
                    for j in 0..seq {
                        if m[j] {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &ks[(b * seq + j) * width + col..][..dh];
                            let gqi = &mut gq[(b * seq + i) * width + col..][..dh];
                            gqi.iter_mut().zip(kj).for_each(|(s, c)| *s += ds * c);
                            let gkj = &mut gk[(b * seq + j) * width + col..][..dh];
                            gkj.iter_mut().zip(qi).for_each(|(s, c)| *s += ds * c);
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                match grads[var.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&local).for_each(|(s, d)| *s += d),
                    None => grads[var.0] = Some(local),
                }
            }
        }
    }
}
