//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Each forward operation appends a node holding its value and enough
//! context to run its adjoint. Nodes reference their inputs by index, so the
//! tape is a topologically ordered DAG and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Every operation checks its output for NaN or infinity and fails with the
//! operation name, which is how numerical blow-ups surface during training.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    SegmentMean {
        x: Var,
        offsets: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    CausalAttention {
        qkv: Var,
        offsets: Vec<usize>,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation. Reset it between optimizer steps.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    zero_norm_rows: usize,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn segments_ok(op: &'static str, offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != rows {
        return Err(TensorError::invalid(
            op,
            format!("offsets must run from 0 to {rows}"),
        ));
    }
    if offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TensorError::invalid(op, "empty or decreasing segment"));
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

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Number of zero rows seen by [`Tape::l2_normalize`] since creation.
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push("param", t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::matrix(m, n, c)?, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let c = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_nt", Tensor::matrix(m, n, c)?, Op::MatMulNt(a, b), rg)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::new(shape, data)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(a).dims2();
        if self.value(bias).len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.value(a).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(bias);
        self.push("add_bias", Tensor::new(shape, data)?, Op::AddBias(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push("scale", value, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let src = t.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", Tensor::matrix(c, r, data)?, Op::Transpose(a), rg)
    }

    /// Mean of each contiguous row segment `offsets[s]..offsets[s+1]`;
    /// returns one row per segment.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        segments_ok("segment_mean", offsets, rows)?;
        let src = self.value(x).data();
        let nseg = offsets.len() - 1;
        let mut data = vec![0.0; nseg * cols];
        for s in 0..nseg {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let out = &mut data[s * cols..(s + 1) * cols];
            for r in lo..hi {
                for (o, v) in out.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                    *o += v;
                }
            }
            let inv = 1.0 / (hi - lo) as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(x);
        let op = Op::SegmentMean {
            x,
            offsets: offsets.to_vec(),
        };
        self.push("segment_mean", Tensor::matrix(nseg, cols, data)?, op, rg)
    }

    /// Mean over the row axis, returning a rank-1 tensor of length `cols`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        let m = self.segment_mean(x, &[0, rows])?;
        self.reshape(m, vec![cols])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2();
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let rg = self.rg(table);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather", Tensor::matrix(ids.len(), cols, data)?, op, rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.value(x).shape().to_vec(),
                right: self.value(gamma).shape().to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            if !var.is_finite() {
                // An overflowing variance would silently flatten the row.
                return Err(TensorError::NonFinite { op: "layer_norm" });
            }
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push("layer_norm", Tensor::new(shape, out)?, op, rg)
    }

    /// Inverted dropout: keeps each element with probability `keep` and
    /// scales survivors by `1/keep`. `keep == 1` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep: f64, rng: &mut R) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(TensorError::invalid(
                "dropout",
                format!("keep probability {keep} outside (0, 1]"),
            ));
        }
        if keep == 1.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        self.apply_mask(x, mask)
    }

    /// Multiplies `x` elementwise by a fixed mask.
    pub fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("dropout", value, Op::Dropout { x, mask }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = t.dims2();
        let mut data = t.data().to_vec();
        data.chunks_mut(cols).for_each(softmax_in_place);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("softmax", value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = t.dims2();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("log_softmax", value, Op::LogSoftmax(x), rg)
    }

    /// Scales every row to unit L2 norm. Zero rows stay zero and are counted
    /// in [`Tape::zero_norm_rows`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        let mut zero = 0;
        for row in data.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() {
                return Err(TensorError::NonFinite { op: "l2_normalize" });
            }
            norms.push(n);
            if n == 0.0 {
                zero += 1;
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.zero_norm_rows += zero;
        let rg = self.rg(x);
        self.push("l2_normalize", value, Op::L2Normalize { x, norms }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("gelu", value, Op::Gelu(x), rg)
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = t.dims2();
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            let lse = log_sum_exp(row);
            if let Some(tgt) = targets[r] {
                if tgt >= cols {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: tgt,
                        bound: cols,
                    });
                }
                total += lse - row[tgt];
                count += 1;
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        if count == 0 {
            return Err(TensorError::invalid("cross_entropy", "every target is ignored"));
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        self.push("cross_entropy", Tensor::scalar(total / count as f64), op, rg)
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[tokens, 3*dim]` holding query, key and value blocks side by
    /// side. Rows `offsets[s]..offsets[s+1]` form sequence `s`; a position
    /// attends only to itself and earlier positions of its own sequence.
    /// Output is `[tokens, dim]` with heads concatenated.
    pub fn causal_attention(&mut self, qkv: Var, offsets: &[usize], heads: usize) -> Result<Var> {
        let (rows, cols) = self.value(qkv).dims2();
        if cols % 3 != 0 || heads == 0 || (cols / 3) % heads != 0 {
            return Err(TensorError::invalid(
                "causal_attention",
                format!("width {cols} is not 3 x a multiple of {heads} heads"),
            ));
        }
        segments_ok("causal_attention", offsets, rows)?;
        let dim = cols / 3;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; rows * dim];
        let mut p = Vec::new();
        for w in offsets.windows(2) {
            let lo = w[0];
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, dim + h * dh, 2 * dim + h * dh);
                for t in lo..w[1] {
                    let q = &src[t * cols + qo..t * cols + qo + dh];
                    p.clear();
                    p.extend((lo..=t).map(|u| kernels::dot(q, &src[u * cols + ko..u * cols + ko + dh]) * scale));
                    softmax_in_place(&mut p);
                    let o = &mut out[t * dim + h * dh..t * dim + (h + 1) * dh];
                    for (i, u) in (lo..=t).enumerate() {
                        let v = &src[u * cols + vo..u * cols + vo + dh];
                        for (o, &v) in o.iter_mut().zip(v) {
                            *o += p[i] * v;
                        }
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        let op = Op::CausalAttention {
            qkv,
            offsets: offsets.to_vec(),
            heads,
        };
        self.push("causal_attention", Tensor::matrix(rows, dim, out)?, op, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are kept for leaves only; intermediate buffers are released
    /// as the sweep passes them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::invalid("backward", "tape is empty"));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_nt_acc(ga, g, bv, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(gb, av, g, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (n, _) = self.value(*b).dims2();
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_acc(ga, g, bv, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(gb, g, av, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let ga = self.acc(grads, *a).unwrap();
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += gy * bb;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data().to_vec();
                    let gb = self.acc(grads, *b).unwrap();
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(&av) {
                        *x += gy * aa;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let cols = self.value(*bias).len();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SegmentMean { x, offsets } => {
                let cols = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (s, w) in offsets.windows(2).enumerate() {
                        let inv = 1.0 / (w[1] - w[0]) as f64;
                        let gs = &g[s * cols..(s + 1) * cols];
                        for r in w[0]..w[1] {
                            for (x, y) in gx[r * cols..(r + 1) * cols].iter_mut().zip(gs) {
                                *x += y * inv;
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = self.value(*table).cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * cols..(i + 1) * cols];
                        for (x, y) in gt[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*gamma).len();
                let gv = self.value(*gamma).data().to_vec();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for grow in g.chunks(cols) {
                        gb.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = cols as f64;
                    let mut dh = vec![0.0; cols];
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        for c in 0..cols {
                            dh[c] = grow[c] * gv[c];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r] / nf;
                        for c in 0..cols {
                            gx[r * cols + c] += inv * (nf * dh[c] - s1 - hrow[c] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, y), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += y * m;
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((grow, yrow), xrow) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            xrow[c] += yrow[c] * (grow[c] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((grow, yrow), xrow) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let s: f64 = grow.iter().sum();
                        for c in 0..cols {
                            xrow[c] += grow[c] - yrow[c].exp() * s;
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let cols = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, ((grow, yrow), xrow)) in g
                        .chunks(cols)
                        .zip(y.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .enumerate()
                    {
                        let n = norms[r];
                        if n == 0.0 {
                            continue;
                        }
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            xrow[c] += (grow[c] - yrow[c] * s) / n;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data().to_vec();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, y), &v) in gx.iter_mut().zip(g).zip(&xv) {
                        let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                        *a += y * d;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let cols = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                if let Some(gx) = self.acc(grads, *logits) {
                    for (r, tgt) in targets.iter().enumerate() {
                        let Some(tgt) = tgt else { continue };
                        let row = &mut gx[r * cols..(r + 1) * cols];
                        let prow = &probs[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            row[c] += scale * prow[c];
                        }
                        row[*tgt] -= scale;
                    }
                }
            }
            Op::CausalAttention { qkv, offsets, heads } => {
                let src = self.value(*qkv).data().to_vec();
                let cols = self.value(*qkv).cols();
                if let Some(gq) = self.acc(grads, *qkv) {
                    attention_backward(&src, g, gq, cols, offsets, *heads);
                }
            }
        }
    }
}

fn attention_backward(src: &[f64], g: &[f64], gq: &mut [f64], cols: usize, offsets: &[usize], heads: usize) {
    let dim = cols / 3;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = Vec::new();
    let mut dp = Vec::new();
    for w in offsets.windows(2) {
        let lo = w[0];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, dim + h * dh, 2 * dim + h * dh);
            for t in lo..w[1] {
                let q = &src[t * cols + qo..t * cols + qo + dh];
                p.clear();
                p.extend((lo..=t).map(|u| kernels::dot(q, &src[u * cols + ko..u * cols + ko + dh]) * scale));
                softmax_in_place(&mut p);
                let go = &g[t * dim + h * dh..t * dim + (h + 1) * dh];
                dp.clear();
                dp.extend((lo..=t).map(|u| kernels::dot(go, &src[u * cols + vo..u * cols + vo + dh])));
                let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for (i, u) in (lo..=t).enumerate() {
                    // value gradient
                    for d in 0..dh {
                        gq[u * cols + vo + d] += p[i] * go[d];
                    }
                    let ds = p[i] * (dp[i] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for d in 0..dh {
                        gq[t * cols + qo + d] += ds * src[u * cols + ko + d];
                        gq[u * cols + ko + d] += ds * src[t * cols + qo + d];
                    }
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
