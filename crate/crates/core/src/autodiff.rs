//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in exact reverse order, so a tape must be rebuilt for each forward
//! pass. Leaf gradients accumulate across `backward` calls until
//! [`Tape::zero_grad`]; intermediate adjoints are scratch and never persist.

use crate::tensor::{split_axis, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    RepeatRows(Var),
    PairwiseAdd(Var, Var),
    Im2col { x: Var, kernel: usize },
    SegmentSoftmax { x: Var, group: usize },
    SegmentWeightedSum { w: Var, v: Var, group: usize },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable ops in execution order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Var>>,
}

/// Elementwise op selector, for callers that dispatch on op kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c (+)= op(a) · op(b)` where `a` is logically `m×k` and `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // regions whose lengths were asserted.
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

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
}

fn seg_count(n: usize, group: usize) -> usize {
    n.div_ceil(group)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.detached();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Registers parameter `id` once per tape; later calls return the same node.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        if let Some(Some(v)) = self.params.get(id) {
            return *v;
        }
        let v = self.leaf(t.detached());
        if self.params.len() <= id {
            self.params.resize(id + 1, None);
        }
        self.params[id] = Some(v);
        v
    }

    /// Parameter ids registered on this tape with their nodes.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(id, v)| v.map(|v| (id, v)))
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("needs a matrix, got shape {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.data(), tb.data());
        let out = if ta.shape() == tb.shape() {
            Tensor::from_parts(
                ta.shape().to_vec(),
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if tb.is_scalar() {
            let y = db[0];
            Tensor::from_parts(ta.shape().to_vec(), da.iter().map(|&x| f(x, y)).collect())
        } else if ta.is_scalar() {
            let x = da[0];
            Tensor::from_parts(tb.shape().to_vec(), db.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        Ok((out, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg, "scale")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| sigmoid(v)).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v.tanh()).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg, "tanh")
    }

    /// Dispatches to the matching elementwise op. Unary ops take one input,
    /// binary ops two.
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Sigmoid | Elementwise::Tanh => 1,
            _ => 2,
        };
        if inputs.len() != arity {
            return Err(TensorError::Invalid {
                op: "elementwise",
                msg: format!("{op:?} takes {arity} inputs, got {}", inputs.len()),
            });
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Sigmoid => self.sigmoid(inputs[0]),
            Elementwise::Tanh => self.tanh(inputs[0]),
        }
    }

    // ---- reductions and structure ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = split_axis("softmax", t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg, "softmax")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = split_axis("slice", t.shape(), axis)?;
        if range.start >= range.end || range.end > len {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: range.end,
                limit: len,
            });
        }
        let w = range.end - range.start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner + range.start * inner;
            out.extend_from_slice(&t.data()[base..base + w * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = w;
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                x,
                axis,
                start: range.start,
            },
            rg,
            "slice",
        )
    }

    /// Mean along `axis`; the axis is removed from the output shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = split_axis("mean", t.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &t.data()[o * len * inner + j * inner..][..inner];
                add_into(&mut out[o * inner..(o + 1) * inner], row);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Mean { x, axis }, rg, "mean")
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(Vec::new(), vec![s]), Op::Sum(x), rg, "sum")
    }

    /// Rows of a 2-D `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("table must be a matrix, got {:?}", t.shape()),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: "no ids".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                limit: t.rows(),
            });
        }
        let out = t.select_rows(ids);
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather",
        )
    }

    /// Stacks a single row (`[c]` or `[1×c]`) `n` times into `[n×c]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != 1 || t.rank() > 2 || n == 0 {
            return Err(TensorError::Invalid {
                op: "repeat_rows",
                msg: format!("needs one row and n > 0, got {:?} x {n}", t.shape()),
            });
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![n, c], out), Op::RepeatRows(x), rg, "repeat_rows")
    }

    /// All pairwise row sums: row `i·m + j` of the result is `a[i] + b[j]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "pairwise_add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, m, c) = (ta.rows(), tb.rows(), ta.cols());
        let mut out = Vec::with_capacity(n * m * c);
        for i in 0..n {
            let ra = ta.row(i);
            for j in 0..m {
                out.extend(ra.iter().zip(tb.row(j)).map(|(x, y)| x + y));
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![n * m, c], out), Op::PairwiseAdd(a, b), rg, "pairwise_add")
    }

    /// Sliding windows of `kernel` rows centred on each row, zero padded by
    /// `kernel / 2` on both sides: `[n×d]` becomes `[n×(kernel·d)]`.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || kernel == 0 || kernel % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "im2col",
                msg: format!("needs a matrix and odd kernel, got {:?} / {kernel}", t.shape()),
            });
        }
        let (n, d) = (t.rows(), t.cols());
        let half = kernel / 2;
        let mut out = vec![0.0; n * kernel * d];
        for i in 0..n {
            for o in 0..kernel {
                let src = i + o;
                if src < half || src - half >= n {
                    continue;
                }
                out[(i * kernel + o) * d..][..d].copy_from_slice(t.row(src - half));
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![n, kernel * d], out),
            Op::Im2col { x, kernel },
            rg,
            "im2col",
        )
    }

    /// Softmax within consecutive groups of `group` entries of a flat score
    /// vector. The final group may be shorter.
    pub fn segment_softmax(&mut self, x: Var, group: usize) -> Result<Var> {
        if group == 0 {
            return Err(TensorError::Invalid {
                op: "segment_softmax",
                msg: "group must be positive".into(),
            });
        }
        let t = self.value(x);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for (seg, dst) in src.chunks(group).zip(out.chunks_mut(group)) {
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, s) in dst.iter_mut().zip(seg) {
                *d = (s - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::SegmentSoftmax { x, group },
            rg,
            "segment_softmax",
        )
    }

    /// Per-group weighted row sums: output row `s` is
    /// `Σ_{j in group s} w[j] · v[j]`, giving `[ceil(n/group) × d]`.
    pub fn segment_weighted_sum(&mut self, w: Var, v: Var, group: usize) -> Result<Var> {
        let (tw, tv) = (self.value(w), self.value(v));
        if tv.rank() != 2 || tw.numel() != tv.rows() || group == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "segment_weighted_sum",
                lhs: tw.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let (n, d) = (tv.rows(), tv.cols());
        let segs = seg_count(n, group);
        let mut out = vec![0.0; segs * d];
        for j in 0..n {
            let wj = tw.data()[j];
            let dst = &mut out[(j / group) * d..][..d];
            for (o, x) in dst.iter_mut().zip(tv.row(j)) {
                *o += wj * x;
            }
        }
        let rg = self.rg(&[w, v]);
        self.push(
            Tensor::from_parts(vec![segs, d], out),
            Op::SegmentWeightedSum { w, v, group },
            rg,
            "segment_weighted_sum",
        )
    }

    /// Sum over rows of `-log softmax(logits[t])[targets[t]]`; `None`
    /// targets are masked out. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.rows() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let vocab = t.cols();
        let mut probs = vec![0.0; t.numel()];
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            if let Some(k) = *target {
                if k >= vocab {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: k,
                        limit: vocab,
                    });
                }
                loss += log_z - row[k];
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::from_parts(Vec::new(), vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    // ---- reverse pass ----

    /// Propagates d(loss)/d(node) to every reachable leaf that requires a
    /// gradient, adding into any gradient already accumulated there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let bd = val(*b).data();
                    gemm(m, n, k, g, false, bd, true, slot(adj, nodes, *a), true);
                }
                if wants(*b) {
                    let ad = val(*a).data();
                    gemm(k, m, n, ad, true, g, false, slot(adj, nodes, *b), true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !wants(v) {
                        continue;
                    }
                    let dst = slot(adj, nodes, v);
                    if dst.len() == g.len() {
                        dst.iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
                    } else {
                        dst[0] += s * g.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !wants(v) {
                        continue;
                    }
                    let od = val(other).data();
                    let dst = slot(adj, nodes, v);
                    if dst.len() == g.len() {
                        if od.len() == g.len() {
                            for ((d, x), o) in dst.iter_mut().zip(g).zip(od) {
                                *d += x * o;
                            }
                        } else {
                            dst.iter_mut().zip(g).for_each(|(d, x)| *d += x * od[0]);
                        }
                    } else {
                        // scalar operand broadcast against `other`
                        dst[0] += g.iter().zip(od).map(|(x, o)| x * o).sum::<f64>();
                    }
                }
            }
            Op::Scale(x, c) => {
                slot(adj, nodes, *x).iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                for ((d, gv), yv) in slot(adj, nodes, *x).iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
            Op::Tanh(x) => {
                let y = out.data();
                for ((d, gv), yv) in slot(adj, nodes, *x).iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis("softmax", out.shape(), *axis).expect("validated");
                let y = out.data();
                let dst = slot(adj, nodes, *x);
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + k;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dst[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis("concat", out.shape(), *axis).expect("validated");
                let mut offset = 0;
                for &v in inputs {
                    let w = val(v).shape()[*axis];
                    if wants(v) {
                        let dst = slot(adj, nodes, v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..w * inner];
                            add_into(&mut dst[o * w * inner..][..w * inner], src);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis("slice", val(*x).shape(), *axis).expect("validated");
                let w = out.shape()[*axis];
                let dst = slot(adj, nodes, *x);
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    add_into(&mut dst[base..base + w * inner], &g[o * w * inner..][..w * inner]);
                }
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis("mean", val(*x).shape(), *axis).expect("validated");
                let inv = 1.0 / len as f64;
                let dst = slot(adj, nodes, *x);
                for o in 0..outer {
                    for j in 0..len {
                        let d = &mut dst[o * len * inner + j * inner..][..inner];
                        for (dv, gv) in d.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *dv += gv * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                slot(adj, nodes, *x).iter_mut().for_each(|d| *d += s);
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let dst = slot(adj, nodes, *x);
                for i in 0..r {
                    for j in 0..c {
                        dst[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => add_into(slot(adj, nodes, *x), g),
            Op::Gather { table, ids } => {
                let d = out.cols();
                let dst = slot(adj, nodes, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dst[id * d..][..d], &g[r * d..][..d]);
                }
            }
            Op::RepeatRows(x) => {
                let c = out.cols();
                let dst = slot(adj, nodes, *x);
                for row in g.chunks(c) {
                    add_into(dst, row);
                }
            }
            Op::PairwiseAdd(a, b) => {
                let (n, m) = (val(*a).rows(), val(*b).rows());
                let c = out.cols();
                if wants(*a) {
                    let dst = slot(adj, nodes, *a);
                    for i in 0..n {
                        for j in 0..m {
                            add_into(&mut dst[i * c..][..c], &g[(i * m + j) * c..][..c]);
                        }
                    }
                }
                if wants(*b) {
                    let dst = slot(adj, nodes, *b);
                    for i in 0..n {
                        for j in 0..m {
                            add_into(&mut dst[j * c..][..c], &g[(i * m + j) * c..][..c]);
                        }
                    }
                }
            }
            Op::Im2col { x, kernel } => {
                let (n, d) = (val(*x).rows(), val(*x).cols());
                let half = kernel / 2;
                let dst = slot(adj, nodes, *x);
                for i in 0..n {
                    for o in 0..*kernel {
                        let src = i + o;
                        if src < half || src - half >= n {
                            continue;
                        }
                        add_into(&mut dst[(src - half) * d..][..d], &g[(i * kernel + o) * d..][..d]);
                    }
                }
            }
            Op::SegmentSoftmax { x, group } => {
                let y = out.data();
                let dst = slot(adj, nodes, *x);
                for ((gs, ys), ds) in g.chunks(*group).zip(y.chunks(*group)).zip(dst.chunks_mut(*group)) {
                    let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in ds.iter_mut().zip(gs).zip(ys) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::SegmentWeightedSum { w, v, group } => {
                let tv = val(*v);
                let tw = val(*w);
                let (n, d) = (tv.rows(), tv.cols());
                if wants(*w) {
                    let dst = slot(adj, nodes, *w);
                    for (j, dj) in dst.iter_mut().enumerate().take(n) {
                        let gs = &g[(j / group) * d..][..d];
                        *dj += gs.iter().zip(tv.row(j)).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if wants(*v) {
                    let dst = slot(adj, nodes, *v);
                    for j in 0..n {
                        let wj = tw.data()[j];
                        let gs = &g[(j / group) * d..][..d];
                        for (dv, gv) in dst[j * d..][..d].iter_mut().zip(gs) {
                            *dv += wj * gv;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = val(*logits).cols();
                let s = g[0];
                let dst = slot(adj, nodes, *logits);
                for (r, target) in targets.iter().enumerate() {
                    let Some(k) = *target else { continue };
                    let row = &mut dst[r * vocab..(r + 1) * vocab];
                    for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *d += s * p;
                    }
                    row[k] -= s;
                }
            }
        }
    }
}
