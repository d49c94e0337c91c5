//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Parameters
//! enter the graph by reference; only op outputs are owned.
//!
//! Row-wise ops treat a tensor of shape `[.., n]` as `rows × n`. The only
//! broadcast is a length-`n` vector over the rows of a matrix.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    MulRow { a: Var, row: Var },
    Scale { a: Var, factor: F },
    Exp { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    SquaredRelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<F>, inv_std: Vec<F> },
    Softmax { x: Var },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<F> },
    Embedding { table: Var, ids: Vec<u32> },
    TokenShift { x: Var, mix: Var, segments: Vec<usize> },
    Wkv { r: Var, k: Var, v: Var, decay: Var, segments: Vec<usize>, states: Vec<F> },
    SliceRows { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    TopKRenorm { scores: Var, selected: Vec<bool> },
    MoeCombine { weights: Var, experts: Vec<Var> },
    ColumnSum { a: Var },
    CvSquared { a: Var },
    Sum { a: Var },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::MulRow { .. } => "mul_row",
            Op::Scale { .. } => "scale",
            Op::Exp { .. } => "exp",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::SquaredRelu { .. } => "squared_relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Embedding { .. } => "embedding",
            Op::TokenShift { .. } => "token_shift",
            Op::Wkv { .. } => "wkv",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::TopKRenorm { .. } => "topk_renorm",
            Op::MoeCombine { .. } => "moe_combine",
            Op::ColumnSum { .. } => "column_sum",
            Op::CvSquared { .. } => "cv_squared",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<'a, F: Real> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Steps between saved WKV states.
const WKV_CHUNK: usize = 32;

pub struct Graph<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
    grads: Vec<Option<Vec<F>>>,
    spent: bool,
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<'a, F: Real> Graph<'a, F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrows a tensor as a leaf; it is differentiated iff `requires_grad`.
    pub fn leaf(&mut self, tensor: &'a Tensor<F>) -> Var {
        let rg = tensor.requires_grad;
        self.push_leaf(Cow::Borrowed(tensor), rg)
    }

    /// Borrows a tensor as a leaf with an explicit differentiation flag.
    pub fn leaf_tracked(&mut self, tensor: &'a Tensor<F>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(tensor), requires_grad)
    }

    /// Takes ownership of a tensor as a leaf.
    pub fn input(&mut self, tensor: Tensor<F>) -> Var {
        let rg = tensor.requires_grad;
        self.push_leaf(Cow::Owned(tensor), rg)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.push_leaf(Cow::Owned(tensor), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<F>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(Tensor::from_parts(shape, data)),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` was tracked.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.val(v).shape();
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn row_vector(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let cols = self.val(a).cols();
        let rs = self.val(row).shape();
        if rs != [cols] {
            return Err(shape_err(op, format!("row vector {rs:?} over {cols} columns")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] · [{k2}, {n}]")));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, &mut out, false);
        self.push(vec![m, n], out, Op::MatMul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.val(a), self.val(b));
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let shape = x.shape().to_vec();
        self.push(shape, out, Op::Add { a, b }, &[a, b])
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_vector("add_row", a, row)?;
        let (x, r) = (self.val(a), self.val(row).data());
        let cols = r.len();
        let out = x.data().iter().enumerate().map(|(i, &p)| p + r[i % cols]).collect();
        let shape = x.shape().to_vec();
        self.push(shape, out, Op::AddRow { a, row }, &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.val(a), self.val(b));
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let shape = x.shape().to_vec();
        self.push(shape, out, Op::Mul { a, b }, &[a, b])
    }

    /// `a ⊙ row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_vector("mul_row", a, row)?;
        let (x, r) = (self.val(a), self.val(row).data());
        let cols = r.len();
        let out = x.data().iter().enumerate().map(|(i, &p)| p * r[i % cols]).collect();
        let shape = x.shape().to_vec();
        self.push(shape, out, Op::MulRow { a, row }, &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Result<Var> {
        let x = self.val(a);
        let out = x.data().iter().map(|&p| p * factor).collect();
        let shape = x.shape().to_vec();
        self.push(shape, out, Op::Scale { a, factor }, &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let x = self.val(a);
        let out = x.data().iter().map(|&p| f(p)).collect();
        let shape = x.shape().to_vec();
        self.push(shape, out, op, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, F::exp, Op::Exp { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, F::tanh, Op::Tanh { a })
    }

    /// `max(x, 0)²`.
    pub fn squared_relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, squared_relu, Op::SquaredRelu { a })
    }

    /// Per-row normalization to zero mean and unit variance, then `gain` and
    /// `bias` per column.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.row_vector("layer_norm", x, gain)?;
        self.row_vector("layer_norm", x, bias)?;
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        let mut normalized = vec![F::zero(); rows * cols];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * cols];
        for i in 0..rows {
            let row = t.row(i);
            let (xh, y) = (
                &mut normalized[i * cols..(i + 1) * cols],
                &mut out[i * cols..(i + 1) * cols],
            );
            inv_std[i] = layer_norm_row(row, g, b, xh, y);
        }
        let shape = t.shape().to_vec();
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise softmax. Masked entries (`mask[j] == false`) get exactly
    /// zero probability.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.val(x);
        let cols = t.cols();
        check_mask(cols, mask)?;
        let mut out = vec![F::zero(); t.len()];
        for (i, o) in out.chunks_mut(cols).enumerate() {
            masked_softmax(t.row(i), mask, o);
        }
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Softmax { x }, &[x])
    }

    /// Mean over rows of `-ln softmax(logits)[target]`, in nats.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: Option<&[bool]>) -> Result<Var> {
        let t = self.val(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        check_mask(cols, mask)?;
        for (position, &id) in targets.iter().enumerate() {
            if id as usize >= cols {
                return Err(Error::Target { position, id, reason: "out of range" });
            }
            if mask.is_some_and(|m| !m[id as usize]) {
                return Err(Error::Target { position, id, reason: "masked" });
            }
        }
        let mut probs = vec![F::zero(); rows * cols];
        let mut total = 0.0f64;
        for (i, p) in probs.chunks_mut(cols).enumerate() {
            let log_z = masked_softmax(t.row(i), mask, p);
            total += log_z - t.row(i)[targets[i] as usize].as_f64();
        }
        let loss = F::from_f64_lossy(total / rows as f64);
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Gathers rows of `table` (`vocab × d`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.matrix("embedding", table)?;
        if ids.is_empty() {
            return Err(shape_err("embedding", "no ids".into()));
        }
        let t = self.val(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::Target { position, id, reason: "out of range" });
            }
            out.extend_from_slice(t.row(id as usize));
        }
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    fn check_segments(&self, op: &'static str, rows: usize, segments: &[usize]) -> Result<()> {
        if segments.iter().sum::<usize>() != rows || segments.contains(&0) {
            return Err(shape_err(op, format!("segments {segments:?} do not tile {rows} rows")));
        }
        Ok(())
    }

    /// `mix ⊙ x_t + (1 − mix) ⊙ x_{t−1}` within each segment of rows; the
    /// row before a segment's first row is zero.
    pub fn token_shift(&mut self, x: Var, mix: Var, segments: &[usize]) -> Result<Var> {
        self.row_vector("token_shift", x, mix)?;
        let t = self.val(x);
        let (rows, d) = (t.rows(), t.cols());
        self.check_segments("token_shift", rows, segments)?;
        let mu = self.val(mix).data();
        let src = t.data();
        let mut out = vec![F::zero(); rows * d];
        let mut start = 0;
        for &len in segments {
            for i in start..start + len {
                for c in 0..d {
                    let prev = if i > start { src[(i - 1) * d + c] } else { F::zero() };
                    out[i * d + c] = mu[c] * src[i * d + c] + (F::one() - mu[c]) * prev;
                }
            }
            start += len;
        }
        let shape = t.shape().to_vec();
        self.push(
            shape,
            out,
            Op::TokenShift {
                x,
                mix,
                segments: segments.to_vec(),
            },
            &[x, mix],
        )
    }

    /// Linear-attention recurrence over each segment, from a zero state:
    /// `S_t = diag(sigmoid(decay)) S_{t−1} + v_t k_tᵀ`, output `S_t r_t`.
    pub fn wkv(&mut self, r: Var, k: Var, v: Var, decay: Var, segments: &[usize]) -> Result<Var> {
        self.same_shape("wkv", r, k)?;
        self.same_shape("wkv", r, v)?;
        self.row_vector("wkv", r, decay)?;
        let (rows, d) = (self.val(r).rows(), self.val(r).cols());
        self.check_segments("wkv", rows, segments)?;
        let (rd, kd, vd) = (self.val(r).data(), self.val(k).data(), self.val(v).data());
        let dc: Vec<F> = self.val(decay).data().iter().map(|&w| sigmoid(w)).collect();
        // The state entering every chunk of WKV_CHUNK steps; backward
        // recomputes the states in between.
        let mut states = Vec::with_capacity(rows.div_ceil(WKV_CHUNK) * d * d);
        let mut out = vec![F::zero(); rows * d];
        let mut cur = vec![F::zero(); d * d];
        let mut start = 0;
        for &len in segments {
            cur.fill(F::zero());
            for t in start..start + len {
                if (t - start) % WKV_CHUNK == 0 {
                    states.extend_from_slice(&cur);
                }
                let (kt, vt, rt) = (&kd[t * d..(t + 1) * d], &vd[t * d..(t + 1) * d], &rd[t * d..(t + 1) * d]);
                for i in 0..d {
                    let srow = &mut cur[i * d..(i + 1) * d];
                    wkv_row_update(srow, dc[i], vt[i], kt);
                    out[t * d + i] = dot(srow, rt);
                }
            }
            start += len;
        }
        let shape = self.val(r).shape().to_vec();
        self.push(
            shape,
            out,
            Op::Wkv {
                r,
                k,
                v,
                decay,
                segments: segments.to_vec(),
                states,
            },
            &[r, k, v, decay],
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix("slice_rows", a)?;
        if start >= end || end > rows {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {rows} rows")));
        }
        let out = self.val(a).data()[start * cols..end * cols].to_vec();
        self.push(vec![end - start, cols], out, Op::SliceRows { a, start }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "nothing to concatenate".into()));
        };
        let (_, cols) = self.matrix("concat_rows", first)?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("{c} vs {cols} columns")));
            }
            out.extend_from_slice(self.val(p).data());
            rows += r;
        }
        self.push(
            vec![rows, cols],
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Keeps the `selected` entries of each row of `scores` and rescales them
    /// to sum to one; other entries become zero.
    pub fn topk_renorm(&mut self, scores: Var, selected: &[bool]) -> Result<Var> {
        let t = self.val(scores);
        let cols = t.cols();
        if selected.len() != t.len() {
            return Err(shape_err("topk_renorm", "selection does not match scores".into()));
        }
        let mut out = vec![F::zero(); t.len()];
        for (i, o) in out.chunks_mut(cols).enumerate() {
            let sel = &selected[i * cols..(i + 1) * cols];
            let z: F = t.row(i).iter().zip(sel).filter(|(_, &s)| s).map(|(&x, _)| x).sum();
            if z <= F::zero() {
                return Err(Error::InvalidMask);
            }
            for j in 0..cols {
                if sel[j] {
                    o[j] = t.row(i)[j] / z;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            shape,
            out,
            Op::TopKRenorm {
                scores,
                selected: selected.to_vec(),
            },
            &[scores],
        )
    }

    /// `Σ_e weights[:, e] ⊙ experts[e]`, row by row.
    pub fn moe_combine(&mut self, weights: Var, experts: &[Var]) -> Result<Var> {
        let (rows, n_experts) = self.matrix("moe_combine", weights)?;
        if experts.len() != n_experts || experts.is_empty() {
            return Err(shape_err(
                "moe_combine",
                format!("{} experts for {n_experts} weight columns", experts.len()),
            ));
        }
        let (er, d) = self.matrix("moe_combine", experts[0])?;
        for &e in experts {
            if self.matrix("moe_combine", e)? != (rows, d) || er != rows {
                return Err(shape_err("moe_combine", "expert output shapes differ".into()));
            }
        }
        let w = self.val(weights).data();
        let mut out = vec![F::zero(); rows * d];
        for (e, &ev) in experts.iter().enumerate() {
            let x = self.val(ev).data();
            for i in 0..rows {
                let we = w[i * n_experts + e];
                if we == F::zero() {
                    continue;
                }
                for c in 0..d {
                    out[i * d + c] = out[i * d + c] + we * x[i * d + c];
                }
            }
        }
        self.push(
            vec![rows, d],
            out,
            Op::MoeCombine {
                weights,
                experts: experts.to_vec(),
            },
            &[&[weights], experts].concat(),
        )
    }

    /// Sums a `rows × n` matrix over its rows, giving shape `[n]`.
    pub fn column_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let cols = t.cols();
        let mut out = vec![F::zero(); cols];
        for i in 0..t.rows() {
            add_into(&mut out, t.row(i));
        }
        self.push(vec![cols], out, Op::ColumnSum { a }, &[a])
    }

    /// Squared coefficient of variation: population variance over squared
    /// mean.
    pub fn cv_squared(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a).data();
        let value = cv_squared(x).ok_or_else(|| shape_err("cv_squared", "zero mean".into()))?;
        self.push(vec![1], vec![value], Op::CvSquared { a }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a])
    }

    /// Populates gradients of every tracked node w.r.t. the scalar `loss`.
    ///
    /// Saved forward context is released, so a second call fails with
    /// [`Error::StaleGraph`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(Error::StaleGraph);
        }
        let shape = self.val(loss).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, op, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            } else if matches!(n.op, Op::Leaf) && grads[i].is_none() {
                // Tracked leaves the loss does not depend on.
                grads[i] = Some(vec![F::zero(); n.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, idx: usize, op: Op<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = self.nodes[idx].value.data();
        let nodes = &self.nodes;
        // Accumulator into the gradient slot of `v`, or `None` when `v` is
        // not differentiated.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
                } else {
                    None
                }
            }};
        }
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                let n = self.val(b).shape()[1];
                if let Some(ga) = slot!(a) {
                    F::gemm(m, n, k, g, false, self.val(b).data(), true, ga, true);
                }
                if let Some(gb) = slot!(b) {
                    F::gemm(k, m, n, self.val(a).data(), true, g, false, gb, true);
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = slot!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(b) {
                    add_into(gb, g);
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = slot!(a) {
                    add_into(ga, g);
                }
                if let Some(gr) = slot!(row) {
                    for chunk in g.chunks(gr.len()) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = slot!(a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(self.val(b).data()) {
                        *d = *d + gi * y;
                    }
                }
                if let Some(gb) = slot!(b) {
                    for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(self.val(a).data()) {
                        *d = *d + gi * x;
                    }
                }
            }
            Op::MulRow { a, row } => {
                let r = self.val(row).data();
                let cols = r.len();
                if let Some(ga) = slot!(a) {
                    for (i, (d, &gi)) in ga.iter_mut().zip(g).enumerate() {
                        *d = *d + gi * r[i % cols];
                    }
                }
                if let Some(gr) = slot!(row) {
                    for (i, (&gi, &x)) in g.iter().zip(self.val(a).data()).enumerate() {
                        gr[i % cols] = gr[i % cols] + gi * x;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = slot!(a) {
                    for (d, &gi) in ga.iter_mut().zip(g) {
                        *d = *d + gi * factor;
                    }
                }
            }
            Op::Exp { a } => {
                if let Some(ga) = slot!(a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d = *d + gi * y;
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = slot!(a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d = *d + gi * y * (F::one() - y);
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(ga) = slot!(a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d = *d + gi * (F::one() - y * y);
                    }
                }
            }
            Op::SquaredRelu { a } => {
                if let Some(ga) = slot!(a) {
                    let two = F::one() + F::one();
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(self.val(a).data()) {
                        if x > F::zero() {
                            *d = *d + gi * two * x;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = self.val(x).cols();
                let gv = self.val(gain).data();
                if let Some(gg) = slot!(gain) {
                    for (gi, xh) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] = gg[c] + gi[c] * xh[c];
                        }
                    }
                }
                if let Some(gb) = slot!(bias) {
                    for gi in g.chunks(cols) {
                        add_into(gb, gi);
                    }
                }
                if let Some(gx) = slot!(x) {
                    let n = F::from_usize(cols).unwrap();
                    for (i, (gi, xh)) in g.chunks(cols).zip(normalized.chunks(cols)).enumerate() {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for c in 0..cols {
                            let dxh = gi[c] * gv[c];
                            mean_d = mean_d + dxh;
                            mean_dx = mean_dx + dxh * xh[c];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        let dst = &mut gx[i * cols..(i + 1) * cols];
                        for c in 0..cols {
                            let dxh = gi[c] * gv[c];
                            dst[c] = dst[c] + inv_std[i] * (dxh - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let cols = self.val(x).cols();
                if let Some(gx) = slot!(x) {
                    for (i, (gi, y)) in g.chunks(cols).zip(out.chunks(cols)).enumerate() {
                        let inner: F = gi.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        let dst = &mut gx[i * cols..(i + 1) * cols];
                        for c in 0..cols {
                            dst[c] = dst[c] + y[c] * (gi[c] - inner);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.val(logits).cols();
                if let Some(gl) = slot!(logits) {
                    let scale = g[0] / F::from_usize(targets.len()).unwrap();
                    for (i, (dst, p)) in gl.chunks_mut(cols).zip(probs.chunks(cols)).enumerate() {
                        for c in 0..cols {
                            dst[c] = dst[c] + p[c] * scale;
                        }
                        let t = targets[i] as usize;
                        dst[t] = dst[t] - scale;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.val(table).cols();
                if let Some(gt) = slot!(table) {
                    for (i, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::TokenShift { x, mix, segments } => {
                let d = self.val(x).cols();
                let src = self.val(x).data();
                let mu = self.val(mix).data();
                if let Some(gx) = slot!(x) {
                    let mut start = 0;
                    for &len in &segments {
                        for i in start..start + len {
                            for c in 0..d {
                                gx[i * d + c] = gx[i * d + c] + mu[c] * g[i * d + c];
                                if i > start {
                                    gx[(i - 1) * d + c] =
                                        gx[(i - 1) * d + c] + (F::one() - mu[c]) * g[i * d + c];
                                }
                            }
                        }
                        start += len;
                    }
                }
                if let Some(gm) = slot!(mix) {
                    let mut start = 0;
                    for &len in &segments {
                        for i in start..start + len {
                            for c in 0..d {
                                let prev = if i > start { src[(i - 1) * d + c] } else { F::zero() };
                                gm[c] = gm[c] + g[i * d + c] * (src[i * d + c] - prev);
                            }
                        }
                        start += len;
                    }
                }
            }
            Op::Wkv {
                r,
                k,
                v,
                decay,
                segments,
                states,
            } => {
                let d = self.val(r).cols();
                let rows = self.val(r).rows();
                let (rd, kd, vd) = (self.val(r).data(), self.val(k).data(), self.val(v).data());
                let dc: Vec<F> = self.val(decay).data().iter().map(|&w| sigmoid(w)).collect();
                let mut dr = vec![F::zero(); rows * d];
                let mut dk = vec![F::zero(); rows * d];
                let mut dv = vec![F::zero(); rows * d];
                let mut ddc = vec![F::zero(); d];
                let mut acc = vec![F::zero(); d * d];
                // buf[m] is the state before step m of the current chunk.
                let mut buf = vec![F::zero(); (WKV_CHUNK + 1) * d * d];
                let mut start = 0;
                let mut chunk_base = 0;
                for &len in &segments {
                    acc.fill(F::zero());
                    let n_chunks = len.div_ceil(WKV_CHUNK);
                    for c in (0..n_chunks).rev() {
                        let c0 = start + c * WKV_CHUNK;
                        let c1 = (c0 + WKV_CHUNK).min(start + len);
                        let ckpt = &states[(chunk_base + c) * d * d..(chunk_base + c + 1) * d * d];
                        buf[..d * d].copy_from_slice(ckpt);
                        for t in c0..c1 {
                            let m = t - c0;
                            let (prev, next) = buf.split_at_mut((m + 1) * d * d);
                            let prev = &prev[m * d * d..];
                            let next = &mut next[..d * d];
                            next.copy_from_slice(prev);
                            let (kt, vt) = (&kd[t * d..(t + 1) * d], &vd[t * d..(t + 1) * d]);
                            for i in 0..d {
                                wkv_row_update(&mut next[i * d..(i + 1) * d], dc[i], vt[i], kt);
                            }
                        }
                        for t in (c0..c1).rev() {
                            let m = t - c0;
                            let sp = &buf[m * d * d..(m + 1) * d * d];
                            let st = &buf[(m + 1) * d * d..(m + 2) * d * d];
                            let (go, rt) = (&g[t * d..(t + 1) * d], &rd[t * d..(t + 1) * d]);
                            let (kt, vt) = (&kd[t * d..(t + 1) * d], &vd[t * d..(t + 1) * d]);
                            let drt = &mut dr[t * d..(t + 1) * d];
                            let dkt = &mut dk[t * d..(t + 1) * d];
                            for i in 0..d {
                                // arow becomes row i of dL/dS_t.
                                let arow = &mut acc[i * d..(i + 1) * d];
                                let srow = &st[i * d..(i + 1) * d];
                                let (gi, vi) = (go[i], vt[i]);
                                for (((a, &rj), (dr, &sj)), dk) in
                                    arow.iter_mut().zip(rt).zip(drt.iter_mut().zip(srow)).zip(dkt.iter_mut())
                                {
                                    *a = *a + gi * rj;
                                    *dr = *dr + sj * gi;
                                    *dk = *dk + *a * vi;
                                }
                                dv[t * d + i] = dot(arow, kt);
                                ddc[i] = ddc[i] + dot(arow, &sp[i * d..(i + 1) * d]);
                                for x in arow.iter_mut() {
                                    *x = *x * dc[i];
                                }
                            }
                        }
                    }
                    chunk_base += n_chunks;
                    start += len;
                }
                if let Some(s) = slot!(r) {
                    add_into(s, &dr);
                }
                if let Some(s) = slot!(k) {
                    add_into(s, &dk);
                }
                if let Some(s) = slot!(v) {
                    add_into(s, &dv);
                }
                if let Some(s) = slot!(decay) {
                    for i in 0..d {
                        s[i] = s[i] + ddc[i] * dc[i] * (F::one() - dc[i]);
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let cols = self.val(a).cols();
                if let Some(ga) = slot!(a) {
                    add_into(&mut ga[start * cols..start * cols + g.len()], g);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(p).len();
                    if let Some(gp) = slot!(p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::TopKRenorm { scores, selected } => {
                let cols = self.val(scores).cols();
                if let Some(gs) = slot!(scores) {
                    let s = self.val(scores).data();
                    for i in 0..s.len() / cols {
                        let range = i * cols..(i + 1) * cols;
                        let sel = &selected[range.clone()];
                        let z: F = s[range.clone()]
                            .iter()
                            .zip(sel)
                            .filter(|(_, &x)| x)
                            .map(|(&x, _)| x)
                            .sum();
                        let inner: F = g[range.clone()].iter().zip(&out[range.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in range {
                            if selected[j] {
                                gs[j] = gs[j] + (g[j] - inner) / z;
                            }
                        }
                    }
                }
            }
            Op::MoeCombine { weights, experts } => {
                let n_experts = experts.len();
                let w = self.val(weights).data();
                let d = self.val(experts[0]).cols();
                let rows = w.len() / n_experts;
                if let Some(gw) = slot!(weights) {
                    for (e, &ev) in experts.iter().enumerate() {
                        let x = self.val(ev).data();
                        for i in 0..rows {
                            gw[i * n_experts + e] =
                                gw[i * n_experts + e] + dot(&g[i * d..(i + 1) * d], &x[i * d..(i + 1) * d]);
                        }
                    }
                }
                for (e, ev) in experts.into_iter().enumerate() {
                    if let Some(ge) = slot!(ev) {
                        for i in 0..rows {
                            let we = w[i * n_experts + e];
                            for c in 0..d {
                                ge[i * d + c] = ge[i * d + c] + we * g[i * d + c];
                            }
                        }
                    }
                }
            }
            Op::ColumnSum { a } => {
                if let Some(ga) = slot!(a) {
                    let cols = g.len();
                    for chunk in ga.chunks_mut(cols) {
                        add_into(chunk, g);
                    }
                }
            }
            Op::CvSquared { a } => {
                if let Some(ga) = slot!(a) {
                    let x = self.val(a).data();
                    let n = F::from_usize(x.len()).unwrap();
                    let mean = x.iter().copied().sum::<F>() / n;
                    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                    let two = F::one() + F::one();
                    for (d, &v) in ga.iter_mut().zip(x) {
                        let dv = two * (v - mean) / (n * mean * mean) - two * var / (n * mean * mean * mean);
                        *d = *d + g[0] * dv;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = slot!(a) {
                    for d in ga.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub(crate) fn squared_relu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x * x
    } else {
        F::zero()
    }
}

/// Dot product with eight interleaved partial sums.
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [F::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail = tail + x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// `row ← decay·row + v·k`.
fn wkv_row_update<F: Real>(row: &mut [F], decay: F, v: F, k: &[F]) {
    for (s, &kj) in row.iter_mut().zip(k) {
        *s = decay * *s + v * kj;
    }
}

/// Normalizes one row into `normalized`, writes `gain ⊙ normalized + bias`
/// into `out` and returns the inverse standard deviation.
pub(crate) fn layer_norm_row<F: Real>(row: &[F], gain: &[F], bias: &[F], normalized: &mut [F], out: &mut [F]) -> F {
    let n = F::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
    let inv_std = F::one() / (var + F::from_f64_lossy(LAYER_NORM_EPS)).sqrt();
    for c in 0..row.len() {
        normalized[c] = (row[c] - mean) * inv_std;
        out[c] = normalized[c] * gain[c] + bias[c];
    }
    inv_std
}

fn check_mask(cols: usize, mask: Option<&[bool]>) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != cols {
            return Err(shape_err("mask", format!("{} mask entries for {cols} columns", m.len())));
        }
        if !m.iter().any(|&x| x) {
            return Err(Error::InvalidMask);
        }
    }
    Ok(())
}

/// Writes the masked softmax of `row` into `out` and returns the
/// log-partition `ln Σ_allowed exp(row)` in f64.
pub(crate) fn masked_softmax<F: Real>(row: &[F], mask: Option<&[bool]>, out: &mut [F]) -> f64 {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..row.len())
        .filter(|&j| allowed(j))
        .map(|j| row[j])
        .fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for j in 0..row.len() {
        out[j] = if allowed(j) { (row[j] - max).exp() } else { F::zero() };
        z = z + out[j];
    }
    let inv = F::one() / z;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    max.as_f64() + z.as_f64().ln()
}

/// Population variance over squared mean; `None` for a zero mean.
pub fn cv_squared<F: Real>(x: &[F]) -> Option<F> {
    let n = F::from_usize(x.len())?;
    let mean = x.iter().copied().sum::<F>() / n;
    if mean == F::zero() {
        return None;
    }
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    Some(var / (mean * mean))
}
