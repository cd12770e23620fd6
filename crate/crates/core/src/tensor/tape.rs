use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Valid only for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MatKind {
    NN,
    NT,
    TN,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, kind: MatKind },
    Transpose { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    EluPlusOne { x: Var },
    Silu { x: Var },
    RmsNorm { x: Var, w: Var, eps: f64 },
    Softmax { x: Var },
    CausalSoftmax { x: Var },
    RowNormalize { num: Var, den: Var, eps: f64 },
    GateCombine { mem: Var, local: Var, raw: Var },
    Rope { x: Var, base: f64, start: usize },
    SplitHeads { x: Var },
    MergeHeads { x: Var },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SumAxis1 { x: Var },
    SumAll { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Option<Vec<bool>> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
    is_param: bool,
    grad: Option<Vec<S>>,
}

/// Wengert list: ops append nodes, `backward` replays them in reverse.
/// Gradients accumulate into parameter nodes and persist across `backward`
/// calls until [`Tape::zero_grad`].
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    check_finite: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// Finiteness checking defaults to on in debug and test builds only;
    /// it scans every op output.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(check: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: check,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: no gradient is tracked for it.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_unchecked(value, Op::Leaf, false, false)
    }

    /// Trainable input: `backward` accumulates its gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_unchecked(value, Op::Leaf, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a parameter, or None if `backward` never
    /// reached it (or `v` is not a parameter).
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape matches value")
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Cuts the graph: returns a constant with the same value. Used where an
    /// output must feed later computation without carrying gradient back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value)
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_unchecked(
        &mut self,
        value: Tensor<S>,
        op: Op,
        needs_grad: bool,
        is_param: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite {
                op: name,
                node: self.nodes.len(),
            });
        }
        Ok(self.push_unchecked(value, op, needs_grad, false))
    }

    // ── elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let cs = S::from_f64(c);
        let out = self.val(x).map(|v| v * cs);
        let needs = self.needs(x);
        self.push("scale", out, Op::Scale { x, c }, needs)
    }

    /// ELU(x)+1: exp(x) for x < 0, x+1 for x >= 0. Strictly positive, which
    /// is what makes it usable as a feature map for the additive memory.
    pub fn elu_plus_one(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(|v| if v < S::ZERO { v.exp() } else { v + S::ONE });
        let needs = self.needs(x);
        self.push("elu_plus_one", out, Op::EluPlusOne { x }, needs)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(|v| v / (S::ONE + (-v).exp()));
        let needs = self.needs(x);
        self.push("silu", out, Op::Silu { x }, needs)
    }

    /// Row-wise RMS norm over the last axis with a learned per-channel gain.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (vx, vw) = (self.val(x), self.val(w));
        let width = *vx.shape().last().unwrap_or(&0);
        if vw.rank() != 1 || vw.shape()[0] != width {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(vx.numel());
        let epss = S::from_f64(eps);
        let n = S::from_f64(width as f64);
        for row in vx.data().chunks_exact(width) {
            let mut sq = S::ZERO;
            for &v in row {
                sq += v * v;
            }
            let inv = S::ONE / (sq / n + epss).sqrt();
            for (i, &v) in row.iter().enumerate() {
                data.push(v * inv * vw.data()[i]);
            }
        }
        let out = Tensor::from_vec(vx.shape(), data)?;
        let needs = self.needs(x) || self.needs(w);
        self.push("rms_norm", out, Op::RmsNorm { x, w, eps }, needs)
    }

    // ── softmax family ───────────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.val(x);
        if vx.rank() < 1 {
            return Err(Error::InvalidArgument {
                op: "softmax",
                msg: "needs rank >= 1".into(),
            });
        }
        let width = *vx.shape().last().unwrap();
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks_exact(width) {
            softmax_row(row, &mut data);
        }
        let out = Tensor::from_vec(vx.shape(), data)?;
        let needs = self.needs(x);
        self.push("softmax", out, Op::Softmax { x }, needs)
    }

    /// Softmax over the last axis restricted to columns j <= i for row i of
    /// each square trailing block; masked-out entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.val(x);
        if vx.rank() < 2 {
            return Err(Error::InvalidArgument {
                op: "causal_softmax",
                msg: "needs rank >= 2".into(),
            });
        }
        let s = vx.shape()[vx.rank() - 2];
        let w = vx.shape()[vx.rank() - 1];
        if s != w {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                lhs: vx.shape().to_vec(),
                rhs: vec![s, s],
            });
        }
        let mut data = Vec::with_capacity(vx.numel());
        for block in vx.data().chunks_exact(s * w) {
            for i in 0..s {
                let row = &block[i * w..i * w + i + 1];
                softmax_row(row, &mut data);
                data.extend(std::iter::repeat(S::ZERO).take(w - i - 1));
            }
        }
        let out = Tensor::from_vec(vx.shape(), data)?;
        let needs = self.needs(x);
        self.push("causal_softmax", out, Op::CausalSoftmax { x }, needs)
    }

    // ── matmul family ────────────────────────────────────────────────────

    /// a [.., m, k] · b [.., k, n] -> [.., m, n]; rank 2, or rank 3 with
    /// matching batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_kind("matmul", a, b, MatKind::NN)
    }

    /// a [.., m, k] · b [.., n, k]ᵀ -> [.., m, n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_kind("matmul_nt", a, b, MatKind::NT)
    }

    /// a [.., s, m]ᵀ · b [.., s, n] -> [.., m, n]
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_kind("matmul_tn", a, b, MatKind::TN)
    }

    fn matmul_kind(&mut self, name: &'static str, a: Var, b: Var, kind: MatKind) -> Result<Var> {
        let (va, vb) = (self.val(a), self.val(b));
        let dims = mm_dims(name, va.shape(), vb.shape(), kind)?;
        let mut out = Tensor::zeros(&dims.out_shape);
        mm_forward(
            out.data_mut(),
            va.data(),
            vb.data(),
            &dims,
            kind,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(name, out, Op::MatMul { a, b, kind }, needs)
    }

    /// Swaps the last two axes (rank 2 or 3).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.val(x);
        if vx.rank() != 2 && vx.rank() != 3 {
            return Err(Error::InvalidArgument {
                op: "transpose",
                msg: format!("needs rank 2 or 3, got shape {:?}", vx.shape()),
            });
        }
        let out = transpose_last2(vx);
        let needs = self.needs(x);
        self.push("transpose", out, Op::Transpose { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).reshape(shape)?;
        let needs = self.needs(x);
        self.push("reshape", out, Op::Reshape { x }, needs)
    }

    // ── attention pieces ─────────────────────────────────────────────────

    /// num [B, S, D] divided row-wise by den [B, S, 1] + eps.
    pub fn row_normalize(&mut self, num: Var, den: Var, eps: f64) -> Result<Var> {
        let (vn, vd) = (self.val(num), self.val(den));
        if vn.rank() != 3 || vd.rank() != 3 || vd.shape() != [vn.shape()[0], vn.shape()[1], 1] {
            return Err(Error::ShapeMismatch {
                op: "row_normalize",
                lhs: vn.shape().to_vec(),
                rhs: vd.shape().to_vec(),
            });
        }
        let d = vn.shape()[2];
        let epss = S::from_f64(eps);
        let mut data = Vec::with_capacity(vn.numel());
        for (row, &dv) in vn.data().chunks_exact(d).zip(vd.data()) {
            let inv = S::ONE / (dv + epss);
            data.extend(row.iter().map(|&v| v * inv));
        }
        let out = Tensor::from_vec(vn.shape(), data)?;
        let needs = self.needs(num) || self.needs(den);
        self.push("row_normalize", out, Op::RowNormalize { num, den, eps }, needs)
    }

    /// Per-head convex blend: out[h] = α_h · mem[h] + (1 - α_h) · local[h]
    /// with α_h = hard_sigmoid(raw[h]). raw has shape [H]; mem and local
    /// share shape [H, S, D].
    pub fn gate_combine(&mut self, mem: Var, local: Var, raw: Var) -> Result<Var> {
        let (vm, vl, vr) = (self.val(mem), self.val(local), self.val(raw));
        if vm.shape() != vl.shape() {
            return Err(Error::ShapeMismatch {
                op: "gate_combine",
                lhs: vm.shape().to_vec(),
                rhs: vl.shape().to_vec(),
            });
        }
        if vm.rank() != 3 || vr.rank() != 1 || vr.shape()[0] != vm.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "gate_combine",
                lhs: vm.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let per_head = vm.shape()[1] * vm.shape()[2];
        let mut data = Vec::with_capacity(vm.numel());
        for (h, &rv) in vr.data().iter().enumerate() {
            let alpha = hard_sigmoid_s(rv);
            let one_m = S::ONE - alpha;
            let ms = &vm.data()[h * per_head..(h + 1) * per_head];
            let ls = &vl.data()[h * per_head..(h + 1) * per_head];
            for (&mv, &lv) in ms.iter().zip(ls) {
                data.push(alpha * mv + one_m * lv);
            }
        }
        let out = Tensor::from_vec(vm.shape(), data)?;
        let needs = self.needs(mem) || self.needs(local) || self.needs(raw);
        self.push("gate_combine", out, Op::GateCombine { mem, local, raw }, needs)
    }

    /// Rotary position encoding over adjacent element pairs of the last axis.
    /// x is [H, S, Dh] with Dh even; sequence position of row s is start + s.
    pub fn rope(&mut self, x: Var, base: f64, start: usize) -> Result<Var> {
        let vx = self.val(x);
        if vx.rank() != 3 || vx.shape()[2] % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "rope",
                msg: format!("needs [H, S, Dh] with even Dh, got {:?}", vx.shape()),
            });
        }
        let out = rope_apply_raw(vx, base, start, false);
        let needs = self.needs(x);
        self.push("rope", out, Op::Rope { x, base, start }, needs)
    }

    // ── head and row layout ──────────────────────────────────────────────

    /// [T, H·Dh] -> [H, T, Dh]
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.val(x);
        if vx.rank() != 2 || heads == 0 || vx.shape()[1] % heads != 0 {
            return Err(Error::InvalidArgument {
                op: "split_heads",
                msg: format!("cannot split {:?} into {} heads", vx.shape(), heads),
            });
        }
        let (t, hd) = (vx.shape()[0], vx.shape()[1]);
        let dh = hd / heads;
        let mut out = Tensor::zeros(&[heads, t, dh]);
        for r in 0..t {
            for h in 0..heads {
                let src = &vx.data()[r * hd + h * dh..r * hd + (h + 1) * dh];
                out.data_mut()[(h * t + r) * dh..(h * t + r + 1) * dh].copy_from_slice(src);
            }
        }
        let needs = self.needs(x);
        self.push("split_heads", out, Op::SplitHeads { x }, needs)
    }

    /// [H, T, Dh] -> [T, H·Dh]
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let vx = self.val(x);
        if vx.rank() != 3 {
            return Err(Error::InvalidArgument {
                op: "merge_heads",
                msg: format!("needs rank 3, got {:?}", vx.shape()),
            });
        }
        let (heads, t, dh) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut out = Tensor::zeros(&[t, heads * dh]);
        for h in 0..heads {
            for r in 0..t {
                let src = &vx.data()[(h * t + r) * dh..(h * t + r + 1) * dh];
                out.data_mut()[r * heads * dh + h * dh..r * heads * dh + (h + 1) * dh]
                    .copy_from_slice(src);
            }
        }
        let needs = self.needs(x);
        self.push("merge_heads", out, Op::MergeHeads { x }, needs)
    }

    /// Rows [start, start+len) of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.val(x);
        if vx.rank() != 2 || start + len > vx.shape()[0] {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows [{start}, {}) out of {:?}", start + len, vx.shape()),
            });
        }
        let c = vx.shape()[1];
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(&[len, c], data)?;
        let needs = self.needs(x);
        self.push("slice_rows", out, Op::SliceRows { x, start }, needs)
    }

    /// Stacks rank-2 tensors with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_rows",
                msg: "no parts".into(),
            });
        }
        let c = self.val(parts[0]).shape().get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let vp = self.val(p);
            if vp.rank() != 2 || vp.shape()[1] != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.val(parts[0]).shape().to_vec(),
                    rhs: vp.shape().to_vec(),
                });
            }
            rows += vp.shape()[0];
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.val(p).data());
        }
        let out = Tensor::from_vec(&[rows, c], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", out, Op::ConcatRows { parts: parts.to_vec() }, needs)
    }

    // ── reductions, embedding, loss ──────────────────────────────────────

    /// [B, S, D] -> [B, D], summing over axis 1.
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var> {
        let vx = self.val(x);
        if vx.rank() != 3 {
            return Err(Error::InvalidArgument {
                op: "sum_axis1",
                msg: format!("needs rank 3, got {:?}", vx.shape()),
            });
        }
        let (b, s, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut out = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            for si in 0..s {
                let src = &vx.data()[(bi * s + si) * d..(bi * s + si + 1) * d];
                let dst = &mut out.data_mut()[bi * d..(bi + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let needs = self.needs(x);
        self.push("sum_axis1", out, Op::SumAxis1 { x }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: S = self.val(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push("sum_all", Tensor::scalar(total), Op::SumAll { x }, needs)
    }

    /// Row t of the output is row ids[t] of the table [V, D].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.val(table);
        if vt.rank() != 2 {
            return Err(Error::InvalidArgument {
                op: "embedding",
                msg: format!("table must be rank 2, got {:?}", vt.shape()),
            });
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], data)?;
        let needs = self.needs(table);
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, needs)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` [T, V]. When `mask` is given, only rows with mask[t] = true
    /// count (and the mean is over those rows).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let vl = self.val(logits);
        if vl.rank() != 2 || vl.shape()[0] != targets.len() {
            return Err(Error::InvalidArgument {
                op: "cross_entropy",
                msg: format!("logits {:?} vs {} targets", vl.shape(), targets.len()),
            });
        }
        if let Some(m) = mask {
            if m.len() != targets.len() {
                return Err(Error::InvalidArgument {
                    op: "cross_entropy",
                    msg: format!("mask length {} vs {} targets", m.len(), targets.len()),
                });
            }
        }
        let (t, v) = (vl.shape()[0], vl.shape()[1]);
        let included = |i: usize| mask.map_or(true, |m| m[i]);
        let count = (0..t).filter(|&i| included(i)).count();
        if count == 0 {
            return Err(Error::InvalidArgument {
                op: "cross_entropy",
                msg: "mask excludes every position".into(),
            });
        }
        let mut total = S::ZERO;
        for i in 0..t {
            if targets[i] >= v {
                return Err(Error::TokenOutOfRange { id: targets[i], vocab: v });
            }
            if !included(i) {
                continue;
            }
            let row = &vl.data()[i * v..(i + 1) * v];
            total += nll_row(row, targets[i]);
        }
        let loss = total / S::from_f64(count as f64);
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.map(|m| m.to_vec()),
            },
            needs,
        )
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate, so
    /// calling this for several losses (or several times) sums contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).rank() != 0 {
            return Err(Error::NonScalarLoss {
                shape: self.val(loss).shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![S::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if self.nodes[i].is_param {
                let g = self.nodes[i]
                    .grad
                    .get_or_insert_with(|| vec![S::ZERO; d.len()]);
                for (gv, &dv) in g.iter_mut().zip(&d) {
                    *gv += dv;
                }
                continue;
            }
            self.backprop_node(i, &d, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, d: &[S], adj: &mut [Option<Vec<S>>]) {
        // Splitting the borrow: ops read node values, adj is written.
        let nodes = &self.nodes;
        let ensure = |adj: &mut [Option<Vec<S>>], v: Var| -> bool {
            if !nodes[v.0].needs_grad {
                return false;
            }
            if adj[v.0].is_none() {
                adj[v.0] = Some(vec![S::ZERO; nodes[v.0].value.numel()]);
            }
            true
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &v in [a, b] {
                    if ensure(adj, v) {
                        let g = adj[v.0].as_mut().unwrap();
                        for (gv, &dv) in g.iter_mut().zip(d) {
                            *gv += dv;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if ensure(adj, *a) {
                    let vb = nodes[b.0].value.data();
                    let g = adj[a.0].as_mut().unwrap();
                    for ((gv, &dv), &bv) in g.iter_mut().zip(d).zip(vb) {
                        *gv += dv * bv;
                    }
                }
                if ensure(adj, *b) {
                    let va = nodes[a.0].value.data();
                    let g = adj[b.0].as_mut().unwrap();
                    for ((gv, &dv), &av) in g.iter_mut().zip(d).zip(va) {
                        *gv += dv * av;
                    }
                }
            }
            Op::Scale { x, c } => {
                if ensure(adj, *x) {
                    let cs = S::from_f64(*c);
                    let g = adj[x.0].as_mut().unwrap();
                    for (gv, &dv) in g.iter_mut().zip(d) {
                        *gv += dv * cs;
                    }
                }
            }
            Op::EluPlusOne { x } => {
                if ensure(adj, *x) {
                    // y >= 1 exactly where x >= 0; below that y' = y.
                    let y = nodes[i].value.data();
                    let g = adj[x.0].as_mut().unwrap();
                    for ((gv, &dv), &yv) in g.iter_mut().zip(d).zip(y) {
                        *gv += if yv >= S::ONE { dv } else { dv * yv };
                    }
                }
            }
            Op::Silu { x } => {
                if ensure(adj, *x) {
                    let vx = nodes[x.0].value.data();
                    let g = adj[x.0].as_mut().unwrap();
                    for ((gv, &dv), &xv) in g.iter_mut().zip(d).zip(vx) {
                        let sig = S::ONE / (S::ONE + (-xv).exp());
                        *gv += dv * sig * (S::ONE + xv * (S::ONE - sig));
                    }
                }
            }
            Op::RmsNorm { x, w, eps } => self.back_rms_norm(*x, *w, *eps, d, adj),
            Op::Softmax { x } => {
                if ensure(adj, *x) {
                    let y = nodes[i].value.data();
                    let width = *nodes[i].value.shape().last().unwrap();
                    let g = adj[x.0].as_mut().unwrap();
                    softmax_backward(y, d, width, g);
                }
            }
            Op::CausalSoftmax { x } => {
                // Masked entries have y = 0, so the dense formula zeroes them.
                if ensure(adj, *x) {
                    let y = nodes[i].value.data();
                    let width = *nodes[i].value.shape().last().unwrap();
                    let g = adj[x.0].as_mut().unwrap();
                    softmax_backward(y, d, width, g);
                }
            }
            Op::MatMul { a, b, kind } => self.back_matmul(*a, *b, *kind, d, adj),
            Op::Transpose { x } => {
                if ensure(adj, *x) {
                    let dt = Tensor::from_vec(nodes[i].value.shape(), d.to_vec()).unwrap();
                    let back = transpose_last2(&dt);
                    let g = adj[x.0].as_mut().unwrap();
                    for (gv, &dv) in g.iter_mut().zip(back.data()) {
                        *gv += dv;
                    }
                }
            }
            Op::Reshape { x } => {
                if ensure(adj, *x) {
                    let g = adj[x.0].as_mut().unwrap();
                    for (gv, &dv) in g.iter_mut().zip(d) {
                        *gv += dv;
                    }
                }
            }
            Op::RowNormalize { num, den, eps } => {
                let vd = nodes[den.0].value.data();
                let y = nodes[i].value.data();
                let width = nodes[num.0].value.shape()[2];
                let epss = S::from_f64(*eps);
                if ensure(adj, *num) {
                    let g = adj[num.0].as_mut().unwrap();
                    for (r, &dv) in vd.iter().enumerate() {
                        let inv = S::ONE / (dv + epss);
                        for j in 0..width {
                            g[r * width + j] += d[r * width + j] * inv;
                        }
                    }
                }
                if ensure(adj, *den) {
                    let g = adj[den.0].as_mut().unwrap();
                    for (r, &dv) in vd.iter().enumerate() {
                        let inv = S::ONE / (dv + epss);
                        let mut acc = S::ZERO;
                        for j in 0..width {
                            acc += d[r * width + j] * y[r * width + j];
                        }
                        g[r] -= acc * inv;
                    }
                }
            }
            Op::GateCombine { mem, local, raw } => {
                let vr = nodes[raw.0].value.data();
                let per_head = nodes[mem.0].value.shape()[1] * nodes[mem.0].value.shape()[2];
                if ensure(adj, *mem) {
                    let g = adj[mem.0].as_mut().unwrap();
                    for (h, &rv) in vr.iter().enumerate() {
                        let alpha = hard_sigmoid_s(rv);
                        for j in h * per_head..(h + 1) * per_head {
                            g[j] += d[j] * alpha;
                        }
                    }
                }
                if ensure(adj, *local) {
                    let g = adj[local.0].as_mut().unwrap();
                    for (h, &rv) in vr.iter().enumerate() {
                        let one_m = S::ONE - hard_sigmoid_s(rv);
                        for j in h * per_head..(h + 1) * per_head {
                            g[j] += d[j] * one_m;
                        }
                    }
                }
                if ensure(adj, *raw) {
                    // dα/draw = 1/6 inside the linear region, 0 where clamped.
                    let vm = nodes[mem.0].value.data();
                    let vl = nodes[local.0].value.data();
                    let g = adj[raw.0].as_mut().unwrap();
                    let three = S::from_f64(3.0);
                    let sixth = S::from_f64(1.0 / 6.0);
                    for (h, &rv) in vr.iter().enumerate() {
                        if rv.abs() >= three {
                            continue;
                        }
                        let mut acc = S::ZERO;
                        for j in h * per_head..(h + 1) * per_head {
                            acc += d[j] * (vm[j] - vl[j]);
                        }
                        g[h] += acc * sixth;
                    }
                }
            }
            Op::Rope { x, base, start } => {
                if ensure(adj, *x) {
                    let dt = Tensor::from_vec(nodes[i].value.shape(), d.to_vec()).unwrap();
                    let back = rope_apply_raw(&dt, *base, *start, true);
                    let g = adj[x.0].as_mut().unwrap();
                    for (gv, &dv) in g.iter_mut().zip(back.data()) {
                        *gv += dv;
                    }
                }
            }
            Op::SplitHeads { x } => {
                if ensure(adj, *x) {
                    let [heads, t, dh] = nodes[i].value.shape() else { unreachable!() };
                    let (heads, t, dh) = (*heads, *t, *dh);
                    let g = adj[x.0].as_mut().unwrap();
                    for h in 0..heads {
                        for r in 0..t {
                            for k in 0..dh {
                                g[r * heads * dh + h * dh + k] += d[(h * t + r) * dh + k];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x } => {
                if ensure(adj, *x) {
                    let [heads, t, dh] = nodes[x.0].value.shape() else { unreachable!() };
                    let (heads, t, dh) = (*heads, *t, *dh);
                    let g = adj[x.0].as_mut().unwrap();
                    for h in 0..heads {
                        for r in 0..t {
                            for k in 0..dh {
                                g[(h * t + r) * dh + k] += d[r * heads * dh + h * dh + k];
                            }
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if ensure(adj, *x) {
                    let c = nodes[x.0].value.shape()[1];
                    let g = adj[x.0].as_mut().unwrap();
                    for (gv, &dv) in g[start * c..].iter_mut().zip(d) {
                        *gv += dv;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if ensure(adj, p) {
                        let g = adj[p.0].as_mut().unwrap();
                        for (gv, &dv) in g.iter_mut().zip(&d[offset..offset + n]) {
                            *gv += dv;
                        }
                    }
                    offset += n;
                }
            }
            Op::SumAxis1 { x } => {
                if ensure(adj, *x) {
                    let [b, s, dd] = nodes[x.0].value.shape() else { unreachable!() };
                    let (b, s, dd) = (*b, *s, *dd);
                    let g = adj[x.0].as_mut().unwrap();
                    for bi in 0..b {
                        for si in 0..s {
                            for k in 0..dd {
                                g[(bi * s + si) * dd + k] += d[bi * dd + k];
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if ensure(adj, *x) {
                    let dv = d[0];
                    let g = adj[x.0].as_mut().unwrap();
                    for gv in g.iter_mut() {
                        *gv += dv;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if ensure(adj, *table) {
                    let dd = nodes[table.0].value.shape()[1];
                    let g = adj[table.0].as_mut().unwrap();
                    for (t, &id) in ids.iter().enumerate() {
                        for k in 0..dd {
                            g[id * dd + k] += d[t * dd + k];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask } => {
                if ensure(adj, *logits) {
                    let vl = nodes[logits.0].value.data();
                    let v = nodes[logits.0].value.shape()[1];
                    let included = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
                    let count = (0..targets.len()).filter(|&i| included(i)).count();
                    let scale = d[0] / S::from_f64(count as f64);
                    let g = adj[logits.0].as_mut().unwrap();
                    let mut probs = Vec::new();
                    for (t, &target) in targets.iter().enumerate() {
                        if !included(t) {
                            continue;
                        }
                        probs.clear();
                        softmax_row(&vl[t * v..(t + 1) * v], &mut probs);
                        for (j, &p) in probs.iter().enumerate() {
                            let delta = if j == target { S::ONE } else { S::ZERO };
                            g[t * v + j] += scale * (p - delta);
                        }
                    }
                }
            }
        }
    }

    fn back_rms_norm(&self, x: Var, w: Var, eps: f64, d: &[S], adj: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let vx = nodes[x.0].value.data();
        let vw = nodes[w.0].value.data();
        let width = *nodes[x.0].value.shape().last().unwrap();
        let n = S::from_f64(width as f64);
        let epss = S::from_f64(eps);
        let x_needs = nodes[x.0].needs_grad;
        let w_needs = nodes[w.0].needs_grad;
        if x_needs && adj[x.0].is_none() {
            adj[x.0] = Some(vec![S::ZERO; vx.len()]);
        }
        if w_needs && adj[w.0].is_none() {
            adj[w.0] = Some(vec![S::ZERO; vw.len()]);
        }
        for (r, row) in vx.chunks_exact(width).enumerate() {
            let mut sq = S::ZERO;
            for &v in row {
                sq += v * v;
            }
            let inv = S::ONE / (sq / n + epss).sqrt();
            let drow = &d[r * width..(r + 1) * width];
            if x_needs {
                let mut dot = S::ZERO;
                for j in 0..width {
                    dot += drow[j] * vw[j] * row[j];
                }
                let coef = inv * inv * inv / n;
                let g = adj[x.0].as_mut().unwrap();
                for j in 0..width {
                    g[r * width + j] += drow[j] * vw[j] * inv - coef * row[j] * dot;
                }
            }
            if w_needs {
                let g = adj[w.0].as_mut().unwrap();
                for j in 0..width {
                    g[j] += drow[j] * row[j] * inv;
                }
            }
        }
    }

    fn back_matmul(&self, a: Var, b: Var, kind: MatKind, d: &[S], adj: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let va = &nodes[a.0].value;
        let vb = &nodes[b.0].value;
        let dims = mm_dims("matmul", va.shape(), vb.shape(), kind).expect("checked in forward");
        let (batch, m, k, n) = (dims.batch, dims.m, dims.k, dims.n);
        let cs = m * n;
        let a_block = va.numel() / batch;
        let b_block = vb.numel() / batch;
        if nodes[a.0].needs_grad {
            if adj[a.0].is_none() {
                adj[a.0] = Some(vec![S::ZERO; va.numel()]);
            }
            let g = adj[a.0].as_mut().unwrap();
            for t in 0..batch {
                let dc = &d[t * cs..(t + 1) * cs];
                let bt = &vb.data()[t * b_block..(t + 1) * b_block];
                let ga = &mut g[t * a_block..(t + 1) * a_block];
                match kind {
                    MatKind::NN => S::gemm_nt(ga, dc, bt, m, n, k),
                    MatKind::NT => S::gemm_nn(ga, dc, bt, m, n, k),
                    MatKind::TN => S::gemm_nt(ga, bt, dc, k, n, m),
                }
            }
        }
        if nodes[b.0].needs_grad {
            if adj[b.0].is_none() {
                adj[b.0] = Some(vec![S::ZERO; vb.numel()]);
            }
            let g = adj[b.0].as_mut().unwrap();
            for t in 0..batch {
                let dc = &d[t * cs..(t + 1) * cs];
                let at = &va.data()[t * a_block..(t + 1) * a_block];
                let gb = &mut g[t * b_block..(t + 1) * b_block];
                match kind {
                    MatKind::NN => S::gemm_tn(gb, at, dc, m, k, n),
                    MatKind::NT => S::gemm_tn(gb, dc, at, m, n, k),
                    MatKind::TN => S::gemm_nn(gb, at, dc, k, m, n),
                }
            }
        }
    }
}

fn hard_sigmoid_s<S: Scalar>(x: S) -> S {
    let y = x / S::from_f64(6.0) + S::from_f64(0.5);
    y.maximum(S::ZERO).minimum(S::ONE)
}

/// Appends softmax of `row` to `out` with max subtraction.
fn softmax_row<S: Scalar>(row: &[S], out: &mut Vec<S>) {
    let mut mx = row[0];
    for &v in row {
        mx = mx.maximum(v);
    }
    let base = out.len();
    let mut sum = S::ZERO;
    for &v in row {
        let e = (v - mx).exp();
        sum += e;
        out.push(e);
    }
    let inv = S::ONE / sum;
    for v in &mut out[base..] {
        *v *= inv;
    }
}

/// dx = y ⊙ (dy − Σ dy ⊙ y) per row; accumulates into g.
fn softmax_backward<S: Scalar>(y: &[S], d: &[S], width: usize, g: &mut [S]) {
    for r in 0..y.len() / width {
        let ys = &y[r * width..(r + 1) * width];
        let ds = &d[r * width..(r + 1) * width];
        let mut dot = S::ZERO;
        for (&yv, &dv) in ys.iter().zip(ds) {
            dot += yv * dv;
        }
        let gs = &mut g[r * width..(r + 1) * width];
        for ((gv, &yv), &dv) in gs.iter_mut().zip(ys).zip(ds) {
            *gv += yv * (dv - dot);
        }
    }
}

/// Log-sum-exp based NLL of one row.
fn nll_row<S: Scalar>(row: &[S], target: usize) -> S {
    let mut mx = row[0];
    for &v in row {
        mx = mx.maximum(v);
    }
    let mut sum = S::ZERO;
    for &v in row {
        sum += (v - mx).exp();
    }
    mx + sum.ln() - row[target]
}

struct MmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn mm_dims(op: &'static str, a: &[usize], b: &[usize], kind: MatKind) -> Result<MmDims> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() || !(a.len() == 2 || a.len() == 3) {
        return Err(mismatch());
    }
    let batch = if a.len() == 3 {
        if a[0] != b[0] {
            return Err(mismatch());
        }
        a[0]
    } else {
        1
    };
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k, n) = match kind {
        MatKind::NN => {
            if ac != br {
                return Err(mismatch());
            }
            (ar, ac, bc)
        }
        MatKind::NT => {
            if ac != bc {
                return Err(mismatch());
            }
            (ar, ac, br)
        }
        MatKind::TN => {
            if ar != br {
                return Err(mismatch());
            }
            (ac, ar, bc)
        }
    };
    let out_shape = if a.len() == 3 {
        vec![batch, m, n]
    } else {
        vec![m, n]
    };
    Ok(MmDims { batch, m, k, n, out_shape })
}

fn mm_forward<S: Scalar>(c: &mut [S], a: &[S], b: &[S], dims: &MmDims, kind: MatKind) {
    let (m, k, n) = (dims.m, dims.k, dims.n);
    let a_block = a.len() / dims.batch;
    let b_block = b.len() / dims.batch;
    let c_block = m * n;
    for t in 0..dims.batch {
        let at = &a[t * a_block..(t + 1) * a_block];
        let bt = &b[t * b_block..(t + 1) * b_block];
        let ct = &mut c[t * c_block..(t + 1) * c_block];
        match kind {
            MatKind::NN => S::gemm_nn(ct, at, bt, m, k, n),
            MatKind::NT => S::gemm_nt(ct, at, bt, m, k, n),
            MatKind::TN => S::gemm_tn(ct, at, bt, k, m, n),
        }
    }
}

fn transpose_last2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let sh = x.shape();
    let (batch, r, c) = if sh.len() == 3 {
        (sh[0], sh[1], sh[2])
    } else {
        (1, sh[0], sh[1])
    };
    let mut out_shape = sh.to_vec();
    let len = out_shape.len();
    out_shape.swap(len - 2, len - 1);
    let mut out = Tensor::zeros(&out_shape);
    for t in 0..batch {
        let src = &x.data()[t * r * c..(t + 1) * r * c];
        let dst = &mut out.data_mut()[t * r * c..(t + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Rotation of adjacent pairs; `inverse` applies the transposed rotation,
/// which is both the inverse map and the backward pass.
fn rope_apply_raw<S: Scalar>(x: &Tensor<S>, base: f64, start: usize, inverse: bool) -> Tensor<S> {
    let [h, s, dh] = x.shape() else { panic!("rope expects rank 3") };
    let (h, s, dh) = (*h, *s, *dh);
    let half = dh / 2;
    let mut out = Tensor::zeros(x.shape());
    // Angles are computed in f64 regardless of S so both dtypes see the
    // same rotation up to rounding of the final product.
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / dh as f64))
        .collect();
    for hi in 0..h {
        for si in 0..s {
            let pos = (start + si) as f64;
            let row = &x.data()[(hi * s + si) * dh..(hi * s + si + 1) * dh];
            let dst = &mut out.data_mut()[(hi * s + si) * dh..(hi * s + si + 1) * dh];
            for i in 0..half {
                let angle = pos * freqs[i];
                let (sin, cos) = angle.sin_cos();
                let (sin, cos) = (S::from_f64(sin), S::from_f64(cos));
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                if inverse {
                    dst[2 * i] = x0 * cos + x1 * sin;
                    dst[2 * i + 1] = x1 * cos - x0 * sin;
                } else {
                    dst[2 * i] = x0 * cos - x1 * sin;
                    dst[2 * i + 1] = x0 * sin + x1 * cos;
                }
            }
        }
    }
    out
}
