//! Reverse-mode differentiation on a per-batch tape.
//!
//! The tape is rebuilt for every batch (define-by-run): each primitive
//! records its output as a new node, so node order is already topological
//! and `backward` is a single reverse sweep that visits each node once.
//! Gradients accumulate additively when a node feeds several consumers.
//!
//! Persistent parameters live in a [`ParamStore`] outside any tape and are
//! bound into a tape as leaves per batch; `export_grads` moves the leaf
//! gradients back into the store once the sweep is done.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{
    axpy, axpy_scaled, matmul_acc, matmul_acc_at, matmul_acc_bt, shape_str, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Per-element freeze mask; frozen elements keep their value and always
    /// report zero gradient (CRF boundary transitions, the PAD embedding row).
    pub frozen: Option<Vec<bool>>,
}

/// Named parameter tensors with their accumulated gradients.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "registry error: duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.entries.push(ParamEntry { name, value, grad, trainable, frozen: None });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Mark whole rows as frozen (value kept, gradient forced to zero).
    pub fn freeze_rows(&mut self, id: ParamId, rows: &[usize]) {
        let entry = &mut self.entries[id.0];
        let cols = entry.value.cols();
        let mask = entry.frozen.get_or_insert_with(|| vec![false; entry.value.numel()]);
        for &r in rows {
            for c in 0..cols {
                mask[r * cols + c] = true;
            }
        }
    }

    /// Mark individual elements as frozen.
    pub fn freeze_elems(&mut self, id: ParamId, coords: &[(usize, usize)]) {
        let entry = &mut self.entries[id.0];
        let cols = entry.value.cols();
        let mask = entry.frozen.get_or_insert_with(|| vec![false; entry.value.numel()]);
        for &(r, c) in coords {
            mask[r * cols + c] = true;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Zero out gradient entries that are frozen; applied on export so the
    /// store never reports a gradient for a frozen element.
    fn apply_freeze(&mut self, id: ParamId) {
        let entry = &mut self.entries[id.0];
        if let Some(mask) = &entry.frozen {
            for (g, &f) in entry.grad.values_mut().iter_mut().zip(mask) {
                if f {
                    *g = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Neg { a: usize },
    Scale { a: usize, c: f64 },
    /// m [RxC] + v [1xC], v broadcast over rows.
    AddRowVec { m: usize, v: usize },
    /// m [RxC] + v [Rx1], v broadcast over cols.
    AddColVec { m: usize, v: usize },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    CatCols { parts: Vec<usize> },
    CatRows { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    /// Sum of a[r,c] over the listed coordinates; scalar output.
    GatherSum { a: usize, coords: Vec<(usize, usize)> },
    Sigmoid { a: usize },
    Tanh { a: usize },
    SoftmaxRows { a: usize },
    /// log-sum-exp over each row: [RxC] -> [Rx1].
    LseRows { a: usize },
    /// log-sum-exp over each column: [RxC] -> [1xC].
    LseCols { a: usize },
    Sum { a: usize },
    /// Sum of the rows marked true in `keep`: [RxC] -> [1xC].
    MaskedSumRows { a: usize, keep: Vec<bool> },
    /// Elementwise product with an inverted-dropout mask (entries 0 or 1/(1-p)).
    Dropout { a: usize, mask: Vec<f64> },
    /// Identity forward, negated gradient backward.
    GradReverse { a: usize },
}

#[derive(Debug, Clone, Copy)]
enum Binding {
    None,
    Param(ParamId),
    /// Leaf holds gathered rows of a store parameter; gradient scatter-adds back.
    ParamRows(ParamId),
}

#[derive(Debug)]
struct NodeMeta {
    op: Op,
    requires_grad: bool,
    binding: Binding,
    /// Row indices for `Binding::ParamRows`.
    rows: Vec<usize>,
}

/// Records one batch worth of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    metas: Vec<NodeMeta>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    recording: bool,
    param_cache: HashMap<ParamId, usize>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            metas: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            recording: true,
            param_cache: HashMap::new(),
        }
    }

    /// Forward-only tape: values are computed identically but ops are not
    /// retained, so backward cannot flow.
    pub fn forward_only() -> Self {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (op, requires_grad) = if self.recording {
            (op, requires_grad)
        } else {
            (Op::Leaf, false)
        };
        self.metas.push(NodeMeta { op, requires_grad, binding: Binding::None, rows: Vec::new() });
        self.values.push(value);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.metas[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last backward target w.r.t. this node, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Bind a store parameter as a leaf. Repeated binds of the same parameter
    /// within one tape return the same node so gradients pool there.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&node) = self.param_cache.get(&id) {
            return Var(node);
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.metas[v.0].binding = Binding::Param(id);
        self.param_cache.insert(id, v.0);
        Var(v.0)
    }

    /// Bind selected rows of a store parameter as a `[len(rows) x cols]` leaf.
    /// Used for embedding lookup so a batch never materializes a full-table
    /// gradient; the backward scatter-adds row gradients into the store.
    pub fn param_rows(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Var {
        let table = store.value(id);
        let cols = table.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert!(
                r < table.rows(),
                "vocab error: row {r} out of range for {} {}",
                store.name(id),
                shape_str(table)
            );
            data.extend_from_slice(table.row_slice(r));
        }
        let v = self.push(Tensor::new(rows.len(), cols, data), Op::Leaf, true);
        self.metas[v.0].binding = Binding::ParamRows(id);
        self.metas[v.0].rows = rows.to_vec();
        v
    }

    // ---- primitive ops ----

    fn binary_same_shape(&self, name: &str, a: Var, b: Var) {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert!(
            ta.same_shape(tb),
            "dimension error: {name} {} vs {}",
            shape_str(ta),
            shape_str(tb)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("add", a, b);
        let mut out = self.values[a.0].clone();
        axpy(out.values_mut(), self.values[b.0].values());
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Add { a: a.0, b: b.0 }, req)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("sub", a, b);
        let mut out = self.values[a.0].clone();
        axpy_scaled(out.values_mut(), -1.0, self.values[b.0].values());
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Sub { a: a.0, b: b.0 }, req)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("mul", a, b);
        let mut out = self.values[a.0].clone();
        for (o, s) in out.values_mut().iter_mut().zip(self.values[b.0].values()) {
            *o *= s;
        }
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul { a: a.0, b: b.0 }, req)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        out.values_mut().iter_mut().for_each(|v| *v = -*v);
        let req = self.requires(a);
        self.push(out, Op::Neg { a: a.0 }, req)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.values[a.0].clone();
        out.values_mut().iter_mut().for_each(|v| *v *= c);
        let req = self.requires(a);
        self.push(out, Op::Scale { a: a.0, c }, req)
    }

    pub fn add_row_vec(&mut self, m: Var, v: Var) -> Var {
        let (tm, tv) = (&self.values[m.0], &self.values[v.0]);
        assert!(
            tv.rows() == 1 && tv.cols() == tm.cols(),
            "dimension error: add_row_vec {} + {}",
            shape_str(tm),
            shape_str(tv)
        );
        let mut out = tm.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            axpy(&mut out.values_mut()[r * cols..(r + 1) * cols], self.values[v.0].values());
        }
        let req = self.requires(m) || self.requires(v);
        self.push(out, Op::AddRowVec { m: m.0, v: v.0 }, req)
    }

    pub fn add_col_vec(&mut self, m: Var, v: Var) -> Var {
        let (tm, tv) = (&self.values[m.0], &self.values[v.0]);
        assert!(
            tv.cols() == 1 && tv.rows() == tm.rows(),
            "dimension error: add_col_vec {} + {}",
            shape_str(tm),
            shape_str(tv)
        );
        let mut out = tm.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let add = tv.values()[r];
            out.values_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|x| *x += add);
        }
        let req = self.requires(m) || self.requires(v);
        self.push(out, Op::AddColVec { m: m.0, v: v.0 }, req)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert!(
            ta.cols() == tb.rows(),
            "dimension error: matmul {} x {}",
            shape_str(ta),
            shape_str(tb)
        );
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        matmul_acc(out.values_mut(), ta.values(), tb.values(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Matmul { a: a.0, b: b.0 }, req)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let (r, c) = ta.shape();
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.set(j, i, ta.at(i, j));
            }
        }
        let req = self.requires(a);
        self.push(out, Op::Transpose { a: a.0 }, req)
    }

    pub fn cat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "dimension error: cat_cols of zero parts");
        let rows = self.values[parts[0].0].rows();
        let mut cols = 0;
        for p in parts {
            let t = &self.values[p.0];
            assert!(
                t.rows() == rows,
                "dimension error: cat_cols row mismatch {} vs {rows} rows",
                shape_str(t)
            );
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let t = &self.values[p.0];
                let w = t.cols();
                out.values_mut()[r * cols + off..r * cols + off + w]
                    .copy_from_slice(t.row_slice(r));
                off += w;
            }
        }
        let req = parts.iter().any(|p| self.requires(*p));
        self.push(out, Op::CatCols { parts: parts.iter().map(|p| p.0).collect() }, req)
    }

    pub fn cat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "dimension error: cat_rows of zero parts");
        let cols = self.values[parts[0].0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = &self.values[p.0];
            assert!(
                t.cols() == cols,
                "dimension error: cat_rows col mismatch {} vs {cols} cols",
                shape_str(t)
            );
            rows += t.rows();
            data.extend_from_slice(t.values());
        }
        let req = parts.iter().any(|p| self.requires(*p));
        self.push(
            Tensor::new(rows, cols, data),
            Op::CatRows { parts: parts.iter().map(|p| p.0).collect() },
            req,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.values[a.0];
        assert!(
            start + len <= ta.cols() && len > 0,
            "dimension error: slice_cols {start}..{} of {}",
            start + len,
            shape_str(ta)
        );
        let mut out = Tensor::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            out.values_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        let req = self.requires(a);
        self.push(out, Op::SliceCols { a: a.0, start }, req)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.values[a.0];
        assert!(
            start + len <= ta.rows() && len > 0,
            "dimension error: slice_rows {start}..{} of {}",
            start + len,
            shape_str(ta)
        );
        let cols = ta.cols();
        let data = ta.values()[start * cols..(start + len) * cols].to_vec();
        let req = self.requires(a);
        self.push(Tensor::new(len, cols, data), Op::SliceRows { a: a.0, start }, req)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = &self.values[a.0];
        let cols = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < ta.rows(), "vocab error: row {i} out of range for {}", shape_str(ta));
            data.extend_from_slice(ta.row_slice(i));
        }
        let req = self.requires(a);
        self.push(
            Tensor::new(idx.len(), cols, data),
            Op::GatherRows { a: a.0, idx: idx.to_vec() },
            req,
        )
    }

    pub fn gather_sum(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let ta = &self.values[a.0];
        let mut total = 0.0;
        for &(r, c) in coords {
            assert!(
                r < ta.rows() && c < ta.cols(),
                "contract error: gather_sum ({r},{c}) out of range for {}",
                shape_str(ta)
            );
            total += ta.at(r, c);
        }
        let req = self.requires(a);
        self.push(Tensor::scalar(total), Op::GatherSum { a: a.0, coords: coords.to_vec() }, req)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        out.values_mut().iter_mut().for_each(|v| *v = stable_sigmoid(*v));
        let req = self.requires(a);
        self.push(out, Op::Sigmoid { a: a.0 }, req)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        out.values_mut().iter_mut().for_each(|v| *v = v.tanh());
        let req = self.requires(a);
        self.push(out, Op::Tanh { a: a.0 }, req)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let (r, c) = ta.shape();
        assert!(c > 0 && r > 0, "dimension error: softmax_rows on empty axis {}", shape_str(ta));
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = ta.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out.values_mut()[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                o[j] = e;
                sum += e;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let req = self.requires(a);
        self.push(out, Op::SoftmaxRows { a: a.0 }, req)
    }

    /// log(sum(exp(row))) per row, computed with max-subtraction.
    pub fn lse_rows(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let (r, c) = ta.shape();
        assert!(c > 0 && r > 0, "dimension error: lse_rows on empty axis {}", shape_str(ta));
        let mut out = Tensor::zeros(r, 1);
        for i in 0..r {
            out.values_mut()[i] = log_sum_exp_slice(ta.row_slice(i));
        }
        let req = self.requires(a);
        self.push(out, Op::LseRows { a: a.0 }, req)
    }

    /// log(sum(exp(col))) per column.
    pub fn lse_cols(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let (r, c) = ta.shape();
        assert!(c > 0 && r > 0, "dimension error: lse_cols on empty axis {}", shape_str(ta));
        let mut out = Tensor::zeros(1, c);
        for j in 0..c {
            let mut max = f64::NEG_INFINITY;
            for i in 0..r {
                max = max.max(ta.at(i, j));
            }
            let mut sum = 0.0;
            for i in 0..r {
                sum += (ta.at(i, j) - max).exp();
            }
            out.values_mut()[j] = max + sum.ln();
        }
        let req = self.requires(a);
        self.push(out, Op::LseCols { a: a.0 }, req)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.values[a.0].values().iter().sum();
        let req = self.requires(a);
        self.push(Tensor::scalar(total), Op::Sum { a: a.0 }, req)
    }

    pub fn masked_sum_rows(&mut self, a: Var, keep: &[bool]) -> Var {
        let ta = &self.values[a.0];
        assert!(
            keep.len() == ta.rows(),
            "dimension error: masked_sum_rows mask len {} vs {}",
            keep.len(),
            shape_str(ta)
        );
        let c = ta.cols();
        let mut out = Tensor::zeros(1, c);
        for (r, &k) in keep.iter().enumerate() {
            if k {
                axpy(out.values_mut(), ta.row_slice(r));
            }
        }
        let req = self.requires(a);
        self.push(out, Op::MaskedSumRows { a: a.0, keep: keep.to_vec() }, req)
    }

    /// Inverted dropout with a caller-supplied keep mask (true = keep).
    /// Kept entries are scaled by 1/(1-rate) so eval needs no rescaling.
    pub fn dropout_with_mask(&mut self, a: Var, rate: f64, keep: &[bool]) -> Var {
        let ta = &self.values[a.0];
        assert!((0.0..1.0).contains(&rate), "contract error: dropout rate {rate}");
        assert!(
            keep.len() == ta.numel(),
            "dimension error: dropout mask len {} vs {}",
            keep.len(),
            shape_str(ta)
        );
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let mut out = ta.clone();
        for (o, m) in out.values_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let req = self.requires(a);
        self.push(out, Op::Dropout { a: a.0, mask }, req)
    }

    /// Inverted dropout drawing its mask from `rng`. A rate of 0 is the
    /// identity and records nothing extra.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate == 0.0 {
            return a;
        }
        let n = self.values[a.0].numel();
        let keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= rate).collect();
        self.dropout_with_mask(a, rate, &keep)
    }

    /// Identity in the forward pass; the backward pass propagates the negated
    /// upstream gradient.
    pub fn grad_reverse(&mut self, a: Var) -> Var {
        let out = self.values[a.0].clone();
        let req = self.requires(a);
        self.push(out, Op::GradReverse { a: a.0 }, req)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Every reachable node that requires
    /// grad ends up with d(loss)/d(node); the loss's own gradient is 1.
    pub fn backward(&mut self, loss: Var) {
        let lt = &self.values[loss.0];
        assert!(
            lt.is_scalar(),
            "contract error: backward on non-scalar loss {}",
            shape_str(lt)
        );
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.metas[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].clone() else { continue };
            let metas = &self.metas;
            let values = &self.values;
            let grads = &mut self.grads;

            let mut acc = |node: usize, f: &mut dyn FnMut(&mut Tensor)| {
                if !metas[node].requires_grad {
                    return;
                }
                let slot = &mut grads[node];
                if slot.is_none() {
                    let t = &values[node];
                    *slot = Some(Tensor::zeros(t.rows(), t.cols()));
                }
                f(slot.as_mut().unwrap());
            };

            match &metas[i].op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    acc(*a, &mut |d| axpy(d.values_mut(), g.values()));
                    acc(*b, &mut |d| axpy(d.values_mut(), g.values()));
                }
                Op::Sub { a, b } => {
                    acc(*a, &mut |d| axpy(d.values_mut(), g.values()));
                    acc(*b, &mut |d| axpy_scaled(d.values_mut(), -1.0, g.values()));
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&values[*a], &values[*b]);
                    acc(*a, &mut |d| {
                        for ((d, g), s) in
                            d.values_mut().iter_mut().zip(g.values()).zip(bv.values())
                        {
                            *d += g * s;
                        }
                    });
                    acc(*b, &mut |d| {
                        for ((d, g), s) in
                            d.values_mut().iter_mut().zip(g.values()).zip(av.values())
                        {
                            *d += g * s;
                        }
                    });
                }
                Op::Neg { a } => {
                    acc(*a, &mut |d| axpy_scaled(d.values_mut(), -1.0, g.values()));
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    acc(*a, &mut |d| axpy_scaled(d.values_mut(), c, g.values()));
                }
                Op::AddRowVec { m, v } => {
                    acc(*m, &mut |d| axpy(d.values_mut(), g.values()));
                    let (rows, cols) = g.shape();
                    acc(*v, &mut |d| {
                        for r in 0..rows {
                            axpy(d.values_mut(), &g.values()[r * cols..(r + 1) * cols]);
                        }
                    });
                }
                Op::AddColVec { m, v } => {
                    acc(*m, &mut |d| axpy(d.values_mut(), g.values()));
                    let (rows, cols) = g.shape();
                    acc(*v, &mut |d| {
                        for r in 0..rows {
                            let s: f64 = g.values()[r * cols..(r + 1) * cols].iter().sum();
                            d.values_mut()[r] += s;
                        }
                    });
                }
                Op::Matmul { a, b } => {
                    let (av, bv) = (&values[*a], &values[*b]);
                    let (m, k) = av.shape();
                    let n = bv.cols();
                    acc(*a, &mut |d| {
                        matmul_acc_bt(d.values_mut(), g.values(), bv.values(), m, k, n);
                    });
                    acc(*b, &mut |d| {
                        matmul_acc_at(d.values_mut(), av.values(), g.values(), m, k, n);
                    });
                }
                Op::Transpose { a } => {
                    let (r, c) = g.shape();
                    acc(*a, &mut |d| {
                        for i in 0..r {
                            for j in 0..c {
                                let cur = d.at(j, i);
                                d.set(j, i, cur + g.at(i, j));
                            }
                        }
                    });
                }
                Op::CatCols { parts } => {
                    let cols = g.cols();
                    let rows = g.rows();
                    let mut off = 0;
                    for p in parts {
                        let w = values[*p].cols();
                        acc(*p, &mut |d| {
                            for r in 0..rows {
                                axpy(
                                    &mut d.values_mut()[r * w..(r + 1) * w],
                                    &g.values()[r * cols + off..r * cols + off + w],
                                );
                            }
                        });
                        off += w;
                    }
                }
                Op::CatRows { parts } => {
                    let cols = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let h = values[*p].rows();
                        acc(*p, &mut |d| {
                            axpy(
                                d.values_mut(),
                                &g.values()[off * cols..(off + h) * cols],
                            );
                        });
                        off += h;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (rows, len) = g.shape();
                    let src_cols = values[*a].cols();
                    let start = *start;
                    acc(*a, &mut |d| {
                        for r in 0..rows {
                            axpy(
                                &mut d.values_mut()
                                    [r * src_cols + start..r * src_cols + start + len],
                                &g.values()[r * len..(r + 1) * len],
                            );
                        }
                    });
                }
                Op::SliceRows { a, start } => {
                    let (len, cols) = g.shape();
                    let start = *start;
                    acc(*a, &mut |d| {
                        axpy(
                            &mut d.values_mut()[start * cols..(start + len) * cols],
                            g.values(),
                        );
                    });
                }
                Op::GatherRows { a, idx } => {
                    let cols = g.cols();
                    acc(*a, &mut |d| {
                        for (t, &i) in idx.iter().enumerate() {
                            axpy(
                                &mut d.values_mut()[i * cols..(i + 1) * cols],
                                &g.values()[t * cols..(t + 1) * cols],
                            );
                        }
                    });
                }
                Op::GatherSum { a, coords } => {
                    let gv = g.item();
                    acc(*a, &mut |d| {
                        for &(r, c) in coords {
                            let cur = d.at(r, c);
                            d.set(r, c, cur + gv);
                        }
                    });
                }
                Op::Sigmoid { a } => {
                    let y = &values[i];
                    acc(*a, &mut |d| {
                        for ((d, g), y) in
                            d.values_mut().iter_mut().zip(g.values()).zip(y.values())
                        {
                            *d += g * y * (1.0 - y);
                        }
                    });
                }
                Op::Tanh { a } => {
                    let y = &values[i];
                    acc(*a, &mut |d| {
                        for ((d, g), y) in
                            d.values_mut().iter_mut().zip(g.values()).zip(y.values())
                        {
                            *d += g * (1.0 - y * y);
                        }
                    });
                }
                Op::SoftmaxRows { a } => {
                    let y = &values[i];
                    let (rows, cols) = y.shape();
                    acc(*a, &mut |d| {
                        for r in 0..rows {
                            let yr = y.row_slice(r);
                            let gr = &g.values()[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            let dr = &mut d.values_mut()[r * cols..(r + 1) * cols];
                            for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                                *d += y * (g - dot);
                            }
                        }
                    });
                }
                Op::LseRows { a } => {
                    let x = &values[*a];
                    let y = &values[i];
                    let (rows, cols) = x.shape();
                    acc(*a, &mut |d| {
                        for r in 0..rows {
                            let gr = g.values()[r];
                            let lse = y.values()[r];
                            let dr = &mut d.values_mut()[r * cols..(r + 1) * cols];
                            for (d, &x) in dr.iter_mut().zip(x.row_slice(r)) {
                                *d += gr * (x - lse).exp();
                            }
                        }
                    });
                }
                Op::LseCols { a } => {
                    let x = &values[*a];
                    let y = &values[i];
                    let (rows, cols) = x.shape();
                    acc(*a, &mut |d| {
                        for r in 0..rows {
                            for c in 0..cols {
                                let cur = d.at(r, c);
                                d.set(
                                    r,
                                    c,
                                    cur + g.values()[c] * (x.at(r, c) - y.values()[c]).exp(),
                                );
                            }
                        }
                    });
                }
                Op::Sum { a } => {
                    let gv = g.item();
                    acc(*a, &mut |d| {
                        d.values_mut().iter_mut().for_each(|x| *x += gv);
                    });
                }
                Op::MaskedSumRows { a, keep } => {
                    let cols = g.cols();
                    acc(*a, &mut |d| {
                        for (r, &k) in keep.iter().enumerate() {
                            if k {
                                axpy(
                                    &mut d.values_mut()[r * cols..(r + 1) * cols],
                                    g.values(),
                                );
                            }
                        }
                    });
                }
                Op::Dropout { a, mask } => {
                    acc(*a, &mut |d| {
                        for ((d, g), m) in
                            d.values_mut().iter_mut().zip(g.values()).zip(mask)
                        {
                            *d += g * m;
                        }
                    });
                }
                Op::GradReverse { a } => {
                    acc(*a, &mut |d| axpy_scaled(d.values_mut(), -1.0, g.values()));
                }
            }
        }
    }

    /// Move parameter-leaf gradients into the store, honoring freeze masks.
    pub fn export_grads(&self, store: &mut ParamStore) {
        for (i, meta) in self.metas.iter().enumerate() {
            let Some(g) = &self.grads[i] else { continue };
            match meta.binding {
                Binding::None => {}
                Binding::Param(id) => {
                    axpy(store.entry_mut(id).grad.values_mut(), g.values());
                    store.apply_freeze(id);
                }
                Binding::ParamRows(id) => {
                    let cols = g.cols();
                    for (t, &r) in meta.rows.iter().enumerate() {
                        let dst = store.entry_mut(id).grad.values_mut();
                        axpy(
                            &mut dst[r * cols..(r + 1) * cols],
                            &g.values()[t * cols..(t + 1) * cols],
                        );
                    }
                    store.apply_freeze(id);
                }
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted log-sum-exp over a slice; safe for |x| up to 1e4.
pub fn log_sum_exp_slice(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "dimension error: log_sum_exp over empty axis");
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_loss_grad_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.5), true);
        tape.backward(x);
        assert_eq!(tape.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn square_sum_grad() {
        // loss = sum(x * x), x = [1,2,3] -> grad [2,4,6]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x);
        let loss = tape.sum(sq);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap().values(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(2, 2, vec![1., 0., 0., 1.]), true);
        let b = tape.leaf(Tensor::new(2, 1, vec![3., 4.]), true);
        let out = tape.matmul(a, b);
        assert_eq!(tape.value(out).values(), &[3., 4.]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(1, 2, vec![1., 2.]), true);
        let b = tape.leaf(Tensor::new(2, 1, vec![3., 4.]), true);
        let out = tape.matmul(a, b);
        assert_eq!(tape.value(out).item(), 11.0);
    }

    #[test]
    #[should_panic(expected = "dimension error")]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3), true);
        let b = tape.leaf(Tensor::zeros(4, 5), true);
        tape.matmul(a, b);
    }

    #[test]
    fn lse_symmetry_and_overflow_guard() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::row(&[0.0, 0.0]), true);
        let l = tape.lse_rows(a);
        assert!((tape.value(l).item() - 2.0f64.ln()).abs() < 1e-12);

        let b = tape.leaf(Tensor::row(&[1000.0, 1000.0]), true);
        let l2 = tape.lse_rows(b);
        let got = tape.value(l2).item();
        assert!(got.is_finite());
        assert!((got - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn lse_matches_naive_at_small_magnitude() {
        let xs: [f64; 6] = [0.3, -1.2, 0.7, 2.1, -0.4, 0.05];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp_slice(&xs) - naive).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "dimension error")]
    fn lse_empty_axis() {
        log_sum_exp_slice(&[]);
    }

    #[test]
    fn grad_reverse_forward_identity_backward_negation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.5, -2.0]), true);
        let r = tape.grad_reverse(x);
        assert_eq!(tape.value(r).values(), tape.value(x).values());

        let loss = tape.sum(r);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap().values(), &[-1.0, -1.0]);
    }

    #[test]
    fn grad_reverse_cancellation() {
        // loss = sum(x + grad_reverse(x)) -> grad 0 everywhere
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.2, -0.7, 1.1]), true);
        let r = tape.grad_reverse(x);
        let s = tape.add(x, r);
        let loss = tape.sum(s);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap().values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fanout_accumulates_both_paths() {
        // y = x*x + 3x used twice via separate consumers; d/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(5.0), true);
        let sq = tape.mul(x, x);
        let tripled = tape.scale(x, 3.0);
        let y = tape.add(sq, tripled);
        tape.backward(y);
        assert_eq!(tape.grad(x).unwrap().item(), 13.0);
    }

    #[test]
    #[should_panic(expected = "contract error")]
    fn backward_non_scalar_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]), true);
        tape.backward(x);
    }

    #[test]
    fn forward_values_independent_of_recording() {
        let run = |recording: bool| {
            let mut tape = if recording { Tape::new() } else { Tape::forward_only() };
            let a = tape.leaf(Tensor::new(2, 2, vec![0.3, -1.0, 2.0, 0.5]), true);
            let b = tape.leaf(Tensor::new(2, 2, vec![1.0, 0.25, -0.5, 0.75]), true);
            let m = tape.matmul(a, b);
            let s = tape.sigmoid(m);
            let t = tape.tanh(s);
            let out = tape.sum(t);
            tape.value(out).item()
        };
        assert_eq!(run(true).to_bits(), run(false).to_bits());
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]), true);
        let s = tape.softmax_rows(a);
        let t = tape.value(s);
        for r in 0..2 {
            let sum: f64 = t.row_slice(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(t.row_slice(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn param_binding_caches_and_exports() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(&[2.0, -1.0]), true);
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        let doubled = tape.add(a, b);
        let loss = tape.sum(doubled);
        tape.backward(loss);
        tape.export_grads(&mut store);
        assert_eq!(store.grad(w).values(), &[2.0, 2.0]);
    }

    #[test]
    fn param_rows_scatter_accumulates_duplicates() {
        let mut store = ParamStore::new();
        let table = store.add("emb", Tensor::new(3, 2, vec![1., 2., 3., 4., 5., 6.]), true);
        let mut tape = Tape::new();
        let rows = tape.param_rows(&store, table, &[1, 1, 2]);
        let loss = tape.sum(rows);
        tape.backward(loss);
        tape.export_grads(&mut store);
        assert_eq!(store.grad(table).values(), &[0., 0., 2., 2., 1., 1.]);
    }

    #[test]
    fn frozen_rows_report_zero_grad() {
        let mut store = ParamStore::new();
        let table = store.add("emb", Tensor::new(2, 2, vec![0.0; 4]), true);
        store.freeze_rows(table, &[0]);
        let mut tape = Tape::new();
        let rows = tape.param_rows(&store, table, &[0, 1]);
        let loss = tape.sum(rows);
        tape.backward(loss);
        tape.export_grads(&mut store);
        assert_eq!(store.grad(table).values(), &[0., 0., 1., 1.]);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.5, -0.25, 4.0]), true);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let y = tape.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_mask_scales_kept_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 1.0, 1.0, 1.0]), true);
        let y = tape.dropout_with_mask(x, 0.5, &[true, false, true, false]);
        assert_eq!(tape.value(y).values(), &[2.0, 0.0, 2.0, 0.0]);
        let loss = tape.sum(y);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap().values(), &[2.0, 0.0, 2.0, 0.0]);
    }
}
