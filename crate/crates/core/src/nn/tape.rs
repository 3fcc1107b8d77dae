//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction.

use super::tensor::{gemm_into, Real, Tensor};
use super::NnError;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<R> },
    SiluGate { gate: Var, up: Var },
    Softmax(Var),
    MaskedFill { a: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<R>, probs: Tensor<R> },
    Mae { pred: Var, target: Tensor<R>, weights: Option<Vec<R>> },
    Slice { a: Var, r0: usize, c0: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumAll(Var),
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: [usize; 2], b: [usize; 2]) -> NnError {
    NnError::Shape { op, a, b }
}

fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
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

    /// Differentiable input (parameter or input we want gradients for).
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let k_a = if ta { av.rows } else { av.cols };
        let k_b = if tb { bv.cols } else { bv.rows };
        if k_a != k_b {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let out = av.matmul(bv, ta, tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Rows `ids` of `table`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows) {
            return Err(NnError::IndexOutOfRange {
                index: bad,
                len: tv.rows,
            });
        }
        let d = tv.cols;
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise `x / rms(x) * gain` with `gain` a `1 × d` vector.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, NnError> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.rows != 1 || gv.cols != xv.cols {
            return Err(shape_err("rms_norm", xv.shape(), gv.shape()));
        }
        let d = xv.cols;
        let mut out = Tensor::zeros(xv.rows, d);
        let mut inv_rms = Vec::with_capacity(xv.rows);
        let eps = R::of(eps);
        let dn = R::of(d as f64);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = row.iter().map(|v| *v * *v).sum::<R>() / dn;
            let inv = R::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (o, (v, g)) in out.row_mut(r).iter_mut().zip(row.iter().zip(&gv.data)) {
                *o = *v * inv * *g;
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// `silu(gate) ⊙ up`.
    pub fn silu_gate(&mut self, gate: Var, up: Var) -> Result<Var, NnError> {
        let (gv, uv) = (self.value(gate), self.value(up));
        if gv.shape() != uv.shape() {
            return Err(shape_err("silu_gate", gv.shape(), uv.shape()));
        }
        let data = gv
            .data
            .iter()
            .zip(&uv.data)
            .map(|(g, u)| *g * sigmoid(*g) * *u)
            .collect();
        let out = Tensor::from_vec(gv.rows, gv.cols, data);
        let rg = self.rg(gate) || self.rg(up);
        Ok(self.push(out, Op::SiluGate { gate, up }, rg))
    }

    /// Softmax along each row. `-inf` entries get exactly zero probability.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let m = row.iter().fold(R::neg_infinity(), |m, v| m.max(*v));
            let mut s = R::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Set entries where `mask` is true to `-inf`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var, NnError> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(shape_err("masked_fill", av.shape(), [1, mask.len()]));
        }
        let mut out = av.clone();
        for (v, &m) in out.data.iter_mut().zip(mask) {
            if m {
                *v = R::neg_infinity();
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Mean row-wise cross-entropy of `logits` against class `targets`.
    /// Optional per-row weights give `Σ wᵢ·CEᵢ / Σ wᵢ`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var, NnError> {
        let lv = self.value(logits);
        if targets.len() != lv.rows {
            return Err(shape_err("cross_entropy", lv.shape(), [targets.len(), 1]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols) {
            return Err(NnError::IndexOutOfRange {
                index: bad,
                len: lv.cols,
            });
        }
        let w: Vec<R> = match weights {
            Some(w) if w.len() == lv.rows => w.iter().map(|&x| R::of(x)).collect(),
            Some(w) => return Err(shape_err("cross_entropy", lv.shape(), [w.len(), 1])),
            None => vec![R::one(); lv.rows],
        };
        let wsum: R = w.iter().copied().sum();
        let mut probs = lv.clone();
        let mut loss = R::zero();
        for r in 0..probs.rows {
            let row = probs.row_mut(r);
            let m = row.iter().fold(R::neg_infinity(), |m, v| m.max(*v));
            let mut s = R::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            let log_z = m + s.ln();
            for v in row.iter_mut() {
                *v = *v / s;
            }
            loss = loss + w[r] * (log_z - lv.at(r, targets[r]));
        }
        let out = Tensor::scalar(loss / wsum);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: w.into_iter().map(|x| x / wsum).collect(),
                probs,
            },
            rg,
        ))
    }

    /// `(1/len) Σ wₖ |predₖ − targetₖ|`; unit weights when `weights` is None.
    pub fn mean_abs_error(
        &mut self,
        pred: Var,
        target: &Tensor<R>,
        weights: Option<&[f64]>,
    ) -> Result<Var, NnError> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape_err("mean_abs_error", pv.shape(), target.shape()));
        }
        let w: Option<Vec<R>> = match weights {
            Some(w) if w.len() == pv.len() => Some(w.iter().map(|&x| R::of(x)).collect()),
            Some(w) => return Err(shape_err("mean_abs_error", pv.shape(), [w.len(), 1])),
            None => None,
        };
        let n = R::of(pv.len().max(1) as f64);
        let mut s = R::zero();
        for (k, (p, t)) in pv.data.iter().zip(&target.data).enumerate() {
            let e = (*p - *t).abs();
            s = s + w.as_ref().map_or(e, |w| w[k] * e);
        }
        let out = Tensor::scalar(s / n);
        let rg = self.rg(pred);
        Ok(self.push(
            out,
            Op::Mae {
                pred,
                target: target.clone(),
                weights: w,
            },
            rg,
        ))
    }

    /// Sub-block `[r0, r0+rows) × [c0, c0+cols)`.
    pub fn slice(
        &mut self,
        a: Var,
        r0: usize,
        rows: usize,
        c0: usize,
        cols: usize,
    ) -> Result<Var, NnError> {
        let av = self.value(a);
        if r0 + rows > av.rows || c0 + cols > av.cols {
            return Err(shape_err("slice", av.shape(), [r0 + rows, c0 + cols]));
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            out.row_mut(r)
                .copy_from_slice(&av.row(r0 + r)[c0..c0 + cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Slice { a, r0, c0 }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), pv.shape()));
            }
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), pv.shape()));
            }
            cols += pv.cols;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + pv.cols].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: R = self.value(a).data.iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>, NnError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(R::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Accumulate `alpha·op(a)·op(b)` into the gradient slot of `v`.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_gemm(
        &self,
        grads: &mut [Option<Tensor<R>>],
        v: Var,
        a: &Tensor<R>,
        ta: bool,
        b: &Tensor<R>,
        tb: bool,
    ) {
        if !self.rg(v) {
            return;
        }
        let shape = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
        gemm_into(a, ta, b, tb, R::one(), R::one(), slot);
    }

    fn propagate(&self, node: &Node<R>, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = op(A)·op(B)
                // dA = dC·op(B)ᵀ (transposed again if A was transposed)
                if *ta {
                    self.accumulate_gemm(grads, *a, bv, *tb, g, true);
                } else {
                    self.accumulate_gemm(grads, *a, g, false, bv, !*tb);
                }
                if *tb {
                    self.accumulate_gemm(grads, *b, g, true, av, *ta);
                } else {
                    self.accumulate_gemm(grads, *b, av, !*ta, g, false);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data.iter().zip(&bv.data).map(|(x, y)| *x * *y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
                }
                if self.rg(*b) {
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| *x * *y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.rows, g.cols, d));
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_in_place(*s);
                self.accumulate(grads, *a, d);
            }
            Op::Embedding { table, ids } => {
                if !self.rg(*table) {
                    return;
                }
                let shape = self.shape(*table);
                let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
                for (r, &i) in ids.iter().enumerate() {
                    for (o, v) in slot.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + *v;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols;
                let dn = R::of(d as f64);
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xv.rows, d);
                    for r in 0..xv.rows {
                        let inv = inv_rms[r];
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let dot: R = (0..d).map(|j| gr[j] * gv.data[j] * xr[j]).sum();
                        let c = inv * inv * inv * dot / dn;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv * gr[j] * gv.data[j] - xr[j] * c;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*gain) {
                    let mut dg = Tensor::zeros(1, d);
                    for r in 0..xv.rows {
                        let inv = inv_rms[r];
                        for (j, o) in dg.data.iter_mut().enumerate() {
                            *o = *o + g.at(r, j) * xv.at(r, j) * inv;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
            }
            Op::SiluGate { gate, up } => {
                let (gv, uv) = (self.value(*gate), self.value(*up));
                if self.rg(*gate) {
                    let d = (0..g.len())
                        .map(|k| {
                            let x = gv.data[k];
                            let s = sigmoid(x);
                            g.data[k] * uv.data[k] * s * (R::one() + x * (R::one() - s))
                        })
                        .collect();
                    self.accumulate(grads, *gate, Tensor::from_vec(g.rows, g.cols, d));
                }
                if self.rg(*up) {
                    let d = (0..g.len())
                        .map(|k| {
                            let x = gv.data[k];
                            g.data[k] * x * sigmoid(x)
                        })
                        .collect();
                    self.accumulate(grads, *up, Tensor::from_vec(g.rows, g.cols, d));
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: R = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                    for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MaskedFill { a, mask } => {
                let mut d = g.clone();
                for (v, &m) in d.data.iter_mut().zip(mask) {
                    if m {
                        *v = R::zero();
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = g.item();
                let mut d = probs.clone();
                for r in 0..d.rows {
                    let w = weights[r] * scale;
                    let row = d.row_mut(r);
                    row[targets[r]] = row[targets[r]] - R::one();
                    for v in row.iter_mut() {
                        *v = *v * w;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Mae {
                pred,
                target,
                weights,
            } => {
                let pv = self.value(*pred);
                let n = R::of(pv.len().max(1) as f64);
                let scale = g.item() / n;
                let d = (0..pv.len())
                    .map(|k| {
                        let e = pv.data[k] - target.data[k];
                        let s = if e > R::zero() {
                            R::one()
                        } else if e < R::zero() {
                            -R::one()
                        } else {
                            R::zero()
                        };
                        let w = weights.as_ref().map_or(R::one(), |w| w[k]);
                        s * w * scale
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::from_vec(pv.rows, pv.cols, d));
            }
            Op::Slice { a, r0, c0 } => {
                if !self.rg(*a) {
                    return;
                }
                let shape = self.shape(*a);
                let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
                for r in 0..g.rows {
                    let dst = &mut slot.row_mut(r0 + r)[*c0..*c0 + g.cols];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o = *o + *v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    if self.rg(p) {
                        let d = Tensor::from_vec(
                            rows,
                            g.cols,
                            g.data[r0 * g.cols..(r0 + rows) * g.cols].to_vec(),
                        );
                        self.accumulate(grads, p, d);
                    }
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cols = self.shape(p)[1];
                    if self.rg(p) {
                        let mut d = Tensor::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    c0 += cols;
                }
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(shape[0], shape[1], g.item()));
            }
        }
    }
}
