//! Tape-based reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A `Graph` records every primitive as it executes. Nodes are append-only,
//! so reverse creation order is a valid topological order for backward.
//! Graphs are built per forward pass and discarded after `backward`.

use super::kernels;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Handle to a recorded array. Only valid for the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    MulRow { a: usize, gain: usize },
    Scale { a: usize, c: T },
    Relu { a: usize },
    Dropout { a: usize, mask: Vec<T> },
    SoftmaxRows { a: usize },
    LayerNorm { a: usize, stats: Vec<(T, T)> },
    Gather { table: usize, ids: Vec<usize> },
    Slice { a: usize, r0: usize, c0: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SumAll { a: usize },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        n_valid: usize,
    },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// The recorded compute graph for one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    ln_eps: T,
}

fn shape_err(op: &'static str, details: String) -> Error {
    Error::ShapeMismatch { op, details }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            ln_eps: T::from_f64(1e-5),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        values: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> TensorId {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            values,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Insert an input array. `requires_grad` leaves accumulate gradients
    /// during backward.
    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<T>, requires_grad: bool) -> TensorId {
        assert_eq!(values.len(), rows * cols, "leaf buffer does not match shape");
        self.push(rows, cols, values, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<T>) -> TensorId {
        self.leaf(rows, cols, values, false)
    }

    pub fn scalar_constant(&mut self, v: T) -> TensorId {
        self.leaf(1, 1, vec![v], false)
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].values
    }

    pub fn scalar_value(&self, id: TensorId) -> T {
        debug_assert_eq!(self.shape(id), (1, 1));
        self.nodes[id.0].values[0]
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("({m}x{k}) x ({k2}x{n})")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(m, n, out, Op::Matmul { a: a.0, b: b.0 }, rg))
    }

    /// a (m,k) x b(n,k)^T -> (m,n)
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("({m}x{k}) x ({n}x{k2})^T")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(m, n, out, Op::MatmulNT { a: a.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err("add", format!("{sa:?} vs {sb:?}")));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(sa.0, sa.1, out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Row-wise bias add: (m,n) + (1,n).
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let sb = self.shape(bias);
        if sb != (1, n) {
            return Err(shape_err("add_row", format!("({m}x{n}) + {sb:?}")));
        }
        let bv = self.value(bias).to_vec();
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + bv[j];
            }
        }
        let rg = self.any_requires(&[a.0, bias.0]);
        Ok(self.push(m, n, out, Op::AddRow { a: a.0, bias: bias.0 }, rg))
    }

    /// Row-wise gain: (m,n) * (1,n).
    pub fn mul_row(&mut self, a: TensorId, gain: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let sg = self.shape(gain);
        if sg != (1, n) {
            return Err(shape_err("mul_row", format!("({m}x{n}) * {sg:?}")));
        }
        let gv = self.value(gain).to_vec();
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] * gv[j];
            }
        }
        let rg = self.any_requires(&[a.0, gain.0]);
        Ok(self.push(m, n, out, Op::MulRow { a: a.0, gain: gain.0 }, rg))
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<T> = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(m, n, out, Op::Scale { a: a.0, c }, rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<T> = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(m, n, out, Op::Relu { a: a.0 }, rg)
    }

    /// Inverted dropout; `mask` entries are 0 or 1/(1-p), drawn by the caller.
    pub fn dropout(&mut self, a: TensorId, mask: Vec<T>) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if mask.len() != m * n {
            return Err(shape_err("dropout", format!("mask {} vs ({m}x{n})", mask.len())));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &k)| x * k)
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(m, n, out, Op::Dropout { a: a.0, mask }, rg))
    }

    /// Per-row softmax; `mask[i*n+j] == true` excludes that entry.
    /// Fully-masked rows produce all-zero output.
    pub fn softmax_rows(&mut self, a: TensorId, mask: Option<Vec<bool>>) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if let Some(ref mk) = mask {
            if mk.len() != m * n {
                return Err(shape_err("softmax_rows", format!("mask {} vs ({m}x{n})", mk.len())));
            }
        }
        let mut out = self.value(a).to_vec();
        kernels::softmax_rows_masked(&mut out, m, n, mask.as_deref());
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(m, n, out, Op::SoftmaxRows { a: a.0 }, rg))
    }

    /// Per-row layer normalization without affine parameters.
    pub fn layernorm_rows(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut out = vec![T::zero(); m * n];
        let stats = kernels::layernorm_rows(self.value(a), &mut out, m, n, self.ln_eps);
        let rg = self.nodes[a.0].requires_grad;
        self.push(m, n, out, Op::LayerNorm { a: a.0, stats }, rg)
    }

    /// Row gather: out[i] = table[ids[i]].
    pub fn gather(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (rows, n) = self.shape(table);
        for &id in ids {
            if id >= rows {
                return Err(shape_err("gather", format!("row {id} out of {rows}")));
            }
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            out.extend_from_slice(&tv[id * n..(id + 1) * n]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            ids.len(),
            n,
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous sub-block of rows r0..r0+rows, cols c0..c0+cols.
    pub fn slice(&mut self, a: TensorId, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if r0 + rows > m || c0 + cols > n {
            return Err(shape_err(
                "slice",
                format!("[{r0}..{}, {c0}..{}] of ({m}x{n})", r0 + rows, c0 + cols),
            ));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let base = (r0 + i) * n + c0;
            out.extend_from_slice(&av[base..base + cols]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(rows, cols, out, Op::Slice { a: a.0, r0, c0 }, rg))
    }

    /// Horizontal concatenation; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no parts".into()));
        }
        let (m, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(shape_err("concat_cols", format!("rows {pm} vs {m}")));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, pn) = self.shape(p);
                let pv = self.value(p);
                out.extend_from_slice(&pv[i * pn..(i + 1) * pn]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.any_requires(&ids);
        Ok(self.push(m, total, out, Op::ConcatCols { parts: ids }, rg))
    }

    /// Vertical concatenation; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no parts".into()));
        }
        let (_, n) = self.shape(parts[0]);
        let mut total = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                return Err(shape_err("concat_rows", format!("cols {pn} vs {n}")));
            }
            total += pm;
            out.extend_from_slice(self.value(p));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.any_requires(&ids);
        Ok(self.push(total, n, out, Op::ConcatRows { parts: ids }, rg))
    }

    /// Sum of all entries -> scalar.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(1, 1, vec![s], Op::SumAll { a: a.0 }, rg)
    }

    /// Token-mean negative log-likelihood over rows with a target id;
    /// rows with `None` (padding) contribute nothing.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[Option<usize>]) -> Result<TensorId> {
        let (m, v) = self.shape(logits);
        if targets.len() != m {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets vs {m} rows", targets.len()),
            ));
        }
        let n_valid = targets.iter().filter(|t| t.is_some()).count();
        if n_valid == 0 {
            return Err(Error::InvalidArgument(
                "cross_entropy: no valid target positions".into(),
            ));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); m * v];
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            if *t >= v {
                return Err(shape_err("cross_entropy", format!("target {t} out of {v}")));
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            let prow = &mut probs[i * v..(i + 1) * v];
            for (p, &z) in prow.iter_mut().zip(row) {
                *p = (z - max).exp();
                sum = sum + *p;
            }
            let inv = T::one() / sum;
            for p in prow.iter_mut() {
                *p = *p * inv;
            }
            let lse = sum.ln() + max;
            total = total + (lse - row[*t]);
        }
        let loss = total / T::from_usize(n_valid);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                n_valid,
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Every `requires_grad` node
    /// reachable from the loss gets `grad = d loss / d node` accumulated.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty graph".into()));
        }
        let (m, n) = self.shape(loss);
        if (m, n) != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got ({m}x{n})"
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            let g = node.grad.as_ref().unwrap().clone();
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (head[*a].rows, head[*a].cols);
                    let n = head[*b].cols;
                    if head[*a].requires_grad {
                        let bv = head[*b].values.clone();
                        let ga = ensure_grad(&mut head[*a]);
                        kernels::matmul_nt(&g, &bv, ga, m, n, k);
                    }
                    if head[*b].requires_grad {
                        let av = head[*a].values.clone();
                        let gb = ensure_grad(&mut head[*b]);
                        kernels::matmul_tn(&av, &g, gb, m, k, n);
                    }
                }
                Op::MatmulNT { a, b } => {
                    let (m, k) = (head[*a].rows, head[*a].cols);
                    let n = head[*b].rows;
                    if head[*a].requires_grad {
                        let bv = head[*b].values.clone();
                        let ga = ensure_grad(&mut head[*a]);
                        kernels::matmul(&g, &bv, ga, m, n, k);
                    }
                    if head[*b].requires_grad {
                        let av = head[*a].values.clone();
                        let gb = ensure_grad(&mut head[*b]);
                        kernels::matmul_tn(&g, &av, gb, m, n, k);
                    }
                }
                Op::Add { a, b } => {
                    for &x in [a, b] {
                        if head[x].requires_grad {
                            accumulate(ensure_grad(&mut head[x]), &g);
                        }
                    }
                }
                Op::AddRow { a, bias } => {
                    if head[*a].requires_grad {
                        accumulate(ensure_grad(&mut head[*a]), &g);
                    }
                    if head[*bias].requires_grad {
                        let gb = ensure_grad(&mut head[*bias]);
                        for i in 0..rows {
                            for j in 0..cols {
                                gb[j] = gb[j] + g[i * cols + j];
                            }
                        }
                    }
                }
                Op::MulRow { a, gain } => {
                    let (a, gain) = (*a, *gain);
                    if head[a].requires_grad {
                        let gv = head[gain].values.clone();
                        let ga = ensure_grad(&mut head[a]);
                        for i in 0..rows {
                            for j in 0..cols {
                                ga[i * cols + j] = ga[i * cols + j] + g[i * cols + j] * gv[j];
                            }
                        }
                    }
                    if head[gain].requires_grad {
                        let av = head[a].values.clone();
                        let gg = ensure_grad(&mut head[gain]);
                        for i in 0..rows {
                            for j in 0..cols {
                                gg[j] = gg[j] + g[i * cols + j] * av[i * cols + j];
                            }
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    if head[*a].requires_grad {
                        let ga = ensure_grad(&mut head[*a]);
                        for (gv, &gi) in ga.iter_mut().zip(&g) {
                            *gv = *gv + gi * c;
                        }
                    }
                }
                Op::Relu { a } => {
                    if head[*a].requires_grad {
                        let av = head[*a].values.clone();
                        let ga = ensure_grad(&mut head[*a]);
                        for ((gv, &gi), &x) in ga.iter_mut().zip(&g).zip(&av) {
                            if x > T::zero() {
                                *gv = *gv + gi;
                            }
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    let mask = mask.clone();
                    if head[*a].requires_grad {
                        let ga = ensure_grad(&mut head[*a]);
                        for ((gv, &gi), &k) in ga.iter_mut().zip(&g).zip(&mask) {
                            *gv = *gv + gi * k;
                        }
                    }
                }
                Op::SoftmaxRows { a, .. } => {
                    let a = *a;
                    if head[a].requires_grad {
                        let y = node.values.clone();
                        let ga = ensure_grad(&mut head[a]);
                        for i in 0..rows {
                            let yr = &y[i * cols..(i + 1) * cols];
                            let gr = &g[i * cols..(i + 1) * cols];
                            let s = kernels::dot(yr, gr);
                            let gar = &mut ga[i * cols..(i + 1) * cols];
                            for ((gv, &gi), &yi) in gar.iter_mut().zip(gr).zip(yr) {
                                *gv = *gv + (gi - s) * yi;
                            }
                        }
                    }
                }
                Op::LayerNorm { a, stats } => {
                    let a = *a;
                    let stats = stats.clone();
                    if head[a].requires_grad {
                        let y = node.values.clone();
                        let ga = ensure_grad(&mut head[a]);
                        let inv_n = T::one() / T::from_usize(cols);
                        for i in 0..rows {
                            let yr = &y[i * cols..(i + 1) * cols];
                            let gr = &g[i * cols..(i + 1) * cols];
                            let (_, rstd) = stats[i];
                            let mean_g = gr.iter().copied().sum::<T>() * inv_n;
                            let mean_gy = kernels::dot(gr, yr) * inv_n;
                            let gar = &mut ga[i * cols..(i + 1) * cols];
                            for ((gv, &gi), &yi) in gar.iter_mut().zip(gr).zip(yr) {
                                *gv = *gv + rstd * (gi - mean_g - yi * mean_gy);
                            }
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    if head[table].requires_grad {
                        let gt = ensure_grad(&mut head[table]);
                        for (i, &id) in ids.iter().enumerate() {
                            for j in 0..cols {
                                gt[id * cols + j] = gt[id * cols + j] + g[i * cols + j];
                            }
                        }
                    }
                }
                Op::Slice { a, r0, c0 } => {
                    let (a, r0, c0) = (*a, *r0, *c0);
                    if head[a].requires_grad {
                        let an = head[a].cols;
                        let ga = ensure_grad(&mut head[a]);
                        for i in 0..rows {
                            let base = (r0 + i) * an + c0;
                            for j in 0..cols {
                                ga[base + j] = ga[base + j] + g[i * cols + j];
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let mut c0 = 0;
                    for p in parts {
                        let pn = head[p].cols;
                        if head[p].requires_grad {
                            let gp = ensure_grad(&mut head[p]);
                            for i in 0..rows {
                                for j in 0..pn {
                                    gp[i * pn + j] = gp[i * pn + j] + g[i * cols + c0 + j];
                                }
                            }
                        }
                        c0 += pn;
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut r0 = 0;
                    for p in parts {
                        let pm = head[p].rows;
                        if head[p].requires_grad {
                            let gp = ensure_grad(&mut head[p]);
                            let src = &g[r0 * cols..(r0 + pm) * cols];
                            accumulate(gp, src);
                        }
                        r0 += pm;
                    }
                }
                Op::SumAll { a } => {
                    if head[*a].requires_grad {
                        let gi = g[0];
                        let ga = ensure_grad(&mut head[*a]);
                        for gv in ga.iter_mut() {
                            *gv = *gv + gi;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    n_valid,
                } => {
                    let logits = *logits;
                    if head[logits].requires_grad {
                        let v = head[logits].cols;
                        let scale = g[0] / T::from_usize(*n_valid);
                        let targets = targets.clone();
                        let probs = probs.clone();
                        let gl = ensure_grad(&mut head[logits]);
                        for (i, t) in targets.iter().enumerate() {
                            let Some(t) = t else { continue };
                            let pr = &probs[i * v..(i + 1) * v];
                            let gr = &mut gl[i * v..(i + 1) * v];
                            for (gv, &p) in gr.iter_mut().zip(pr) {
                                *gv = *gv + p * scale;
                            }
                            gr[*t] = gr[*t] - scale;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn ensure_grad<T: Scalar>(node: &mut Node<T>) -> &mut Vec<T> {
    if node.grad.is_none() {
        node.grad = Some(vec![T::zero(); node.rows * node.cols]);
    }
    node.grad.as_mut().unwrap()
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
