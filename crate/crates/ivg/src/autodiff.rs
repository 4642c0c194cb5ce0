//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every tensor in the model is a 2-D row-major matrix (vectors are `1×d`).
//! A [`Graph`] is built per forward pass; values are computed eagerly at node
//! construction and `backward` walks the tape in reverse. All arithmetic is
//! 64-bit and sequential, so results are bit-reproducible for identical
//! inputs.

use ndarray::Array2;

pub type NodeId = usize;

/// Tensor type used throughout the model.
pub type Mat = Array2<f64>;

enum Op {
    /// Leaf without gradient (inputs, constants).
    Input,
    /// Leaf whose gradient is accumulated into a parameter slot.
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `(T×d, 1×d)`: adds the row vector to every row.
    AddRowBroadcast(NodeId, NodeId),
    /// `(T×d, 1×d)`: multiplies every row elementwise by the row vector.
    MulRowBroadcast(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    /// `ln(max(x, eps))`; clamped cells get zero gradient.
    LogClamped(NodeId, f64),
    /// Row-wise softmax. `mask[j] = false` forces column `j` to probability 0.
    RowSoftmax(NodeId, Option<Vec<bool>>),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// `x: T×d` convolved per channel with `w: k×d`, zero "same" padding.
    DepthwiseConv1d { x: NodeId, w: NodeId },
    ConcatCols(Vec<NodeId>),
    /// Copy of row `i` as a `1×d` matrix.
    RowSlice(NodeId, usize),
    /// Column-wise max over a row subset; `argmax` rows cached at forward.
    MaxRows(NodeId),
    /// Arithmetic mean over the listed rows, `1×d`.
    MeanRows(NodeId, Vec<usize>),
    SumAll(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
    /// Per-column argmax rows for `MaxRows`, recorded during the forward pass.
    argmax: Option<Vec<usize>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    log_clamp_events: usize,
}

/// Result of a backward pass.
pub struct Gradients {
    node_grads: Vec<Option<Mat>>,
    by_slot: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient w.r.t. an arbitrary node (zero matrix if it never received one).
    pub fn node(&self, id: NodeId) -> Option<&Mat> {
        self.node_grads[id].as_ref()
    }

    /// Gradient accumulated into a parameter slot.
    pub fn slot(&self, slot: usize) -> Option<&Mat> {
        self.by_slot.get(slot).and_then(|g| g.as_ref())
    }

    pub fn into_slots(self) -> Vec<Option<Mat>> {
        self.by_slot
    }
}

fn softplus(x: f64) -> f64 {
    // max(x,0) + ln(1 + e^{-|x|}) avoids overflow for large |x|
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

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Number of `ln` clamps hit so far (probability mass at exact zero).
    pub fn log_clamp_events(&self) -> usize {
        self.log_clamp_events
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad, argmax: None });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Leaf that participates in differentiation but has no parameter slot
    /// (used for gradient checks against raw inputs).
    pub fn diff_input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Param(usize::MAX), true)
    }

    pub fn param(&mut self, slot: usize, value: Mat) -> NodeId {
        self.push(value, Op::Param(slot), true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, _) = self.nodes[row].value.dim();
        assert_eq!(r, 1, "broadcast operand must be 1×d");
        assert_eq!(self.nodes[a].value.ncols(), self.nodes[row].value.ncols());
        let v = &self.nodes[a].value + &self.nodes[row].value;
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRowBroadcast(a, row), ng)
    }

    pub fn mul_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, _) = self.nodes[row].value.dim();
        assert_eq!(r, 1, "broadcast operand must be 1×d");
        assert_eq!(self.nodes[a].value.ncols(), self.nodes[row].value.ncols());
        let v = &self.nodes[a].value * &self.nodes[row].value;
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::MulRowBroadcast(a, row), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.ncols(), self.nodes[b].value.nrows());
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(softplus);
        let ng = self.needs(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn log_clamped(&mut self, a: NodeId, eps: f64) -> NodeId {
        let mut clamped = 0usize;
        let v = self.nodes[a].value.mapv(|x| {
            if x < eps {
                clamped += 1;
                eps.ln()
            } else {
                x.ln()
            }
        });
        self.log_clamp_events += clamped;
        let ng = self.needs(a);
        self.push(v, Op::LogClamped(a, eps), ng)
    }

    /// Row softmax; `mask` (over columns) excludes positions from the
    /// distribution. Every row must keep at least one unmasked column.
    pub fn row_softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> NodeId {
        let x = &self.nodes[a].value;
        if let Some(m) = mask {
            assert_eq!(m.len(), x.ncols(), "mask length must equal column count");
            assert!(m.iter().any(|&b| b), "softmax over fully masked row");
        }
        let mut v = Mat::zeros(x.dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (j, &xv) in row.iter().enumerate() {
                if mask.is_none_or(|m| m[j]) && xv > max {
                    max = xv;
                }
            }
            let mut denom = 0.0;
            for (j, &xv) in row.iter().enumerate() {
                if mask.is_none_or(|m| m[j]) {
                    let e = (xv - max).exp();
                    v[[i, j]] = e;
                    denom += e;
                }
            }
            for j in 0..x.ncols() {
                v[[i, j]] /= denom;
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::RowSoftmax(a, mask.map(|m| m.to_vec())), ng)
    }

    /// Row-wise layer normalization with learnable `gamma`, `beta` (`1×d`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        assert_eq!(g.dim(), (1, xv.ncols()));
        assert_eq!(b.dim(), (1, xv.ncols()));
        let d = xv.ncols() as f64;
        let mut v = Mat::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..xv.ncols() {
                v[[i, j]] = (row[j] - mean) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    /// Depthwise 1-D convolution along rows (time) with "same" zero padding.
    /// `w` has shape `k×d` with odd `k`.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let (t, d) = xv.dim();
        let (k, wd) = wv.dim();
        assert_eq!(d, wd, "channel count mismatch");
        assert_eq!(k % 2, 1, "kernel size must be odd for same padding");
        let off = k / 2;
        let mut v = Mat::zeros((t, d));
        for ti in 0..t {
            for j in 0..k {
                let src = ti as isize + j as isize - off as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    v[[ti, c]] += wv[[j, c]] * xv[[src, c]];
                }
            }
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(v, Op::DepthwiseConv1d { x, w }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.nrows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut v = Mat::zeros((rows, total));
        let mut col = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            assert_eq!(pv.nrows(), rows);
            v.slice_mut(ndarray::s![.., col..col + pv.ncols()]).assign(pv);
            col += pv.ncols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn row_slice(&mut self, a: NodeId, row: usize) -> NodeId {
        let xv = &self.nodes[a].value;
        assert!(row < xv.nrows());
        let v = xv.row(row).to_owned().insert_axis(ndarray::Axis(0));
        let ng = self.needs(a);
        self.push(v, Op::RowSlice(a, row), ng)
    }

    /// Column-wise max over the given rows (first max wins on ties).
    pub fn max_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let xv = &self.nodes[a].value;
        assert!(!rows.is_empty(), "max over empty row set");
        let d = xv.ncols();
        let mut v = Mat::zeros((1, d));
        let mut arg = vec![rows[0]; d];
        for j in 0..d {
            let mut best = f64::NEG_INFINITY;
            for &r in rows {
                if xv[[r, j]] > best {
                    best = xv[[r, j]];
                    arg[j] = r;
                }
            }
            v[[0, j]] = best;
        }
        let ng = self.needs(a);
        let id = self.push(v, Op::MaxRows(a), ng);
        self.nodes[id].argmax = Some(arg);
        id
    }

    pub fn mean_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let xv = &self.nodes[a].value;
        assert!(!rows.is_empty(), "mean over empty row set");
        let d = xv.ncols();
        let mut v = Mat::zeros((1, d));
        for &r in rows {
            for j in 0..d {
                v[[0, j]] += xv[[r, j]];
            }
        }
        v.mapv_inplace(|x| x / rows.len() as f64);
        let ng = self.needs(a);
        self.push(v, Op::MeanRows(a, rows.to_vec()), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        let ng = self.needs(a);
        self.push(Mat::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    /// Backpropagate from a scalar `root`, accumulating parameter gradients
    /// into `n_slots` slots.
    pub fn backward(&self, root: NodeId, n_slots: usize) -> Gradients {
        assert_eq!(self.nodes[root].value.dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root] = Some(Mat::from_elem((1, 1), 1.0));

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut by_slot: Vec<Option<Mat>> = (0..n_slots).map(|_| None).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(slot) = node.op {
                if slot != usize::MAX && slot < n_slots {
                    if let Some(g) = &grads[id] {
                        by_slot[slot] = Some(match by_slot[slot].take() {
                            Some(acc) => acc + g,
                            None => g.clone(),
                        });
                    }
                }
            }
        }
        Gradients { node_grads: grads, by_slot }
    }

    fn add_grad(&self, grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(&self, id: NodeId, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[id].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.add_grad(grads, *a, g * &self.nodes[*b].value);
                self.add_grad(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Scale(a, c) => {
                self.add_grad(grads, *a, g.mapv(|x| x * c));
            }
            Op::AddRowBroadcast(a, row) => {
                self.add_grad(grads, *a, g.clone());
                let col_sum = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                self.add_grad(grads, *row, col_sum);
            }
            Op::MulRowBroadcast(a, row) => {
                self.add_grad(grads, *a, g * &self.nodes[*row].value);
                let prod = g * &self.nodes[*a].value;
                let col_sum = prod.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                self.add_grad(grads, *row, col_sum);
            }
            Op::MatMul(a, b) => {
                let da = g.dot(&self.nodes[*b].value.t());
                let db = self.nodes[*a].value.t().dot(g);
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::Transpose(a) => {
                self.add_grad(grads, *a, g.t().to_owned());
            }
            Op::Relu(a) => {
                let da = g * &self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.add_grad(grads, *a, da);
            }
            Op::Softplus(a) => {
                let da = g * &self.nodes[*a].value.mapv(sigmoid);
                self.add_grad(grads, *a, da);
            }
            Op::LogClamped(a, eps) => {
                let da = g * &self.nodes[*a].value.mapv(|x| if x < *eps { 0.0 } else { 1.0 / x });
                self.add_grad(grads, *a, da);
            }
            Op::RowSoftmax(a, mask) => {
                let y = &self.nodes[id].value;
                let mut da = Mat::zeros(y.dim());
                for i in 0..y.nrows() {
                    let mut dot = 0.0;
                    for j in 0..y.ncols() {
                        dot += g[[i, j]] * y[[i, j]];
                    }
                    for j in 0..y.ncols() {
                        if mask.as_ref().is_none_or(|m| m[j]) {
                            da[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let d = xv.ncols() as f64;
                let mut dx = Mat::zeros(xv.dim());
                let mut dgamma = Mat::zeros((1, xv.ncols()));
                let mut dbeta = Mat::zeros((1, xv.ncols()));
                for i in 0..xv.nrows() {
                    let row = xv.row(i);
                    let mean = row.sum() / d;
                    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    // hat = normalized row; dh = upstream through gamma
                    let mut dh_mean = 0.0;
                    let mut dh_hat_mean = 0.0;
                    let mut hat = vec![0.0; xv.ncols()];
                    let mut dh = vec![0.0; xv.ncols()];
                    for j in 0..xv.ncols() {
                        hat[j] = (row[j] - mean) * inv;
                        dh[j] = g[[i, j]] * gv[[0, j]];
                        dgamma[[0, j]] += g[[i, j]] * hat[j];
                        dbeta[[0, j]] += g[[i, j]];
                        dh_mean += dh[j];
                        dh_hat_mean += dh[j] * hat[j];
                    }
                    dh_mean /= d;
                    dh_hat_mean /= d;
                    for j in 0..xv.ncols() {
                        dx[[i, j]] = inv * (dh[j] - dh_mean - hat[j] * dh_hat_mean);
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *gamma, dgamma);
                self.add_grad(grads, *beta, dbeta);
            }
            Op::DepthwiseConv1d { x, w } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (t, d) = xv.dim();
                let k = wv.nrows();
                let off = k / 2;
                let mut dx = Mat::zeros((t, d));
                let mut dw = Mat::zeros((k, d));
                for ti in 0..t {
                    for j in 0..k {
                        let src = ti as isize + j as isize - off as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            dw[[j, c]] += g[[ti, c]] * xv[[src, c]];
                            dx[[src, c]] += g[[ti, c]] * wv[[j, c]];
                        }
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *w, dw);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p].value.ncols();
                    let gp = g.slice(ndarray::s![.., col..col + w]).to_owned();
                    self.add_grad(grads, p, gp);
                    col += w;
                }
            }
            Op::RowSlice(a, row) => {
                let mut da = Mat::zeros(self.nodes[*a].value.dim());
                for j in 0..g.ncols() {
                    da[[*row, j]] = g[[0, j]];
                }
                self.add_grad(grads, *a, da);
            }
            Op::MaxRows(a) => {
                let arg = self.nodes[id].argmax.as_ref().expect("argmax cached at forward");
                let mut da = Mat::zeros(self.nodes[*a].value.dim());
                for (j, &r) in arg.iter().enumerate() {
                    da[[r, j]] = g[[0, j]];
                }
                self.add_grad(grads, *a, da);
            }
            Op::MeanRows(a, rows) => {
                let mut da = Mat::zeros(self.nodes[*a].value.dim());
                let scale = 1.0 / rows.len() as f64;
                for &r in rows {
                    for j in 0..g.ncols() {
                        da[[r, j]] += g[[0, j]] * scale;
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::SumAll(a) => {
                let da = Mat::from_elem(self.nodes[*a].value.dim(), g[[0, 0]]);
                self.add_grad(grads, *a, da);
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Central-difference check of the gradient of `build` w.r.t. each input
    /// matrix. `build` must construct a graph ending in a scalar node.
    pub fn check_inputs<F>(inputs: &[Mat], build: F, step: f64, tol: f64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| g.diff_input(m.clone())).collect();
        let root = build(&mut g, &ids);
        let grads = g.backward(root, 0);

        for (which, m) in inputs.iter().enumerate() {
            let analytic = grads
                .node(ids[which])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(m.dim()));
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    let eval = |delta: f64| {
                        let mut g2 = Graph::new();
                        let ids2: Vec<NodeId> = inputs
                            .iter()
                            .enumerate()
                            .map(|(k, mm)| {
                                let mut v = mm.clone();
                                if k == which {
                                    v[[r, c]] += delta;
                                }
                                g2.diff_input(v)
                            })
                            .collect();
                        let root2 = build(&mut g2, &ids2);
                        g2.scalar(root2)
                    };
                    let fd = (eval(step) - eval(-step)) / (2.0 * step);
                    let a = analytic[[r, c]];
                    let denom = (a.abs() + fd.abs()).max(1e-4);
                    let rel = (a - fd).abs() / denom;
                    assert!(
                        rel < tol,
                        "input {which} entry ({r},{c}): analytic {a:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_inputs;
    use super::*;
    use ndarray::array;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Mat {
        // small deterministic pseudo-random fill, no rand dependency needed here
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        Mat::from_shape_fn((rows, cols), |_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 2000) as f64 / 1000.0 - 1.0
        })
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let y = g.row_softmax(x, None);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let v = g.value(y);
        assert!((v[[0, 0]] - 0.09003057317038046).abs() < 1e-12);
        assert!((v[[0, 2]] - 0.6652409557748219).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut g = Graph::new();
        let x = g.input(array![[5.0, 1.0, 1.0]]);
        let y = g.row_softmax(x, Some(&[false, true, true]));
        let v = g.value(y);
        assert_eq!(v[[0, 0]], 0.0);
        assert!((v[[0, 1]] - 0.5).abs() < 1e-12);
        assert!((v[[0, 2]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn max_rows_takes_columnwise_max() {
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 5.0], [3.0, 2.0]]);
        let y = g.max_rows(x, &[0, 1]);
        assert_eq!(g.value(y), &array![[3.0, 5.0]]);
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let a = seeded(3, 4, 1);
        let b = seeded(3, 4, 2);
        check_inputs(
            &[a, b],
            |g, ids| {
                let m = g.mul(ids[0], ids[1]);
                let s = g.sub(m, ids[1]);
                let r = g.relu(s);
                g.sum_all(r)
            },
            1e-5,
            1e-6,
        );

        let a = seeded(2, 3, 3);
        let b = seeded(3, 4, 4);
        check_inputs(
            &[a, b],
            |g, ids| {
                let m = g.matmul(ids[0], ids[1]);
                let t = g.transpose(m);
                g.sum_all(t)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn broadcast_and_softplus_grads() {
        let a = seeded(4, 3, 5);
        let row = seeded(1, 3, 6);
        check_inputs(
            &[a, row],
            |g, ids| {
                let x = g.add_row_broadcast(ids[0], ids[1]);
                let y = g.mul_row_broadcast(x, ids[1]);
                let z = g.softplus(y);
                g.sum_all(z)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn softmax_grad() {
        let a = seeded(3, 5, 7);
        check_inputs(
            &[a],
            |g, ids| {
                let y = g.row_softmax(ids[0], Some(&[true, true, false, true, true]));
                let w = g.input(seeded(3, 5, 100));
                let p = g.mul(y, w);
                g.sum_all(p)
            },
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_grad() {
        let x = seeded(3, 6, 8);
        let gamma = seeded(1, 6, 9);
        let beta = seeded(1, 6, 10);
        check_inputs(
            &[x, gamma, beta],
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-6);
                let w = g.input(seeded(3, 6, 101));
                let p = g.mul(y, w);
                g.sum_all(p)
            },
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn conv_grad() {
        let x = seeded(6, 4, 11);
        let w = seeded(5, 4, 12);
        check_inputs(
            &[x, w],
            |g, ids| {
                let y = g.depthwise_conv1d(ids[0], ids[1]);
                g.sum_all(y)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn slice_concat_reduce_grads() {
        let x = seeded(5, 3, 13);
        let y = seeded(5, 2, 14);
        check_inputs(
            &[x, y],
            |g, ids| {
                let c = g.concat_cols(&[ids[0], ids[1]]);
                let r = g.row_slice(c, 2);
                let m = g.mean_rows(c, &[0, 3, 4]);
                let mx = g.max_rows(c, &[1, 2]);
                let s1 = g.sum_all(r);
                let s2 = g.sum_all(m);
                let s3 = g.sum_all(mx);
                let t = g.add(s1, s2);
                g.add(t, s3)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn log_clamp_counts_events_and_zeroes_grad() {
        let mut g = Graph::new();
        let x = g.diff_input(array![[0.5, 0.0]]);
        let y = g.log_clamped(x, 1e-12);
        assert_eq!(g.log_clamp_events(), 1);
        let s = g.sum_all(y);
        let grads = g.backward(s, 0);
        let gx = grads.node(x).unwrap();
        assert!((gx[[0, 0]] - 2.0).abs() < 1e-12);
        assert_eq!(gx[[0, 1]], 0.0);
    }

    #[test]
    fn grad_accumulates_over_shared_nodes() {
        let mut g = Graph::new();
        let x = g.diff_input(array![[2.0]]);
        let y = g.mul(x, x); // x^2, dy/dx = 2x = 4
        let s = g.sum_all(y);
        let grads = g.backward(s, 0);
        assert!((grads.node(x).unwrap()[[0, 0]] - 4.0).abs() < 1e-12);
    }
}
