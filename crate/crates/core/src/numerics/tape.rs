//! Tape-based reverse-mode differentiation over whole matrices.
//!
//! Every operation appends a node holding its value and the recipe needed
//! to push gradients back to its inputs. A tape is built for one forward
//! pass, consumed by [`Tape::backward`], then dropped; there is no reuse
//! between optimizer steps.
//!
//! Parameters enter the tape by reference ([`Tape::param`]) so building a
//! graph never copies weights. Several sequences of different lengths can
//! share one graph, packed row-wise and described by a [`SeqLayout`];
//! attention and rotary encoding respect segment boundaries.

use super::matrix::{gemm, gemm_strided, Trans};
use super::ops::softmax_in_place;
use super::{Matrix, NumericsError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a packed batch: `(start_row, len)` per sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    segments: Vec<(usize, usize)>,
}

impl SeqLayout {
    pub fn single(len: usize) -> Self {
        Self { segments: vec![(0, len)] }
    }

    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let seg = (start, len);
                start += len;
                seg
            })
            .collect();
        Self { segments }
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn total_rows(&self) -> usize {
        self.segments.last().map_or(0, |&(s, l)| s + l)
    }

    /// Position of every packed row within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = Vec::with_capacity(self.total_rows());
        for &(_, len) in &self.segments {
            pos.extend(0..len);
        }
        pos
    }
}

enum Stored<'p> {
    Borrowed(&'p Matrix),
    Owned(Matrix),
}

impl Stored<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Stored::Borrowed(m) => m,
            Stored::Owned(m) => m,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Rope { x: Var, table: RopeTable },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<(usize, usize)>, probs: Vec<Matrix> },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Matrix, count: usize },
    CosineLoss { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
}

struct Node<'p> {
    value: Stored<'p>,
    op: Op,
    needs_grad: bool,
}

/// Precomputed rotation angles for one packed layout.
struct RopeTable {
    heads: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl RopeTable {
    fn new(positions: &[usize], head_dim: usize, heads: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { heads, cos, sin, half }
    }

    /// Rotates each (2i, 2i+1) pair in every head; `direction` is +1 for the
    /// forward rotation and -1 for its transpose.
    fn apply(&self, m: &Matrix, direction: f64) -> Matrix {
        let mut out = m.clone();
        let d = m.cols();
        let hd = d / self.heads;
        for r in 0..m.rows() {
            let row = out.row_mut(r);
            let cs = &self.cos[r * self.half..(r + 1) * self.half];
            let sn = &self.sin[r * self.half..(r + 1) * self.half];
            for h in 0..self.heads {
                for i in 0..self.half {
                    let a = h * hd + 2 * i;
                    let (x0, x1) = (row[a], row[a + 1]);
                    let s = direction * sn[i];
                    row[a] = x0 * cs[i] - x1 * s;
                    row[a + 1] = x0 * s + x1 * cs[i];
                }
            }
        }
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// A single-use computation graph.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Stored<'p>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.get().is_finite(), "non-finite value produced");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Stored::Owned(value), op, needs)
    }

    /// A trainable leaf borrowed from outside the tape.
    pub fn param(&mut self, m: &'p Matrix) -> Var {
        self.push(Stored::Borrowed(m), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, m: Matrix) -> Var {
        self.push(Stored::Owned(m), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Stored::Owned(m), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, m: &'p Matrix) -> Var {
        self.push(Stored::Borrowed(m), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.get()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.owned(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.owned(out, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.owned(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(NumericsError::dims("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.owned(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.owned(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        self.owned(out, Op::Scale(a, factor), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.owned(out, Op::Gelu(a), &[a])
    }

    /// Row-wise RMS normalisation followed by a learned `1 x c` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, NumericsError> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(NumericsError::dims("rms_norm", xv.shape(), gv.shape()));
        }
        let mut out = xv.clone();
        let cols = xv.cols() as f64;
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let ms = xv.row(r).iter().map(|v| v * v).sum::<f64>() / cols;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (o, g) in out.row_mut(r).iter_mut().zip(gv.data()) {
                *o *= inv * g;
            }
        }
        Ok(self.owned(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Rotary position encoding within each head, positions restarting at
    /// every segment of `layout`.
    pub fn rope(&mut self, x: Var, heads: usize, layout: &SeqLayout, base: f64) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if heads == 0 || xv.cols() % heads != 0 || (xv.cols() / heads) % 2 != 0 || layout.total_rows() != xv.rows() {
            return Err(NumericsError::dims("rope", xv.shape(), (layout.total_rows(), heads)));
        }
        let table = RopeTable::new(&layout.positions(), xv.cols() / heads, heads, base);
        let out = table.apply(xv, 1.0);
        Ok(self.owned(out, Op::Rope { x, table }, &[x]))
    }

    /// Scaled dot-product multi-head attention, computed independently per
    /// segment. With `causal`, row `t` only sees rows `<= t` of its segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &SeqLayout,
        causal: bool,
    ) -> Result<Var, NumericsError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(NumericsError::dims("attention", qv.shape(), kv.shape()));
        }
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || layout.total_rows() != qv.rows() {
            return Err(NumericsError::dims("attention", qv.shape(), (layout.total_rows(), heads)));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(layout.segments().len() * heads);
        for &(start, len) in layout.segments() {
            for h in 0..heads {
                let off = start * d + h * hd;
                let mut p = Matrix::zeros(len, len);
                // S = Q_h K_hᵀ * scale
                gemm_strided(
                    len, hd, len, scale,
                    &qv.data()[off..], d as isize, 1,
                    &kv.data()[off..], 1, d as isize,
                    0.0, p.data_mut(), len as isize, 1,
                );
                for i in 0..len {
                    let row = p.row_mut(i);
                    if causal {
                        row[i + 1..].iter_mut().for_each(|s| *s = f64::NEG_INFINITY);
                    }
                    softmax_in_place(row);
                }
                // O_h = P V_h
                gemm_strided(
                    len, len, hd, 1.0,
                    p.data(), len as isize, 1,
                    &vv.data()[off..], d as isize, 1,
                    0.0, &mut out.data_mut()[off..], d as isize, 1,
                );
                probs.push(p);
            }
        }
        let segments = layout.segments().to_vec();
        Ok(self.owned(out, Op::Attention { q, k, v, heads, segments, probs }, &[q, k, v]))
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(table).gather_rows(ids)?;
        Ok(self.owned(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean negative log-likelihood over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(NumericsError::dims("cross_entropy", lv.shape(), (targets.len(), 1)));
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            if let Some(t) = *t {
                if t >= lv.cols() {
                    return Err(NumericsError::RowOutOfRange { index: t, rows: lv.cols() });
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
            softmax_in_place(probs.row_mut(r));
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.owned(
            Matrix::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            &[logits],
        ))
    }

    /// Mean over rows of `1 - cosine(a_t, b_t)`; zero rows count as cosine 0.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumericsError::dims("cosine_loss", av.shape(), bv.shape()));
        }
        let n = av.rows().max(1) as f64;
        let total: f64 = (0..av.rows()).map(|r| 1.0 - super::cosine(av.row(r), bv.row(r))).sum();
        Ok(self.owned(Matrix::scalar(total / n), Op::CosineLoss { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.owned(Matrix::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / (v.data().len().max(1)) as f64;
        self.owned(Matrix::scalar(s), Op::Mean(a), &[a])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.get().shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], v: Var, contrib: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &contrib),
            slot @ None => *slot = Some(contrib),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm(Trans::No, Trans::Yes, 1.0, g, bv, 0.0, &mut ga);
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(Trans::Yes, Trans::No, 1.0, av, g, 0.0, &mut gb);
                    acc(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm(Trans::No, Trans::No, 1.0, g, bv, 0.0, &mut ga);
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(Trans::Yes, Trans::No, 1.0, g, av, 0.0, &mut gb);
                    acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    acc(grads, *row, gr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(grads, *a, g.hadamard(bv).expect("shape"));
                }
                if self.wants(*b) {
                    acc(grads, *b, g.hadamard(av).expect("shape"));
                }
            }
            Op::Scale(a, f) => acc(grads, *a, g.scale(*f)),
            Op::Gelu(a) => {
                let av = self.value(*a);
                let mut ga = g.clone();
                for (o, &x) in ga.data_mut().iter_mut().zip(av.data()) {
                    *o *= gelu_grad(x);
                }
                acc(grads, *a, ga);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let cols = xv.cols();
                let mut gx = Matrix::zeros(xv.rows(), cols);
                let mut gg = Matrix::zeros(1, cols);
                for r in 0..xv.rows() {
                    let (xr, dr) = (xv.row(r), g.row(r));
                    let inv = inv_rms[r];
                    let mut dot = 0.0;
                    for j in 0..cols {
                        dot += gv.data()[j] * dr[j] * xr[j];
                        gg.data_mut()[j] += dr[j] * xr[j] * inv;
                    }
                    let coef = inv * inv * inv * dot / cols as f64;
                    let out = gx.row_mut(r);
                    for j in 0..cols {
                        out[j] = inv * gv.data()[j] * dr[j] - coef * xr[j];
                    }
                }
                if self.wants(*x) {
                    acc(grads, *x, gx);
                }
                if self.wants(*gain) {
                    acc(grads, *gain, gg);
                }
            }
            Op::Rope { x, table } => acc(grads, *x, table.apply(g, -1.0)),
            Op::Attention { q, k, v, heads, segments, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut gq = Matrix::zeros(qv.rows(), d);
                let mut gk = Matrix::zeros(qv.rows(), d);
                let mut gv = Matrix::zeros(qv.rows(), d);
                let mut pi = 0;
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let off = start * d + h * hd;
                        // dV_h = Pᵀ dO_h
                        gemm_strided(
                            len, len, hd, 1.0,
                            p.data(), 1, len as isize,
                            &g.data()[off..], d as isize, 1,
                            0.0, &mut gv.data_mut()[off..], d as isize, 1,
                        );
                        // dP = dO_h V_hᵀ
                        let mut dp = Matrix::zeros(len, len);
                        gemm_strided(
                            len, hd, len, 1.0,
                            &g.data()[off..], d as isize, 1,
                            &vv.data()[off..], 1, d as isize,
                            0.0, dp.data_mut(), len as isize, 1,
                        );
                        // dS = P ⊙ (dP - rowdot) * scale
                        for r in 0..len {
                            let pr = p.row(r);
                            let dr = dp.row_mut(r);
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (dv, pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        // dQ_h = dS K_h ; dK_h = dSᵀ Q_h
                        gemm_strided(
                            len, len, hd, 1.0,
                            dp.data(), len as isize, 1,
                            &kv.data()[off..], d as isize, 1,
                            0.0, &mut gq.data_mut()[off..], d as isize, 1,
                        );
                        gemm_strided(
                            len, len, hd, 1.0,
                            dp.data(), 1, len as isize,
                            &qv.data()[off..], d as isize, 1,
                            0.0, &mut gk.data_mut()[off..], d as isize, 1,
                        );
                    }
                }
                if self.wants(*q) {
                    acc(grads, *q, gq);
                }
                if self.wants(*k) {
                    acc(grads, *k, gk);
                }
                if self.wants(*v) {
                    acc(grads, *v, gv);
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *table, gt);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let scale = if *count == 0 { 0.0 } else { g.item() / *count as f64 };
                let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let out = gl.row_mut(r);
                        for (o, p) in out.iter_mut().zip(probs.row(r)) {
                            *o = p * scale;
                        }
                        out[t] -= scale;
                    }
                }
                acc(grads, *logits, gl);
            }
            Op::CosineLoss { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.rows().max(1) as f64;
                let s = g.item() / n;
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for r in 0..av.rows() {
                    let (x, y) = (av.row(r), bv.row(r));
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nx == 0.0 || ny == 0.0 {
                        continue;
                    }
                    let c = super::cosine(x, y);
                    // d(1 - cos)/dx = -(y/(|x||y|) - cos x/|x|²)
                    let gx = ga.row_mut(r);
                    for j in 0..x.len() {
                        gx[j] = -s * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                    }
                    let gy = gb.row_mut(r);
                    for j in 0..y.len() {
                        gy[j] = -s * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                if self.wants(*a) {
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    acc(grads, *b, gb);
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Matrix::filled(r, c, g.item() / (r * c).max(1) as f64));
            }
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` is not on a path to the loss.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}
